from pathlib import Path

import numpy as np
import pytest

from nextloc.backbone import BackboneConfig, ModelConfig, build_model
from nextloc.features import FeatureConfig, encode_pairs
from nextloc.harness.synth import SynthCitySpec, synth_generate

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def small_city():
    return synth_generate(SynthCitySpec(n_agents=24, n_days=14, M=8, N=3, name="small"))


@pytest.fixture(scope="session")
def toybench():
    return synth_generate()


def small_model_config(**overrides) -> ModelConfig:
    base = dict(
        features=FeatureConfig(d_model=16, d_t=4, d_d=4, d_dur=2, d_xy=4),
        backbone=BackboneConfig(layers=2, heads=2, d_model=16, d_ff=32),
        M=8,
        N=3,
        prompt_text="predict the next place",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def small_model(small_city):
    return build_model(small_model_config(), len(small_city.categories), seed=0, categories=small_city.categories)


@pytest.fixture
def small_batch(small_city):
    return encode_pairs(small_city, small_city.split["train"][:6])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance bookkeeping -------------------------------------------------------
# Tests marked ``acceptance(n, title)`` get one PASS/FAIL line each in the
# terminal summary; details come from ``record_property("detail", ...)``.

ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
        detail = f"{detail}; {msg}" if detail else msg
    ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, detail.splitlines()[0] if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{verdict} criterion {number:2d} {title}: {detail}")
