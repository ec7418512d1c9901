from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from nextloc.harness.synth import EPOCH, HOME, WORK, SynthCitySpec, _simulate_agent, clone_city, synth_generate, transition_kernel
from nextloc.ingest import write_visits


def test_noise_free_two_place_agent_is_periodic():
    # two places only; a whole city that small has zero variance on one axis
    spec = SynthCitySpec(n_days=21, schedule_noise=0.0)
    visits, states, _ = _simulate_agent(np.random.default_rng(0), spec, 0, 1, [], 2)
    ids = [v.location_id for v in visits]
    # the closing home event has no successor, hence no duration and no record
    assert ids == [0, 1] * 15
    for v in visits[1:]:
        offset = (v.arrive_ts - EPOCH) % 86400
        assert offset == (8.5 * 3600 if v.location_id == 1 else 18 * 3600)
    assert states[1::2] == [WORK] * 15


def test_same_seed_same_city(tmp_path):
    spec = SynthCitySpec(n_agents=5, n_days=10, M=6, N=2)
    a, b = synth_generate(spec), synth_generate(spec)
    write_visits(tmp_path / "a.csv", a.visits)
    write_visits(tmp_path / "b.csv", b.visits)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = synth_generate(SynthCitySpec(n_agents=5, n_days=10, M=6, N=2, seed=8))
    assert [p.target for p in c.pairs] != [p.target for p in a.pairs]


@pytest.mark.slow
def test_kernel_draw_frequencies():
    spec = SynthCitySpec(n_agents=100, n_days=140, M=6, N=2, schedule_noise=0.2)
    ds = synth_generate(spec)
    groups = {}
    for user, log in ds.meta["draws"].items():
        has_leisure = bool(ds.meta["places"][user][2])
        for state, day_type, slot, nxt in log:
            groups.setdefault((state, day_type, slot, has_leisure), Counter())[nxt] += 1
    checked = 0
    for (state, day_type, slot, has_leisure), counts in groups.items():
        n = sum(counts.values())
        if n < 2000:
            continue
        probs = {k: v for k, v in transition_kernel(state, day_type, slot, spec, has_leisure).items() if v > 0}
        assert set(counts) <= set(probs)
        keys = sorted(probs, key=str)
        observed = [counts.get(k, 0) for k in keys]
        expected = [n * probs[k] for k in keys]
        assert chisquare(observed, expected).pvalue > 1e-3, (state, day_type, slot)
        checked += 1
    assert checked >= 2


def test_kernel_rows_sum_to_one():
    spec = SynthCitySpec()
    for state in (HOME, WORK, "leisure", "explore"):
        for day_type in ("weekday", "weekend"):
            for slot in ("morning", "evening"):
                for has in (True, False):
                    assert sum(transition_kernel(state, day_type, slot, spec, has).values()) == pytest.approx(1.0)


def test_clone_identity(small_city):
    clone = clone_city(small_city)
    assert np.array_equal(clone.centers, small_city.centers)
    assert [p.target for p in clone.pairs] == [p.target for p in small_city.pairs]
    assert clone.norm_stats == small_city.norm_stats


def test_clone_scale_doubles_distances(small_city):
    clone = clone_city(small_city, scale=(2.0, 2.0))
    d0 = np.hypot(*(small_city.centers[1:] - small_city.centers[0]).T)
    d1 = np.hypot(*(clone.centers[1:] - clone.centers[0]).T)
    assert np.allclose(d1, 2 * d0)


def test_clone_normalized_coordinates_match(small_city, rng):
    perm = rng.permutation(len(small_city.locations))
    clone = clone_city(small_city, scale=(3.7, 0.4), shift=(1e6, -5e5), id_permutation=perm)
    a = (small_city.centers - small_city.norm_stats.mean) / small_city.norm_stats.std
    by_new_id = {loc.id: loc.center for loc in clone.locations}
    b = np.array([by_new_id[perm[loc.id]] for loc in small_city.locations])
    b = (b - clone.norm_stats.mean) / clone.norm_stats.std
    assert np.allclose(a, b, atol=1e-9)
    assert [perm[p.target] for p in small_city.pairs] == [p.target for p in clone.pairs]


def test_clone_rejects_bad_input(small_city):
    with pytest.raises(ValueError):
        clone_city(small_city, scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        clone_city(small_city, id_permutation={0: 1, 1: 1})
