from dataclasses import replace

import numpy as np
import pytest

from nextloc.backbone import BackboneConfig, Schedule
from nextloc.features import FeatureConfig
from nextloc.harness.config import ExperimentConfig
from nextloc.harness.experiments import (
    evaluate_split,
    load_datasets,
    location_table_digest,
    marginal_topk,
    rank_locations,
    read_dataset,
    run_ablation_suite,
    run_supervised,
    run_zero_shot,
    summarize_suite,
    write_dataset,
)
from nextloc.harness.synth import SynthCitySpec, clone_city
from nextloc.ingest import write_pings, RawPing


def small_cfg(**kw) -> ExperimentConfig:
    cfg = ExperimentConfig(
        synth=SynthCitySpec(n_agents=24, n_days=14, M=8, N=3, name="small"),
        M=8,
        N=3,
        features=FeatureConfig(d_model=16, d_t=4, d_d=4, d_dur=2, d_xy=4),
        backbone=BackboneConfig(layers=1, heads=2, d_model=16, d_ff=32),
        schedule=Schedule(lr=3e-3, batch_size=32, max_steps=15, eval_every=5),
        prompt="predict the next place",
    )
    return replace(cfg, **kw)


@pytest.fixture(scope="module")
def city():
    return load_datasets(small_cfg())[0]


@pytest.fixture(scope="module")
def trained(city):
    return run_supervised(small_cfg(), [city])


def test_rerun_is_byte_identical(city, trained):
    again = run_supervised(small_cfg(), [city])
    assert again.to_text() == trained.to_text()
    assert again.to_table() == trained.to_table()


def test_report_contents(city, trained):
    assert trained.mode == "supervised" and trained.retrieval_space == "mercator"
    assert set(trained.splits) == {"train", "val", "test"}
    assert trained.splits["test"].n == len(city.split["test"])
    assert trained.steps == 15 and trained.stopped == "max_steps"
    assert trained.model_digest == trained.artifacts["state"].params_digest()


def test_history_only_sequence_length(city):
    cfg = small_cfg().with_ablation("history_only")
    mc = cfg.model_config()
    assert mc.seq_len == len(mc.prompt_tokens) + 8
    assert small_cfg().model_config().seq_len == len(mc.prompt_tokens) + 11


def test_dataset_directory_roundtrip(tmp_path, city):
    write_dataset(tmp_path, city)
    back = read_dataset(tmp_path, small_cfg())
    assert back.name == city.name and back.virtual
    assert location_table_digest(back) == location_table_digest(city)
    assert [(p.user_id, p.start, p.target) for p in back.pairs] == [(p.user_id, p.start, p.target) for p in city.pairs]
    assert all(np.array_equal(back.split[k], city.split[k]) for k in city.split)
    assert back.norm_stats == city.norm_stats
    for a, b in zip(back.locations, city.locations):
        assert np.array_equal(a.poi_profile, b.poi_profile)


def test_marginal_baseline(city):
    top = marginal_topk(city, 5)
    counts = {}
    for i in city.split["train"]:
        counts[city.pairs[i].target] = counts.get(city.pairs[i].target, 0) + 1
    assert counts[top[0]] == max(counts.values())
    assert len(top) == 5


def test_zero_shot_keeps_weights_and_is_equivariant(city, trained, rng):
    state = trained.artifacts["state"]
    digest = state.params_digest()
    perm = rng.permutation(len(city.locations))
    clone = clone_city(city, scale=(3.7, 0.4), shift=(1e6, -5e5), id_permutation=perm)
    a = run_zero_shot(state, city, small_cfg())
    b = run_zero_shot(state, clone, small_cfg())
    assert state.params_digest() == digest
    assert a.retrieval_space == "normalized"
    for split in a.splits:
        assert a.splits[split].hits == b.splits[split].hits
    ranked_a, _, _ = rank_locations(state, city, city.split["test"], 10, "normalized", a_stats := city.norm_stats)
    ranked_b, _, _ = rank_locations(state, clone, clone.split["test"], 10, "normalized", clone.norm_stats, state.dur_bounds)
    assert [[int(perm[i]) for i in row] for row in ranked_a] == ranked_b
    assert a_stats is city.norm_stats


def test_mercator_retrieval_is_not_stretch_invariant(city, trained):
    # an anisotropic stretch reorders Euclidean neighbours in meters, which is
    # why zero-shot retrieval runs in normalized coordinates
    state = trained.artifacts["state"]
    clone = clone_city(city, scale=(3.7, 0.4))
    idx = np.arange(len(city.pairs))
    ranked_a, _, _ = rank_locations(state, city, idx, 10, "mercator")
    ranked_b, _, _ = rank_locations(state, clone, idx, 10, "mercator", clone.norm_stats, state.dur_bounds)
    assert ranked_a != ranked_b


def test_evaluate_split_all_and_empty(city, trained):
    state = trained.artifacts["state"]
    m = evaluate_split(state, city, "all", (1, 5))
    assert m.n == len(city.pairs) and m.hits[1] <= m.hits[5]
    empty = replace(city, split={**city.split, "val": np.zeros(0, dtype=np.int64)})
    with pytest.raises(ValueError):
        evaluate_split(state, empty, "val")


def test_joint_training(city):
    other = clone_city(city, scale=(2.0, 2.0), name="other")
    rep = run_supervised(small_cfg(), [city, other])
    assert rep.mode == "joint" and "other/test" in rep.splits and "small/train" in rep.splits


def test_suite_shape(city):
    suite = run_ablation_suite(small_cfg(schedule=Schedule(lr=3e-3, max_steps=2)), seeds=(0, 1), variants=("base", "no_time"), datasets=[city])
    assert set(suite) == {"base", "no_time"} and all(len(v) == 2 for v in suite.values())
    assert suite["no_time"][0].notes["ablations"] == "no_time"
    summary = summarize_suite(suite)
    assert set(summary) == {"base", "no_time"}


def test_preprocess_from_pings(tmp_path):
    from nextloc.harness.experiments import preprocess_to_dataset

    rng = np.random.default_rng(0)
    places = [(108.94 + 0.01 * i, 34.26 + 0.007 * (i % 3)) for i in range(6)]
    pings, t = [], 1_704_096_000.0
    for u in range(3):
        t = 1_704_096_000.0 + u
        for visit in range(40):
            lon, lat = places[int(rng.integers(6))]
            for _ in range(int(rng.integers(5, 10))):
                pings.append(RawPing(f"u{u}", t, lon + rng.normal(0, 1e-5), lat + rng.normal(0, 1e-5)))
                t += 300
            t += 3600 * 2
    write_pings(tmp_path / "p.csv", pings)
    cfg = small_cfg(preprocess={**small_cfg().preprocess, "pings": str(tmp_path / "p.csv"), "name": "real"})
    ds, rejected = preprocess_to_dataset(cfg)
    assert not ds.virtual and ds.name == "real"
    assert len(ds.locations) <= 6 and len(ds.pairs) > 0
