import numpy as np
import pytest

from nextloc.autodiff import Tensor
from nextloc.backbone import build_model
from nextloc.features import (
    FeatureConfig,
    compose_final,
    embed_records,
    encode_pairs,
    merge_encoded,
    project_content,
    record_segments,
    scale_duration,
)
from nextloc.geo import NormStats
from nextloc.ingest import VisitRecord

from conftest import small_model_config


def _state(**feat):
    fc = FeatureConfig(d_model=16, d_t=4, d_d=4, d_dur=2, d_xy=4, **feat)
    return build_model(small_model_config(features=fc), 3, seed=1)


def test_concat_width_per_ablation():
    assert FeatureConfig().concat_width == 16 + 8 + 8 + 4
    assert FeatureConfig(use_time=False).concat_width == 16 + 4
    assert FeatureConfig(use_duration=False, poi_mode="linear").concat_width == 16 + 8 + 8 + 8
    with pytest.raises(ValueError):
        FeatureConfig(poi_mode="bert")


def test_scale_duration_clips():
    assert scale_duration([10, 20, 30, 99], (10, 30)).tolist() == [0.0, 0.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        scale_duration([1], (5, 5))


def test_segment_order_and_values():
    state = _state()
    P = state.tensors()
    out = record_segments(P, state.config.features, np.array([[0.5, -1.0]]), np.array([3]), np.array([2]), np.array([0.25])).data[0]
    p = state.params
    xy = np.array([0.5, -1.0]) @ p["feat.xy.w"] + p["feat.xy.b"]
    assert np.allclose(out[:4], xy, atol=1e-6)
    assert np.allclose(out[4:8], p["feat.time_table"][3])
    assert np.allclose(out[8:12], p["feat.day_table"][2])
    assert np.allclose(out[12:], 0.25 * p["feat.dur.w"][0] + p["feat.dur.b"], atol=1e-6)


def test_segments_are_local():
    state = _state()
    P, fc = state.tensors(), state.config.features
    base = record_segments(P, fc, np.zeros((1, 2)), np.array([3]), np.array([2]), np.array([0.5])).data[0]
    moved = record_segments(P, fc, np.zeros((1, 2)), np.array([4]), np.array([2]), np.array([0.5])).data[0]
    changed = np.flatnonzero(base != moved)
    assert set(changed) <= set(range(4, 8)) and len(changed)


def test_disabled_segments_drop_out():
    state = _state(use_time=False, use_duration=False)
    out = record_segments(state.tensors(), state.config.features, np.zeros((2, 2)), np.zeros(2, int), np.zeros(2, int), np.zeros(2))
    assert out.shape == (2, 4)


def test_embed_records_matches_batched_encoding(small_city):
    state = build_model(small_model_config(), len(small_city.categories), seed=0)
    pair = small_city.pairs[0]
    centers = {loc.id: loc.center for loc in small_city.locations}
    one = embed_records(pair.history, centers, small_city.norm_stats, small_city.dur_bounds, state.tensors(), state.config.features)
    enc = encode_pairs(small_city, [0])
    batched = record_segments(state.tensors(), state.config.features, enc.hist_xy, enc.hist_hour, enc.hist_day, enc.hist_dur).data[0]
    assert np.allclose(one, batched, atol=1e-5)


def test_embed_records_rejects_bad_slots():
    state = _state()
    bad = [VisitRecord.__new__(VisitRecord)]
    object.__setattr__(bad[0], "location_id", 0)
    object.__setattr__(bad[0], "day_of_week", 0)
    object.__setattr__(bad[0], "hour_of_day", 30)
    object.__setattr__(bad[0], "duration", 1.0)
    object.__setattr__(bad[0], "arrive_ts", 0.0)
    with pytest.raises(ValueError):
        embed_records(bad, {0: (0.0, 0.0)}, NormStats(0, 0, 1, 1), (0, 10), state.tensors(), state.config.features)


def test_project_content_uses_branch_weights():
    state = _state()
    x = Tensor(np.ones((1, state.config.features.concat_width), dtype=np.float32))
    h, c = project_content(state.tensors(), x, x)
    assert h.shape == (1, 16) and not np.allclose(h.data, c.data)


def test_compose_final():
    a, b = np.ones((2, 3)), np.full((2, 3), 2.0)
    assert np.all(compose_final(a, b) == 3.0)
    assert compose_final(a, None) is a
    with pytest.raises(ValueError):
        compose_final(a, np.ones((3, 2)))


def test_encode_pairs_normalizes_with_given_stats(small_city):
    enc = encode_pairs(small_city, [0, 1])
    stats = small_city.norm_stats
    assert np.allclose(enc.hist_xy * stats.std + stats.mean, enc.centers[enc.hist_loc])
    assert enc.hist_xy.shape == (2, 8, 2) and enc.cur_loc.shape == (2, 3)
    assert np.array_equal(enc.target_xy, small_city.centers[enc.target_row])


def test_merge_offsets_location_rows(small_city):
    a = encode_pairs(small_city, [0])
    merged = merge_encoded([a, a])
    n = len(small_city.locations)
    assert np.array_equal(merged.hist_loc[1], a.hist_loc[0] + n)
    assert np.array_equal(merged.centers[merged.target_row], merged.target_xy)
