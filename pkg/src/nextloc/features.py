"""Trajectory content embeddings.

Each visit record becomes ``xy ‖ time ‖ day ‖ duration`` (segments that an
ablation disables are dropped), projected to the backbone width by a
branch-specific perceptron. POI embeddings are added on top afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, take_rows
from .geo import NormStats
from .ingest import DAY_SLOTS, HOUR_SLOTS
from .layers import init_linear, init_mlp, linear, mlp
from .poi import normalize_profiles

POI_MODES = ("llm", "linear", "off")


@dataclass(frozen=True)
class FeatureConfig:
    d_t: int = 8
    d_d: int = 8
    d_dur: int = 4
    d_xy: int = 16
    d_poi: int = 8  # width of the linear POI segment when poi_mode == "linear"
    d_model: int = 64
    use_time: bool = True  # time-of-day and day-of-week together
    use_duration: bool = True
    poi_mode: str = "llm"

    def __post_init__(self):
        for name in ("d_t", "d_d", "d_dur", "d_xy", "d_poi", "d_model"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.poi_mode not in POI_MODES:
            raise ValueError(f"poi_mode must be one of {POI_MODES}")

    @property
    def concat_width(self) -> int:
        width = self.d_xy
        if self.use_time:
            width += self.d_t + self.d_d
        if self.use_duration:
            width += self.d_dur
        if self.poi_mode == "linear":
            width += self.d_poi
        return width


def init_feature_params(params: dict, cfg: FeatureConfig, n_categories: int, rng: np.random.Generator) -> None:
    init_linear(params, "feat.xy", rng, 2, cfg.d_xy)
    if cfg.use_time:
        params["feat.time_table"] = rng.normal(0.0, 1.0, size=(HOUR_SLOTS, cfg.d_t))
        params["feat.day_table"] = rng.normal(0.0, 1.0, size=(DAY_SLOTS, cfg.d_d))
    if cfg.use_duration:
        init_linear(params, "feat.dur", rng, 1, cfg.d_dur)
    if cfg.poi_mode == "linear":
        init_linear(params, "feat.poi_linear", rng, n_categories, cfg.d_poi)
    init_mlp(params, "feat.proj_history", rng, cfg.concat_width, cfg.d_model)
    init_mlp(params, "feat.proj_current", rng, cfg.concat_width, cfg.d_model)


@dataclass
class EncodedPairs:
    """Integer/float arrays for a batch of trajectory pairs from one or more cities.

    ``*_loc`` index rows of ``freq``/``centers``; ``*_xy`` are already
    normalized with the owning city's statistics (``mean``/``std`` per pair).
    """

    hist_loc: np.ndarray
    hist_xy: np.ndarray
    hist_hour: np.ndarray
    hist_day: np.ndarray
    hist_dur: np.ndarray
    cur_loc: np.ndarray
    cur_xy: np.ndarray
    cur_hour: np.ndarray
    cur_day: np.ndarray
    cur_dur: np.ndarray
    target_row: np.ndarray
    target_xy: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    freq: np.ndarray
    centers: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.target_row)

    def take(self, idx) -> "EncodedPairs":
        per_pair = {
            name: getattr(self, name)[idx]
            for name in (
                "hist_loc", "hist_xy", "hist_hour", "hist_day", "hist_dur",
                "cur_loc", "cur_xy", "cur_hour", "cur_day", "cur_dur",
                "target_row", "target_xy", "mean", "std",
            )
        }
        return EncodedPairs(**per_pair, freq=self.freq, centers=self.centers, extra=self.extra)


def scale_duration(minutes, dur_bounds) -> np.ndarray:
    lo, hi = dur_bounds
    if not hi > lo:
        raise ValueError("duration bounds need min < max")
    return np.clip((np.asarray(minutes, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def _record_arrays(records_2d, row_of: dict, centers: np.ndarray, stats: NormStats, dur_bounds):
    loc = np.array([[row_of[r.location_id] for r in recs] for recs in records_2d], dtype=np.int64).reshape(len(records_2d), -1)
    hour = np.array([[r.hour_of_day for r in recs] for recs in records_2d], dtype=np.int64).reshape(loc.shape)
    day = np.array([[r.day_of_week for r in recs] for recs in records_2d], dtype=np.int64).reshape(loc.shape)
    dur = scale_duration([[r.duration for r in recs] for recs in records_2d], dur_bounds).reshape(loc.shape)
    if np.any((hour < 0) | (hour >= HOUR_SLOTS)) or np.any((day < 0) | (day >= DAY_SLOTS)):
        raise ValueError("hour or day slot out of range")
    xy = (centers[loc] - stats.mean) / stats.std
    return loc, xy, hour, day, dur


def encode_pairs(dataset, indices=None, norm_stats: NormStats | None = None, dur_bounds=None, profiles_normalized: bool = False) -> EncodedPairs:
    """Array view of ``dataset.pairs[indices]`` ready for the model."""
    stats = norm_stats or dataset.norm_stats
    dur_bounds = dur_bounds or dataset.dur_bounds
    pairs = dataset.pairs if indices is None else [dataset.pairs[i] for i in indices]
    row_of = {loc.id: i for i, loc in enumerate(dataset.locations)}
    centers = dataset.centers
    r = len(dataset.categories)
    freq = np.array(
        [loc.poi_profile if loc.poi_profile is not None else np.zeros(r) for loc in dataset.locations],
        dtype=float,
    ).reshape(len(dataset.locations), r)
    if profiles_normalized:
        freq = normalize_profiles(freq)
    h = _record_arrays([p.history for p in pairs], row_of, centers, stats, dur_bounds)
    c = _record_arrays([p.current for p in pairs], row_of, centers, stats, dur_bounds)
    target_row = np.array([row_of[p.target] for p in pairs], dtype=np.int64)
    n = len(pairs)
    return EncodedPairs(
        *h,
        *c,
        target_row=target_row,
        target_xy=centers[target_row],
        mean=np.tile(stats.mean, (n, 1)),
        std=np.tile(stats.std, (n, 1)),
        freq=freq,
        centers=centers,
    )


def merge_encoded(parts) -> EncodedPairs:
    """Concatenate encodings from several cities into one location table."""
    offset = 0
    fields = {k: [] for k in ("hist_loc", "hist_xy", "hist_hour", "hist_day", "hist_dur", "cur_loc", "cur_xy", "cur_hour", "cur_day", "cur_dur", "target_row", "target_xy", "mean", "std")}
    for part in parts:
        for k in fields:
            value = getattr(part, k)
            if k in ("hist_loc", "cur_loc", "target_row"):
                value = value + offset
            fields[k].append(value)
        offset += len(part.centers)
    merged = {k: np.concatenate(v) for k, v in fields.items()}
    return EncodedPairs(
        **merged,
        freq=np.concatenate([p.freq for p in parts]),
        centers=np.concatenate([p.centers for p in parts]),
    )


def record_segments(P: dict, cfg: FeatureConfig, xy, hour, day, dur, poi_freq=None) -> Tensor:
    """Concatenated per-record content vector in the order xy, time, day, duration[, poi]."""
    dtype = P["feat.xy.w"].data.dtype
    parts = [linear(P, "feat.xy", Tensor(np.asarray(xy, dtype=dtype)))]
    if cfg.use_time:
        parts.append(take_rows(P["feat.time_table"], hour))
        parts.append(take_rows(P["feat.day_table"], day))
    if cfg.use_duration:
        parts.append(linear(P, "feat.dur", Tensor(np.asarray(dur, dtype=dtype)[..., None])))
    if cfg.poi_mode == "linear":
        parts.append(linear(P, "feat.poi_linear", Tensor(np.asarray(poi_freq, dtype=dtype))))
    return concat(parts, axis=-1)


def embed_records(records, centers: dict, stats: NormStats, dur_bounds, P: dict, cfg: FeatureConfig, profiles: dict | None = None) -> np.ndarray:
    """Content vectors (len(records), concat_width) for a single record sequence.

    ``centers`` maps location id to Mercator (x, y).
    """
    xy = (np.array([centers[r.location_id] for r in records], dtype=float) - stats.mean) / stats.std
    hour = np.array([r.hour_of_day for r in records], dtype=np.int64)
    day = np.array([r.day_of_week for r in records], dtype=np.int64)
    if np.any((hour < 0) | (hour >= HOUR_SLOTS)) or np.any((day < 0) | (day >= DAY_SLOTS)):
        raise ValueError("hour or day slot out of range")
    dur = scale_duration([r.duration for r in records], dur_bounds)
    freq = None
    if cfg.poi_mode == "linear":
        freq = np.array([profiles[r.location_id] for r in records], dtype=float)
    return record_segments(P, cfg, xy, hour, day, dur, freq).data


def project_content(P: dict, history_vecs: Tensor, current_vecs: Tensor):
    """Branch-specific projection to the backbone width."""
    return mlp(P, "feat.proj_history", history_vecs), mlp(P, "feat.proj_current", current_vecs)


def compose_final(content, poi):
    """Per-branch elementwise sum of content and POI rows (POI may be None)."""
    if poi is None:
        return content
    if content.shape != poi.shape:
        raise ValueError(f"shape mismatch {content.shape} vs {poi.shape}")
    return content + poi
