"""Experiment orchestration: dataset loading, supervised, zero-shot and ablation runs."""

from __future__ import annotations

import configparser
import hashlib
import logging
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..backbone import ModelState, build_model, predict_in_chunks, train
from ..features import encode_pairs, merge_encoded
from ..ingest import (
    CityDataset,
    DataFormatError,
    assemble_dataset,
    assign_grid,
    preprocess_pings,
    read_locations,
    read_pings,
    read_rows,
    read_visits,
    refit_norm_stats,
    write_locations,
    write_visits,
)
from ..geo import GeoPoint, MercatorPoint
from ..poi import CITY_CATEGORIES, read_catalog, read_profiles, write_catalog, write_profiles
from ..retrieve import LocationIndex, hit_at_k, mean_distance, query_many
from .config import ABLATIONS, ConfigError, ExperimentConfig
from .report import RunReport, SplitMetrics
from .synth import SynthCitySpec, synth_generate

logger = logging.getLogger(__name__)

DATASET_FILES = ("dataset.cfg", "visits.csv", "locations.csv", "catalog.csv", "profiles.csv")


class ZeroShotIntegrityError(RuntimeError):
    """Model weights changed during a zero-shot evaluation."""


# -- datasets ------------------------------------------------------------------


def synth_spec(cfg: ExperimentConfig) -> SynthCitySpec:
    return replace(cfg.synth, M=cfg.M, N=cfg.N, stride=cfg.stride)


def write_dataset(directory, dataset: CityDataset) -> Path:
    """Persist visits, locations, catalog and POI profiles plus a small descriptor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = configparser.ConfigParser(interpolation=None)
    desc["dataset"] = {
        "name": dataset.name,
        "virtual": "true" if dataset.virtual else "false",
        "split_seed": str(dataset.meta.get("split_seed", 0)),
        "norm_source": dataset.norm_source,
    }
    with open(directory / "dataset.cfg", "w", encoding="utf-8") as fh:
        desc.write(fh)
    write_visits(directory / "visits.csv", dataset.visits)
    write_locations(directory / "locations.csv", dataset.locations, virtual=dataset.virtual)
    write_catalog(directory / "catalog.csv", dataset.categories)
    profiles = {loc.id: loc.poi_profile for loc in dataset.locations if loc.poi_profile is not None}
    write_profiles(directory / "profiles.csv", profiles)
    return directory


def read_dataset(directory, cfg: ExperimentConfig | None = None) -> CityDataset:
    """Re-assemble a dataset directory with the window/split settings of ``cfg``."""
    cfg = cfg or ExperimentConfig()
    directory = Path(directory)
    if not (directory / "visits.csv").exists() or not (directory / "locations.csv").exists():
        raise DataFormatError(f"{directory}: not a dataset directory (needs visits.csv and locations.csv)")
    desc = configparser.ConfigParser(interpolation=None)
    desc.read(directory / "dataset.cfg", encoding="utf-8")
    info = desc["dataset"] if desc.has_section("dataset") else {}
    name = info.get("name", directory.name)
    split_seed = int(info.get("split_seed", cfg.data.get("split_seed", 0)))
    locations, virtual, _ = read_locations(directory / "locations.csv")
    categories = read_catalog(directory / "catalog.csv") if (directory / "catalog.csv").exists() else list(CITY_CATEGORIES)
    if (directory / "profiles.csv").exists():
        profiles = read_profiles(directory / "profiles.csv", [loc.id for loc in locations], len(categories))
        locations = [replace(loc, poi_profile=profiles[loc.id]) for loc in locations]
    visits = read_visits(directory / "visits.csv")
    ds = assemble_dataset(
        name, visits, locations, cfg.M, cfg.N, cfg.stride,
        ratios=cfg.data.get("split", (0.7, 0.1, 0.2)), seed=split_seed,
        categories=categories, virtual=virtual,
    )
    ds.meta["split_seed"] = split_seed
    return ds


def load_datasets(cfg: ExperimentConfig, paths=None) -> list:
    """Datasets named by ``paths`` or the config; the configured synthetic city if none."""
    paths = list(paths or cfg.data.get("datasets", ()))
    if not paths:
        ds = synth_generate(synth_spec(cfg))
        ds.meta["split_seed"] = cfg.synth.seed
        return [ds]
    return [read_dataset(p, cfg) for p in paths]


def read_poi_points(path, origin, cell: float, n_categories: int) -> dict:
    """POI points (lon, lat, category_id) counted per grid cell -> {(row, col): counts}."""
    rows, _ = read_rows(path, ["lon", "lat", "category_id"])
    counts: dict = {}
    for r in rows:
        try:
            cid = int(r["category_id"])
            row, col, _ = assign_grid(GeoPoint(float(r["lon"]), float(r["lat"])), origin, cell)
        except (ValueError, TypeError) as exc:
            raise DataFormatError(f"{path}: bad POI row {r}") from exc
        if not 0 <= cid < n_categories:
            raise DataFormatError(f"{path}: category_id {cid} outside the catalog")
        counts.setdefault((row, col), np.zeros(n_categories))[cid] += 1.0
    return counts


def preprocess_to_dataset(cfg: ExperimentConfig) -> tuple:
    """Raw pings (+ optional POI points) -> (dataset, rejection counts)."""
    pp = cfg.preprocess
    if not pp.get("pings"):
        raise ConfigError("[preprocess] pings is required")
    categories = read_catalog(pp["catalog"]) if pp.get("catalog") else list(CITY_CATEGORIES)
    pings = read_pings(pp["pings"])
    visits, locations, rejected = preprocess_pings(pings, pp["cell"], pp["time_gap_max"], pp["dist_max"], pp["min_stay"])
    if pp.get("pois"):
        origin = _grid_origin(locations, pp["cell"])
        counts = read_poi_points(pp["pois"], origin, pp["cell"], len(categories))
        locations = [replace(loc, poi_profile=counts.get((loc.grid_row, loc.grid_col), np.zeros(len(categories)))) for loc in locations]
    ds = assemble_dataset(
        pp["name"], visits, locations, cfg.M, cfg.N, cfg.stride,
        ratios=cfg.data.get("split", (0.7, 0.1, 0.2)), seed=cfg.data.get("split_seed", 0),
        categories=categories,
    )
    ds.meta["split_seed"] = cfg.data.get("split_seed", 0)
    return ds, rejected


def _grid_origin(locations, cell: float):
    # cell centers sit at origin + (col + 0.5, row + 0.5) * cell
    loc = locations[0]
    return MercatorPoint(loc.center[0] - (loc.grid_col + 0.5) * cell, loc.center[1] - (loc.grid_row + 0.5) * cell)


def location_table_digest(dataset: CityDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.location_ids, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(dataset.centers, dtype="<f8").tobytes())
    return h.hexdigest()


# -- evaluation ------------------------------------------------------------------


def marginal_topk(dataset: CityDataset, k: int, split: str = "train") -> list:
    """Corpus-wide most frequent target ids of a split (ties by ascending id)."""
    counts = Counter(dataset.pairs[i].target for i in dataset.split[split])
    return [lid for lid, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def _index_for(dataset: CityDataset, space: str, stats) -> LocationIndex:
    centers = dataset.centers
    if space == "normalized":
        centers = (centers - stats.mean) / stats.std
    return LocationIndex(centers, dataset.location_ids)


def rank_locations(state: ModelState, dataset: CityDataset, indices, k: int, space: str = "mercator", norm_stats=None, dur_bounds=None, index: LocationIndex | None = None):
    """(ranked id lists, predicted Mercator xy, encoded batch) for ``dataset.pairs[indices]``."""
    stats = norm_stats or dataset.norm_stats
    batch = encode_pairs(dataset, indices, stats, dur_bounds or state.dur_bounds or dataset.dur_bounds)
    pred_norm = predict_in_chunks(state, batch, normalized=True)
    pred_xy = pred_norm * batch.std + batch.mean
    index = index or _index_for(dataset, space, stats)
    queries = pred_norm if space == "normalized" else pred_xy
    return query_many(index, queries, k), pred_xy, batch


def evaluate_split(state: ModelState, dataset: CityDataset, split: str, ks=(1, 5, 10), space: str = "mercator", norm_stats=None, dur_bounds=None) -> SplitMetrics:
    indices = np.arange(len(dataset.pairs)) if split == "all" else dataset.split[split]
    if len(indices) == 0:
        raise ValueError(f"split {split!r} is empty")
    ranked, pred_xy, batch = rank_locations(state, dataset, indices, max(ks), space, norm_stats, dur_bounds)
    truth = dataset.location_ids[batch.target_row]
    hits = {k: hit_at_k(ranked, truth, k) for k in ks}
    top = marginal_topk(dataset, max(ks))
    baseline = {k: hit_at_k([top] * len(truth), truth, k) for k in ks}
    dist = mean_distance(pred_xy, batch.target_xy, virtual=dataset.virtual)
    return SplitMetrics(len(indices), hits, dist, baseline)


# -- runs -------------------------------------------------------------------------


def _space(cfg: ExperimentConfig, zero_shot: bool) -> str:
    if cfg.retrieval_space != "auto":
        return cfg.retrieval_space
    return "normalized" if zero_shot else "mercator"


def _check_compatible(datasets) -> None:
    if not datasets:
        raise ConfigError("no dataset to train on")
    widths = {len(ds.categories) for ds in datasets}
    if len(widths) != 1:
        raise ConfigError("joint training needs the same POI category count in every city")


def train_model(cfg: ExperimentConfig, datasets) -> tuple:
    """Build and train a model on the train splits of ``datasets`` -> (state, TrainResult)."""
    _check_compatible(datasets)
    mc = cfg.model_config()
    ds0 = datasets[0]
    state = build_model(mc, len(ds0.categories), seed=cfg.seed, categories=ds0.categories)
    # each city is normalized with its own statistics
    train_data = merge_encoded([encode_pairs(ds, ds.split["train"]) for ds in datasets])
    val_parts = [encode_pairs(ds, ds.split["val"]) for ds in datasets if len(ds.split["val"])]
    val_data = merge_encoded(val_parts) if val_parts else None
    result = train(state, train_data, val_data, cfg.schedule, seed=cfg.seed)
    trained = replace(
        result.state,
        norm_stats=ds0.norm_stats,
        dur_bounds=ds0.dur_bounds,
        meta={
            "datasets": [ds.name for ds in datasets],
            "location_digest": location_table_digest(ds0),
            "virtual": ds0.virtual,
            "experiment_digest": cfg.digest(),
            "training": "joint" if len(datasets) > 1 else "single",
        },
    )
    return trained, result


def run_supervised(cfg: ExperimentConfig, datasets=None) -> RunReport:
    """Train on the train split(s) and report every split of every city.

    The trained state is available as ``report.artifacts["state"]``.
    """
    datasets = list(datasets) if datasets is not None else load_datasets(cfg)
    t0 = time.perf_counter()
    state, result = train_model(cfg, datasets)
    space = _space(cfg, zero_shot=False)
    splits = {}
    for ds in datasets:
        prefix = f"{ds.name}/" if len(datasets) > 1 else ""
        for split in ("train", "val", "test"):
            if len(ds.split[split]):
                splits[prefix + split] = evaluate_split(state, ds, split, cfg.ks, space)
    joint = len(datasets) > 1
    report = RunReport(
        mode="joint" if joint else "supervised",
        datasets=tuple(ds.name for ds in datasets),
        config_digest=cfg.digest(),
        model_digest=state.params_digest(),
        norm_source=", ".join(f"{ds.name}:{ds.norm_source}" for ds in datasets),
        distance="planar" if all(ds.virtual for ds in datasets) else "haversine",
        retrieval_space=space,
        seed=cfg.seed,
        steps=result.steps,
        stopped=result.stopped,
        train_loss=tuple(result.train_loss),
        val_loss=tuple(result.val_loss),
        splits=splits,
        notes={
            "dur_bounds": f"{datasets[0].name} train split {list(datasets[0].dur_bounds)}",
            "ablations": ",".join(sorted(cfg.ablations)) or "none",
            "freeze_mode": state.config.backbone.freeze_mode,
        },
        wall_time_s=time.perf_counter() - t0,
    )
    report.artifacts.update(state=state, result=result)
    return report


def run_zero_shot(source, target: CityDataset, cfg: ExperimentConfig | None = None, splits=("test", "all")) -> RunReport:
    """Evaluate a trained model on a city it never saw.

    ``source`` is a trained ``ModelState`` or an ``ExperimentConfig`` to train
    first. Only the coordinate normalization is refit on the target; the
    duration bounds and every weight come from the source model, and the
    weight hash is verified before and after.
    """
    if isinstance(source, ExperimentConfig):
        cfg = cfg or source
        state = run_supervised(source).artifacts["state"]
    elif isinstance(source, ModelState):
        state = source
    else:
        raise TypeError("source must be a ModelState or an ExperimentConfig")
    cfg = cfg or ExperimentConfig()
    if len(target.categories) != state.desc_tokens.shape[0]:
        raise ConfigError("target city has a different POI category count than the model")
    before = state.params_digest()
    t0 = time.perf_counter()
    stats = refit_norm_stats(target, target.norm_source)
    space = _space(cfg, zero_shot=True)
    metrics = {s: evaluate_split(state, target, s, cfg.ks, space, stats, state.dur_bounds) for s in splits}
    after = state.params_digest()
    if before != after:
        raise ZeroShotIntegrityError("model weights changed during zero-shot evaluation")
    return RunReport(
        mode="zero-shot",
        datasets=(target.name,),
        config_digest=state.meta.get("experiment_digest", cfg.digest()),
        model_digest=after,
        norm_source=f"{target.name}:{target.norm_source} (refit on target)",
        distance="planar" if target.virtual else "haversine",
        retrieval_space=space,
        seed=cfg.seed,
        splits=metrics,
        notes={
            "source": ",".join(state.meta.get("datasets", [])) or "unknown",
            "dur_bounds": f"from checkpoint {list(state.dur_bounds) if state.dur_bounds else 'none'}",
        },
        wall_time_s=time.perf_counter() - t0,
    )


def run_ablation_suite(cfg: ExperimentConfig, seeds=(0, 1, 2), variants=None, datasets=None) -> dict:
    """{variant: [RunReport per seed]}; each variant is a single flag on top of ``cfg``."""
    variants = tuple(variants) if variants is not None else ("base",) + ABLATIONS
    for v in variants:
        if v != "base" and v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    # validate every variant before spending compute on any
    configs = {v: cfg.with_ablation(None if v == "base" else v) for v in variants}
    datasets = list(datasets) if datasets is not None else load_datasets(cfg)
    out = {}
    for v, vcfg in configs.items():
        out[v] = []
        for seed in seeds:
            logger.info("ablation %s seed %d", v, seed)
            out[v].append(run_supervised(vcfg.with_seed(seed), datasets))
    return out


def summarize_suite(suite: dict, split: str = "test", k: int = 5) -> dict:
    """Mean Hit@k over seeds per variant."""
    return {v: float(np.mean([r.hit(split, k) for r in reports])) for v, reports in suite.items()}
