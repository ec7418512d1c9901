"""Experiment configuration: INI text with fixed sections and documented keys.

Unknown sections or keys are rejected so a typo can never silently fall back
to a default. Every key, its type and default are listed in ``SCHEMA``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from ..backbone import BackboneConfig, ModelConfig, Schedule, DEFAULT_PROMPT
from ..features import FeatureConfig
from .synth import SynthCitySpec

ABLATIONS = ("no_prompt", "no_poi", "no_time", "no_duration", "history_only", "current_only", "full_finetune")


class ConfigError(ValueError):
    """Malformed or contradictory experiment configuration."""


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _str_list(text: str) -> tuple:
    return tuple(t.strip() for t in text.replace("\n", ",").split(",") if t.strip())


# section -> key -> (parser, default, help)
SCHEMA = {
    "data": {
        "datasets": (_str_list, (), "dataset directories (written by `synth` or `preprocess`); empty = generate the [synth] city"),
        "split": (_float_list, (0.7, 0.1, 0.2), "train/val/test ratios, chronological by target timestamp"),
        "split_seed": (int, 0, "tie-break seed for the split of file datasets"),
    },
    "synth": {
        "name": (str, "toybench", "dataset name"),
        "grid_rows": (int, 10, "grid rows"),
        "grid_cols": (int, 10, "grid columns"),
        "cell": (float, 500.0, "cell edge in meters"),
        "n_agents": (int, 200, "simulated users"),
        "n_days": (int, 28, "simulated days"),
        "archetype_mix": (_float_list, (0.15, 0.25, 0.1, 0.1, 0.4), "weights for entertainment, commercial, education, public, residential"),
        "schedule_noise": (float, 0.1, "timing jitter and exploration probability"),
        "weekday_leisure": (float, 0.3, "probability of an evening leisure trip after work"),
        "weekend_outing": (float, 0.7, "probability of a weekend morning outing"),
        "seed": (int, 7, "generator seed (independent of the run seed)"),
        "scale_x": (float, 1.0, "x scale of the virtual plane"),
        "scale_y": (float, 1.0, "y scale of the virtual plane"),
        "shift_x": (float, 0.0, "x shift of the virtual plane"),
        "shift_y": (float, 0.0, "y shift of the virtual plane"),
    },
    "preprocess": {
        "pings": (str, "", "raw ping file for `preprocess`"),
        "pois": (str, "", "optional POI point file (lon, lat, category)"),
        "catalog": (str, "", "optional category catalog; default is the five city categories"),
        "cell": (float, 500.0, "grid cell in meters"),
        "time_gap_max": (float, 3600.0, "seconds; larger gaps close a stay"),
        "dist_max": (float, 300.0, "meters from the running centroid"),
        "min_stay": (float, 1200.0, "seconds a stay must last"),
        "name": (str, "city", "dataset name"),
    },
    "window": {
        "M": (int, 30, "history length"),
        "N": (int, 6, "current length"),
        "stride": (int, 1, "sliding-window stride"),
    },
    "features": {
        "d_t": (int, 8, "time-of-day width"),
        "d_d": (int, 8, "day-of-week width"),
        "d_dur": (int, 4, "duration width"),
        "d_xy": (int, 16, "coordinate width"),
        "d_poi": (int, 8, "linear POI width (no_poi variant)"),
    },
    "backbone": {
        "layers": (int, 2, "transformer blocks"),
        "heads": (int, 4, "attention heads"),
        "d_model": (int, 64, "model width"),
        "d_ff": (int, 256, "feed-forward width"),
        "max_seq": (int, 128, "maximum sequence length"),
        "freeze_mode": (str, "frozen-partial", "frozen-partial or full-finetune"),
        "init_mode": (str, "random-frozen", "random-frozen or synthetic-pretrain"),
        "train_heads": (_bool, True, "train input/output perceptrons in frozen-partial mode"),
        "prompt": (str, DEFAULT_PROMPT, "prompt prefix text"),
        "max_prompt": (int, 64, "prompt token cap"),
    },
    "schedule": {
        "lr": (float, 1e-3, "Adam learning rate"),
        "batch_size": (int, 64, "pairs per step"),
        "max_epochs": (int, 30, "epoch cap"),
        "patience": (int, 5, "validation checks without improvement before stopping"),
        "max_steps": (_opt_int, None, "step cap"),
        "eval_every": (_opt_int, None, "steps between validation checks (default one epoch)"),
        "time_budget_s": (_opt_float, None, "wall-clock cap on training"),
    },
    "run": {
        "seed": (int, 0, "model initialisation and batch order"),
        "k": (_int_list, (1, 5, 10), "Hit@k cutoffs, ascending"),
        "retrieval_space": (str, "auto", "mercator, normalized, or auto (mercator supervised, normalized zero-shot)"),
        **{flag: (_bool, False, f"ablation flag {flag}") for flag in ABLATIONS},
    },
}


def _defaults(section: str) -> dict:
    return {key: spec[1] for key, spec in SCHEMA[section].items()}


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict = field(default_factory=lambda: _defaults("data"))
    synth: SynthCitySpec = field(default_factory=SynthCitySpec)
    preprocess: dict = field(default_factory=lambda: _defaults("preprocess"))
    M: int = 30
    N: int = 6
    stride: int = 1
    features: FeatureConfig = field(default_factory=FeatureConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: Schedule = field(default_factory=Schedule)
    prompt: str = DEFAULT_PROMPT
    max_prompt: int = 64
    train_heads: bool = True
    seed: int = 0
    ks: tuple = (1, 5, 10)
    retrieval_space: str = "auto"
    ablations: frozenset = frozenset()

    def __post_init__(self):
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        if {"history_only", "current_only"} <= set(self.ablations):
            raise ConfigError("history_only and current_only are mutually exclusive")
        if not self.ks or list(self.ks) != sorted(set(self.ks)) or self.ks[0] < 1:
            raise ConfigError("k list must be strictly ascending positive integers")
        if self.retrieval_space not in ("auto", "mercator", "normalized"):
            raise ConfigError("retrieval_space must be auto, mercator or normalized")
        ratios = self.data.get("split", (0.7, 0.1, 0.2))
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split needs three nonnegative ratios summing to 1")
        # surface model-level conflicts (widths, sequence length) before any compute
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        flags = self.ablations
        feats = replace(
            self.features,
            use_time=self.features.use_time and "no_time" not in flags,
            use_duration=self.features.use_duration and "no_duration" not in flags,
            poi_mode="linear" if "no_poi" in flags else self.features.poi_mode,
        )
        bb = self.backbone
        if "full_finetune" in flags:
            bb = replace(bb, freeze_mode="full-finetune")
        branches = "history" if "history_only" in flags else "current" if "current_only" in flags else "both"
        return ModelConfig(
            features=feats,
            backbone=bb,
            M=self.M,
            N=self.N,
            prompt_text=self.prompt,
            max_prompt=self.max_prompt,
            use_prompt="no_prompt" not in flags,
            branches=branches,
            train_heads=self.train_heads,
        )

    def with_ablation(self, flag: str | None) -> "ExperimentConfig":
        """Single-flag delta from this config (``None`` returns it unchanged)."""
        if flag is None:
            return self
        if flag not in ABLATIONS:
            raise ConfigError(f"unknown ablation {flag!r}")
        return replace(self, ablations=self.ablations | {flag})

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def to_ini(self) -> str:
        return dump_config(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()


def _section_values(cfg: ExperimentConfig) -> dict:
    sp = cfg.synth
    return {
        "data": {
            "datasets": cfg.data.get("datasets", ()),
            "split": cfg.data.get("split", (0.7, 0.1, 0.2)),
            "split_seed": cfg.data.get("split_seed", 0),
        },
        "synth": {f.name: getattr(sp, f.name) for f in fields(sp) if f.name in SCHEMA["synth"]},
        "preprocess": {k: cfg.preprocess.get(k, SCHEMA["preprocess"][k][1]) for k in SCHEMA["preprocess"]},
        "window": {"M": cfg.M, "N": cfg.N, "stride": cfg.stride},
        "features": {k: getattr(cfg.features, k) for k in SCHEMA["features"]},
        "backbone": {
            **{k: getattr(cfg.backbone, k) for k in ("layers", "heads", "d_model", "d_ff", "max_seq", "freeze_mode", "init_mode")},
            "train_heads": cfg.train_heads,
            "prompt": cfg.prompt,
            "max_prompt": cfg.max_prompt,
        },
        "schedule": {k: getattr(cfg.schedule, k) for k in SCHEMA["schedule"]},
        "run": {
            "seed": cfg.seed,
            "k": cfg.ks,
            "retrieval_space": cfg.retrieval_space,
            **{flag: flag in cfg.ablations for flag in ABLATIONS},
        },
    }


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; parse_config(dump_config(c)) == c."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in _section_values(cfg).items():
        parser[section] = {k: _format(v) for k, v in values.items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        for key, value in parser[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M, N)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values[(section, key)] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc

    def get(section, key):
        return values.get((section, key), SCHEMA[section][key][1])

    try:
        synth = SynthCitySpec(**{k: get("synth", k) for k in SCHEMA["synth"]}, M=get("window", "M"), N=get("window", "N"), stride=get("window", "stride"))
        features = FeatureConfig(**{k: get("features", k) for k in SCHEMA["features"]}, d_model=get("backbone", "d_model"))
        backbone = BackboneConfig(**{k: get("backbone", k) for k in ("layers", "heads", "d_model", "d_ff", "max_seq", "freeze_mode", "init_mode")})
        schedule = Schedule(**{k: get("schedule", k) for k in SCHEMA["schedule"]})
        return ExperimentConfig(
            data={k: get("data", k) for k in SCHEMA["data"]},
            synth=synth,
            preprocess={k: get("preprocess", k) for k in SCHEMA["preprocess"]},
            M=get("window", "M"),
            N=get("window", "N"),
            stride=get("window", "stride"),
            features=features,
            backbone=backbone,
            schedule=schedule,
            prompt=get("backbone", "prompt"),
            max_prompt=get("backbone", "max_prompt"),
            train_heads=get("backbone", "train_heads"),
            seed=get("run", "seed"),
            ks=get("run", "k"),
            retrieval_space=get("run", "retrieval_space"),
            ablations=frozenset(flag for flag in ABLATIONS if get("run", flag)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def describe_keys() -> str:
    """Plain-text listing of every section, key, default and meaning."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default, help_text) in keys.items():
            out.append(f"  {key} = {_format(default)}    # {help_text}")
    return "\n".join(out)
