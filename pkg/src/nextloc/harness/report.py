"""Run reports: human-readable key/value text plus a tab-separated metrics table.

Both serializations start with the format line ``#nextloc-report v1``.
Floats are written with ``repr`` so that parsing a report gives back an
equal object. Wall time is deliberately not part of either file (it would
break byte-identical reruns); it goes to a sidecar written by the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

REPORT_HEADER = "#nextloc-report v1"


class ReportError(ValueError):
    """Unparseable report or a report that violates a metric invariant."""


@dataclass
class SplitMetrics:
    n: int
    hits: dict  # k -> Hit@k
    mean_distance_m: float
    baseline_hits: dict = field(default_factory=dict)  # k -> marginal-frequency Hit@k

    def check_nesting(self) -> None:
        ks = sorted(self.hits)
        for a, b in zip(ks, ks[1:]):
            if not self.hits[a] <= self.hits[b]:
                raise ReportError(f"Hit@{a}={self.hits[a]} exceeds Hit@{b}={self.hits[b]}")


@dataclass
class RunReport:
    mode: str  # supervised, joint, zero-shot
    datasets: tuple
    config_digest: str
    model_digest: str
    norm_source: str
    distance: str  # planar or haversine
    retrieval_space: str
    seed: int
    steps: int = 0
    stopped: str = ""
    train_loss: tuple = ()
    val_loss: tuple = ()
    splits: dict = field(default_factory=dict)  # name -> SplitMetrics
    notes: dict = field(default_factory=dict)
    wall_time_s: float | None = field(default=None, compare=False)
    artifacts: dict = field(default_factory=dict, compare=False, repr=False)  # in-memory only

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for metrics in self.splits.values():
            metrics.check_nesting()

    def hit(self, split: str, k: int) -> float:
        return self.splits[split].hits[k]

    # -- text ------------------------------------------------------------

    def to_text(self) -> str:
        self.validate()
        lines = [
            REPORT_HEADER,
            f"mode: {self.mode}",
            f"datasets: {', '.join(self.datasets)}",
            f"config_digest: {self.config_digest}",
            f"model_digest: {self.model_digest}",
            f"norm_source: {self.norm_source}",
            f"distance: {self.distance}",
            f"retrieval_space: {self.retrieval_space}",
            f"seed: {self.seed}",
            f"steps: {self.steps}",
            f"stopped: {self.stopped}",
            f"train_loss: {_floats(self.train_loss)}",
            f"val_loss: {_floats(self.val_loss)}",
        ]
        for key in sorted(self.notes):
            lines.append(f"note.{key}: {self.notes[key]}")
        for name, m in self.splits.items():
            parts = [f"n={m.n}"]
            parts += [f"hit@{k}={m.hits[k]!r}" for k in sorted(m.hits)]
            parts.append(f"mean_distance_m={m.mean_distance_m!r}")
            parts += [f"baseline_hit@{k}={m.baseline_hits[k]!r}" for k in sorted(m.baseline_hits)]
            lines.append(f"split.{name}: {' '.join(parts)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """One row per (split, k): split, n, k, hit, baseline_hit, mean_distance_m."""
        self.validate()
        rows = [REPORT_HEADER, f"#config_digest={self.config_digest}", "split\tn\tk\thit\tbaseline_hit\tmean_distance_m"]
        for name, m in self.splits.items():
            for k in sorted(m.hits):
                base = m.baseline_hits.get(k, math.nan)
                rows.append(f"{name}\t{m.n}\t{k}\t{m.hits[k]!r}\t{base!r}\t{m.mean_distance_m!r}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        lines = text.splitlines()
        if not lines or lines[0].strip() != REPORT_HEADER:
            raise ReportError(f"missing '{REPORT_HEADER}' header")
        kv, notes, splits = {}, {}, {}
        for line in lines[1:]:
            if not line.strip():
                continue
            key, sep, value = line.partition(": ")
            if not sep:
                key, value = line.rstrip(":"), ""
            if key.startswith("note."):
                notes[key[5:]] = value
            elif key.startswith("split."):
                splits[key[6:]] = _parse_split(value)
            else:
                kv[key] = value
        try:
            return cls(
                mode=kv["mode"],
                datasets=tuple(t.strip() for t in kv["datasets"].split(",") if t.strip()),
                config_digest=kv["config_digest"],
                model_digest=kv["model_digest"],
                norm_source=kv["norm_source"],
                distance=kv["distance"],
                retrieval_space=kv["retrieval_space"],
                seed=int(kv["seed"]),
                steps=int(kv["steps"]),
                stopped=kv["stopped"],
                train_loss=_parse_floats(kv["train_loss"]),
                val_loss=_parse_floats(kv["val_loss"]),
                splits=splits,
                notes=notes,
            )
        except (KeyError, ValueError) as exc:
            raise ReportError(f"malformed report: {exc}") from exc


def parse_table(text: str) -> list:
    """Rows of a metrics table as dicts with typed values."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != REPORT_HEADER:
        raise ReportError(f"missing '{REPORT_HEADER}' header")
    body = [ln for ln in lines[1:] if not ln.startswith("#")]
    header = body[0].split("\t")
    out = []
    for ln in body[1:]:
        cells = dict(zip(header, ln.split("\t")))
        out.append(
            {
                "split": cells["split"],
                "n": int(cells["n"]),
                "k": int(cells["k"]),
                "hit": float(cells["hit"]),
                "baseline_hit": float(cells["baseline_hit"]),
                "mean_distance_m": float(cells["mean_distance_m"]),
            }
        )
    return out


def _floats(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _parse_split(value: str) -> SplitMetrics:
    n, hits, base, dist = 0, {}, {}, math.nan
    for token in value.split():
        key, _, raw = token.partition("=")
        if key == "n":
            n = int(raw)
        elif key.startswith("hit@"):
            hits[int(key[4:])] = float(raw)
        elif key.startswith("baseline_hit@"):
            base[int(key[13:])] = float(raw)
        elif key == "mean_distance_m":
            dist = float(raw)
        else:
            raise ValueError(f"unknown split field {key!r}")
    return SplitMetrics(n, hits, dist, base)
