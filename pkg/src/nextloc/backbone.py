"""Partially-frozen transformer backbone that regresses next-visit coordinates.

Input sequence: prompt-prefix token embeddings, then history rows, then
current rows. A pre-norm causal transformer reads it; the last position goes
through a small output perceptron to normalized (x, y), which is mapped back
to Mercator meters with the city's statistics.

In ``frozen-partial`` mode attention and feed-forward weights (and the token
table) never change; positional encodings, every layer-norm and all
task-specific input/output perceptrons train.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat, layer_norm, take_rows
from .features import EncodedPairs, FeatureConfig, compose_final, init_feature_params, record_segments
from .geo import NormStats
from .layers import init_mlp, mlp
from .poi import DEFAULT_DESC_LENGTH, VOCAB_SIZE, encode_descriptions, location_poi_embeddings, tokenize

logger = logging.getLogger(__name__)

FREEZE_MODES = ("frozen-partial", "full-finetune")
INIT_MODES = ("random-frozen", "synthetic-pretrain")
BRANCHES = ("both", "history", "current")
CHECKPOINT_MAGIC = b"NXLL1"

DEFAULT_PROMPT = (
    "Task: predict the coordinates of the place this user visits next. "
    "Each record gives normalized map coordinates, hour of day, day of week, "
    "stay duration and the functional profile of the place. "
    "The first block is the long term history of the user; the second block is "
    "the recent trajectory that shows the current intention."
)


class NumericError(ArithmeticError):
    """Non-finite value inside the model or the training loss."""


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not match the expected configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_seq: int = 128
    freeze_mode: str = "frozen-partial"
    init_mode: str = "random-frozen"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if min(self.layers, self.heads, self.d_ff, self.max_seq) <= 0:
            raise ValueError("backbone sizes must be positive")


@dataclass(frozen=True)
class ModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    M: int = 30
    N: int = 6
    desc_length: int = DEFAULT_DESC_LENGTH
    vocab_size: int = VOCAB_SIZE
    prompt_text: str = DEFAULT_PROMPT
    max_prompt: int = 64
    use_prompt: bool = True
    branches: str = "both"
    train_heads: bool = True  # input/output perceptrons trainable in frozen-partial mode

    def __post_init__(self):
        if self.features.d_model != self.backbone.d_model:
            raise ValueError("feature and backbone widths differ")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.N >= self.M:
            raise ValueError("N must be smaller than M")
        if self.seq_len > self.backbone.max_seq:
            raise ValueError(f"sequence length {self.seq_len} exceeds max_seq {self.backbone.max_seq}")

    @property
    def prompt_tokens(self) -> np.ndarray:
        if not self.use_prompt:
            return np.zeros(0, dtype=np.int64)
        return np.array(tokenize(self.prompt_text, self.vocab_size)[: self.max_prompt], dtype=np.int64)

    @property
    def seq_len(self) -> int:
        rows = {"both": self.M + self.N, "history": self.M, "current": self.N}[self.branches]
        return len(self.prompt_tokens) + rows

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["features"] = FeatureConfig(**d["features"])
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class PromptPrefix:
    text: str
    token_ids: np.ndarray


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    trainable: frozenset
    desc_tokens: np.ndarray
    norm_stats: NormStats | None = None
    dur_bounds: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = set(self.params)
        if not self.trainable <= names:
            raise ValueError(f"unknown trainable parameters {sorted(self.trainable - names)}")

    @property
    def frozen(self) -> frozenset:
        return frozenset(self.params) - self.trainable

    @property
    def prompt(self) -> PromptPrefix:
        return PromptPrefix(self.config.prompt_text if self.config.use_prompt else "", self.config.prompt_tokens)

    def astype(self, dtype) -> "ModelState":
        return replace(self, params={k: np.ascontiguousarray(v, dtype=dtype) for k, v in self.params.items()})

    def tensors(self, grad: bool = False) -> dict:
        return {
            name: Tensor(value, requires_grad=grad and name in self.trainable)
            for name, value in self.params.items()
        }

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def _is_backbone_core(name: str) -> bool:
    return name == "token_table" or ".attn." in name or ".ffn." in name


def trainable_names(params: dict, config: ModelConfig) -> frozenset:
    if config.backbone.freeze_mode == "full-finetune":
        return frozenset(params)
    names = set()
    for name in params:
        if _is_backbone_core(name):
            continue
        is_head = name.startswith(("feat.", "poi.", "head."))
        if is_head and not config.train_heads:
            continue
        names.add(name)
    return frozenset(names)


def _orthogonal(rng: np.random.Generator, n: int, m: int, gain: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q if n >= m else q.T
    return gain * q[:n, :m]


def build_model(config: ModelConfig, n_categories: int, seed: int = 0, categories=None, dtype=np.float32) -> ModelState:
    """Fresh parameters; the frozen core comes from a seed-fixed orthogonal initialisation."""
    rng = np.random.default_rng(seed)
    bb = config.backbone
    d = bb.d_model
    params: dict = {}
    params["token_table"] = rng.normal(0.0, 0.5, size=(config.vocab_size + 1, d))
    params["token_table"][0] = 0.0
    params["pos_table"] = rng.normal(0.0, 0.02, size=(bb.max_seq, d))
    resid_gain = 1.0 / math.sqrt(2 * bb.layers)
    for i in range(bb.layers):
        p = f"blocks.{i}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.gain"] = np.ones(d)
            params[f"{p}.{ln}.bias"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            params[f"{p}.attn.{w}"] = _orthogonal(rng, d, d)
            params[f"{p}.attn.b{w[1]}"] = np.zeros(d)
        params[f"{p}.attn.wo"] = _orthogonal(rng, d, d, resid_gain)
        params[f"{p}.attn.bo"] = np.zeros(d)
        params[f"{p}.ffn.w1"] = _orthogonal(rng, d, bb.d_ff, math.sqrt(bb.d_ff / d))
        params[f"{p}.ffn.b1"] = np.zeros(bb.d_ff)
        params[f"{p}.ffn.w2"] = _orthogonal(rng, bb.d_ff, d, resid_gain)
        params[f"{p}.ffn.b2"] = np.zeros(d)
    params["ln_f.gain"] = np.ones(d)
    params["ln_f.bias"] = np.zeros(d)

    init_feature_params(params, config.features, n_categories, rng)
    if config.features.poi_mode == "llm":
        init_mlp(params, "poi.pool_mlp", rng, d, d)
        init_mlp(params, "poi.head_history", rng, d, d)
        init_mlp(params, "poi.head_current", rng, d, d)
    init_mlp(params, "head", rng, d, 2, hidden=d)
    # C order everywhere: a Fortran-ordered QR factor would change BLAS summation order after a reload
    params = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}

    if categories is not None:
        desc_tokens = encode_descriptions(categories, config.desc_length, config.vocab_size)
    else:
        desc_tokens = np.zeros((n_categories, config.desc_length), dtype=np.int64)
    state = ModelState(config, params, trainable_names(params, config), desc_tokens)
    if bb.init_mode == "synthetic-pretrain":
        synthetic_pretrain(state, seed)
    return state


# -- forward ----------------------------------------------------------------


def _attention(P: dict, prefix: str, h: Tensor, heads: int, last_only: bool) -> Tensor:
    B, T, d = h.shape
    dh = d // heads
    q_in = h[:, T - 1 :, :] if last_only else h
    Tq = q_in.shape[1]
    q = (q_in @ P[f"{prefix}.wq"] + P[f"{prefix}.bq"]).reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
    k = (h @ P[f"{prefix}.wk"] + P[f"{prefix}.bk"]).reshape(B, T, heads, dh).transpose(0, 2, 3, 1)
    v = (h @ P[f"{prefix}.wv"] + P[f"{prefix}.bv"]).reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    if not last_only:
        mask = np.triu(np.full((T, T), -1e9, dtype=h.data.dtype), k=1)
        scores = scores + mask
    att = scores.softmax(axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return out @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"]


def transformer(P: dict, bb: BackboneConfig, seq: Tensor) -> Tensor:
    """Pre-norm causal stack; returns the final-position representation (B, d)."""
    T = seq.shape[1]
    if T > bb.max_seq:
        raise ValueError(f"sequence of {T} rows exceeds max_seq={bb.max_seq}")
    x = seq + P["pos_table"][:T]
    for i in range(bb.layers):
        p = f"blocks.{i}"
        last = i == bb.layers - 1
        h = layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
        if last:
            x = x[:, T - 1 :, :]
        x = x + _attention(P, f"{p}.attn", h, bb.heads, last_only=last)
        h = layer_norm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
        x = x + (h @ P[f"{p}.ffn.w1"] + P[f"{p}.ffn.b1"]).gelu() @ P[f"{p}.ffn.w2"] + P[f"{p}.ffn.b2"]
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation after layer {i}")
    x = layer_norm(x, P["ln_f.gain"], P["ln_f.bias"])
    return x[:, -1, :]


def assemble_input(prefix_rows: Tensor | None, E_his: Tensor | None, E_cur: Tensor | None, max_seq: int | None = None) -> Tensor:
    """prefix ‖ history ‖ current along the sequence axis; prefix rows broadcast over the batch."""
    parts = [t for t in (E_his, E_cur) if t is not None]
    if not parts:
        raise ValueError("at least one trajectory branch is required")
    batch = parts[0].shape[0]
    if prefix_rows is not None and prefix_rows.shape[0] > 0:
        d = prefix_rows.shape[-1]
        ones = Tensor(np.ones((batch, 1, 1), dtype=prefix_rows.data.dtype))
        parts.insert(0, ones * prefix_rows.reshape(1, -1, d))
    seq = concat(parts, axis=1)
    if max_seq is not None and seq.shape[1] > max_seq:
        raise ValueError(f"sequence of {seq.shape[1]} rows exceeds max_seq={max_seq}")
    return seq


def branch_embeddings(P: dict, config: ModelConfig, desc_tokens: np.ndarray, batch: EncodedPairs):
    """Final (content + POI) embeddings of the active branches."""
    fc = config.features
    use_h = config.branches in ("both", "history")
    use_c = config.branches in ("both", "current")
    freq_h = batch.freq[batch.hist_loc] if fc.poi_mode == "linear" else None
    freq_c = batch.freq[batch.cur_loc] if fc.poi_mode == "linear" else None
    con_h = con_c = None
    if use_h:
        con_h = record_segments(P, fc, batch.hist_xy, batch.hist_hour, batch.hist_day, batch.hist_dur, freq_h)
    if use_c:
        con_c = record_segments(P, fc, batch.cur_xy, batch.cur_hour, batch.cur_day, batch.cur_dur, freq_c)
    if use_h:
        con_h = mlp(P, "feat.proj_history", con_h)
    if use_c:
        con_c = mlp(P, "feat.proj_current", con_c)
    poi_h = poi_c = None
    if fc.poi_mode == "llm":
        used = np.unique(np.concatenate([batch.hist_loc.ravel(), batch.cur_loc.ravel()]))
        dtype = P["token_table"].data.dtype
        loc_emb = location_poi_embeddings(P, Tensor(batch.freq[used].astype(dtype)), desc_tokens)
        if use_h:
            poi_h = mlp(P, "poi.head_history", take_rows(loc_emb, np.searchsorted(used, batch.hist_loc)))
        if use_c:
            poi_c = mlp(P, "poi.head_current", take_rows(loc_emb, np.searchsorted(used, batch.cur_loc)))
    E_his = compose_final(con_h, poi_h) if use_h else None
    E_cur = compose_final(con_c, poi_c) if use_c else None
    return E_his, E_cur


def predict_normalized(P: dict, state: ModelState, batch: EncodedPairs) -> Tensor:
    config = state.config
    E_his, E_cur = branch_embeddings(P, config, state.desc_tokens, batch)
    tokens = config.prompt_tokens
    prefix = take_rows(P["token_table"], tokens) if len(tokens) else None
    seq = assemble_input(prefix, E_his, E_cur, config.backbone.max_seq)
    v_o = transformer(P, config.backbone, seq)
    return mlp(P, "head", v_o)


def forward(state: ModelState, seq) -> np.ndarray:
    """Final-position representation for a single (T, d_model) input sequence."""
    P = state.tensors()
    seq = np.asarray(seq, dtype=state.params["pos_table"].dtype)
    return transformer(P, state.config.backbone, Tensor(seq[None])).data[0]


def distance_loss(xy_norm: Tensor, batch: EncodedPairs) -> Tensor:
    """Mean Euclidean distance in meters after denormalizing predictions."""
    dtype = xy_norm.data.dtype
    xy = xy_norm * batch.std.astype(dtype) + batch.mean.astype(dtype)
    diff = xy - batch.target_xy.astype(dtype)
    # tiny floor keeps the gradient finite at an exact hit
    return ((diff * diff).sum(axis=-1) + 1e-12).sqrt().mean()


def loss(xy_o, truth) -> float:
    """Euclidean distance in meters between predicted and true Mercator points."""
    return float(np.hypot(truth[0] - xy_o[0], truth[1] - xy_o[1]))


def predict_coords(state: ModelState, batch: EncodedPairs) -> np.ndarray:
    """Denormalized Mercator predictions (n, 2) for every pair in ``batch``."""
    out = predict_normalized(state.tensors(), state, batch).data.astype(float)
    return out * batch.std + batch.mean


def predict_in_chunks(state: ModelState, batch: EncodedPairs, chunk: int = 256, normalized: bool = False) -> np.ndarray:
    outs = []
    P = state.tensors()
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        outs.append(predict_normalized(P, state, part).data.astype(float))
    out = np.concatenate(outs) if outs else np.zeros((0, 2))
    return out if normalized else out * batch.std + batch.mean


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    max_steps: int | None = None
    eval_every: int | None = None  # steps between validation checks; default one epoch
    time_budget_s: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, names, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (params[name] - update).astype(params[name].dtype)


def gradients(state: ModelState, batch: EncodedPairs) -> tuple:
    """(loss, {name: grad}) with exact zeros for frozen parameters."""
    P = state.tensors(grad=True)
    total = distance_loss(predict_normalized(P, state, batch), batch)
    total.backward()
    grads = {}
    for name, t in P.items():
        if t.grad is None:
            grads[name] = np.zeros_like(state.params[name])
        else:
            grads[name] = t.grad
    return float(total.data), grads


def evaluate_loss(state: ModelState, batch: EncodedPairs, chunk: int = 512) -> float:
    if len(batch) == 0:
        return float("nan")
    pred = predict_in_chunks(state, batch, chunk)
    return float(np.mean(np.hypot(*(pred - batch.target_xy).T)))


@dataclass
class TrainResult:
    state: ModelState
    train_loss: list
    val_loss: list
    step_losses: list
    steps: int
    stopped: str


def train(state: ModelState, train_data: EncodedPairs, val_data: EncodedPairs | None = None, schedule: Schedule = Schedule(), seed: int = 0) -> TrainResult:
    """Adam on the trainable set only, early-stopped on validation loss.

    Returns the best validation-loss parameters (or the final ones without a
    validation set). Frozen parameters are never written.
    """
    if len(train_data) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(seed)
    params = dict(state.params)
    names = sorted(state.trainable)
    opt = Adam(names, params, schedule.lr, schedule.beta1, schedule.beta2, schedule.eps)
    work = replace(state, params=params)
    n = len(train_data)
    steps_per_epoch = max(1, math.ceil(n / schedule.batch_size))
    eval_every = schedule.eval_every or steps_per_epoch
    best = (math.inf, dict(params))
    bad = 0
    step = 0
    train_curve, val_curve, step_losses = [], [], []
    window: list = []
    stopped = "max_epochs"
    t0 = time.perf_counter()
    done = False
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            batch = train_data.take(order[start : start + schedule.batch_size])
            value, grads = gradients(work, batch)
            if not math.isfinite(value):
                raise NumericError(f"loss became non-finite at step {step}")
            if schedule.lr != 0:
                opt.step(params, {k: grads[k] for k in names})
            step += 1
            step_losses.append(value)
            window.append(value)
            if step % eval_every == 0:
                train_curve.append(float(np.mean(window)))
                window = []
                if val_data is not None and len(val_data):
                    val = evaluate_loss(work, val_data)
                    val_curve.append(val)
                    if val < best[0]:
                        best = (val, dict(params))
                        bad = 0
                    else:
                        bad += 1
                        if bad >= schedule.patience:
                            stopped, done = "early_stop", True
                logger.info("step %d train %.1f m val %s", step, train_curve[-1], val_curve[-1] if val_curve else "-")
            if schedule.max_steps is not None and step >= schedule.max_steps:
                stopped, done = "max_steps", True
            if schedule.time_budget_s is not None and time.perf_counter() - t0 > schedule.time_budget_s:
                stopped, done = "time_budget", True
            if done:
                break
        if done:
            break
    if window:
        train_curve.append(float(np.mean(window)))
    final = best[1] if val_curve else params
    if val_curve and val_data is not None and stopped != "early_stop":
        # include the tail after the last evaluation
        tail = evaluate_loss(work, val_data)
        if tail < best[0]:
            final = params
    # frozen tensors are passed through by reference from the input state
    for name in state.frozen:
        final[name] = state.params[name]
    trained = replace(state, params=dict(final))
    return TrainResult(trained, train_curve, val_curve, step_losses, step, stopped)


# -- gradient check -----------------------------------------------------------


@dataclass
class GradCheckReport:
    checked: list  # (name, index, analytic, numeric, rel_error)
    failures: list
    frozen_nonzero: list
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.failures and not self.frozen_nonzero

    def summary(self) -> str:
        lines = [f"gradcheck: {len(self.checked)} entries, {len(self.failures)} failures, tolerance {self.tolerance:g}"]
        for name, idx, a, num, rel in self.failures:
            lines.append(f"  FAIL {name}{list(idx)} analytic={a:.6e} numeric={num:.6e} rel={rel:.2e}")
        for name in self.frozen_nonzero:
            lines.append(f"  FAIL frozen parameter {name} has a nonzero gradient")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(state: ModelState, batch: EncodedPairs, epsilon: float = 1e-5, tolerance: float = 1e-4, samples_per_param: int = 3, seed: int = 0, names=None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences in float64."""
    state = state.astype(np.float64)
    _, grads = gradients(state, batch)
    frozen_nonzero = [n for n in sorted(state.frozen) if np.any(grads[n] != 0)]
    rng = np.random.default_rng(seed)
    checked, failures = [], []
    for name in sorted(names or state.trainable):
        arr = state.params[name]
        for flat in rng.choice(arr.size, size=min(samples_per_param, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = float(distance_loss(predict_normalized(state.tensors(), state, batch), batch).data)
            arr[idx] = orig - epsilon
            down = float(distance_loss(predict_normalized(state.tensors(), state, batch), batch).data)
            arr[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(grads[name][idx])
            rel = relative_error(analytic, numeric)
            entry = (name, tuple(int(i) for i in idx), analytic, numeric, rel)
            checked.append(entry)
            if rel > tolerance:
                failures.append(entry)
    return GradCheckReport(checked, failures, frozen_nonzero, tolerance)


# -- synthetic pre-training -----------------------------------------------------


def synthetic_pretrain(state: ModelState, seed: int = 0, steps: int = 200, batch: int = 32, length: int = 24, lr: float = 3e-3) -> None:
    """Fit the core blocks to a token-copy task before they are frozen.

    Sequences are random token walks; the target is the token-table row of
    the token that occurred three positions before the end, which rewards
    attention that looks back along the sequence.
    """
    rng = np.random.default_rng(seed + 7919)
    bb = state.config.backbone
    core = sorted(n for n in state.params if n.startswith(("blocks.", "pos_table", "ln_f.")))
    params = state.params
    opt = Adam(core, params, lr, 0.9, 0.999, 1e-8)
    vocab = min(state.config.vocab_size, 512)
    length = min(length, bb.max_seq)
    for _ in range(steps):
        toks = rng.integers(1, vocab + 1, size=(batch, length))
        P = {n: Tensor(v, requires_grad=n in core) for n, v in params.items()}
        seq = take_rows(Tensor(params["token_table"]), toks)
        out = transformer(P, bb, seq)
        target = params["token_table"][toks[:, -3]]
        diff = out - Tensor(target)
        obj = (diff * diff).sum(axis=-1).mean()
        obj.backward()
        opt.step(params, {n: P[n].grad for n in core if P[n].grad is not None})


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, state: ModelState, extra: dict | None = None) -> None:
    """Binary container: magic, header length, JSON header, float32 tensor payload."""
    names = sorted(state.params)
    table, offset, chunks = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(state.params[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    ns = state.norm_stats
    header = {
        "config_digest": state.config.digest(),
        "config": state.config.to_dict(),
        "tensors": table,
        "trainable": sorted(state.trainable),
        "desc_tokens": state.desc_tokens.tolist(),
        "norm_stats": None if ns is None else [ns.mean_x, ns.mean_y, ns.std_x, ns.std_y],
        "dur_bounds": None if state.dur_bounds is None else list(state.dur_bounds),
        "prompt_text": state.config.prompt_text,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": state.meta,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, expected_digest: str | None = None, force: bool = False):
    """Returns (state, extra). Refuses digest mismatches unless ``force``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = data[start + hlen :]
    config = ModelConfig.from_dict(header["config"])
    problems = []
    if config.digest() != header["config_digest"]:
        problems.append("stored config does not match its digest")
    if expected_digest is not None and expected_digest != header["config_digest"]:
        problems.append("config digest differs from the expected one")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        problems.append("tensor payload hash mismatch")
    if problems and not force:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    ns = header["norm_stats"]
    state = ModelState(
        config=config,
        params=params,
        trainable=frozenset(header["trainable"]),
        desc_tokens=np.array(header["desc_tokens"], dtype=np.int64).reshape(-1, config.desc_length),
        norm_stats=None if ns is None else NormStats(*ns),
        dur_bounds=None if header["dur_bounds"] is None else tuple(header["dur_bounds"]),
        meta=header.get("meta", {}),
    )
    return state, header.get("extra", {})
