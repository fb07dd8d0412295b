"""Adam, learning-rate schedule, early-stopped training and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import MinMaxSpec, STTensor, WindowSet, apply_minmax, chronological_split, denormalize_values, \
    minmax_normalize, nonnegative_offset, window
from .graph import RegionGraph, diffusion_operators
from .itcn import DropoutStreams
from .metrics import MetricsReport, build_report, denormalize_forecast, with_floor_covariance
from .model import ModelConfig, Forecaster, build_variant, head_kind, supports_for

log = logging.getLogger(__name__)

MAGIC = b"UQST"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr0: float = 1e-3
    decay: float = 5e-4
    decay_every: int = 10
    decay_mode: str = "subtract"  # or "multiply": lr0 * decay ** k
    lr_floor: float = 1e-5
    patience: int = 50
    max_epochs: int = 200
    seed: int = 0
    variant: str = "full"
    dist: str = "gaussian"
    t: int = 12
    T: int = 1
    clip_norm: float | None = 5.0

    def __post_init__(self):
        for name in ("batch_size", "decay_every", "patience", "t", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.lr0 <= 0 or self.lr_floor <= 0 or self.decay < 0:
            raise ValueError("learning rates must be positive")
        if self.decay_mode not in ("subtract", "multiply"):
            raise ValueError(f"unknown decay mode {self.decay_mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        head_kind(self.variant, self.dist)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // cfg.decay_every
    if cfg.decay_mode == "subtract":
        lr = cfg.lr0 - cfg.decay * k
    else:
        lr = cfg.lr0 * cfg.decay ** k
    return max(lr, cfg.lr_floor)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params[name].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- data preparation

@dataclass
class Prepared:
    """Normalized windows for the three chronological blocks plus everything needed to undo scaling."""
    train: WindowSet
    val: WindowSet
    test: WindowSet
    spec: MinMaxSpec
    variable_names: tuple
    supports: np.ndarray
    graph: RegionGraph


def prepare(tensor: STTensor, graph: RegionGraph, t: int = 12, T: int = 1, cheb_order: int = 2,
            dist: str = "gaussian", per: str = "region_variable", spec: MinMaxSpec | None = None) -> Prepared:
    """Split 8:1:1, fit min/max on the training block (unless ``spec`` is given), window each block."""
    if graph.n_regions != tensor.shape[0]:
        raise ValueError(f"graph has {graph.n_regions} regions, data has {tensor.shape[0]}")
    tr, va, te = chronological_split(tensor)
    if spec is None:
        offset = nonnegative_offset(tr) if dist == "negbinom" else None
        _, spec = minmax_normalize(tr, per=per, offset=offset)
    blocks = [window(apply_minmax(b, spec), t, T) for b in (tr, va, te)]
    sup = supports_for(diffusion_operators(graph), cheb_order)
    return Prepared(*blocks, spec, tuple(tensor.variable_names), sup, graph)


# ---------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    params: dict  # name -> float64 array, model order
    config: dict
    spec: MinMaxSpec | None = None
    best_val_loss: float = float("inf")
    epoch: int = 0
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", self.version, len(self.params)))
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
        trailer = json.dumps({
            "config": self.config,
            "minmax": self.spec.to_dict() if self.spec is not None else None,
            "best_val_loss": _json_float(self.best_val_loss),
            "epoch": self.epoch,
        }, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<Q", len(trailer)))
        buf.write(trailer)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:4]) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = 4

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, view, pos)
            pos += struct.calcsize(fmt)
            return vals

        version, count = take("<II")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (n,) = take("<I")
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = take("<I")
            shape = take(f"<{rank}Q")
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * size
        (n,) = take("<Q")
        trailer = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
        if pos + n != len(data):
            raise ValueError("trailing bytes after checkpoint trailer")
        spec = MinMaxSpec.from_dict(trailer["minmax"]) if trailer["minmax"] is not None else None
        best = trailer["best_val_loss"]
        return cls(params, trailer["config"], spec, float("inf") if best is None else float(best),
                   int(trailer["epoch"]), version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self) -> Forecaster:
        c = self.config
        train_cfg = TrainConfig.from_dict(c["train"])
        model_cfg = ModelConfig.from_dict(c["model"])
        supports = np.asarray(c["supports"], dtype=np.float64)
        model = build_variant(train_cfg.variant, train_cfg.dist, model_cfg, len(c["variables"]),
                              train_cfg.t, train_cfg.T, supports, train_cfg.seed)
        model.load_arrays(self.params)
        return model


def _json_float(x: float):
    return None if not np.isfinite(x) else float(x)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    model: Forecaster
    initial_val_loss: float
    initial_train_loss: float


def evaluate_loss(model: Forecaster, windows: WindowSet, batch_size: int = 256) -> float:
    """Sample-weighted mean objective in eval mode (no dropout)."""
    total = 0.0
    for i in range(0, len(windows), batch_size):
        X, Y = windows.inputs[i:i + batch_size], windows.targets[i:i + batch_size]
        total += float(model.loss(X, Y).data) * len(X)
    return total / len(windows)


def _train_epoch(model: Forecaster, data: WindowSet, cfg: TrainConfig, state: AdamState, epoch: int, lr: float) -> float:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    params = model.params
    for p in params.values():
        p.requires_grad = True
    total = 0.0
    for b, i in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[i:i + cfg.batch_size]
        streams = DropoutStreams(cfg.seed, epoch, idx) if model.cfg.dropout > 0 else None
        with dc.Tape() as tape:
            loss = model.loss(data.inputs[idx], data.targets[idx], streams)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"loss became non-finite at epoch {epoch}, batch {b}")
        tape.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        clip_global_norm(grads, cfg.clip_norm)
        try:
            adam_step(params, grads, state, lr)
        except FloatingPointError as err:
            raise FloatingPointError(f"{err} at epoch {epoch}, batch {b}") from None
        for p in params.values():
            p.zero_grad()
        total += value * len(idx)
    for p in params.values():
        p.requires_grad = False
    return total / len(order)


def run_config(prep: Prepared, cfg: TrainConfig, model_cfg: ModelConfig) -> dict:
    return {
        "train": cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "variables": list(prep.variable_names),
        "supports": prep.supports.tolist(),
    }


def train(cfg: TrainConfig, prep: Prepared, model_cfg: ModelConfig = ModelConfig(),
          on_epoch=None) -> TrainResult:
    """Early-stopped training; returns the best-validation checkpoint and per-epoch history."""
    if len(prep.train) == 0 or len(prep.val) == 0:
        raise ValueError("training and validation blocks must each yield at least one window")
    if prep.supports.shape[1] != model_cfg.cheb_order:
        raise ValueError("prepared supports do not match the configured Chebyshev order")
    model = build_variant(cfg.variant, cfg.dist, model_cfg, len(prep.variable_names), cfg.t, cfg.T,
                          prep.supports, cfg.seed)
    config = run_config(prep, cfg, model_cfg)
    best_val = init_val = evaluate_loss(model, prep.val)
    init_train = evaluate_loss(model, prep.train)
    best = Checkpoint({k: v.copy() for k, v in model.state_arrays().items()}, config, prep.spec, best_val, 0)
    state = AdamState()
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        train_loss = _train_epoch(model, prep.train, cfg, state, epoch, lr)
        val_loss = evaluate_loss(model, prep.val)
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if on_epoch is not None:
            on_epoch(history[-1])
        if val_loss < best_val:
            best_val, stale = val_loss, 0
            best = Checkpoint({k: v.copy() for k, v in model.state_arrays().items()}, config, prep.spec,
                              best_val, epoch + 1)
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %.6g)", epoch, best_val)
                break
    model.load_arrays(best.params)
    return TrainResult(best, history, model, init_val, init_train)


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.6g}", f"{r.val_loss:.6g}", f"{r.lr:.6g}"])


# ---------------------------------------------------------------- evaluation

def targets_tn(windows: WindowSet) -> np.ndarray:
    """Window targets reordered to the forecast layout (S, T, N, M)."""
    return np.transpose(windows.targets, (0, 3, 1, 2))


def forecast_windows(model: Forecaster, windows: WindowSet, spec: MinMaxSpec):
    """(normalized forecast, denormalized forecast, denormalized truth)."""
    f = with_floor_covariance(model.predict(windows.inputs), model.cfg.v_min)
    truth = targets_tn(windows)
    truth_d = denormalize_values(truth, spec, var_axis=3, region_axis=2)
    return f, denormalize_forecast(f, spec), truth_d


def evaluate_model(model: Forecaster, windows: WindowSet, spec: MinMaxSpec, variable_names,
                   selective: bool = False, score: str = "logdet") -> MetricsReport:
    f, fd, truth = forecast_windows(model, windows, spec)
    fd.variable_names = list(variable_names)
    return build_report(fd, truth, variable_names, selective, score, score_sigma=f.sigma)
