"""Adam training loop with cosine learning-rate decay and exact-resume checkpoints.

Determinism contract: runs are a pure function of (bundle, config).  Batch
order is drawn from a counter-based generator keyed by (seed, epoch), so a
resumed run re-derives every remaining epoch's randomness without any
generator state in the checkpoint.  Checkpoints store raw float64 parameter
and optimizer blocks, making stop-and-resume bitwise identical to an
uninterrupted run.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import Bundle
from .config import TrainConfig, config_hash
from .errors import ConfigError, DataError, FormatError, NumericalError, TruncationError
from .hierarchy import ModelParams
from .objective import Gradients, batch_loss_and_grads

__all__ = [
    "CHECKPOINT_MAGIC",
    "Adam",
    "EpochRecord",
    "TrainResult",
    "TrainState",
    "cosine_lr",
    "epoch_rng",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

CHECKPOINT_MAGIC = b"MSOODCK1"
CHECKPOINT_VERSION = 1
_PARAM_NAMES = ("w", "b0", "b2")


def init_params(d: int, num_classes: int) -> ModelParams:
    """Zero initialization: the adapter starts as the identity mapping."""
    return ModelParams.zeros(d, num_classes)


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 toward zero at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Counter-based generator for one epoch, independent of history."""
    return np.random.Generator(np.random.Philox(key=[seed, epoch]))


class Adam:
    """Adam with bias correction, applied in place to the model parameters."""

    def __init__(self, cfg: TrainConfig, params: ModelParams) -> None:
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.t = 0
        self.m = {name: np.zeros_like(getattr(params, name)) for name in _PARAM_NAMES}
        self.v = {name: np.zeros_like(getattr(params, name)) for name in _PARAM_NAMES}

    def update(self, params: ModelParams, grads: Gradients, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in _PARAM_NAMES:
            g = getattr(grads, name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p = getattr(params, name)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainState:
    """Everything a checkpoint persists."""

    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    epoch: int


@dataclass
class EpochRecord:
    """One training-log line: batch-mean losses and the epoch's first lr."""

    epoch: int
    lr: float
    l_id: float
    l_ood: float
    total: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "lr": self.lr,
                "l_id": self.l_id,
                "l_ood": self.l_ood,
                "total": self.total,
            }
        )


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    log: list[EpochRecord] = field(default_factory=list)


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig) -> None:
    """Write a checkpoint: magic, JSON header, raw float64 blocks."""
    path = Path(path)
    d, num_classes = state.params.b0.shape
    arrays: list[tuple[str, np.ndarray]] = []
    for name in _PARAM_NAMES:
        arrays.append((name, np.asarray(getattr(state.params, name), dtype=np.float64)))
    for prefix, table in (("m", state.m), ("v", state.v)):
        for name in _PARAM_NAMES:
            arrays.append((f"{prefix}_{name}", np.asarray(table[name], dtype=np.float64)))
    header = {
        "version": CHECKPOINT_VERSION,
        "d": d,
        "num_classes": num_classes,
        "epoch": state.epoch,
        "step": state.step,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    """Read a checkpoint back; blocks are restored bitwise."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise TruncationError(f"{path} is too short to be a checkpoint")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} does not start with the checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if offset + header_len > len(blob):
        raise TruncationError(f"{path} header is cut off")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has an unreadable header: {exc}") from exc
    offset += header_len
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {header.get('version')!r} in {path}"
        )
    blocks: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        name, shape = entry[0], tuple(int(s) for s in entry[1])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise TruncationError(f"{path} block {name} is cut off")
        blocks[name] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path} has {len(blob) - offset} trailing bytes")
    missing = [
        name
        for name in (*_PARAM_NAMES, *(f"m_{n}" for n in _PARAM_NAMES), *(f"v_{n}" for n in _PARAM_NAMES))
        if name not in blocks
    ]
    if missing:
        raise FormatError(f"{path} is missing blocks: {missing}")
    cfg = TrainConfig.from_dict(header["config"])
    params = ModelParams(w=blocks["w"], b0=blocks["b0"], b2=blocks["b2"])
    state = TrainState(
        params=params,
        m={name: blocks[f"m_{name}"] for name in _PARAM_NAMES},
        v={name: blocks[f"v_{name}"] for name in _PARAM_NAMES},
        step=int(header["step"]),
        epoch=int(header["epoch"]),
    )
    return state, cfg


def _labeled_items(bundle: Bundle):
    labeled = [item for item in bundle.items if item.label >= 0]
    if not labeled:
        raise DataError("bundle has no labeled items to train on")
    counts = np.zeros(bundle.manifest.num_classes, dtype=int)
    for item in labeled:
        counts[item.label] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        names = [bundle.manifest.class_names[c] for c in empty]
        raise DataError(f"classes with no labeled items: {names}")
    return labeled


def train(
    bundle: Bundle,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    stop_after: int | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Train the adapter and text biases on a bundle's labeled items.

    ``stop_after`` ends the run after that many epochs (counting from zero)
    while keeping the full schedule, so a checkpoint written there and
    resumed with ``resume`` reproduces the uninterrupted run bitwise.
    """
    manifest = bundle.manifest
    if cfg.n != manifest.n:
        raise ConfigError(
            f"config n={cfg.n} does not match the bundle's n={manifest.n}"
        )
    labeled = _labeled_items(bundle)
    steps_per_epoch = math.ceil(len(labeled) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    if resume is not None:
        state, saved_cfg = load_checkpoint(resume)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ConfigError("checkpoint config does not match the requested config")
        if state.params.b0.shape != (manifest.d, manifest.num_classes):
            raise ConfigError(
                f"checkpoint shape {state.params.b0.shape} does not match bundle "
                f"({manifest.d}, {manifest.num_classes})"
            )
        params = state.params
        adam = Adam(cfg, params)
        adam.t = state.step
        adam.m = state.m
        adam.v = state.v
        start_epoch = state.epoch
    else:
        params = init_params(manifest.d, manifest.num_classes)
        adam = Adam(cfg, params)
        start_epoch = 0

    end_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    t_base = bundle.text.t_base
    log: list[EpochRecord] = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(start_epoch, end_epoch):
            rng = epoch_rng(cfg.seed, epoch)
            perm = rng.permutation(len(labeled))
            sums = np.zeros(3)
            first_lr = 0.0
            for batch_index in range(steps_per_epoch):
                lo = batch_index * cfg.batch_size
                rows = perm[lo : lo + cfg.batch_size]
                batch = [labeled[int(r)] for r in rows]
                global_step = epoch * steps_per_epoch + batch_index
                lr = cosine_lr(cfg.lr, global_step, total_steps)
                if batch_index == 0:
                    first_lr = lr
                breakdown, grads, _ = batch_loss_and_grads(
                    batch, t_base, params, cfg, rng=rng
                )
                finite = (
                    math.isfinite(breakdown.total)
                    and np.isfinite(grads.w).all()
                    and np.isfinite(grads.b0).all()
                    and np.isfinite(grads.b2).all()
                )
                if not finite:
                    ids = [item.item_id for item in batch]
                    raise NumericalError(
                        f"non-finite loss or gradient at epoch {epoch}, "
                        f"step {batch_index}, items {ids}"
                    )
                adam.update(params, grads, lr)
                sums += (breakdown.l_id, breakdown.l_ood, breakdown.total)
            means = sums / steps_per_epoch
            record = EpochRecord(
                epoch=epoch,
                lr=first_lr,
                l_id=float(means[0]),
                l_ood=float(means[1]),
                total=float(means[2]),
            )
            log.append(record)
            if log_file is not None:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    state = TrainState(
        params=params, m=adam.m, v=adam.v, step=adam.t, epoch=end_epoch
    )
    return TrainResult(params=params, state=state, log=log)
