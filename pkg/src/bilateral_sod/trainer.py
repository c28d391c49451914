"""Training loop, learning-rate schedule, evaluation and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import SGD, ParamGroup, Tensor, default_dtype, no_grad
from .autograd import functional as F
from .data import AugmentConfig, Sample, SampleBatch, collate, iterate_batches, resize_array
from .decoder import aggregate_inference, select_branch
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, evaluate_arrays
from .model import BilateralSOD, ModelConfig

LOG_COLUMNS = ("step", "lr", "X", "total", "boosted", "aux_sum")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    detail_input_size: int = 64
    semantic_input_size: int = 16
    batch_size: int = 4
    epochs: int = 32
    steps: int = 0
    max_lr_backbone: float = 0.004
    head_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.1
    n_branches: int = 4
    seed: int = 0
    channels: int = 64
    detail_channels: tuple[int, ...] = (16, 32, 64, 128)
    semantic_dims: tuple[int, ...] = (32, 64, 128, 256)
    backbone: str = "bilateral"
    fusion: str = "af"
    boosting: bool = True
    synchronized: bool = False
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        self.detail_channels = tuple(self.detail_channels)
        self.semantic_dims = tuple(self.semantic_dims)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.max_lr_backbone <= 0:
            raise ConfigError(f"max_lr_backbone must be positive, got {self.max_lr_backbone}")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(detail_input_size=self.detail_input_size, semantic_input_size=self.semantic_input_size,
                           detail_channels=self.detail_channels, semantic_dims=self.semantic_dims,
                           channels=self.channels, n_branches=self.n_branches, backbone=self.backbone,
                           fusion=self.fusion)

    def total_steps(self, n_samples: int) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * max(1, n_samples // self.batch_size)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- config parsing

def _coerce(key: str, raw: str, kind):
    kind = str(kind)
    if "tuple" in kind:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw, _FIELD_TYPES[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def coerce_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _coerce(key, str(raw), _FIELD_TYPES[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out


def load_config(path: Optional[str | os.PathLike] = None, overrides: Optional[dict] = None) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return TrainConfig(**values)


# ---------------------------------------------------------------- schedule

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> tuple[float, float]:
    """Linear warmup from 0 over ``warmup_fraction`` of the run, then cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.max_lr_backbone
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        lr = peak * step / warm
    else:
        progress = (step - warm) / (total_steps - warm)
        lr = peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    return lr, lr * cfg.head_lr_multiplier


def build_optimizer(model: BilateralSOD, cfg: TrainConfig) -> SGD:
    return SGD([ParamGroup("backbone", list(model.backbone_parameters()), cfg.max_lr_backbone),
                ParamGroup("heads", list(model.head_parameters()), cfg.max_lr_backbone * cfg.head_lr_multiplier)],
               momentum=cfg.momentum, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------- one step

@dataclass
class StepResult:
    loss: LossBreakdown
    selected: int


def train_step(batch: SampleBatch, model: BilateralSOD, opt: SGD, rng: np.random.Generator,
               lrs: Optional[dict[str, float]] = None, boosting: bool = True,
               synchronized: bool = False) -> StepResult:
    """Forward all branches, draw X, build the loss, back-propagate and update."""
    model.train()
    out = model(Tensor(batch.images, dtype=batch.images.dtype))
    out.preds.selected = select_branch(rng, out.preds.n)
    loss = total_loss(out.aux_logits, out.preds, batch.masks, boosting=boosting, synchronized=synchronized)
    if not np.isfinite(loss.total.data).all():
        raise NonFiniteLossError(f"non-finite loss at selected branch {out.preds.selected}: {loss.components()}")
    loss.total.backward()
    opt.step(lrs)
    return StepResult(loss, out.preds.selected)


# ---------------------------------------------------------------- inference and evaluation

def predict(model: BilateralSOD, images: np.ndarray, branches: bool = False):
    """Aggregated saliency maps for a normalised (B, 3, H, W) batch; optionally per-branch maps too."""
    model.eval()
    with no_grad():
        out = model(Tensor(images, dtype=images.dtype))
    maps = aggregate_inference(out.preds)[:, 0]
    if branches:
        return maps, [F.sigmoid_array(p.data[:, 0].astype(np.float64)) for p in out.preds.logits]
    return maps


def evaluate(model: BilateralSOD, samples: Sequence[Sample], size: int, batch_size: int = 8,
             dtype=np.float32, **kwargs) -> EvalReport:
    """Score the aggregated prediction of every sample against its mask (at the mask's resolution)."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    pairs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        maps = predict(model, collate(chunk, size, dtype).images)
        for sample, p in zip(chunk, maps):
            if p.shape != sample.mask.shape:
                p = resize_array(p, sample.mask.shape)
            pairs.append((sample.id, p, sample.mask))
    return evaluate_arrays(pairs, **kwargs)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"BSODCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _records(model: BilateralSOD, opt: Optional[SGD]):
    for name, p in model.named_parameters():
        yield "param", name, p.data
    for name, b in model.named_buffers():
        yield "buffer", name, b
    if opt is not None:
        for name in sorted(opt.velocity):
            yield "velocity", name, opt.velocity[name]


def checkpoint_bytes(model: BilateralSOD, opt: Optional[SGD], step: int, rng: Optional[np.random.Generator],
                     config: Optional[dict] = None) -> bytes:
    table, chunks, offset = [], [], 0
    for kind, name, array in _records(model, opt):
        array = np.asarray(array)
        dtype = "<f8" if array.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        table.append({"kind": kind, "name": name, "shape": list(array.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"step": int(step), "records": table, "config": config or {},
              "rng": rng.bit_generator.state if rng is not None else None}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def save_checkpoint(path: str | os.PathLike, model: BilateralSOD, opt: Optional[SGD], step: int,
                    rng: Optional[np.random.Generator], config: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, opt, step, rng, config))


@dataclass
class CheckpointData:
    step: int
    config: dict
    rng_state: Optional[dict]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def read_checkpoint(path: str | os.PathLike) -> CheckpointData:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file ({len(buf)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    start = _PREFIX.size
    if start + header_len > len(buf):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[start:start + header_len])
        records = header["records"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(buf)[start + header_len:]
    out = CheckpointData(int(header["step"]), header.get("config", {}), header.get("rng"))
    targets = {"param": out.params, "buffer": out.buffers, "velocity": out.velocity}
    for rec in records:
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at record {rec['name']!r}")
        array = np.frombuffer(payload[rec["offset"]:end], dtype=rec["dtype"]).reshape(rec["shape"])
        targets[rec["kind"]][rec["name"]] = array.astype(array.dtype.newbyteorder("="))
    return out


def load_checkpoint(path: str | os.PathLike, model: BilateralSOD, opt: Optional[SGD] = None,
                    rng: Optional[np.random.Generator] = None) -> CheckpointData:
    """Restore parameters, buffers, optimizer velocity and RNG state in place."""
    data = read_checkpoint(path)
    try:
        model.load_state_dict({**data.params, **data.buffers})
    except KeyError as exc:
        raise CheckpointError(f"{path}: {exc.args[0]}") from None
    if opt is not None:
        known = {name for name, _ in opt.named_parameters()}
        unknown = sorted(set(data.velocity) - known)
        if unknown:
            raise CheckpointError(f"{path}: unknown parameter names in optimizer state: {unknown[:5]}")
        params = dict(opt.named_parameters())
        opt.velocity = {name: v.astype(params[name].dtype, copy=True) for name, v in data.velocity.items()}
    if rng is not None and data.rng_state is not None:
        rng.bit_generator.state = data.rng_state
    return data


def model_from_checkpoint(path: str | os.PathLike) -> tuple[BilateralSOD, TrainConfig]:
    data = read_checkpoint(path)
    cfg = TrainConfig(**data.config) if data.config else TrainConfig()
    model = BilateralSOD(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(path, model)
    return model, cfg


# ---------------------------------------------------------------- the loop

class Trainer:
    """Owns the model, optimizer, branch-selection RNG and step counter.

    Batches are a pure function of ``(seed, epoch)``, so a run restored from a
    checkpoint continues on exactly the batches an uninterrupted run would see.
    """

    def __init__(self, cfg: TrainConfig, samples: Sequence[Sample], dtype=np.float32):
        if not samples:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.samples = list(samples)
        self.dtype = np.dtype(dtype)
        with default_dtype(self.dtype):
            self.model = BilateralSOD(cfg.model_config(), seed=cfg.seed)
        self.opt = build_optimizer(self.model, cfg)
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.step = 0
        self.total_steps = cfg.total_steps(len(self.samples))
        self.history: list[dict] = []
        self._epoch_cache: tuple[int, list[SampleBatch]] = (-1, [])

    @property
    def batches_per_epoch(self) -> int:
        return max(1, len(self.samples) // self.cfg.batch_size)

    def batch_for(self, step: int) -> SampleBatch:
        epoch, index = divmod(step, self.batches_per_epoch)
        if self._epoch_cache[0] != epoch:
            aug = AugmentConfig(enabled=self.cfg.augment)
            batches = list(iterate_batches(self.samples, self.cfg.batch_size, self.cfg.seed, epoch,
                                           self.cfg.detail_input_size, aug, self.dtype))
            self._epoch_cache = (epoch, batches)
        return self._epoch_cache[1][index]

    def run_step(self) -> dict:
        lr_b, lr_h = lr_at(self.step, self.total_steps, self.cfg)
        result = train_step(self.batch_for(self.step), self.model, self.opt, self.rng,
                            {"backbone": lr_b, "heads": lr_h}, boosting=self.cfg.boosting,
                            synchronized=self.cfg.synchronized)
        row = {"step": self.step, "lr": lr_b, "X": result.selected, "total": result.loss.total_value,
               "boosted": result.loss.boosted, "aux_sum": result.loss.aux_sum}
        self.history.append(row)
        self.step += 1
        return row

    def run(self, steps: Optional[int] = None, out_dir: Optional[str | os.PathLike] = None,
            callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
        """Train until ``steps`` more steps are done (default: to the end of the schedule)."""
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        log_file = writer = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / "train_log.csv"
            new = not log_path.exists() or self.step == 0
            log_file = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
            if new:
                writer.writeheader()
        try:
            while self.step < end:
                row = self.run_step()
                if writer is not None:
                    writer.writerow({k: _fmt(v) for k, v in row.items()})
                if callback is not None:
                    callback(row)
                every = self.cfg.checkpoint_every
                if out_dir is not None and every and self.step % every == 0:
                    self.save(out_dir / f"step_{self.step:06d}.ckpt")
        finally:
            if log_file is not None:
                log_file.close()
        if out_dir is not None:
            self.save(out_dir / "final.ckpt")
        return self.history

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.model, self.opt, self.step, self.rng, self.cfg.to_dict())

    def restore(self, path: str | os.PathLike) -> None:
        data = load_checkpoint(path, self.model, self.opt, self.rng)
        self.step = data.step

    def evaluate(self, samples: Optional[Sequence[Sample]] = None, **kwargs) -> EvalReport:
        return evaluate(self.model, list(self.samples if samples is None else samples),
                        self.cfg.detail_input_size, dtype=self.dtype, **kwargs)


def _fmt(value):
    return f"{value:.10g}" if isinstance(value, float) else value
