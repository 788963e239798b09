"""Joint training of the substrate estimator and the noise predictor.

Checkpoint container (little-endian throughout)::

    b"PSYNCKPT"                8-byte magic
    uint64                     header length in bytes
    header                     UTF-8 JSON, sorted keys: format_version, step,
                               skipped, config, config_digest, rng, tensors
                               (name, dtype, shape, offset, nbytes per entry)
    payload                    raw tensor bytes, C order, in header order

All randomness is derived from (config.seed, purpose, step, subject id), so
the "rng state" stored in a checkpoint is just the seed and step counter.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import rng
from .core import DEFAULT_DELTA, DEFAULT_SIGMA_BLEND, ring_weight, smooth_mask, recompose
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    estimate_clean,
    forward_sample,
    linear_schedule,
    sample_deviation,
)
from .networks import (
    NoisePredictor,
    NoisePredictorConfig,
    SubstrateNet,
    SubstrateNetConfig,
    config_dict,
    predict_noise,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    combine,
    deviation_loss,
    diffusion_loss,
    synthesis_loss,
    total_loss,
)
from .substrate import SubstrateLossWeights, estimate_substrate, extract_deviation, substrate_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MAGIC = b"PSYNCKPT"
METRICS_HEADER = ["step", "epoch", "lr", "l_sub", "l_diff", "l_dev", "l_syn", "total"]


class CheckpointError(Exception):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite {term} at step {step}; update aborted")
        self.term = term
        self.step = step


@dataclass(frozen=True)
class ScheduleParams:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_kind: str = "large"

    def build(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end, self.sigma_kind)


def _from_dict(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise KeyError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-4
    min_learning_rate: float = 0.0
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    substrate_weights: SubstrateLossWeights = field(default_factory=SubstrateLossWeights)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    substrate_net: SubstrateNetConfig = field(default_factory=SubstrateNetConfig)
    noise_net: NoisePredictorConfig = field(default_factory=NoisePredictorConfig)
    delta: float = DEFAULT_DELTA
    sigma_blend: float = DEFAULT_SIGMA_BLEND
    normalized_losses: bool = True
    per_batch_t: bool = False
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 0
    val_every: int = 0
    val_ddim_steps: int = 8

    _NESTED = {
        "loss_weights": LossWeights,
        "substrate_weights": SubstrateLossWeights,
        "schedule": ScheduleParams,
        "substrate_net": SubstrateNetConfig,
        "noise_net": NoisePredictorConfig,
    }

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.grad_clip > 0):
            raise ValueError("learning_rate and grad_clip must be positive, weight_decay nonnegative")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.substrate_net.resolution != self.noise_net.resolution:
            raise ValueError("substrate and noise networks must share a resolution")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "f64" else torch.float32

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in self._NESTED:
                v = config_dict(v) if f.name.endswith("_net") else asdict(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise KeyError(f"unknown key(s) in train config: {', '.join(unknown)}")
        for name, sub in cls._NESTED.items():
            if name in data:
                if not isinstance(data[name], dict):
                    raise TypeError(f"train config key {name} must be a mapping")
                data[name] = _from_dict(sub, data[name], f"train.{name}")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    sub_net: SubstrateNet
    eps_net: NoisePredictor
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    step: int = 0
    skipped: int = 0


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(rng.generator(config.seed, "init").integers(2**62))
    sub_net = SubstrateNet(config.substrate_net).to(config.dtype)
    eps_net = NoisePredictor(config.noise_net).to(config.dtype)
    optimizer = _make_optimizer(config, sub_net, eps_net)
    return TrainState(config, sub_net, eps_net, optimizer, config.schedule.build())


def _make_optimizer(config, sub_net, eps_net):
    return torch.optim.AdamW(
        [{"params": list(sub_net.parameters())}, {"params": list(eps_net.parameters())}],
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        foreach=False,
    )


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 towards lr_min at ``total_steps``."""
    if total_steps <= 0:
        return lr_max
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _unpack(item, index: int):
    if hasattr(item, "x") and hasattr(item, "m"):
        return item.id, item.x, item.m, item.x_ph
    if len(item) == 4:
        return item
    x, m, x_ph = item
    return str(index), x, m, x_ph


@dataclass
class StepDraws:
    """The (t, eps) draws of one step, exposed for frozen-randomness checks."""
    t: torch.Tensor
    eps: torch.Tensor


def draw_step_noise(config: TrainConfig, step: int, ids, shape, dtype) -> StepDraws:
    T = config.schedule.T
    if config.per_batch_t:
        t = [int(rng.generator(config.seed, "t", step).integers(1, T + 1))] * len(ids)
    else:
        t = [int(rng.generator(config.seed, "t", step, sid).integers(1, T + 1)) for sid in ids]
    eps = np.stack([rng.normal(shape, config.seed, "eps", step, sid) for sid in ids])
    return StepDraws(torch.tensor(t, dtype=torch.long), torch.as_tensor(eps, dtype=dtype))


def prepare_batch(batch, config: TrainConfig):
    """Tensors (ids, x, m, x_ph, S, w_ring) for the lesion-bearing items of ``batch``."""
    items = [_unpack(item, i) for i, item in enumerate(batch)]
    kept = [it for it in items if np.asarray(it[2]).any()]
    if not kept:
        return None, len(items)
    dtype = config.dtype
    ids = [str(it[0]) for it in kept]
    x = torch.as_tensor(np.stack([np.asarray(it[1], dtype=np.float64) for it in kept]), dtype=dtype)
    m_np = np.stack([np.asarray(it[2], dtype=np.uint8) for it in kept])
    x_ph = torch.as_tensor(np.stack([np.asarray(it[3], dtype=np.float64) for it in kept]), dtype=dtype)
    S_np = smooth_mask(m_np, config.sigma_blend)
    S = torch.as_tensor(S_np, dtype=dtype)
    w_ring = torch.as_tensor(ring_weight(S_np), dtype=dtype)
    m = torch.as_tensor(m_np, dtype=dtype)
    return (ids, x, m, x_ph, S, w_ring), len(items) - len(kept)


def compute_losses(state: TrainState, prepared, draws: StepDraws, *, keep: dict | None = None):
    """Forward pass of one joint step; returns the four loss tensors.

    ``keep`` (if given) receives the intermediate fields for inspection.
    """
    cfg = state.config
    ids, x, m, x_ph, S, w_ring = prepared
    x_sub = estimate_substrate(state.sub_net, x, m)
    r0 = extract_deviation(x, x_sub, m, cfg.delta)
    r_t = forward_sample(r0, draws.t, draws.eps, state.schedule, m)
    eps_hat = predict_noise(state.eps_net, r_t, x_sub, m, draws.t)
    r0_hat = estimate_clean(r_t, eps_hat, draws.t, state.schedule, m)
    x_hat = recompose(x_sub, r0_hat, S)

    norm = cfg.normalized_losses
    l_sub = substrate_loss(x_sub, x, x_ph, m, cfg.substrate_weights, normalized=norm, per_subject=True).mean()
    l_diff = diffusion_loss(draws.eps, eps_hat, m, normalized=norm)
    l_dev = deviation_loss(r0_hat, r0, m, w_ring, cfg.loss_weights, normalized=norm)
    l_syn = synthesis_loss(x_hat, x, S, normalized=norm)
    if keep is not None:
        keep.update(x_sub=x_sub, r0=r0, r_t=r_t, eps_hat=eps_hat, r0_hat=r0_hat, x_hat=x_hat, S=S, m=m)
    return l_sub, l_diff, l_dev, l_syn


def train_step(state: TrainState, batch, lr: float | None = None, *, keep: dict | None = None):
    """One joint update on ``batch``; returns the LossBreakdown (None if every item was skipped).

    Items are SubjectRecords, (id, x, m, x_ph) or (x, m, x_ph) tuples. Items
    with an empty lesion mask are skipped and counted in ``state.skipped``.
    """
    cfg = state.config
    if not batch:
        raise ValueError("empty batch")
    prepared, n_skipped = prepare_batch(batch, cfg)
    state.skipped += n_skipped
    if prepared is None:
        state.step += 1
        return None
    ids, x = prepared[0], prepared[1]
    draws = draw_step_noise(cfg, state.step, ids, tuple(x.shape[-2:]), cfg.dtype)

    state.sub_net.train()
    state.eps_net.train()
    terms = compute_losses(state, prepared, draws, keep=keep)
    for name, value in zip(("l_sub", "l_diff", "l_dev", "l_syn"), terms):
        if not bool(torch.isfinite(value)):
            raise NonFiniteLoss(name, state.step)
    total = combine(*terms, cfg.loss_weights)

    state.optimizer.zero_grad(set_to_none=False)
    total.backward()
    params = list(state.sub_net.parameters()) + list(state.eps_net.parameters())
    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for group in state.optimizer.param_groups:
        group["lr"] = cfg.learning_rate if lr is None else lr
    state.optimizer.step()
    state.step += 1
    return total_loss(*(t.detach() for t in terms), cfg.loss_weights)


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size) if n_train else 0


def epoch_order(config: TrainConfig, epoch: int, ids) -> list:
    ids = sorted(ids)
    perm = rng.generator(config.seed, "shuffle", epoch).permutation(len(ids))
    return [ids[i] for i in perm]


def validation_l1(state: TrainState, records, ddim_steps: int | None = None) -> float:
    """Masked L1 between 8-step DDIM deviations and the subjects' extracted r0."""
    cfg = state.config
    records = [r for r in records if r.m.any()]
    if not records:
        return float("nan")
    prepared, _ = prepare_batch(records, cfg)
    ids, x, m = prepared[0], prepared[1], prepared[2]
    state.sub_net.eval()
    state.eps_net.eval()
    with torch.no_grad():
        x_sub = estimate_substrate(state.sub_net, x, m)
        r0 = extract_deviation(x, x_sub, m, cfg.delta)
        sampler = SamplerConfig("ddim", ddim_steps or cfg.val_ddim_steps, 0.0, cfg.seed)
        r_hat = sample_deviation(state.eps_net, x_sub, m, state.schedule, sampler, subject_ids=ids)
        per = (torch.abs(r_hat - r0) * m).sum(dim=(-2, -1)) / m.sum(dim=(-2, -1))
    return float(per.mean())


class MetricsLog:
    """Append-only CSV with one row per training step."""

    def __init__(self, path, resume_from_step: int | None = None):
        self.path = Path(path)
        rows = []
        if resume_from_step is not None and self.path.is_file():
            with self.path.open(newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < resume_from_step]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)

    def append(self, step: int, epoch: int, lr: float, losses: LossBreakdown) -> None:
        row = {"step": step, "epoch": epoch, "lr": repr(float(lr)),
               **{k: repr(v) for k, v in losses.as_row().items()}}
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n").writerow(row)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def train(config: TrainConfig, dataset, out_dir=None, *, state: TrainState | None = None,
          max_steps: int | None = None) -> TrainState:
    """Run the configured epoch budget over the dataset's train split.

    ``state`` resumes from a loaded checkpoint. ``max_steps`` stops early after
    that many global steps (used to emulate interrupted runs). With ``out_dir``
    the metrics log, periodic/final checkpoints and validation rows are written
    there.
    """
    train_records = dataset.split("train")
    if not train_records:
        raise ValueError("dataset has no training subjects")
    val_records = dataset.split("val")
    if state is None:
        state = init_state(config)
    elif state.config.digest() != config.digest():
        raise CheckpointError("checkpoint was written with a different train config")

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out / "metrics.csv", resume_from_step=state.step)
        if state.step == 0:
            save_checkpoint(state, out / "init.ckpt")

    by_id = {r.id: r for r in train_records}
    spe = steps_per_epoch(len(train_records), config.batch_size)
    total_steps = config.epochs * spe
    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    for epoch in range(config.epochs):
        if epoch * spe >= stop:
            break
        order = epoch_order(config, epoch, by_id)
        for b in range(spe):
            k = epoch * spe + b
            if k < state.step:
                continue
            if k >= stop:
                break
            batch = [by_id[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            lr = cosine_lr(k, total_steps, config.learning_rate, config.min_learning_rate)
            losses = train_step(state, batch, lr)
            if losses is not None and metrics is not None:
                metrics.append(k, epoch, lr, losses)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out / f"step{state.step:07d}.ckpt")
            if out is not None and config.val_every and state.step % config.val_every == 0 and val_records:
                _append_val(out / "val.csv", state.step, validation_l1(state, val_records))
    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
    return state


def _append_val(path: Path, step: int, value: float) -> None:
    new = not path.is_file()
    with path.open("a", encoding="utf-8", newline="") as fh:
        if new:
            fh.write("step,val_l1\n")
        fh.write(f"{step},{value!r}\n")


# --- checkpoint container -------------------------------------------------

def _state_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    out = [(f"sub/{k}", v) for k, v in state.sub_net.state_dict().items()]
    out += [(f"eps/{k}", v) for k, v in state.eps_net.state_dict().items()]
    opt = state.optimizer.state_dict()["state"]
    for idx in sorted(opt):
        for key in sorted(opt[idx]):
            v = opt[idx][key]
            out.append((f"opt/{idx}/{key}", v if isinstance(v, torch.Tensor) else torch.tensor(v)))
    return out


_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, tensor in _state_tensors(state):
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "skipped": state.skipped,
        "config": state.config.to_dict(),
        "config_digest": state.config.digest(),
        "schedule": state.schedule.to_dict(),
        "rng": {"seed": state.config.seed, "step": state.step},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return header, data[16 + n:]


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState; nothing is constructed until every check has passed."""
    header, payload = read_checkpoint_header(path)
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {header.get('format_version')!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    config = TrainConfig.from_dict(header["config"])
    if config.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch (corrupt header)")
    if expected_config is not None and expected_config.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the requested config")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"]).newbyteorder("="), copy=True))

    state = init_state(config)
    state.sub_net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("sub/")})
    state.eps_net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("eps/")})
    opt_state: dict = {}
    for name, v in tensors.items():
        if name.startswith("opt/"):
            _, idx, key = name.split("/")
            opt_state.setdefault(int(idx), {})[key] = v
    sd = state.optimizer.state_dict()
    sd["state"] = opt_state
    state.optimizer.load_state_dict(sd)
    state.step = int(header["step"])
    state.skipped = int(header["skipped"])
    return state
