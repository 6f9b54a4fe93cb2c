"""Self-supervised training loop: Adam, step-decay schedule, flip/crop augmentation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .ann import DT_DEFAULTS, HybridPass, NetworkConfig, hybrid_forward, init_params
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, center_crop, crop, stack
from .errors import ContractError, NumericError
from .loss import LossConfig, total_loss
from .tensor import Tensor, is_strict, strict

logger = logging.getLogger(__name__)

DT_LAMBDA = {"dt1": 10.0, "dt4": 1.0}
CURVE_HEADER = ("epoch", "iteration", "total", "photometric", "smoothness", "lr")


@dataclass
class TrainConfig:
    dt_mode: str = "dt1"
    n_frames: int = 5
    smooth_weight: float = 10.0
    threshold: float = 0.75
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    crop_size: int = 256
    flip_prob: float = 0.5
    base_width: int = 64
    hybrid_variant: str = "standard"
    max_iterations: int = 0
    charbonnier_r: float = 0.45
    charbonnier_eta: float = 1e-3
    snn_init_gain: float = 1.0
    strict: bool = True

    def __post_init__(self) -> None:
        if self.dt_mode not in DT_DEFAULTS:
            raise ContractError(f"dt_mode must be one of {sorted(DT_DEFAULTS)}")
        if self.batch_size < 1 or self.epochs < 0 or self.n_frames < 1:
            raise ContractError("batch_size, n_frames must be >= 1 and epochs >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ContractError("flip_prob must lie in [0, 1]")

    @classmethod
    def for_dt(cls, dt_mode: str = "dt1", **overrides) -> "TrainConfig":
        if dt_mode not in DT_DEFAULTS:
            raise ContractError(f"dt_mode must be one of {sorted(DT_DEFAULTS)}")
        n, th = DT_DEFAULTS[dt_mode]
        kw = dict(dt_mode=dt_mode, n_frames=n, threshold=th, smooth_weight=DT_LAMBDA[dt_mode])
        kw.update(overrides)
        return cls(**kw)

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            base_width=self.base_width,
            hybrid_variant=self.hybrid_variant,
            n_frames=self.n_frames,
            threshold=self.threshold,
            dt_mode=self.dt_mode,
        )

    def loss(self) -> LossConfig:
        return LossConfig(self.charbonnier_r, self.charbonnier_eta, self.smooth_weight)


_FILE_KEYS = {"lambda": "smooth_weight"}


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``dt_mode`` picks defaults, unknown keys are rejected."""
    known = {f.name: f for f in fields(TrainConfig)}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _FILE_KEYS.get(key, key)
        if name not in known:
            raise ContractError(f"unknown config key {key!r} (line {lineno})")
        values[name] = value
    typed = {}
    for name, raw in values.items():
        kind = known[name].type
        try:
            if kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                typed[name] = raw.lower() in ("true", "1")
            elif kind == "int":
                typed[name] = int(raw)
            elif kind == "float":
                typed[name] = float(raw)
            else:
                typed[name] = raw
        except ValueError as exc:
            raise ContractError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from exc
    dt = typed.pop("dt_mode", "dt1")
    return TrainConfig.for_dt(dt, **typed)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """Bias-corrected Adam. Parameters get fresh data arrays; old arrays are untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        if is_strict() and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * (m if m is not None else 0.0) + (1 - b1) * g
        v = b2 * (v if v is not None else 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lr_schedule(epoch: int, base_lr: float = 5e-5) -> float:
    """x0.7 at epochs 5 and 10, then every 10 epochs (20, 30, ...)."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    k = int(epoch >= 5) + epoch // 10
    return base_lr * 0.7 ** k


# -- augmentation ----------------------------------------------------------------

def flip_sample(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    frames, first, second, flow = sample.frames, sample.first, sample.second, sample.flow
    if horizontal:
        frames, first, second = frames[..., ::-1], first[:, ::-1], second[:, ::-1]
        if flow is not None:
            flow = flow[..., ::-1] * np.array([-1.0, 1.0])[:, None, None]
    if vertical:
        frames, first, second = frames[..., ::-1, :], first[::-1], second[::-1]
        if flow is not None:
            flow = flow[..., ::-1, :] * np.array([1.0, -1.0])[:, None, None]
    return Sample(
        np.ascontiguousarray(frames), np.ascontiguousarray(first), np.ascontiguousarray(second),
        None if flow is None else np.ascontiguousarray(flow), sample.window, sample.name,
    )


def augment(sample: Sample, rng: np.random.Generator, crop_size: int, flip_prob: float = 0.5) -> Sample:
    """Random horizontal/vertical flips then a random square crop, applied to every field."""
    h, w = sample.first.shape
    if crop_size > min(h, w):
        raise ContractError(f"crop size {crop_size} exceeds image size {h}x{w}")
    hflip = rng.random() < flip_prob
    vflip = rng.random() < flip_prob
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    return crop(flip_sample(sample, hflip, vflip), top, left, crop_size)


# -- training --------------------------------------------------------------------

@dataclass
class CurveRow:
    epoch: int
    iteration: int
    total: float
    photometric: float
    smoothness: float
    lr: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    curve: list[CurveRow]
    final_loss: float
    initial_loss: float = math.nan
    checkpoint_path: str | None = None
    curve_path: str | None = None
    state: OptimizerState | None = None


def write_curve(path, rows: list[CurveRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CURVE_HEADER)
        for r in rows:
            wr.writerow([r.epoch, r.iteration, repr(r.total), repr(r.photometric), repr(r.smoothness), repr(r.lr)])


def read_curve(path) -> list[CurveRow]:
    with open(path, encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return [
            CurveRow(int(r["epoch"]), int(r["iteration"]), float(r["total"]), float(r["photometric"]),
                     float(r["smoothness"]), float(r["lr"]))
            for r in rd
        ]


def scale_snn_weights(params: dict[str, Tensor], gain: float) -> None:
    if gain == 1.0:
        return
    for name, p in params.items():
        if name.startswith("enc") and name.endswith(".weight"):
            p.data = p.data * gain


def dataset_loss(params, net: NetworkConfig, dataset: list[Sample], loss_cfg: LossConfig, crop_size: int) -> float:
    """Mean total loss over ``dataset`` (center crop, no augmentation)."""
    losses = []
    for s in dataset:
        s = center_crop(s, min(crop_size, *s.first.shape))
        frames, first, second = stack([s])
        flows = hybrid_forward(frames, params, net)
        losses.append(total_loss(flows, first, second, loss_cfg).total.item())
    return float(np.mean(losses))


def _optimizer_extras(state: OptimizerState) -> dict[str, np.ndarray]:
    extras = {"adam.step": np.array(float(state.step))}
    for name in sorted(state.m):
        extras[f"adam.m.{name}"] = state.m[name]
        extras[f"adam.v.{name}"] = state.v[name]
    return extras


def _loss_extras(loss_cfg: LossConfig, crop_size: int) -> dict[str, np.ndarray]:
    return {
        "train.crop_size": np.array(float(crop_size)),
        "train.smooth_weight": np.array(loss_cfg.smooth_weight),
        "train.charbonnier_r": np.array(loss_cfg.r),
        "train.charbonnier_eta": np.array(loss_cfg.eta),
    }


def loss_config_from_extras(extras: dict[str, np.ndarray], default: LossConfig) -> LossConfig:
    if "train.smooth_weight" not in extras:
        return default
    return LossConfig(
        float(extras["train.charbonnier_r"]),
        float(extras["train.charbonnier_eta"]),
        float(extras["train.smooth_weight"]),
    )


def _optimizer_from_extras(extras: dict[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState(step=int(extras.get("adam.step", 0)))
    for key, value in extras.items():
        if key.startswith("adam.m."):
            state.m[key[len("adam.m."):]] = value
        elif key.startswith("adam.v."):
            state.v[key[len("adam.v."):]] = value
    return state


def train(dataset: list[Sample], cfg: TrainConfig, out_dir=None, resume=None, params=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs (capped by ``cfg.max_iterations`` if > 0).

    Each iteration encodes a batch, runs the hybrid network over all N
    frames, evaluates the multi-scale loss, back-propagates through the ANN
    tape and then through the unrolled spiking block, and applies Adam.
    A checkpoint is written after every epoch (``checkpoint.sfn``) and the
    best epoch-mean loss is kept as ``best.sfn``.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    net = cfg.network()
    loss_cfg = cfg.loss()
    crop_size = min(cfg.crop_size, *dataset[0].first.shape)
    state = OptimizerState()
    start_epoch, iteration = 0, 0
    curve: list[CurveRow] = []
    if resume is not None:
        ck = load_checkpoint(resume, expected=net)
        params = ck.params
        state = _optimizer_from_extras(ck.extras)
        start_epoch = int(ck.extras.get("train.epoch", -1)) + 1
        iteration = int(ck.extras.get("train.iteration", 0))
    elif params is None:
        params = init_params(net, cfg.seed)
        scale_snn_weights(params, cfg.snn_init_gain)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    initial = dataset_loss(params, net, dataset, loss_cfg, crop_size)
    ckpt_path = best_path = None
    best = math.inf
    done = False
    last_epoch = start_epoch - 1
    with strict(cfg.strict):
        for epoch in range(start_epoch, cfg.epochs):
            last_epoch = epoch
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(dataset))
            lr = lr_schedule(epoch, cfg.lr)
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [augment(dataset[i], rng, crop_size, cfg.flip_prob) for i in order[start:start + cfg.batch_size]]
                frames, first, second = stack(batch)
                hp = HybridPass(params, net)
                try:
                    with hp.tape:
                        flows = hp.forward(frames)
                        terms = total_loss(flows, first, second, loss_cfg)
                    value = terms.total.item()
                    if not math.isfinite(value) and cfg.strict:
                        raise NumericError("non-finite loss")
                    for p in params.values():
                        p.zero_grad()
                    hp.backward(terms.total)
                    adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
                except NumericError as exc:
                    raise NumericError(f"iteration {iteration}: {exc}") from exc
                curve.append(CurveRow(epoch, iteration, value, terms.photometric, terms.smoothness, lr))
                epoch_losses.append(value)
                iteration += 1
                if cfg.max_iterations and iteration >= cfg.max_iterations:
                    done = True
                    break
            mean_loss = float(np.mean(epoch_losses))
            logger.info("epoch %d: mean loss %.6g (lr %.3g)", epoch, mean_loss, lr)
            if out_dir is not None:
                extras = _optimizer_extras(state)
                extras["train.epoch"] = np.array(float(epoch))
                extras["train.iteration"] = np.array(float(iteration))
                ckpt_path = os.path.join(out_dir, "checkpoint.sfn")
                save_checkpoint(ckpt_path, net, params, extras)
                if mean_loss < best:
                    best = mean_loss
                    best_path = os.path.join(out_dir, "best.sfn")
                    save_checkpoint(best_path, net, params, extras)
            if done:
                break
    final = dataset_loss(params, net, dataset, loss_cfg, crop_size)
    result = TrainResult(params, curve, final, initial, state=state)
    if out_dir is not None:
        extras = _optimizer_extras(state)
        extras["train.epoch"] = np.array(float(last_epoch))
        extras["train.iteration"] = np.array(float(iteration))
        extras["train.final_loss"] = np.array(final)
        extras.update(_loss_extras(loss_cfg, crop_size))
        ckpt_path = os.path.join(out_dir, "checkpoint.sfn")
        save_checkpoint(ckpt_path, net, params, extras)
        result.checkpoint_path = ckpt_path
        result.curve_path = os.path.join(out_dir, "loss.csv")
        write_curve(result.curve_path, curve)
    return result
