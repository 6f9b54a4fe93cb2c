"""Masked endpoint error, spike activity and synaptic-operation energy accounting.

Operation counting follows the per-layer ``M * C * F`` rule: ``M`` output
neurons, ``C`` fan-in connections per output neuron and ``F`` the firing rate
of the presynaptic population driving the layer. Summed over ``N`` time-steps
this gives the spiking cost; ``sum(M * C)`` is the cost of the same layers run
densely as an analog network.
"""

from __future__ import annotations

import colorsys
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Mapping

import numpy as np

from .ann import DT_DEFAULTS, NetworkConfig, hybrid_forward_with_record, skip_channels
from .checkpoint import config_from_records, load_checkpoint, read_records
from .data import Sample, center_crop, load_dataset, stack
from .errors import ContractError, ShapeError
from .events import write_pgm, write_ppm
from .functional import conv_output_size
from .loss import LossConfig, total_loss
from .snn import ENCODER_NAMES, EncoderRecord, IFLayerState, SynapticLayer
from .trainer import DT_LAMBDA, loss_config_from_extras

ENERGY_RATIO = 5.1  # E_MAC / E_AC, 32-bit float at 45 nm


# -- endpoint error ---------------------------------------------------------------

@dataclass
class AEEResult:
    aee: float
    m: int
    per_sample: list[float] = field(default_factory=list)
    per_sample_m: list[int] = field(default_factory=list)
    empty: bool = False


def _batch_mask(mask, shape: tuple[int, int, int], what: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == shape[1:]:
        mask = np.broadcast_to(mask, shape)
    if mask.shape != shape:
        raise ShapeError(f"{what} has shape {mask.shape}, expected {shape[1:]} or {shape}")
    return mask


def aee(pred, gt, event_mask=None, gt_mask=None) -> AEEResult:
    """Mean endpoint error over pixels where both the event and ground-truth masks hold.

    ``pred``/``gt`` are [2,H,W] or [B,2,H,W]. The pooled mean over all masked
    pixels is returned together with per-sample values. With no masked pixel
    the result is ``aee = 0`` and ``empty`` is set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in resolution")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ShapeError(f"flow fields must be [2,H,W] or [B,2,H,W], got {pred.shape}")
    b, _, h, w = pred.shape
    valid = np.isfinite(gt).all(axis=1)
    if gt_mask is not None:
        valid &= _batch_mask(gt_mask, (b, h, w), "gt_mask")
    if event_mask is not None:
        valid &= _batch_mask(event_mask, (b, h, w), "event_mask")
    err = np.sqrt(((pred - np.where(np.isfinite(gt), gt, 0.0)) ** 2).sum(axis=1))
    per, per_m = [], []
    for i in range(b):
        mi = int(valid[i].sum())
        per_m.append(mi)
        per.append(float(err[i][valid[i]].mean()) if mi else 0.0)
    m = int(valid.sum())
    total = float(err[valid].mean()) if m else 0.0
    return AEEResult(total, m, per, per_m, empty=m == 0)


# -- spike activity ---------------------------------------------------------------

def measure_spike_activity(source, exact: bool = False) -> dict[str, float]:
    """Firing rate per population: spikes / (neurons * steps * batch).

    ``source`` is an :class:`EncoderRecord` (all populations, including the
    binary input frames) or a list of :class:`IFLayerState`. With
    ``exact=True`` rates are returned as :class:`fractions.Fraction`.
    """
    if isinstance(source, EncoderRecord):
        pops = source.populations
    elif isinstance(source, IFLayerState):
        pops = {source.name: source.spikes_per_step}
    else:
        pops = {s.name: s.spikes_per_step for s in source}
    if not pops:
        raise ContractError("no spiking populations recorded")
    rates = {}
    for name, steps in pops.items():
        if not steps:
            raise ContractError(f"population {name!r} has no recorded time-steps")
        spikes = int(sum(np.count_nonzero(s) for s in steps))
        size = steps[0].size * len(steps)
        rates[name] = Fraction(spikes, size) if exact else spikes / size
    return rates


# -- operation counting -----------------------------------------------------------

def _json_float(value) -> float | None:
    """Plain float, or None for NaN/inf so reports stay valid JSON."""
    value = float(value)
    return value if math.isfinite(value) else None


@dataclass
class LayerOps:
    name: str
    source: str
    neurons: int  # M
    connections: int  # C, fan-in per output neuron
    rate: float  # F of the presynaptic population

    @property
    def ann_ops(self) -> int:
        return self.neurons * self.connections


@dataclass
class OpCountReport:
    layers: list[LayerOps]
    n_steps: int
    snn_ops: float
    ann_ops: int
    normalized_ops_percent: float
    energy_ratio: float
    encoder_energy_benefit: float
    infinite_benefit: bool
    network_ann_ops: int
    encoder_share_percent: float
    overall_energy_reduction_percent: float

    def summary(self) -> dict:
        out = asdict(self)
        out["layers"] = [
            {**asdict(layer), "rate": float(layer.rate), "ann_ops": layer.ann_ops} for layer in self.layers
        ]
        for key in ("snn_ops", "normalized_ops_percent", "encoder_energy_benefit",
                    "encoder_share_percent", "overall_energy_reduction_percent"):
            out[key] = _json_float(out[key])
        return out


def encoder_synapses(config: NetworkConfig, height: int, width: int) -> list[SynapticLayer]:
    """Geometry of every convolution driven by a spiking population, for an HxW input."""
    enc = config.encoder()
    k, pad = enc.kernel_size, enc.kernel_size // 2
    layers = []
    c, h, w = enc.in_channels, height, width
    source = "input"
    for name, cout in zip(ENCODER_NAMES, enc.widths):
        ho, wo = conv_output_size(h, k, enc.stride, pad), conv_output_size(w, k, enc.stride, pad)
        layers.append(SynapticLayer(name, source, (cout, c, k, k), enc.stride, pad, (c, h, w), (cout, ho, wo)))
        c, h, w, source = cout, ho, wo, name
    pops = {1: ("enc4", "res1.conv1"), 2: ("res1", "res2.conv1")}
    for r in range(1, enc.spiking_residual_blocks + 1):
        first, second = pops[r]
        shape = (c, h, w)
        layers.append(SynapticLayer(f"res{r}.conv1", first, (c, c, 3, 3), 1, 1, shape, shape))
        layers.append(SynapticLayer(f"res{r}.conv2", second, (c, c, 3, 3), 1, 1, shape, shape))
    return layers


def ann_block_ops(config: NetworkConfig, height: int, width: int) -> int:
    """Dense multiply-accumulates of the analog residual blocks and decoder."""
    deep = config.encoder_widths[-1]
    h, w = height // 16, width // 16
    ops = 2 * (2 - config.spiking_residual_blocks) * h * w * deep * deep * 9
    cin = deep
    k = config.flow_head_kernel
    for s, (width_s, skip) in enumerate(zip(config.decoder_widths, skip_channels(config)), start=1):
        ops += h * w * cin * 16 * width_s  # 4x4 stride-2 transposed conv, per input pixel
        if s > 1:
            ops += h * w * 2 * 16 * 2  # flow upsampling
        h, w = 2 * h, 2 * w
        cat = width_s + skip + (2 if s > 1 else 0)
        ops += h * w * 2 * cat * k * k
        cin = cat
    return ops


def _layer_ops(syn: SynapticLayer, rate) -> LayerOps:
    cout, cin, kh, kw = syn.weight_shape
    return LayerOps(syn.name, syn.source, int(np.prod(syn.out_shape)), cin * kh * kw, rate)


def tally_ops(
    synapses: list[SynapticLayer],
    rates,
    n_steps: int,
    other_ann_ops: int = 0,
    energy_ratio: float = ENERGY_RATIO,
) -> OpCountReport:
    """Apply the ``sum(M*C*F)*N`` rule to explicit layer geometry.

    ``rates`` maps presynaptic population names to firing rates, or is one
    number used for every population. ``other_ann_ops`` is the analog cost of
    the rest of the network, used for the overall energy figure.
    """
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    if energy_ratio <= 0:
        raise ContractError("energy ratio must be positive")
    layers = []
    for syn in synapses:
        if isinstance(rates, Mapping):
            if syn.source not in rates:
                raise ContractError(f"no firing rate for population {syn.source!r} (layer {syn.name})")
            rate = rates[syn.source]
        else:
            rate = rates
        if not 0 <= rate <= 1:
            raise ContractError(f"firing rate of {syn.source!r} must lie in [0, 1], got {float(rate)}")
        layers.append(_layer_ops(syn, rate))
    ann = sum(layer.ann_ops for layer in layers)
    if ann == 0:
        raise ContractError("no synaptic layers to count")
    snn = sum(layer.ann_ops * layer.rate for layer in layers) * n_steps
    normalized = snn / ann
    infinite = snn == 0
    benefit = float("inf") if infinite else ann * energy_ratio / snn
    total = ann + other_ann_ops
    share = ann / total
    reduction = share * (1 - normalized / energy_ratio)
    return OpCountReport(
        layers=layers,
        n_steps=n_steps,
        snn_ops=snn,
        ann_ops=ann,
        normalized_ops_percent=100 * normalized,
        energy_ratio=energy_ratio,
        encoder_energy_benefit=benefit,
        infinite_benefit=infinite,
        network_ann_ops=total,
        encoder_share_percent=100 * share,
        overall_energy_reduction_percent=100 * reduction,
    )


def count_ops(
    config: NetworkConfig,
    rates,
    n_steps: int | None = None,
    height: int = 256,
    width: int = 256,
    energy_ratio: float = ENERGY_RATIO,
) -> OpCountReport:
    """Operation and energy report for the spiking block of ``config`` at HxW input."""
    if height % 16 or width % 16:
        raise ShapeError(f"input height/width must be multiples of 16, got {height}x{width}")
    return tally_ops(
        encoder_synapses(config, height, width),
        rates,
        config.n_frames if n_steps is None else n_steps,
        ann_block_ops(config, height, width),
        energy_ratio,
    )


def instrumented_op_count(record: EncoderRecord) -> Fraction:
    """Event-driven count: every recorded spike charges its layer's per-input work.

    A spike of a presynaptic neuron adds ``M * C / M_pre`` accumulates, the
    layer's connections per input neuron. The total is averaged over the batch
    and kept exact.
    """
    total = Fraction(0)
    for syn in record.synapses:
        per_spike = Fraction(int(np.prod(syn.out_shape)) * int(np.prod(syn.weight_shape[1:])),
                             int(np.prod(syn.in_shape)))
        for step in record.populations[syn.source]:
            for _ in np.flatnonzero(step):
                total += per_spike
    return total / record.batch


# -- flow visualisation -----------------------------------------------------------

def flow_images(flow: np.ndarray, max_magnitude: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude image in [0,1] and an RGB image with hue = direction, value = magnitude."""
    u, v = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(u, v)
    scale = max_magnitude if max_magnitude else max(float(mag.max()), 1e-12)
    val = np.clip(mag / scale, 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    rgb = np.stack(np.vectorize(colorsys.hsv_to_rgb)(hue, np.ones_like(hue), val), axis=-1)
    return val, rgb


def write_flow_images(prefix, flow: np.ndarray, max_magnitude: float | None = None) -> None:
    mag, rgb = flow_images(flow, max_magnitude)
    write_pgm(f"{prefix}_magnitude.pgm", mag)
    write_ppm(f"{prefix}_direction.ppm", rgb)


# -- checkpoint evaluation --------------------------------------------------------

@dataclass
class SampleEval:
    name: str
    aee: float
    masked_pixels: int
    loss: float


@dataclass
class EvalReport:
    config: NetworkConfig
    samples: list[SampleEval]
    mean_aee: float
    mean_loss: float
    activity: dict[str, float]
    ops: OpCountReport

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "samples": len(self.samples),
            "mean_aee": _json_float(self.mean_aee),
            "mean_loss": _json_float(self.mean_loss),
            "spike_activity": self.activity,
            "ops": self.ops.summary(),
        }


def expected_config(base: NetworkConfig, dt_mode=None, n_frames=None, threshold=None) -> NetworkConfig:
    """``base`` with a requested dt mode (and its defaults) and explicit overrides applied."""
    cfg = base
    if dt_mode is not None and dt_mode != base.dt_mode:
        if dt_mode not in DT_DEFAULTS:
            raise ContractError(f"unknown dt_mode {dt_mode!r}")
        n, th = DT_DEFAULTS[dt_mode]
        cfg = replace(cfg, dt_mode=dt_mode, n_frames=n, threshold=th)
    if n_frames is not None:
        cfg = replace(cfg, n_frames=n_frames)
    if threshold is not None:
        cfg = replace(cfg, threshold=threshold)
    return cfg


def evaluate(
    checkpoint,
    dataset,
    dt_mode: str | None = None,
    n_frames: int | None = None,
    threshold: float | None = None,
    out_dir=None,
    crop_size: int | None = None,
    energy_ratio: float = ENERGY_RATIO,
) -> EvalReport:
    """Run a checkpoint over a dataset: per-sample masked AEE and loss, activity and op counts.

    ``dataset`` is a data directory or a list of samples. Samples are
    center-cropped to the training crop stored in the checkpoint (else the
    largest multiple of 16 that fits). With ``out_dir`` an ``aee.csv``, a
    ``summary.json`` and flow images are written.
    """
    _, records = read_records(checkpoint)
    expected = expected_config(config_from_records(records), dt_mode, n_frames, threshold)
    ck = load_checkpoint(checkpoint, expected=expected)
    cfg = ck.config
    samples: list[Sample] = load_dataset(dataset, cfg.n_frames) if isinstance(dataset, (str, os.PathLike)) else list(dataset)
    if not samples:
        raise ContractError("evaluation dataset is empty")
    loss_cfg = loss_config_from_extras(ck.extras, LossConfig(smooth_weight=DT_LAMBDA[cfg.dt_mode]))
    if crop_size is None:
        h, w = samples[0].first.shape
        crop_size = int(ck.extras.get("train.crop_size", 16 * (min(h, w) // 16)))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows: list[SampleEval] = []
    spikes: dict[str, int] = {}
    sizes: dict[str, int] = {}
    for s in samples:
        s = center_crop(s, min(crop_size, *s.first.shape))
        frames, first, second = stack([s])
        flows, rec = hybrid_forward_with_record(frames, ck.params, cfg)
        loss = total_loss(flows, first, second, loss_cfg).total.item()
        pred = flows[-1].data[0]
        if s.flow is not None:
            res = aee(pred, s.flow, s.event_mask, s.gt_mask)
            rows.append(SampleEval(s.name, res.aee, res.m, loss))
        else:
            rows.append(SampleEval(s.name, float("nan"), 0, loss))
        for name, steps in rec.populations.items():
            spikes[name] = spikes.get(name, 0) + int(sum(np.count_nonzero(x) for x in steps))
            sizes[name] = sizes.get(name, 0) + steps[0].size * len(steps)
        if out_dir is not None:
            write_flow_images(os.path.join(out_dir, f"flow_{s.name or len(rows) - 1}"), pred)
    activity = {name: spikes[name] / sizes[name] for name in spikes}
    ops = count_ops(cfg, activity, cfg.n_frames, crop_size, crop_size, energy_ratio)
    scored = [r.aee for r in rows if r.masked_pixels > 0]
    report = EvalReport(
        config=cfg,
        samples=rows,
        mean_aee=float(np.mean(scored)) if scored else float("nan"),
        mean_loss=float(np.mean([r.loss for r in rows])),
        activity=activity,
        ops=ops,
    )
    if out_dir is not None:
        write_report(out_dir, report)
    return report


def write_report(out_dir, report: EvalReport) -> None:
    with open(os.path.join(out_dir, "aee.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("sample", "aee", "masked_pixels", "loss"))
        for r in report.samples:
            wr.writerow((r.name, repr(r.aee), r.masked_pixels, repr(r.loss)))
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
