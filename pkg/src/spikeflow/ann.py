"""Analog half of the hybrid network: residual blocks and the flow decoder.

Decoder stage ``s`` (1..4) upsamples with a 4x4 stride-2 transposed
convolution, concatenates the encoder skip of matching resolution and the
bilinearly upsampled previous flow, and predicts this scale's flow with a
linear convolution head. Skips are the enc3, enc2, enc1 spike accumulators and,
at full resolution, the summed input event frames.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .functional import add_bias, conv2d, conv_transpose2d
from .snn import (
    EncoderConfig,
    EncoderRecord,
    _as_frames,
    encoder_backward,
    encoder_forward,
    encoder_param_shapes,
)
from .tensor import GradTape, Tensor, concat, leaky_relu, no_grad

VARIANTS = ("standard", "one_residual_snn", "two_residual_snn")
DT_DEFAULTS = {"dt1": (5, 0.75), "dt4": (20, 0.5)}  # (n_frames, threshold)


@dataclass(frozen=True)
class NetworkConfig:
    base_width: int = 64
    hybrid_variant: str = "standard"
    n_frames: int = 5
    threshold: float = 0.75
    flow_head_kernel: int = 3
    negative_slope: float = 0.1
    snn_bias: bool = False
    dt_mode: str = "dt1"

    def __post_init__(self) -> None:
        if self.hybrid_variant not in VARIANTS:
            raise ContractError(f"unknown hybrid_variant {self.hybrid_variant!r}; choose from {VARIANTS}")
        if self.base_width < 1:
            raise ContractError("base_width must be positive")
        if self.flow_head_kernel % 2 == 0:
            raise ContractError("flow_head_kernel must be odd")

    @classmethod
    def for_dt(cls, dt_mode: str, **overrides) -> "NetworkConfig":
        if dt_mode not in DT_DEFAULTS:
            raise ContractError(f"unknown dt_mode {dt_mode!r}")
        n, th = DT_DEFAULTS[dt_mode]
        kw = {"n_frames": n, "threshold": th, "dt_mode": dt_mode}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        b = self.base_width
        return (b, 2 * b, 4 * b, 8 * b)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        b = self.base_width
        return (2 * b, b, max(b // 2, 1), max(b // 2, 1))

    @property
    def spiking_residual_blocks(self) -> int:
        return VARIANTS.index(self.hybrid_variant)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            widths=self.encoder_widths,
            threshold=self.threshold,
            n_frames=self.n_frames,
            bias=self.snn_bias,
            spiking_residual_blocks=self.spiking_residual_blocks,
        )

    def canonical(self) -> str:
        items = asdict(self)
        return "\n".join(f"{k}={items[k]!r}" for k in sorted(items))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


def ann_param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    deep = cfg.encoder_widths[-1]
    shapes: dict[str, tuple[int, ...]] = {}
    for r in range(cfg.spiking_residual_blocks + 1, 3):
        for conv in ("conv1", "conv2"):
            shapes[f"res{r}.{conv}.weight"] = (deep, deep, 3, 3)
            shapes[f"res{r}.{conv}.bias"] = (deep,)
    skips = skip_channels(cfg)
    cin = deep
    k = cfg.flow_head_kernel
    for s, (width, skip) in enumerate(zip(cfg.decoder_widths, skips), start=1):
        shapes[f"dec{s}.weight"] = (cin, width, 4, 4)
        shapes[f"dec{s}.bias"] = (width,)
        cat = width + skip + (2 if s > 1 else 0)
        shapes[f"flow{s}.weight"] = (2, cat, k, k)
        shapes[f"flow{s}.bias"] = (2,)
        cin = cat
    return shapes


def skip_channels(cfg: NetworkConfig) -> tuple[int, ...]:
    w = cfg.encoder_widths
    return (w[2], w[1], w[0], 4)


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = encoder_param_shapes(cfg.encoder())
    shapes.update(ann_param_shapes(cfg))
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases, drawn in sorted-name order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name in sorted(param_shapes(cfg)):
        shape = param_shapes(cfg)[name]
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            if name.startswith("dec"):
                fan_in = shape[0] * shape[2] * shape[3] / 4.0
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def bilinear_upsample_kernel(channels: int = 2) -> np.ndarray:
    """Fixed transposed-conv weights (k=4, s=2, p=1) doing per-channel bilinear 2x upsampling."""
    taps = np.array([0.25, 0.75, 0.75, 0.25])
    w = np.zeros((channels, channels, 4, 4))
    for c in range(channels):
        w[c, c] = np.outer(taps, taps)
    return w


_UPFLOW = Tensor(bilinear_upsample_kernel())


def residual_block(x: Tensor, params: dict[str, Tensor], prefix: str, negative_slope: float = 0.1) -> Tensor:
    """``x + act(conv2(act(conv1(x))))`` with 3x3 same-padding convolutions."""
    c = x.shape[1]
    w1 = params[f"{prefix}.conv1.weight"]
    if w1.shape[0] != c or w1.shape[1] != c:
        raise ShapeError(f"{prefix}: channel mismatch, input has {c} channels, weight {w1.shape}")
    h = leaky_relu(add_bias(conv2d(x, w1, 1, 1), params[f"{prefix}.conv1.bias"]), negative_slope)
    h = leaky_relu(
        add_bias(conv2d(h, params[f"{prefix}.conv2.weight"], 1, 1), params[f"{prefix}.conv2.bias"]),
        negative_slope,
    )
    return x + h


def decoder_forward(deepest: Tensor, skips, params: dict[str, Tensor], negative_slope: float = 0.1) -> list[Tensor]:
    """Return one flow field per decoder stage, coarsest first."""
    flows: list[Tensor] = []
    x = deepest
    pad = params["flow1.weight"].shape[2] // 2
    for s, skip in enumerate(skips, start=1):
        up = leaky_relu(
            add_bias(conv_transpose2d(x, params[f"dec{s}.weight"], 2, 1), params[f"dec{s}.bias"]),
            negative_slope,
        )
        skip = skip if isinstance(skip, Tensor) else Tensor._wrap(np.asarray(skip, dtype=np.float64), False)
        if skip.shape[2:] != up.shape[2:]:
            raise ShapeError(
                f"decoder stage {s}: upsampled activations are {up.shape[2:]} but skip is {skip.shape[2:]}"
            )
        parts = [up, skip]
        if flows:
            parts.append(conv_transpose2d(flows[-1], _UPFLOW, 2, 1))
        x = concat(parts, axis=1)
        flow = add_bias(conv2d(x, params[f"flow{s}.weight"], 1, pad), params[f"flow{s}.bias"])
        flows.append(flow)
    return flows


def ann_forward(accumulators, input_accumulator, params, cfg: NetworkConfig) -> list[Tensor]:
    x = accumulators[-1]
    for r in range(cfg.spiking_residual_blocks + 1, 3):
        x = residual_block(x, params, f"res{r}", cfg.negative_slope)
    skips = [accumulators[2], accumulators[1], accumulators[0], input_accumulator]
    return decoder_forward(x, skips, params, cfg.negative_slope)


class HybridPass:
    """One forward/backward iteration of the hybrid network.

    ANN-side operations (including the loss) are recorded on :attr:`tape`;
    the spiking block keeps its own unrolled tape. :meth:`backward` runs the
    ANN tape first and then hands the accumulator gradients to BPTT.
    """

    def __init__(self, params: dict[str, Tensor], config: NetworkConfig) -> None:
        self.params = params
        self.config = config
        self.tape = GradTape()
        self.encoder: EncoderRecord | None = None
        self.ann_inputs: list[Tensor] = []

    def forward(self, inputs) -> list[Tensor]:
        inputs = _check_resolution(inputs)
        self.encoder = encoder_forward(inputs, self.params, self.config.encoder(), record=True)
        self.ann_inputs = [Tensor(a.data, requires_grad=True) for a in self.encoder.accumulators]
        with self.tape:
            return ann_forward(self.ann_inputs, self.encoder.input_accumulator, self.params, self.config)

    def backward(self, loss: Tensor) -> None:
        self.tape.backward(loss)
        encoder_backward([a.grad for a in self.ann_inputs], self.encoder)


def _check_resolution(inputs) -> np.ndarray:
    frames = _as_frames(inputs)
    h, w = frames.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input height/width must be multiples of 16, got {h}x{w}")
    return frames


def hybrid_forward(inputs, params: dict[str, Tensor], config: NetworkConfig) -> list[Tensor]:
    """Inference-only forward pass; returns flows coarsest to finest."""
    inputs = _check_resolution(inputs)
    with no_grad():
        rec = encoder_forward(inputs, params, config.encoder(), record=False)
        return ann_forward(rec.accumulators, rec.input_accumulator, params, config)


def hybrid_forward_with_record(inputs, params, config: NetworkConfig) -> tuple[list[Tensor], EncoderRecord]:
    inputs = _check_resolution(inputs)
    with no_grad():
        rec = encoder_forward(inputs, params, config.encoder(), record=False)
        return ann_forward(rec.accumulators, rec.input_accumulator, params, config), rec
