"""Integrate-and-fire encoder block.

Per time-step ``n`` each spiking layer computes ``U = V[n-1] + w * o_prev[n]``,
fires ``o = [U > V_th]`` and stores ``V[n] = U * (1 - o)`` (reset to zero). The
deepest layer of the spiking block only integrates its input current into an
output accumulator. Hidden layers expose spike-count accumulators for the
decoder skip connections.

Backward is BPTT over the recorded, unrolled graph with the surrogate
``d o / d U = (1/V_th) * [o > 0]``. The reset is treated as a constant mask, so
the membrane carry-over ``V[n] -> U[n+1]`` has derivative 1 where the neuron
stayed silent and 0 where it fired.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .functional import add_bias, conv2d, spike
from .tensor import GradTape, Tensor, as_tensor, no_grad

ENCODER_NAMES = ("enc1", "enc2", "enc3", "enc4")


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    kernel_size: int = 3
    stride: int = 2
    threshold: float = 0.75
    n_frames: int = 5
    in_channels: int = 4
    bias: bool = False
    spiking_residual_blocks: int = 0

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ContractError("encoder strides must be >= 1")
        if self.threshold <= 0:
            raise ContractError("firing threshold must be positive")
        if self.n_frames < 1:
            raise ContractError("n_frames must be >= 1")
        if self.spiking_residual_blocks not in (0, 1, 2):
            raise ContractError("spiking_residual_blocks must be 0, 1 or 2")


@dataclass
class IFLayerState:
    """Membrane potential and per-step spike record of one IF population."""

    name: str
    threshold: float
    membrane: Tensor | None = None
    spikes_per_step: list[np.ndarray] = field(default_factory=list)

    def reset(self) -> None:
        self.membrane = None
        self.spikes_per_step = []

    @property
    def n_steps(self) -> int:
        return len(self.spikes_per_step)

    def spike_count(self) -> float:
        return float(sum(s.sum() for s in self.spikes_per_step))


def if_step(state: IFLayerState, input_current: Tensor) -> Tensor:
    """Integrate one step of input current, fire above threshold, reset fired neurons to 0."""
    input_current = as_tensor(input_current)
    if state.membrane is None:
        state.membrane = Tensor._wrap(np.zeros(input_current.shape), False)
    if state.membrane.shape != input_current.shape:
        raise ShapeError(
            f"if_step[{state.name}]: input shape {input_current.shape} != membrane shape {state.membrane.shape}"
        )
    u = state.membrane + input_current
    out = spike(u, state.threshold)
    state.membrane = u * (1.0 - out.detach())
    state.spikes_per_step.append(out.data)
    return out


@dataclass
class SynapticLayer:
    """Geometry of one convolution driven by a spiking population (for op counting)."""

    name: str
    source: str
    weight_shape: tuple[int, int, int, int]
    stride: int
    padding: int
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]


@dataclass
class EncoderRecord:
    accumulators: list[Tensor]
    input_accumulator: np.ndarray
    states: list[IFLayerState]
    populations: dict[str, list[np.ndarray]]
    synapses: list[SynapticLayer]
    tape: GradTape | None
    n_steps: int
    batch: int


def _as_frames(inputs) -> np.ndarray:
    if hasattr(inputs, "frames"):
        frames = np.asarray(inputs.frames, dtype=np.float64)[None]
    elif isinstance(inputs, (list, tuple)):
        frames = np.stack([np.asarray(s.frames if hasattr(s, "frames") else s, dtype=np.float64) for s in inputs])
    else:
        frames = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
        if frames.ndim == 4:
            frames = frames[None]
    if frames.ndim != 5:
        raise ShapeError(f"spike input must be [B,N,C,H,W], got {frames.shape}")
    if not np.all((frames == 0) | (frames == 1)):
        raise ContractError("spike input frames must be binary")
    return frames


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel_size
    shapes = {}
    cin = cfg.in_channels
    for name, cout in zip(ENCODER_NAMES, cfg.widths):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        if cfg.bias:
            shapes[f"{name}.bias"] = (cout,)
        cin = cout
    for r in range(1, cfg.spiking_residual_blocks + 1):
        for conv in ("conv1", "conv2"):
            shapes[f"res{r}.{conv}.weight"] = (cin, cin, 3, 3)
            if cfg.bias:
                shapes[f"res{r}.{conv}.bias"] = (cin,)
    return shapes


def encoder_forward(inputs, params: dict[str, Tensor], config: EncoderConfig, record: bool = True) -> EncoderRecord:
    """Run the spiking block over all N frames.

    Returns an :class:`EncoderRecord` whose ``accumulators`` hold the spike
    counts of enc1..enc3 and the integrated membrane of the deepest layer.
    With ``record=True`` the unrolled graph is kept for :func:`encoder_backward`.
    """
    frames = _as_frames(inputs)
    b, n_steps = frames.shape[:2]
    pad = config.kernel_size // 2
    tape = GradTape() if record else None
    states: dict[str, IFLayerState] = {}
    populations: dict[str, list[np.ndarray]] = {"input": []}
    synapses: dict[str, SynapticLayer] = {}

    def state(name: str) -> IFLayerState:
        if name not in states:
            states[name] = IFLayerState(name, config.threshold)
            populations[name] = states[name].spikes_per_step
        return states[name]

    def conv(name: str, source: str, x: Tensor, stride: int) -> Tensor:
        w = params[f"{name}.weight"]
        y = conv2d(x, w, stride=stride, padding=pad)
        if config.bias:
            y = add_bias(y, params[f"{name}.bias"])
        if name not in synapses:
            synapses[name] = SynapticLayer(name, source, w.shape, stride, pad, x.shape[1:], y.shape[1:])
        return y

    hidden = ENCODER_NAMES[:-1]
    accum: dict[str, Tensor] = {}

    def run() -> None:
        for n in range(n_steps):
            x = Tensor._wrap(frames[:, n], False)
            populations["input"].append(x.data)
            source = "input"
            for name in hidden:
                x = if_step(state(name), conv(name, source, x, config.stride))
                source = name
                accum[name] = accum[name] + x if name in accum else x
            current = conv("enc4", source, x, config.stride)
            if config.spiking_residual_blocks >= 1:
                s = if_step(state("enc4"), current)
                h = if_step(state("res1.conv1"), conv("res1.conv1", "enc4", s, 1))
                current = current + conv("res1.conv2", "res1.conv1", h, 1)
            if config.spiking_residual_blocks == 2:
                s = if_step(state("res1"), current)
                h = if_step(state("res2.conv1"), conv("res2.conv1", "res1", s, 1))
                current = current + conv("res2.conv2", "res2.conv1", h, 1)
            accum["deep"] = accum["deep"] + current if "deep" in accum else current

    if record:
        with tape:
            run()
    else:
        with no_grad():
            run()
    accumulators = [accum[name] for name in hidden] + [accum["deep"]]
    return EncoderRecord(
        accumulators=accumulators,
        input_accumulator=frames.sum(axis=1),
        states=list(states.values()),
        populations=populations,
        synapses=list(synapses.values()),
        tape=tape,
        n_steps=n_steps,
        batch=b,
    )


def encoder_backward(upstream_grads, record: EncoderRecord, params: dict[str, Tensor] | None = None):
    """Back-propagate accumulator gradients through the unrolled spiking block.

    ``upstream_grads`` holds one array per accumulator (``None`` entries are
    skipped). Gradients are summed over time-steps into the ``grad`` field of
    each SNN weight; the accumulated values are returned keyed by name when
    ``params`` is given.
    """
    if record is None or record.tape is None or not record.tape.records:
        raise ContractError("encoder_backward needs a forward pass recorded with record=True")
    if len(upstream_grads) != len(record.accumulators):
        raise ContractError(
            f"expected {len(record.accumulators)} upstream gradients, got {len(upstream_grads)}"
        )
    seeds = [(acc, g) for acc, g in zip(record.accumulators, upstream_grads) if g is not None and acc.requires_grad]
    record.tape.run_backward(seeds)
    if params is None:
        return None
    return {k: p.grad for k, p in params.items() if p.requires_grad and p.grad is not None}
