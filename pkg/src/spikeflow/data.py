"""Training/evaluation samples and on-disk dataset layout.

A sample directory holds ``events.aer``, ``image0.pgm``, ``image1.pgm`` and an
optional ground-truth ``flow.flo``. The encoding window is taken from the
``t_us`` comments of the two PGM images. A dataset directory is either a
single sample directory or a directory of sample subdirectories (sorted by
name).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .events import (
    encode_spike_input,
    parse_event_file,
    read_flow_file,
    read_pgm,
    save_sample,
    smooth_texture,
    synthesize_events,
)


@dataclass
class Sample:
    frames: np.ndarray  # [N, 4, H, W] binary
    first: np.ndarray  # [H, W]
    second: np.ndarray
    flow: np.ndarray | None = None  # [2, H, W]
    window: tuple[int, int] = (0, 1)
    name: str = ""

    @property
    def event_mask(self) -> np.ndarray:
        return self.frames.any(axis=(0, 1))

    @property
    def gt_mask(self) -> np.ndarray:
        if self.flow is None:
            return np.zeros(self.first.shape, dtype=bool)
        return np.isfinite(self.flow).all(axis=0)


def is_sample_dir(path) -> bool:
    return os.path.isfile(os.path.join(path, "events.aer"))


def load_sample(path, n_frames: int) -> Sample:
    stream = parse_event_file(os.path.join(path, "events.aer"))
    first, t0 = read_pgm(os.path.join(path, "image0.pgm"))
    second, t1 = read_pgm(os.path.join(path, "image1.pgm"))
    if t0 is None or t1 is None:
        raise FormatError(f"{path}: images lack t_us timestamps")
    if first.shape != (stream.height, stream.width):
        raise FormatError(f"{path}: image size {first.shape} differs from sensor {stream.height}x{stream.width}")
    flow_path = os.path.join(path, "flow.flo")
    flow = read_flow_file(flow_path) if os.path.isfile(flow_path) else None
    seq = encode_spike_input(stream, (t0, t1), n_frames)
    return Sample(seq.frames, first, second, flow, (t0, t1), os.path.basename(os.path.normpath(path)))


def load_dataset(data_dir, n_frames: int) -> list[Sample]:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    if is_sample_dir(data_dir):
        return [load_sample(data_dir, n_frames)]
    subdirs = sorted(
        os.path.join(data_dir, d) for d in os.listdir(data_dir) if is_sample_dir(os.path.join(data_dir, d))
    )
    if not subdirs:
        raise ContractError(f"no samples found in {data_dir}")
    return [load_sample(d, n_frames) for d in subdirs]


def make_translation_dataset(
    n_samples: int,
    size: int = 64,
    max_flow: float = 3.0,
    theta: float = 0.15,
    n_frames: int = 5,
    seed: int = 0,
    timesteps: int = 20,
    window: tuple[int, int] = (0, 50_000),
    out_dir=None,
) -> list[Sample]:
    """Random smooth textures under random global translations with |flow| <= max_flow."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        tex = smooth_texture(size, rng, cell=int(rng.integers(6, 12)))
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.3, 1.0) * max_flow
        flow = (mag * np.cos(angle), mag * np.sin(angle))
        stream, pair, gt = synthesize_events(tex, flow, window, theta, timesteps)
        if out_dir is not None:
            save_sample(os.path.join(out_dir, f"sample_{i:03d}"), stream, pair, gt)
        seq = encode_spike_input(stream, window, n_frames)
        samples.append(Sample(seq.frames, pair.first, pair.second, gt, window, f"sample_{i:03d}"))
    return samples


def stack(samples: list[Sample]):
    frames = np.stack([s.frames for s in samples])
    first = np.stack([s.first for s in samples])[:, None]
    second = np.stack([s.second for s in samples])[:, None]
    return frames, first, second


def center_crop(sample: Sample, size: int) -> Sample:
    h, w = sample.first.shape
    if size > min(h, w):
        raise ContractError(f"crop size {size} exceeds image size {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return crop(sample, top, left, size)


def crop(sample: Sample, top: int, left: int, size: int) -> Sample:
    ys, xs = slice(top, top + size), slice(left, left + size)
    return Sample(
        sample.frames[:, :, ys, xs],
        sample.first[ys, xs],
        sample.second[ys, xs],
        None if sample.flow is None else sample.flow[:, ys, xs],
        sample.window,
        sample.name,
    )
