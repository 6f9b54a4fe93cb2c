"""Self-supervised photometric + smoothness objective, summed over decoder scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .functional import avg_pool2d_array, bilinear_sample
from .tensor import Tensor, as_tensor, no_grad, power


@dataclass(frozen=True)
class LossConfig:
    r: float = 0.45
    eta: float = 1e-3
    smooth_weight: float = 10.0

    def __post_init__(self) -> None:
        if not 0 < self.r <= 1:
            raise ContractError("Charbonnier exponent r must lie in (0, 1]")
        if self.eta < 0:
            raise ContractError("Charbonnier eta must be non-negative")
        if self.smooth_weight < 0:
            raise ContractError("smoothness weight must be >= 0")


def charbonnier(x, r: float = 0.45, eta: float = 1e-3) -> Tensor:
    """Elementwise ``(x**2 + eta**2) ** r``."""
    x = as_tensor(x)
    return power(x * x + eta * eta, r)


def _as_batch_images(img) -> np.ndarray:
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return arr


def pool_to(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Repeated 2x2 average pooling of [B,1,H,W] down to ``hw``."""
    while img.shape[2:] != tuple(hw):
        if img.shape[2] < hw[0] or img.shape[2] % 2 or img.shape[3] % 2:
            raise ShapeError(f"cannot pool images {img.shape[2:]} to flow resolution {tuple(hw)}")
        img = avg_pool2d_array(img)
    return img


def photometric_loss(flow: Tensor, first, second, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over pixels of charbonnier(I_t(x,y) - I_{t+dt}(x+u, y+v)).

    ``first``/``second`` are [B,1,H,W] (or [H,W]) images at full resolution;
    they are average-pooled to the flow's resolution, whose values are in that
    scale's pixel units.
    """
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be [B,2,H,W], got {flow.shape}")
    b, _, h, w = flow.shape
    i1 = pool_to(_as_batch_images(first), (h, w))
    i2 = pool_to(_as_batch_images(second), (h, w))
    if i1.shape[0] != b:
        raise ShapeError(f"image batch {i1.shape[0]} != flow batch {b}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = flow[:, 0] + xs
    cy = flow[:, 1] + ys
    warped = bilinear_sample(Tensor._wrap(i2, False), cx, cy)
    return charbonnier(Tensor._wrap(i1, False) - warped, cfg.r, cfg.eta).sum()


def smoothness_loss(flow: Tensor) -> Tensor:
    """L1 differences to the right and lower neighbours, divided by H*W.

    Neighbour terms falling off the last row/column are dropped. Summed over
    the batch.
    """
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be [B,2,H,W], got {flow.shape}")
    h, w = flow.shape[2:]
    if h < 2 or w < 2:
        raise ContractError(f"smoothness needs at least 2x2 flow, got {h}x{w}")
    dy = (flow[:, :, :-1, :] - flow[:, :, 1:, :]).abs().sum()
    dx = (flow[:, :, :, :-1] - flow[:, :, :, 1:]).abs().sum()
    return (dx + dy) * (1.0 / (h * w))


@dataclass
class LossTerms:
    total: Tensor
    photometric: float
    smoothness: float


def total_loss(flows, first, second, cfg: LossConfig = LossConfig()) -> LossTerms:
    """Sum over scales of photometric + smooth_weight * smoothness.

    With ``smooth_weight == 0`` the smoothness term is only evaluated for
    reporting, outside the gradient tape.
    """
    flows = list(flows)
    if not flows:
        raise ContractError("total_loss needs at least one flow scale")
    total = None
    photo_sum = 0.0
    smooth_sum = 0.0
    for flow in flows:
        photo = photometric_loss(flow, first, second, cfg)
        photo_sum += photo.item()
        term = photo
        if cfg.smooth_weight > 0:
            smooth = smoothness_loss(flow)
            term = term + smooth * cfg.smooth_weight
            smooth_sum += smooth.item()
        else:
            with no_grad():
                smooth_sum += smoothness_loss(flow.detach()).item()
        total = term if total is None else total + term
    return LossTerms(total, photo_sum, smooth_sum)
