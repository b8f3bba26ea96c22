"""Heavy-tailed image-gradient penalty used to regularize reconstructions.

The penalty is the negative log of a hyper-Laplacian density over filter
responses: sum over filters and positions of |response|^alpha with
0 < alpha <= 1. Responses come from valid (no padding) 2-D correlation
with a small derivative filter bank, so constant images cost nothing and
sparse, concentrated gradients cost less than diffuse ones.

|z|^alpha is smoothed to (z^2 + eps)^(alpha/2); the exact gradient of the
smoothed penalty is available in closed form via the correlation adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeError


def derivative_filters() -> list[np.ndarray]:
    """First-order difference kernels, horizontal and vertical."""
    return [np.array([[1.0, -1.0]]), np.array([[1.0], [-1.0]])]


def literal_filters() -> list[np.ndarray]:
    """Two-tap smoothing kernels [1,1] and [1,1]^T.

    These are not derivative filters; they exist as a selectable variant
    for fidelity experiments and are not the default.
    """
    return [np.array([[1.0, 1.0]]), np.array([[1.0], [1.0]])]


@dataclass
class FilterBank:
    """Kernels plus the tail exponent and smoothing constant of the penalty."""

    filters: list[np.ndarray] = field(default_factory=derivative_filters)
    alpha: float = 1.0 / 3.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.filters:
            raise ValueError("filter bank needs at least one kernel")
        self.filters = [np.asarray(f, dtype=np.float64) for f in self.filters]
        for f in self.filters:
            if f.ndim != 2:
                raise ShapeError("kernels must be 2-D")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        # epsilon == 0 is allowed for penalty evaluation (the unsmoothed
        # limit); the gradient requires epsilon > 0.
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @classmethod
    def from_name(cls, name: str, alpha: float = 1.0 / 3.0, epsilon: float = 1e-6):
        if name == "derivative":
            return cls(derivative_filters(), alpha, epsilon)
        if name == "literal":
            return cls(literal_filters(), alpha, epsilon)
        raise ValueError(f"unknown filter bank {name!r} (expected 'derivative' or 'literal')")


def _image_channels(x: Tensor) -> Tensor:
    """View an image as (C, H, W); channels are treated independently."""
    if x.ndim == 2:
        return x.unsqueeze(0)
    if x.ndim == 3:
        return x.permute(2, 0, 1)
    raise ShapeError("image must be (H, W) or (H, W, C)")


def _writable(x) -> np.ndarray:
    # torch refuses to wrap read-only arrays; datasets are stored read-only
    arr = np.asarray(x)
    return arr if arr.flags.writeable else arr.copy()


def _correlate_valid(channels: Tensor, kernel: Tensor) -> Tensor:
    # channels: (C, H, W), kernel: (kh, kw); cross-correlation, no padding
    if channels.shape[1] < kernel.shape[0] or channels.shape[2] < kernel.shape[1]:
        raise ShapeError(
            f"image {tuple(channels.shape[1:])} smaller than kernel {tuple(kernel.shape)}"
        )
    return F.conv2d(channels.unsqueeze(1), kernel.view(1, 1, *kernel.shape)).squeeze(1)


def gradient_maps(x, bank: FilterBank) -> list:
    """Valid correlation of the image with each kernel, per channel.

    Returns one response array per filter, each shaped like the image
    minus the kernel extent. Output type follows the input (numpy in,
    numpy out).
    """
    was_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(_writable(x), dtype=torch.float64)
    channels = _image_channels(xt)
    maps = []
    for f in bank.filters:
        k = torch.from_numpy(f)
        r = _correlate_valid(channels, k)
        if xt.ndim == 3:
            r = r.permute(1, 2, 0)
        else:
            r = r[0]
        maps.append(r.numpy() if was_numpy else r)
    return maps


def _penalty_channels(channels: Tensor, bank: FilterBank) -> Tensor:
    total = channels.new_zeros(())
    eps = float(bank.epsilon)
    half = bank.alpha / 2.0
    for f in bank.filters:
        z = _correlate_valid(channels, torch.from_numpy(f))
        total = total + (z * z + eps).pow(half).sum()
    return total


def prior_penalty(x, bank: FilterBank):
    """Smoothed negative log-prior of one image; smaller is more plausible.

    Sum over filters and positions of (z^2 + eps)^(alpha/2). The prior's
    proportionality constant is absorbed into the training weight, so
    this value is meaningful up to that factor.
    """
    if isinstance(x, torch.Tensor):
        return _penalty_channels(_image_channels(x), bank)
    xt = torch.as_tensor(_writable(x), dtype=torch.float64)
    return float(_penalty_channels(_image_channels(xt), bank))


def prior_penalty_rows(rows: Tensor, image_shape: tuple[int, ...], bank: FilterBank) -> Tensor:
    """Per-row penalty for a batch of flattened images, differentiable."""
    n = rows.shape[0]
    if len(image_shape) == 2:
        imgs = rows.view(n, 1, *image_shape)
    elif len(image_shape) == 3:
        imgs = rows.view(n, *image_shape).permute(0, 3, 1, 2)
    else:
        raise ShapeError("image_shape must be (H, W) or (H, W, C)")
    eps = float(bank.epsilon)
    half = bank.alpha / 2.0
    total = rows.new_zeros(n)
    for f in bank.filters:
        k = torch.from_numpy(f)
        z = F.conv2d(imgs.reshape(-1, 1, *imgs.shape[2:]), k.view(1, 1, *k.shape))
        per = (z * z + eps).pow(half).sum(dim=(1, 2, 3)).view(n, -1).sum(dim=1)
        total = total + per
    return total


def prior_gradient(x, bank: FilterBank):
    """Exact gradient of the smoothed penalty w.r.t. every pixel.

    For each filter, the chain rule gives alpha * z * (z^2+eps)^(alpha/2-1)
    on the response grid, pulled back through the correlation adjoint
    (full correlation with the flipped kernel). Requires eps > 0 since
    the unsmoothed penalty is not differentiable at zero response.
    """
    if bank.epsilon == 0:
        raise ValueError("prior gradient requires epsilon > 0")
    was_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(_writable(x), dtype=torch.float64)
    channels = _image_channels(xt)
    eps = float(bank.epsilon)
    grad = torch.zeros_like(channels)
    for f in bank.filters:
        k = torch.from_numpy(f)
        z = _correlate_valid(channels, k)
        w = bank.alpha * z * (z * z + eps).pow(bank.alpha / 2.0 - 1.0)
        # conv_transpose2d is the exact adjoint of the valid correlation
        grad = grad + F.conv_transpose2d(
            w.unsqueeze(1), k.view(1, 1, *k.shape)
        ).squeeze(1)
    if xt.ndim == 3:
        grad = grad.permute(1, 2, 0)
    else:
        grad = grad[0]
    return grad.numpy() if was_numpy else grad
