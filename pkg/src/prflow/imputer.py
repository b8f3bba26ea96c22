"""Latent-space imputation network and the end-to-end impute pipeline.

A partially observed image is filled in by encoding its current estimate
with the flow, mapping the latent code through a fully connected imputer
net, decoding back to pixel space, and finally hard-merging the known
pixels back in. Observed entries are never altered by any step here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .errors import EmptySampleError, ShapeError
from .flow import FlowNetwork, _as_batch


def default_imputer_hidden(dim: int) -> int:
    return 784 if dim == 784 else 1024


@dataclass
class MaskedSample:
    """Image values plus a per-pixel observation mask (1 = observed).

    ``values`` holds the current fill at unobserved positions; observed
    positions hold the original measurement and must never change.
    ``ground_truth`` is only available at test time.
    """

    values: np.ndarray
    mask: np.ndarray
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.values.ndim not in (2, 3):
            raise ShapeError("values must be (H, W) or (H, W, C)")
        if self.mask.shape != self.values.shape[:2]:
            raise ShapeError("mask must match the (H, W) pixel grid of values")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.mask = self.mask.astype(bool)
        if not np.isfinite(self.values).all():
            raise ValueError("values contain non-finite entries")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
            if self.ground_truth.shape != self.values.shape:
                raise ShapeError("ground_truth must match values")

    @property
    def pixel_mask(self) -> np.ndarray:
        """Mask broadcast to the shape of values (channels share one decision)."""
        if self.values.ndim == 3:
            return np.repeat(self.mask[:, :, None], self.values.shape[2], axis=2)
        return self.mask


class ImputerNetwork(nn.Module):
    """Fully connected latent-space map with three hidden layers.

    The output is the input plus a residual multi-layer perceptron whose
    final layer is scaled down at initialization, so a fresh network is a
    near-identity map (exactly identity when ``init_scale`` is zero).
    """

    def __init__(
        self,
        dim: int,
        hidden: int | None = None,
        init_scale: float = 1e-3,
        seed: int = 0,
    ):
        super().__init__()
        self.dim = int(dim)
        hidden = default_imputer_hidden(dim) if hidden is None else int(hidden)
        sizes = [dim, hidden, hidden, hidden, dim]
        self.net = nn.Sequential(
            nn.Linear(sizes[0], sizes[1], dtype=torch.float64), nn.Tanh(),
            nn.Linear(sizes[1], sizes[2], dtype=torch.float64), nn.Tanh(),
            nn.Linear(sizes[2], sizes[3], dtype=torch.float64), nn.Tanh(),
            nn.Linear(sizes[3], sizes[4], dtype=torch.float64),
        )
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x494D5055]))
        linears = [m for m in self.net if isinstance(m, nn.Linear)]
        for lin in linears:
            a = math.sqrt(6.0 / (lin.in_features + lin.out_features))
            w = rng.uniform(-a, a, size=(lin.out_features, lin.in_features))
            with torch.no_grad():
                lin.weight.copy_(torch.from_numpy(w))
                lin.bias.zero_()
        with torch.no_grad():
            linears[-1].weight.mul_(float(init_scale))

    def forward(self, y) -> Tensor:
        y, single = _as_batch(y, self.dim, "y")
        out = y + self.net(y)
        return out[0] if single else out


def shallow_init(sample: MaskedSample) -> np.ndarray:
    """Nearest-observed-pixel fill used before any model exists.

    Each missing pixel copies the value of the nearest observed pixel in
    2-D Euclidean distance; ties go to the donor earliest in row-major
    scan order. For multichannel images all channels copy from the same
    donor pixel.
    """
    values = sample.values
    filled = values.copy()
    donors = _nearest_donor_indices(sample.mask)
    h, w = sample.mask.shape
    miss = ~sample.mask
    if values.ndim == 3:
        flatv = values.reshape(h * w, -1)
        filled.reshape(h * w, -1)[miss.ravel()] = flatv[donors]
    else:
        filled[miss] = values.ravel()[donors]
    return filled


def _nearest_donor_indices(mask: np.ndarray) -> np.ndarray:
    """Flat indices of the nearest observed pixel for each missing pixel."""
    h, w = mask.shape
    obs = np.argwhere(mask)  # row-major order, which is the tie-break order
    if obs.shape[0] == 0:
        raise EmptySampleError("sample has no observed pixels")
    missing = np.argwhere(~mask)
    if missing.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    # Squared distances missing x observed; argmin returns the first (and
    # therefore lowest scan-order) donor among ties.
    d2 = ((missing[:, None, :] - obs[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    return obs[nearest, 0] * w + obs[nearest, 1]


def shallow_init_batch(values: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Vectorized nearest-neighbor fill over a stack of (H, W) images."""
    out = np.empty_like(values, dtype=np.float64)
    for i in range(values.shape[0]):
        out[i] = shallow_init(MaskedSample(values[i], masks[i]))
    return out


def imputer_apply(net: ImputerNetwork, y) -> Tensor:
    """Deterministic forward pass of the imputer network."""
    return net.forward(y)


def merge_observed(x_hat, sample: MaskedSample) -> np.ndarray:
    """Hard merge: observed entries from the sample, the rest from x_hat clamped to [0,1]."""
    x_hat = np.asarray(
        x_hat.detach().numpy() if isinstance(x_hat, torch.Tensor) else x_hat,
        dtype=np.float64,
    ).reshape(sample.values.shape)
    pm = sample.pixel_mask
    return np.where(pm, sample.values, np.clip(x_hat, 0.0, 1.0))


def impute(
    x_prev: np.ndarray,
    sample: MaskedSample,
    flow: FlowNetwork,
    imputer: ImputerNetwork,
) -> np.ndarray:
    """One refinement pass: encode, remap latent, decode, merge observed.

    ``x_prev`` is the current estimate (it must agree with the sample at
    observed positions). The result again agrees there bitwise.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != sample.values.shape:
        raise ShapeError("x_prev must match the sample's value shape")
    flat = x_prev.reshape(1, -1)
    pm = sample.pixel_mask.reshape(1, -1)
    merged = impute_batch(flat, sample.values.reshape(1, -1), pm, flow, imputer)
    return merged.reshape(sample.values.shape)


def reconstruct_batch(
    x_prev: Tensor, flow: FlowNetwork, imputer: ImputerNetwork
) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-merge reconstruction G^-1(H(G(x))) with its forward logdet.

    Returns (y_rec, x_rec, logdet): the imputed latent code, its preimage,
    and the flow's forward Jacobian log-determinant evaluated at x_rec,
    collected during the inverse pass.
    """
    y, _ = flow.forward(x_prev)
    y_rec = imputer.forward(y)
    x_rec, logdet = flow.inverse_with_logdet(y_rec)
    return y_rec, x_rec, logdet


def impute_dataset(
    observed_images: np.ndarray,
    masks: np.ndarray,
    flow: FlowNetwork,
    imputer: ImputerNetwork,
    passes: int = 2,
) -> np.ndarray:
    """Impute a stack of masked images from scratch with a trained model.

    Starts from the nearest-observed-neighbor fill and applies the trained
    round operator ``passes`` times. Unobserved input values are discarded
    up front, so only observed pixels influence the result.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    observed_images = np.asarray(observed_images, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if masks.shape != observed_images.shape[:3]:
        raise ShapeError(f"masks {masks.shape} do not match images {observed_images.shape}")
    if observed_images.ndim == 4:
        pixel_masks = np.repeat(masks[..., None], observed_images.shape[3], axis=3)
    else:
        pixel_masks = masks
    observed_images = np.where(pixel_masks, observed_images, 0.0)
    n = observed_images.shape[0]
    x = shallow_init_batch(observed_images, masks).reshape(n, -1)
    obs_rows = observed_images.reshape(n, -1)
    mask_rows = pixel_masks.reshape(n, -1)
    for _ in range(passes):
        x = impute_batch(x, obs_rows, mask_rows, flow, imputer)
    return x.reshape(observed_images.shape)


def impute_batch(
    x_prev: np.ndarray,
    observed: np.ndarray,
    pixel_masks: np.ndarray,
    flow: FlowNetwork,
    imputer: ImputerNetwork,
    chunk: int = 256,
) -> np.ndarray:
    """Apply the impute pipeline over flattened rows, merging per row.

    ``pixel_masks`` must already be broadcast to per-entry shape (N, D).
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    out = np.empty_like(x_prev)
    with torch.no_grad():
        for lo in range(0, x_prev.shape[0], chunk):
            hi = min(lo + chunk, x_prev.shape[0])
            xt = torch.from_numpy(x_prev[lo:hi])
            _, x_rec, _ = reconstruct_batch(xt, flow, imputer)
            rec = x_rec.numpy()
            out[lo:hi] = np.where(
                pixel_masks[lo:hi], observed[lo:hi], np.clip(rec, 0.0, 1.0)
            )
    return out
