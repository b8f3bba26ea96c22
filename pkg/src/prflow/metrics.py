"""Evaluation metrics: masked RMSE, Fréchet distance, and semantic consistency.

The Fréchet distance is computed between Gaussian fits of classifier
features via symmetric eigendecompositions rather than a general matrix
square root; covariances are symmetric PSD up to rounding, so eigenvalues
are clipped at a small threshold before taking square roots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptySampleError, ShapeError
from .training import Adam

FEATURE_DIM = 64


def rmse_missing(imputed: np.ndarray, ground_truth: np.ndarray, masks: np.ndarray) -> float:
    """Root-mean-square error pooled over every missing pixel in the stack.

    ``masks`` marks observed pixels True; only False positions enter the
    error. Raises EmptySampleError when nothing is missing anywhere.
    """
    imputed = np.asarray(imputed, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if imputed.shape != ground_truth.shape:
        raise ShapeError(f"imputed {imputed.shape} vs ground truth {ground_truth.shape}")
    if masks.shape != imputed.shape[: masks.ndim] or masks.ndim not in (imputed.ndim, imputed.ndim - 1):
        raise ShapeError(f"masks shape {masks.shape} does not match images {imputed.shape}")
    if masks.ndim == imputed.ndim - 1:
        masks = np.repeat(masks[..., None], imputed.shape[-1], axis=-1)
    missing = ~masks
    count = int(missing.sum())
    if count == 0:
        raise EmptySampleError("no missing pixels; masked RMSE is undefined")
    err = (imputed - ground_truth)[missing]
    return float(np.sqrt(np.mean(err**2)))


@dataclass(frozen=True)
class GaussianStats:
    """Sample mean and covariance of a feature cloud."""

    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be (N, F), got {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to estimate a covariance")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=mean, cov=cov, n=n)


def _psd_sqrt(mat: np.ndarray, clip: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.where(vals < clip, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _check_symmetric(cov: np.ndarray, name: str) -> None:
    scale = 1.0 + float(np.abs(cov).max(initial=0.0))
    gap = float(np.abs(cov - cov.T).max(initial=0.0))
    if gap > 1e-10 * scale:
        raise ValueError(f"{name} covariance is not symmetric (max asymmetry {gap:g})")


def frechet_distance(a: GaussianStats, b: GaussianStats, eig_clip: float = 1e-10) -> float:
    """Squared Fréchet distance between two Gaussian feature fits."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError("feature dimensions differ between the two sides")
    _check_symmetric(a.cov, "first")
    _check_symmetric(b.cov, "second")
    diff = a.mean - b.mean
    s1h = _psd_sqrt(a.cov, eig_clip)
    inner = s1h @ b.cov @ s1h
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    vals = np.where(vals < eig_clip, 0.0, vals)
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(vals).sum())
    if d2 < -1e-8:
        raise ValueError(f"Fréchet distance came out significantly negative ({d2:g})")
    return max(d2, 0.0)


def scc(acc_imputed: float, acc_reference: float) -> float:
    """Semantic consistency: accuracy ratio against the clean-data reference, capped at 1."""
    if acc_reference <= 0:
        raise ValueError("reference accuracy must be positive")
    return min(1.0, acc_imputed / acc_reference)


class BenchmarkClassifier(torch.nn.Module):
    """Fixed small MLP used for both the Fréchet features and the SCC accuracies."""

    def __init__(self, dim: int, num_classes: int = 10, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.acc_0: float | None = None
        self.fc1 = torch.nn.Linear(dim, 128, dtype=torch.float64)
        self.fc2 = torch.nn.Linear(128, FEATURE_DIM, dtype=torch.float64)
        self.fc3 = torch.nn.Linear(FEATURE_DIM, num_classes, dtype=torch.float64)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x434C4153]))
        with torch.no_grad():
            for lin in (self.fc1, self.fc2, self.fc3):
                fan_in, fan_out = lin.weight.shape[1], lin.weight.shape[0]
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                lin.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(lin.weight.shape))))
                lin.bias.zero_()

    def _rows(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            arr = np.ascontiguousarray(x, dtype=np.float64)
            if not arr.flags.writeable:  # torch refuses read-only buffers
                arr = arr.copy()
            x = torch.from_numpy(arr)
        x = x.to(torch.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} features per sample, got {x.shape[1]}")
        return x

    def features(self, x) -> torch.Tensor:
        """Penultimate activations, the feature space of the Fréchet metric."""
        h = torch.tanh(self.fc1(self._rows(x)))
        return torch.tanh(self.fc2(h))

    def logits(self, x) -> torch.Tensor:
        return self.fc3(self.features(x))

    @torch.no_grad()
    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(dim=1).numpy()

    @torch.no_grad()
    def accuracy(self, images, labels) -> float:
        labels = np.asarray(labels)
        return float((self.predict(images) == labels).mean())

    @torch.no_grad()
    def feature_array(self, images) -> np.ndarray:
        return self.features(images).numpy()


def train_benchmark_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    test_images: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    seed: int = 0,
    epochs: int = 40,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
) -> BenchmarkClassifier:
    """Fit the benchmark classifier with deterministic batching and init.

    When a fully observed test split is given, its accuracy is frozen onto
    the classifier as ``acc_0``, the SCC reference.
    """
    if labels is None:
        raise ValueError("benchmark classifier needs a labeled dataset")
    images = np.array(images, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    n = images.shape[0]
    if labels.shape != (n,):
        raise ShapeError("labels must be one integer per image")
    rows = images.reshape(n, -1)
    clf = BenchmarkClassifier(rows.shape[1], seed=seed)
    if labels.min() < 0 or labels.max() >= clf.num_classes:
        raise ValueError(f"labels must lie in [0, {clf.num_classes})")
    params = list(clf.parameters())
    opt = Adam(params, lr=learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x434C5452]))
    targets = torch.from_numpy(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            xb = torch.from_numpy(rows[idx])
            logp = torch.log_softmax(clf.logits(xb), dim=1)
            loss = -logp[torch.arange(len(idx)), targets[idx]].mean()
            grads = torch.autograd.grad(loss, params)
            opt.step(grads)
    if test_images is not None and test_labels is not None:
        clf.acc_0 = clf.accuracy(np.asarray(test_images, dtype=np.float64), test_labels)
    return clf
