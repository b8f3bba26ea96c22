"""Independent oracles and small helpers shared across the test suite.

Everything here is deliberately implemented with a different method than
the library code it checks: finite differences instead of autograd,
scipy's general matrix square root instead of symmetric eigendecomposition,
explicit double loops instead of vectorized reductions.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import linalg


def numerical_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector map f: R^D -> R^D."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    jac = np.empty((d, d))
    for j in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[j] += eps
        xm[j] -= eps
        jac[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * eps)
    return jac


def fd_param_gradients(loss_fn, params, eps: float = 1e-5):
    """Central-difference gradient of a scalar loss w.r.t. each parameter tensor.

    ``loss_fn`` must recompute the loss from the current parameter values.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gf = g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                lp = float(loss_fn())
                flat[i] = orig - eps
                lm = float(loss_fn())
                flat[i] = orig
                gf[i] = (lp - lm) / (2.0 * eps)
            grads.append(g)
    return grads


def relative_gradient_error(analytic, numeric) -> float:
    """‖g_a − g_n‖ / max(‖g_n‖, tiny), pooled over all parameter tensors."""
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(float(n.norm()), 1e-12)
    return float((a - n).norm()) / denom


def randomize_module_(module: torch.nn.Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every parameter with small random values (breaks identity init)."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, scale, size=tuple(p.shape))))


def frechet_reference(mu1, cov1, mu2, cov2) -> float:
    """Fréchet distance via scipy's general matrix square root."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    covmean = linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))


def rmse_missing_reference(recovered, truth, masks) -> float:
    """Brute-force double loop over samples and pixels."""
    recovered = np.asarray(recovered, float)
    truth = np.asarray(truth, float)
    masks = np.asarray(masks, bool)
    total = 0.0
    count = 0
    for i in range(recovered.shape[0]):
        rec_i = recovered[i].reshape(-1)
        tru_i = truth[i].reshape(-1)
        msk_i = masks[i].reshape(-1)
        for j in range(rec_i.size):
            if not msk_i[j]:
                total += (rec_i[j] - tru_i[j]) ** 2
                count += 1
    if count == 0:
        raise ZeroDivisionError("reference rmse has no missing pixels")
    return float(np.sqrt(total / count))


def covariance_reference(x) -> tuple[np.ndarray, np.ndarray]:
    """Textbook two-pass mean and unbiased covariance."""
    x = np.asarray(x, float)
    n, f = x.shape
    mean = np.zeros(f)
    for row in x:
        mean += row
    mean /= n
    cov = np.zeros((f, f))
    for row in x:
        d = row - mean
        cov += np.outer(d, d)
    cov /= n - 1
    return mean, cov


def tv_reference(img) -> float:
    """Anisotropic total variation over valid (interior) differences."""
    img = np.asarray(img, float)
    total = 0.0
    for r in range(img.shape[0]):
        for c in range(img.shape[1] - 1):
            total += abs(img[r, c] - img[r, c + 1])
    for r in range(img.shape[0] - 1):
        for c in range(img.shape[1]):
            total += abs(img[r, c] - img[r + 1, c])
    return total


def hyper_laplacian_reference(img, alpha: float, epsilon: float, kernels) -> float:
    """Penalty by explicit loops: valid correlation with each kernel, then Σ(z²+ε)^{α/2}."""
    img = np.asarray(img, float)
    total = 0.0
    for k in kernels:
        k = np.asarray(k, float)
        kh, kw = k.shape
        for r in range(img.shape[0] - kh + 1):
            for c in range(img.shape[1] - kw + 1):
                z = 0.0
                for dr in range(kh):
                    for dc in range(kw):
                        z += img[r + dr, c + dc] * k[dr, dc]
                total += (z * z + epsilon) ** (alpha / 2.0)
    return total


def nearest_fill_reference(values, mask) -> np.ndarray:
    """Nearest observed pixel per missing pixel, row-major tie-break, by brute force."""
    values = np.asarray(values, float)
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    out = values.copy()
    observed = [(r, c) for r in range(h) for c in range(w) if mask[r, c]]
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                continue
            best = None
            best_d = None
            for (orow, ocol) in observed:
                d = (orow - r) ** 2 + (ocol - c) ** 2
                if best_d is None or d < best_d:
                    best_d = d
                    best = (orow, ocol)
            out[r, c] = values[best[0], best[1]]
    return out


def adam_reference(grads_sequence, x0, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
    """Scalar-loop Adam trajectory for a fixed gradient sequence."""
    x = np.asarray(x0, float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads_sequence, start=1):
        g = np.asarray(g, float)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return x
