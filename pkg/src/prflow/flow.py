"""Invertible affine-coupling density model with exact likelihoods.

The network is a stack of affine coupling layers over flattened image
vectors. Each layer leaves one half of the dimensions untouched and
applies an elementwise affine map to the other half, conditioned on the
untouched half, so the Jacobian log-determinant is just the sum of the
log-scales. Composing layers with alternating partitions gives an exactly
invertible map whose log-likelihood under a standard-normal latent is
available in closed form.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .errors import FlowOverflowError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


def default_coupling_hidden(dim: int) -> int:
    """Default hidden width of the coupling subnets."""
    return max(256, dim // 2)


def alternating_partition(dim: int, layer_index: int) -> np.ndarray:
    """Binary partition vector marking the identity half of a layer.

    Even layers keep the even flattened indices fixed, odd layers the odd
    ones, so consecutive layers are complementary and every dimension is
    transformed somewhere in the stack.
    """
    idx = np.arange(dim)
    if layer_index % 2 == 0:
        return (idx % 2 == 0)
    return (idx % 2 == 1)


def _as_batch(x, dim: int, name: str) -> tuple[Tensor, bool]:
    t = torch.as_tensor(x, dtype=torch.float64)
    single = t.ndim == 1
    if single:
        t = t.unsqueeze(0)
    if t.ndim != 2 or t.shape[1] != dim:
        raise ShapeError(f"{name} must have {dim} columns, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite entries")
    return t, single


def _check_finite(t: Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise FlowOverflowError(f"non-finite values after {where}")


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=torch.float64),
        nn.Tanh(),
        nn.Linear(hidden, hidden, dtype=torch.float64),
        nn.Tanh(),
        nn.Linear(hidden, out_dim, dtype=torch.float64),
    )


def _glorot_init_(net: nn.Sequential, rng: np.random.Generator) -> None:
    # Hidden layers get Glorot-uniform weights, the output layer starts at
    # zero so a fresh layer is exactly the identity map.
    linears = [m for m in net if isinstance(m, nn.Linear)]
    for lin in linears[:-1]:
        fan_in, fan_out = lin.in_features, lin.out_features
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        with torch.no_grad():
            lin.weight.copy_(torch.from_numpy(w))
            lin.bias.zero_()
    with torch.no_grad():
        linears[-1].weight.zero_()
        linears[-1].bias.zero_()


class CouplingLayer(nn.Module):
    """One affine coupling transform.

    ``partition`` marks the identity half (True entries pass through
    unchanged). The transformed half is mapped to ``x*exp(s) + t`` where
    ``s`` and ``t`` come from two small fully connected nets reading the
    identity half. The raw scale output is squashed through a bounded odd
    function so ``|s| < scale_bound``, which keeps ``exp(s)`` from
    overflowing early in training.
    """

    def __init__(
        self,
        partition: np.ndarray,
        hidden: int | None = None,
        scale_bound: float = 2.0,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        partition = np.asarray(partition, dtype=bool)
        if partition.ndim != 1:
            raise ShapeError("partition must be a 1-D binary vector")
        n_id = int(partition.sum())
        n_tr = int((~partition).sum())
        if n_id == 0 or n_tr == 0:
            raise ValueError("partition must mark at least one identity and one transformed dim")
        if scale_bound <= 0:
            raise ValueError("scale_bound must be positive")
        self.dim = partition.size
        self.scale_bound = float(scale_bound)
        self.register_buffer("partition", torch.from_numpy(partition.astype(np.uint8)))
        self.register_buffer("idx_id", torch.from_numpy(np.flatnonzero(partition)))
        self.register_buffer("idx_tr", torch.from_numpy(np.flatnonzero(~partition)))
        hidden = default_coupling_hidden(self.dim) if hidden is None else int(hidden)
        self.scale_net = _mlp(n_id, hidden, n_tr)
        self.translate_net = _mlp(n_id, hidden, n_tr)
        if rng is None:
            rng = np.random.default_rng(0)
        _glorot_init_(self.scale_net, rng)
        _glorot_init_(self.translate_net, rng)

    def _scale_translate(self, x_id: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.scale_net(x_id)
        s = self.scale_bound * torch.tanh(raw / self.scale_bound)
        return s, self.translate_net(x_id)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Map x -> (y, logdet). Identity-half entries of y equal those of x."""
        x, single = _as_batch(x, self.dim, "x")
        x_id = x[:, self.idx_id]
        s, t = self._scale_translate(x_id)
        y = x.clone()
        y[:, self.idx_tr] = x[:, self.idx_tr] * torch.exp(s) + t
        logdet = s.sum(dim=1)
        if single:
            return y[0], logdet[0]
        return y, logdet

    def inverse(self, y) -> tuple[Tensor, Tensor]:
        """Map y -> (x, logdet) with logdet that of the forward map at x.

        The scale net reads only the identity half, which forward and
        inverse share, so the returned logdet is bitwise the forward one.
        """
        y, single = _as_batch(y, self.dim, "y")
        y_id = y[:, self.idx_id]
        s, t = self._scale_translate(y_id)
        x = y.clone()
        x[:, self.idx_tr] = (y[:, self.idx_tr] - t) * torch.exp(-s)
        logdet = s.sum(dim=1)
        if single:
            return x[0], logdet[0]
        return x, logdet


class PixelLogit(nn.Module):
    """Optional logit pre-transform from [0,1] pixels to the real line.

    Maps x through u = margin + (1 - 2*margin)*x and then log(u/(1-u)),
    with the exact per-dimension log-determinant accounted for.
    """

    def __init__(self, margin: float = 0.05):
        super().__init__()
        if not 0.0 < margin < 0.5:
            raise ValueError("logit margin must lie in (0, 0.5)")
        self.margin = float(margin)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a = self.margin
        u = a + (1.0 - 2.0 * a) * x
        if (u <= 0).any() or (u >= 1).any():
            raise FlowOverflowError("logit input outside its open domain")
        y = torch.log(u) - torch.log1p(-u)
        logdet = (math.log(1.0 - 2.0 * a) - torch.log(u) - torch.log1p(-u)).sum(dim=1)
        return y, logdet

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        a = self.margin
        u = torch.sigmoid(y)
        x = (u - a) / (1.0 - 2.0 * a)
        logdet = (math.log(1.0 - 2.0 * a) - torch.log(u) - torch.log1p(-u)).sum(dim=1)
        return x, logdet


class FlowNetwork(nn.Module):
    """Stack of affine coupling layers with exact forward/inverse/logdet."""

    def __init__(
        self,
        dim: int,
        num_layers: int = 6,
        hidden: int | None = None,
        scale_bound: float = 2.0,
        seed: int = 0,
        logit_input: bool = False,
        logit_margin: float = 0.05,
    ):
        super().__init__()
        if dim < 2:
            raise ValueError("flow needs at least 2 dimensions to partition")
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.dim = int(dim)
        ss = np.random.SeedSequence([int(seed), 0x464C4F57])  # namespace tag for flow init
        rngs = [np.random.default_rng(s) for s in ss.spawn(num_layers)]
        self.layers = nn.ModuleList(
            CouplingLayer(alternating_partition(dim, i), hidden, scale_bound, rngs[i])
            for i in range(num_layers)
        )
        self.logit = PixelLogit(logit_margin) if logit_input else None

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Compose all layers; returns (y, total_logdet)."""
        x, single = _as_batch(x, self.dim, "x")
        total = torch.zeros(x.shape[0], dtype=torch.float64)
        if self.logit is not None:
            x, ld = self.logit(x)
            total = total + ld
        for i, layer in enumerate(self.layers):
            x, ld = layer.forward(x)
            _check_finite(x, f"coupling layer {i}")
            total = total + ld
        if single:
            return x[0], total[0]
        return x, total

    def inverse(self, y) -> Tensor:
        """Apply layer inverses in reverse order."""
        x, _ = self.inverse_with_logdet(y)
        return x

    def inverse_with_logdet(self, y) -> tuple[Tensor, Tensor]:
        """Inverse map plus the forward log-determinant evaluated at the output.

        Useful when the likelihood of an inverse-mapped point is needed
        without a second forward pass.
        """
        y, single = _as_batch(y, self.dim, "y")
        total = torch.zeros(y.shape[0], dtype=torch.float64)
        for i in reversed(range(len(self.layers))):
            y, ld = self.layers[i].inverse(y)
            _check_finite(y, f"coupling layer {i} (inverse)")
            total = total + ld
        if self.logit is not None:
            y, ld = self.logit.inverse(y)
            total = total + ld
        if single:
            return y[0], total[0]
        return y, total

    def log_likelihood(self, x) -> Tensor:
        """Exact log-density: standard-normal log-density of the latent plus logdet."""
        x_t, single = _as_batch(x, self.dim, "x")
        y, logdet = self.forward(x_t)
        ll = latent_log_density(y) + logdet
        if single:
            return ll[0]
        return ll


def latent_log_density(y) -> Tensor:
    """Log-density of a standard spherical Gaussian latent."""
    y = torch.as_tensor(y, dtype=torch.float64)
    single = y.ndim == 1
    if single:
        y = y.unsqueeze(0)
    ll = -0.5 * (y.shape[1] * LOG_2PI + (y * y).sum(dim=1))
    return ll[0] if single else ll


def nll_gradient(flow: FlowNetwork, batch) -> list[Tensor]:
    """Exact gradient of the mean negative log-likelihood w.r.t. all flow parameters.

    Returned tensors align with ``list(flow.parameters())``.
    """
    batch, _ = _as_batch(batch, flow.dim, "batch")
    params = [p for p in flow.parameters()]
    nll = -flow.log_likelihood(batch).mean()
    grads = torch.autograd.grad(nll, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
