"""Losses, optimizer, and the alternating training schedule.

Each round has two phases. The flow phase fits the density model to the
current imputed training set by gradient descent on its mean negative
log-likelihood; the imputed data stays fixed. The imputer phase then
fits the latent-space imputer against a three-term loss (reconstruction
likelihood, observed-entry MSE, gradient-prior penalty) with the flow
frozen. Afterwards the whole training set is re-imputed and the round
counter advances. Convergence is declared when the observed-entry MSE
stops moving.

The likelihood and prior terms are evaluated on the pre-merge
reconstruction; merging observed pixels back in happens only when the
imputed training set is materialized. Merging inside the loss would zero
the gradients at observed positions and make the MSE term vacuous.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, FlowOverflowError, TrainingDivergedError
from .flow import FlowNetwork, latent_log_density
from .imputer import ImputerNetwork, impute_batch, reconstruct_batch, shallow_init_batch
from .prior import FilterBank, prior_penalty_rows

_BATCH_TAG = 0x42415443


@dataclass
class TrainConfig:
    """Hyperparameters of the alternating optimization."""

    alpha: float = 1.0 / 3.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    lam: float | None = None  # None: auto-equalize against the likelihood term at round 0
    j2_weight: float = 1.0
    epochs_per_phase: int = 1
    max_rounds: int = 30
    convergence_tol: float = 1e-3
    convergence_window: int = 5
    seed: int = 0
    filters: str = "derivative"
    prior_epsilon: float = 1e-6
    num_coupling_layers: int = 6
    coupling_hidden: int | None = None
    imputer_hidden: int | None = None
    imputer_init_scale: float = 1e-3
    scale_bound: float = 2.0
    logit_input: bool = False
    logit_margin: float = 0.05
    dequantize: bool = False

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be nonnegative (or null for auto)")
        if self.j2_weight < 0:
            raise ConfigError("j2_weight must be nonnegative")
        if self.epochs_per_phase < 1:
            raise ConfigError("epochs_per_phase must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.convergence_tol <= 0:
            raise ConfigError("convergence_tol must be positive")
        if self.convergence_window < 1:
            raise ConfigError("convergence_window must be >= 1")
        if self.prior_epsilon <= 0:
            raise ConfigError("prior_epsilon must be positive for training")
        if self.num_coupling_layers < 1:
            raise ConfigError("num_coupling_layers must be >= 1")
        if self.filters not in ("derivative", "literal"):
            raise ConfigError("filters must be 'derivative' or 'literal'")
        if not 0.0 < self.logit_margin < 0.5:
            raise ConfigError("logit_margin must lie in (0, 0.5)")


def _to_tensor(a) -> Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(torch.float64)
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def loss_flow(batch, flow: FlowNetwork) -> Tensor:
    """Mean negative log-likelihood of a batch under the flow."""
    return -flow.log_likelihood(_to_tensor(batch)).mean()


def loss_j1(x_prev, flow: FlowNetwork, imputer: ImputerNetwork) -> Tensor:
    """Mean NLL of the pre-merge reconstruction of a batch.

    The reconstruction's likelihood uses the latent code directly plus the
    forward log-determinant collected on the inverse pass, which equals a
    fresh forward evaluation at the reconstruction.
    """
    y_rec, _, logdet = reconstruct_batch(_to_tensor(x_prev), flow, imputer)
    return -(latent_log_density(y_rec) + logdet).mean()


def loss_j2(x_prev, observed, mask, flow: FlowNetwork, imputer: ImputerNetwork) -> Tensor:
    """Mean over samples of MSE at observed positions, pre-merge reconstruction."""
    _, x_rec, _ = reconstruct_batch(_to_tensor(x_prev), flow, imputer)
    return _j2_term(x_rec, _to_tensor(observed), _to_tensor(mask))


def loss_j3(
    x_prev,
    flow: FlowNetwork,
    imputer: ImputerNetwork,
    bank: FilterBank,
    image_shape: tuple[int, ...],
) -> Tensor:
    """Mean gradient-prior penalty of the pre-merge reconstructions."""
    _, x_rec, _ = reconstruct_batch(_to_tensor(x_prev), flow, imputer)
    return prior_penalty_rows(x_rec, image_shape, bank).mean()


def _j2_term(x_rec: Tensor, observed: Tensor, mask: Tensor) -> Tensor:
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        warnings.warn("batch contains samples with no observed pixels; they contribute 0 to the observed-entry MSE")
    sse = ((x_rec - observed) ** 2 * mask).sum(dim=1)
    safe = torch.where(counts > 0, counts, torch.ones_like(counts))
    per = torch.where(counts > 0, sse / safe, torch.zeros_like(sse))
    return per.mean()


def total_imputer_loss(
    x_prev,
    observed,
    mask,
    flow: FlowNetwork,
    imputer: ImputerNetwork,
    bank: FilterBank,
    image_shape: tuple[int, ...],
    lam: float,
    j2_weight: float = 1.0,
) -> tuple[Tensor, dict]:
    """Three-term imputer objective; returns (total, component values).

    The reconstruction is computed once and shared across the terms. The
    component dict holds detached floats for logging.
    """
    y_rec, x_rec, logdet = reconstruct_batch(_to_tensor(x_prev), flow, imputer)
    j1 = -(latent_log_density(y_rec) + logdet).mean()
    j2 = _j2_term(x_rec, _to_tensor(observed), _to_tensor(mask))
    j3 = prior_penalty_rows(x_rec, image_shape, bank).mean()
    total = j1 + j2_weight * j2 + lam * j3
    parts = {"j1": float(j1.detach()), "j2": float(j2.detach()), "j3": float(j3.detach())}
    return total, parts


def auto_lambda(j1_0: float, j3_0: float) -> float:
    """Prior weight that equalizes the likelihood and prior terms at round 0."""
    if j3_0 <= 0:
        warnings.warn("prior term is nonpositive at round 0; falling back to lambda=1")
        return 1.0
    if j1_0 <= 0:
        warnings.warn("likelihood term is nonpositive at round 0; falling back to lambda=1")
        return 1.0
    return j1_0 / j3_0


def has_converged(j2_history, config: TrainConfig) -> bool:
    """True when the observed-entry MSE has stopped moving, or the round budget is spent."""
    n = len(j2_history)
    if n >= config.max_rounds:
        return True
    if n < config.convergence_window:
        return False
    window = list(j2_history)[-config.convergence_window:]
    rel = 0.0
    for a, b in zip(window, window[1:]):
        rel = max(rel, abs(b - a) / max(abs(a), 1e-12))
    return rel < config.convergence_tol


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.add_(-self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))

    def state_arrays(self) -> "AdamStateData":
        return AdamStateData(
            m=[t.numpy().copy() for t in self.m],
            v=[t.numpy().copy() for t in self.v],
            t=self.t,
        )

    def load_state_arrays(self, state: "AdamStateData") -> None:
        if len(state.m) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        with torch.no_grad():
            for m, v, ms, vs in zip(self.m, self.v, state.m, state.v):
                m.copy_(torch.from_numpy(ms))
                v.copy_(torch.from_numpy(vs))
        self.t = int(state.t)


@dataclass
class AdamStateData:
    m: list
    v: list
    t: int


@dataclass
class TrainState:
    """Serializable snapshot of a training run at a round boundary."""

    config: TrainConfig
    image_shape: tuple
    round_index: int
    lam: float | None
    learning_rate: float
    theta: list
    phi: list
    adam_flow: AdamStateData
    adam_imputer: AdamStateData
    rng_state: dict
    imputed_train: np.ndarray
    j2_history: list
    mask_seed: int


def networks_from_state(state: TrainState) -> tuple[FlowNetwork, ImputerNetwork]:
    """Rebuild the flow and imputer from a snapshot, for inference without data."""
    dim = int(np.prod(state.image_shape))
    cfg = state.config
    flow = FlowNetwork(
        dim,
        num_layers=cfg.num_coupling_layers,
        hidden=cfg.coupling_hidden,
        scale_bound=cfg.scale_bound,
        seed=cfg.seed,
        logit_input=cfg.logit_input,
        logit_margin=cfg.logit_margin,
    )
    imputer = ImputerNetwork(
        dim, hidden=cfg.imputer_hidden, init_scale=cfg.imputer_init_scale, seed=cfg.seed
    )
    with torch.no_grad():
        for p, arr in zip(flow.parameters(), state.theta):
            p.copy_(torch.from_numpy(np.asarray(arr)))
        for p, arr in zip(imputer.parameters(), state.phi):
            p.copy_(torch.from_numpy(np.asarray(arr)))
    return flow, imputer


class _Diverged(RuntimeError):
    pass


def _require_finite(loss: Tensor) -> None:
    if not torch.isfinite(loss):
        raise _Diverged(f"non-finite loss {float(loss.detach())!r}")


class Trainer:
    """Owns all mutable training state and runs the alternation.

    The trainer never sees unobserved pixel values: missing entries of the
    input are overwritten with zero before anything else happens, and the
    observed entries and masks are immutable afterwards.
    """

    MAX_ROUND_RETRIES = 5

    def __init__(
        self,
        observed: np.ndarray,
        masks: np.ndarray,
        config: TrainConfig,
        mask_seed: int = 0,
        metrics_path=None,
    ):
        config.validate()
        observed = np.asarray(observed, dtype=np.float64)
        masks = np.asarray(masks).astype(bool)
        if observed.ndim not in (3, 4):
            raise ConfigError("observed must be (N, H, W) or (N, H, W, C)")
        if masks.shape != observed.shape[:3]:
            raise ConfigError("masks must be (N, H, W)")
        self.config = config
        self.mask_seed = int(mask_seed)
        self.metrics_path = metrics_path
        self.image_shape = observed.shape[1:]
        n = observed.shape[0]
        dim = int(np.prod(self.image_shape))

        pixel_masks = masks if observed.ndim == 3 else np.repeat(
            masks[..., None], observed.shape[3], axis=3
        )
        observed = np.where(pixel_masks, observed, 0.0)
        self.observed_rows = observed.reshape(n, dim)
        self.mask_rows = pixel_masks.reshape(n, dim)
        self.observed_rows.setflags(write=False)
        self.mask_rows.setflags(write=False)

        self.flow = FlowNetwork(
            dim,
            num_layers=config.num_coupling_layers,
            hidden=config.coupling_hidden,
            scale_bound=config.scale_bound,
            seed=config.seed,
            logit_input=config.logit_input,
            logit_margin=config.logit_margin,
        )
        self.imputer = ImputerNetwork(
            dim,
            hidden=config.imputer_hidden,
            init_scale=config.imputer_init_scale,
            seed=config.seed,
        )
        self.bank = FilterBank.from_name(config.filters, config.alpha, config.prior_epsilon)
        self.x_train = shallow_init_batch(
            observed.reshape(-1, *self.image_shape), masks
        ).reshape(n, dim)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, _BATCH_TAG]))
        self.learning_rate = config.learning_rate
        self.adam_flow = Adam(self.flow.parameters(), self.learning_rate)
        self.adam_imputer = Adam(self.imputer.parameters(), self.learning_rate)
        self.lam = config.lam
        self.lambda_anchor: tuple[float, float] | None = None  # (j1, j3) where auto-lambda was set
        self.round_index = 0
        self.j2_history: list[float] = []

    # -- phases -------------------------------------------------------------

    def _batches(self):
        n = self.observed_rows.shape[0]
        order = self.rng.permutation(n)
        b = self.config.batch_size
        for lo in range(0, n, b):
            yield order[lo : lo + b]

    def _flow_phase(self) -> float:
        params = list(self.flow.parameters())
        self.adam_flow.lr = self.learning_rate
        epoch_mean = float("nan")
        for _ in range(self.config.epochs_per_phase):
            vals = []
            for idx in self._batches():
                xb = torch.from_numpy(self.x_train[idx])
                if self.config.dequantize:
                    noise = self.rng.random(xb.shape)
                    xb = (255.0 * xb + torch.from_numpy(noise)) / 256.0
                loss = loss_flow(xb, self.flow)
                _require_finite(loss)
                grads = torch.autograd.grad(loss, params)
                self.adam_flow.step(grads)
                vals.append(float(loss.detach()))
            epoch_mean = float(np.mean(vals))
        return epoch_mean

    def _imputer_phase(self) -> tuple[float, float, float]:
        flow_params = list(self.flow.parameters())
        for p in flow_params:
            p.requires_grad_(False)
        imp_params = list(self.imputer.parameters())
        self.adam_imputer.lr = self.learning_rate
        means = (float("nan"),) * 3
        try:
            for _ in range(self.config.epochs_per_phase):
                j1s, j2s, j3s = [], [], []
                for idx in self._batches():
                    x_prev = torch.from_numpy(self.x_train[idx])
                    obs = torch.from_numpy(self.observed_rows[idx])
                    msk = torch.from_numpy(self.mask_rows[idx].astype(np.float64))
                    if self.lam is None:
                        with torch.no_grad():
                            j1_0 = float(loss_j1(x_prev, self.flow, self.imputer))
                            j3_0 = float(
                                loss_j3(x_prev, self.flow, self.imputer, self.bank, self.image_shape)
                            )
                        self.lam = auto_lambda(j1_0, j3_0)
                        self.lambda_anchor = (j1_0, j3_0)
                    total, parts = total_imputer_loss(
                        x_prev, obs, msk,
                        self.flow, self.imputer, self.bank, self.image_shape,
                        lam=self.lam, j2_weight=self.config.j2_weight,
                    )
                    _require_finite(total)
                    grads = torch.autograd.grad(total, imp_params)
                    self.adam_imputer.step(grads)
                    j1s.append(parts["j1"])
                    j2s.append(parts["j2"])
                    j3s.append(parts["j3"])
                means = (float(np.mean(j1s)), float(np.mean(j2s)), float(np.mean(j3s)))
        finally:
            for p in flow_params:
                p.requires_grad_(True)
        return means

    def _reimpute(self) -> None:
        self.x_train = impute_batch(
            self.x_train, self.observed_rows, self.mask_rows, self.flow, self.imputer
        )

    # -- rounds -------------------------------------------------------------

    def train_round(self) -> dict:
        """One full round: flow phase, imputer phase, re-imputation.

        On a non-finite loss the round is aborted, parameters and rng are
        restored to the round start, the learning rate is halved, and the
        round is retried.
        """
        snapshot = self._snapshot()
        for _ in range(self.MAX_ROUND_RETRIES + 1):
            try:
                return self._run_round()
            except (_Diverged, FlowOverflowError) as exc:
                self._restore(snapshot)
                self.learning_rate /= 2.0
                snapshot["learning_rate"] = self.learning_rate
                warnings.warn(
                    f"round {self.round_index} diverged ({exc}); "
                    f"restored parameters and halved learning rate to {self.learning_rate:g}"
                )
        raise TrainingDivergedError(
            f"round {self.round_index} kept diverging after "
            f"{self.MAX_ROUND_RETRIES} learning-rate halvings"
        )

    def _run_round(self) -> dict:
        t0 = time.monotonic()
        j_flow = self._flow_phase()
        j1, j2, j3 = self._imputer_phase()
        self._reimpute()
        self.round_index += 1
        self.j2_history.append(j2)
        record = {
            "round": self.round_index,
            "j": j_flow,
            "j1": j1,
            "j2": j2,
            "j3": j3,
            "lambda": self.lam,
            "learning_rate": self.learning_rate,
            "wall_time_s": time.monotonic() - t0,
        }
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def train(self) -> list[dict]:
        """Run rounds until the convergence rule fires; returns round records."""
        records = []
        while not has_converged(self.j2_history, self.config):
            records.append(self.train_round())
        return records

    # -- state --------------------------------------------------------------

    def _snapshot(self) -> dict:
        return {
            "theta": [p.detach().clone() for p in self.flow.parameters()],
            "phi": [p.detach().clone() for p in self.imputer.parameters()],
            "adam_flow": self.adam_flow.state_arrays(),
            "adam_imputer": self.adam_imputer.state_arrays(),
            "rng_state": self.rng.bit_generator.state,
            "x_train": self.x_train.copy(),
            "lam": self.lam,
            "lambda_anchor": self.lambda_anchor,
            "learning_rate": self.learning_rate,
        }

    def _restore(self, snap: dict) -> None:
        with torch.no_grad():
            for p, s in zip(self.flow.parameters(), snap["theta"]):
                p.copy_(s)
            for p, s in zip(self.imputer.parameters(), snap["phi"]):
                p.copy_(s)
        self.adam_flow.load_state_arrays(snap["adam_flow"])
        self.adam_imputer.load_state_arrays(snap["adam_imputer"])
        self.rng.bit_generator.state = snap["rng_state"]
        self.x_train = snap["x_train"].copy()
        self.lam = snap["lam"]
        self.lambda_anchor = snap["lambda_anchor"]
        self.learning_rate = snap["learning_rate"]

    def to_state(self) -> TrainState:
        return TrainState(
            config=self.config,
            image_shape=tuple(self.image_shape),
            round_index=self.round_index,
            lam=self.lam,
            learning_rate=self.learning_rate,
            theta=[p.detach().numpy().copy() for p in self.flow.parameters()],
            phi=[p.detach().numpy().copy() for p in self.imputer.parameters()],
            adam_flow=self.adam_flow.state_arrays(),
            adam_imputer=self.adam_imputer.state_arrays(),
            rng_state=self.rng.bit_generator.state,
            imputed_train=self.x_train.copy(),
            j2_history=list(self.j2_history),
            mask_seed=self.mask_seed,
        )

    @classmethod
    def from_state(
        cls,
        state: TrainState,
        observed: np.ndarray,
        masks: np.ndarray,
        metrics_path=None,
    ) -> "Trainer":
        trainer = cls(observed, masks, state.config, state.mask_seed, metrics_path)
        if tuple(trainer.image_shape) != tuple(state.image_shape):
            raise ConfigError(
                f"checkpoint image shape {tuple(state.image_shape)} does not match "
                f"dataset shape {tuple(trainer.image_shape)}"
            )
        with torch.no_grad():
            for p, arr in zip(trainer.flow.parameters(), state.theta):
                p.copy_(torch.from_numpy(np.asarray(arr)))
            for p, arr in zip(trainer.imputer.parameters(), state.phi):
                p.copy_(torch.from_numpy(np.asarray(arr)))
        trainer.adam_flow.load_state_arrays(state.adam_flow)
        trainer.adam_imputer.load_state_arrays(state.adam_imputer)
        trainer.rng.bit_generator.state = state.rng_state
        trainer.x_train = state.imputed_train.copy()
        trainer.lam = state.lam
        trainer.learning_rate = state.learning_rate
        trainer.round_index = state.round_index
        trainer.j2_history = list(state.j2_history)
        return trainer
