"""Joint training loop: Adamax, clipping, plateau decay, early stopping.

The loss couples three heads through the backward blipping recursion. All
recursion targets are built from detached head outputs: the blipped outcomes
use the current blip values as constants, and inside the blip loss both the
propensity and the conditional-mean estimates enter as constants. As a
result the blip head at step j is trained only through its own step-j
output, while the propensity and mean heads are trained by their own losses
against fixed targets; the nuisance estimates can never co-adapt to absorb
the blip residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NonFiniteError, Tensor
from .model import ArchConfig, ModelOutputs, TerraModel
from .snmm import Panel

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "time_weights",
    "AdamaxState",
    "adamax_step",
    "clip_gradients",
    "PlateauScheduler",
    "joint_losses",
    "LossBundle",
    "train",
    "TrainResult",
    "TRAINING_LOG_COLUMNS",
]

TIME_WEIGHT_STRATEGIES = ("uniform", "hyperbolic", "exponential", "linear_decay")

TRAINING_LOG_COLUMNS = [
    "epoch", "lr", "train_prop", "train_cmu", "train_blip",
    "val_prop", "val_cmu", "val_blip", "clipped_fraction",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}; diagnostics: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_max_norm: float = 1.0
    max_epochs: int = 300
    batch_size: int = 128
    patience_early_stop: int = 25
    patience_lr: int = 10
    lr_decay_factor: float = 0.5
    lambda_prop: float = 0.05
    lambda_cmu: float = 0.05
    lambda_blip: float = 20.0
    time_weight_strategy: str = "hyperbolic"
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lambda_prop < 0 or self.lambda_cmu < 0 or self.lambda_blip < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_prop == 0 and self.lambda_cmu == 0 and self.lambda_blip == 0:
            raise ValueError("at least one loss weight must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.clip_max_norm <= 0:
            raise ValueError("clip_max_norm must be positive")
        if self.time_weight_strategy not in TIME_WEIGHT_STRATEGIES:
            raise ValueError(
                f"unknown time weight strategy {self.time_weight_strategy!r}")


def time_weights(strategy: str, horizon: int) -> np.ndarray:
    """Per-step loss weights, indexed by 0-based step t.

    uniform: 1; hyperbolic: 10/(t+1); exponential: 10 * 0.8^t;
    linear_decay: 10 * (1 - 0.1 t), which leaves its valid regime once
    t reaches 10 and is rejected there.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    t = np.arange(horizon, dtype=np.float64)
    if strategy == "uniform":
        return np.ones(horizon)
    if strategy == "hyperbolic":
        return 10.0 / (t + 1.0)
    if strategy == "exponential":
        return 10.0 * 0.8 ** t
    if strategy == "linear_decay":
        w = 10.0 * (1.0 - 0.1 * t)
        if np.any(w <= 0):
            raise ValueError(
                "linear_decay weights become non-positive at t >= 10")
        return w
    raise ValueError(f"unknown time weight strategy {strategy!r}")


@dataclass
class AdamaxState:
    """First moment and infinity-norm second moment per parameter."""

    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamaxState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   u={k: np.zeros_like(v) for k, v in params.items()})


def adamax_step(state: AdamaxState, params: dict[str, np.ndarray],
                grads: dict[str, np.ndarray], lr: float, beta1: float,
                beta2: float, weight_decay: float, eps: float) -> None:
    """One in-place update.

    g <- grad + weight_decay * theta; m <- b1 m + (1-b1) g;
    u <- max(b2 u, |g|); theta <- theta - lr/(1-b1^step) * m/(u+eps).
    """
    state.step += 1
    bias = 1.0 - beta1 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.u[name] = np.maximum(beta2 * state.u[name], np.abs(g))
        theta -= (lr / bias) * state.m[name] / (state.u[name] + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float,
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients when the global l2 norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = float(np.sqrt(sq))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` non-improving epochs."""

    def __init__(self, lr: float, patience: int, factor: float):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


@dataclass
class LossBundle:
    prop: Tensor
    cmu: Tensor
    blip: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return (self.prop.item(), self.cmu.item(), self.blip.item(),
                self.total.item())


def _recursive_targets(blip_values: np.ndarray, z: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Detached blipped outcomes u [B, T+1] from current blip estimates."""
    b, t = z.shape
    realized = np.zeros((b, t))
    treated = z > 0
    rows, cols = np.nonzero(treated)
    realized[rows, cols] = blip_values[rows, cols, z[rows, cols] - 1]
    u = np.empty((b, t + 1))
    u[:, t] = y
    for j in range(t - 1, -1, -1):
        u[:, j] = u[:, j + 1] - realized[:, j]
    return u


def joint_losses(outputs: ModelOutputs, z: np.ndarray, y: np.ndarray,
                 weights: np.ndarray, lambdas: tuple[float, float, float],
                 ) -> LossBundle:
    """Time-weighted three-part loss over one batch.

    All targets (blipped outcomes, residualized indicators, residualized
    outcomes) are built from detached head outputs, so each loss trains only
    its own head and the step-j blip loss sees gradients only through the
    step-j blip output.
    """
    z = np.asarray(z, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    b, t = z.shape
    k = outputs.propensity.shape[-1]
    blip_np = outputs.blip.data
    e_np = outputs.propensity.data
    mu_np = outputs.cond_mean.data
    u = _recursive_targets(blip_np, z, y)
    onehot = np.zeros((b, t, k))
    onehot[np.arange(b)[:, None], np.arange(t)[None, :], z] = 1.0
    loss_prop = Tensor(0.0)
    loss_cmu = Tensor(0.0)
    loss_blip = Tensor(0.0)
    for j in range(t):
        w = float(weights[j])
        ce = ad.cross_entropy_logits(
            ad.slice_time(outputs.propensity_logits, j), z[:, j])
        loss_prop = ad.add(loss_prop, ad.scale(ce, w))
        cmu = ad.mse(ad.slice_time(outputs.cond_mean, j), Tensor(u[:, j + 1]))
        loss_cmu = ad.add(loss_cmu, ad.scale(cmu, w))
        i_tilde = Tensor(onehot[:, j, 1:] - e_np[:, j, 1:])
        u_tilde = Tensor(u[:, j + 1] - mu_np[:, j])
        fitted = ad.sum_axis(ad.mul(i_tilde, ad.slice_time(outputs.blip, j)),
                             axis=-1)
        loss_blip = ad.add(loss_blip, ad.scale(ad.mse(fitted, u_tilde), w))
    lam_p, lam_c, lam_b = lambdas
    total = ad.add(ad.add(ad.scale(loss_prop, lam_p), ad.scale(loss_cmu, lam_c)),
                   ad.scale(loss_blip, lam_b))
    return LossBundle(loss_prop, loss_cmu, loss_blip, total)


@dataclass
class TrainResult:
    model: TerraModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_total: float = np.inf
    stopped_early: bool = False


def _evaluate_losses(model: TerraModel, panel_z, panel_x, panel_y, weights,
                     lambdas) -> tuple[float, float, float, float]:
    outputs = model.forward(panel_z, panel_x)
    bundle = joint_losses(outputs, panel_z, panel_y, weights, lambdas)
    return bundle.values()


def train(panel: Panel, arch: ArchConfig, cfg: TrainConfig) -> TrainResult:
    """Run the full joint-training loop on one panel.

    Per epoch: shuffled mini-batches, forward pass, recursive blipping with
    detached targets, time-weighted losses, backward, global-norm clipping,
    Adamax step. Validation (a unit-level split fixed by the seed) is
    evaluated once per epoch in evaluation mode; the plateau scheduler and
    early stopping both watch the validation total, and the best-validation
    parameters are checkpointed and restored at the end.
    """
    n, t, p, k = panel.dims
    if p != arch.p or k != arch.n_treatments or t != arch.horizon:
        raise ValueError("panel dimensions disagree with the architecture")
    seed_root = np.random.SeedSequence([cfg.seed])
    split_ss, init_ss, shuffle_ss, dropout_ss = seed_root.spawn(4)
    model = TerraModel(arch, seed=int(init_ss.generate_state(1)[0]))
    split_rng = np.random.default_rng(split_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    perm = split_rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training units")
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    weights = time_weights(cfg.time_weight_strategy, t)
    lambdas = (cfg.lambda_prop, cfg.lambda_cmu, cfg.lambda_blip)

    state = AdamaxState.init(model.params)
    scheduler = PlateauScheduler(cfg.lr, cfg.patience_lr, cfg.lr_decay_factor)
    best_params = {name: v.copy() for name, v in model.params.items()}
    result = TrainResult(model=model)
    best_val = np.inf
    stale_epochs = 0

    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(train_idx)
        train_sums = np.zeros(3)
        clipped = 0
        n_batches = 0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            graph = Graph()
            try:
                outputs = model.forward(panel.z[batch], panel.x[batch],
                                        graph=graph, training=True,
                                        rng=dropout_rng)
                bundle = joint_losses(outputs, panel.z[batch], panel.y[batch],
                                      weights, lambdas)
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    "non-finite loss during training",
                    {"epoch": epoch, "batch_start": start, "lr": scheduler.lr,
                     "param_norm": float(np.sqrt(sum(
                         (v * v).sum() for v in model.params.values())))},
                ) from err
            grad_map = ad.backward(graph, bundle.total)
            grads = {name: grad_map[tensor.node_id]
                     for name, tensor in outputs.params.items()}
            grads, norm = clip_gradients(grads, cfg.clip_max_norm)
            if norm > cfg.clip_max_norm:
                clipped += 1
            adamax_step(state, model.params, grads, scheduler.lr, cfg.beta1,
                        cfg.beta2, cfg.weight_decay, cfg.eps)
            bsz = len(batch)
            train_sums += np.array(bundle.values()[:3]) * bsz
            seen += bsz
            n_batches += 1
        train_means = train_sums / seen
        val_p, val_c, val_b, val_total = _evaluate_losses(
            model, panel.z[val_idx], panel.x[val_idx], panel.y[val_idx],
            weights, lambdas)
        result.log.append({
            "epoch": epoch,
            "lr": scheduler.lr,
            "train_prop": train_means[0],
            "train_cmu": train_means[1],
            "train_blip": train_means[2],
            "val_prop": val_p,
            "val_cmu": val_c,
            "val_blip": val_b,
            "clipped_fraction": clipped / n_batches,
        })
        if val_total < best_val:
            best_val = val_total
            best_params = {name: v.copy() for name, v in model.params.items()}
            result.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience_early_stop:
                result.stopped_early = True
                break
        scheduler.step(val_total)

    model.params = best_params
    result.best_val_total = best_val
    return result


def train_config_variants(base: TrainConfig,
                          strategies: Sequence[str]) -> list[TrainConfig]:
    """Copies of one config differing only in the time-weight strategy."""
    return [replace(base, time_weight_strategy=s) for s in strategies]
