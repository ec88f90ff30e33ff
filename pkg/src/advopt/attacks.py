"""Hand-designed inner maximizers: FGSM, PGD, PGD+BLS, margin attack.

All attacks ascend a scalar objective inside the intersection of an
L-infinity ball around the clean input and the valid pixel range
[0, 1].  Every public attack is a pure function of (weights, batch,
config, seed) and is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import engine, models
from .data import gaussian_perturb
from .engine import check_finite
from .errors import ConfigError, ShapeMismatchError
from .models import ClassifierWeights, CrossEntropy, KLToReference, LossKind


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1 (and sign(-0.0) = +1)."""
    return np.where(np.asarray(t) < 0.0, -1.0, 1.0)


def project(x_ref: np.ndarray, x_prime: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the epsilon-ball around ``x_ref``, then into [0, 1]."""
    if x_ref.shape != x_prime.shape:
        raise ShapeMismatchError(f"project shapes {x_ref.shape} vs {x_prime.shape}")
    lo = np.maximum(x_ref - epsilon, 0.0)
    hi = np.minimum(x_ref + epsilon, 1.0)
    return np.clip(x_prime, lo, hi)


class AttackFamily(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    PGD_BLS = "pgd-bls"
    CW_INF = "cw"
    LEARNED = "learned"


@dataclass
class AttackConfig:
    epsilon: float
    steps: int
    family: AttackFamily
    step_size: float | None = None  # defaults to epsilon / 4
    loss: str = "ce"  # "ce" or "kl"
    gaussian_init: bool = True

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = AttackFamily(self.family)
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.loss not in ("ce", "kl"):
            raise ConfigError(f"loss must be 'ce' or 'kl', got {self.loss!r}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


@dataclass
class BLSConfig:
    """Backtracking line search: shrink the trial step until the
    sufficient-increase test accepts it."""

    alpha0: float
    rho: float = 0.5
    c: float = 1e-4
    max_backtracks: int = 10
    # step along sign(gradient) like PGD (default) or along the raw gradient
    sign_direction: bool = True

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ConfigError(f"rho must be in (0, 1), got {self.rho}")
        if not (0.0 < self.c < 1.0):
            raise ConfigError(f"c must be in (0, 1), got {self.c}")
        if self.alpha0 <= 0:
            raise ConfigError(f"alpha0 must be > 0, got {self.alpha0}")
        if self.max_backtracks < 1:
            raise ConfigError(f"max_backtracks must be >= 1, got {self.max_backtracks}")


@dataclass
class AttackResult:
    """Final iterate plus the loss trace of one attack run."""

    x_adv: np.ndarray
    initial_input: np.ndarray
    initial_loss: float
    step_losses: list[float] = field(default_factory=list)
    bls_warnings: int = 0


LossGradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]
LossFn = Callable[[np.ndarray], float]


def _bind_loss(weights: ClassifierWeights, kind: LossKind) -> tuple[LossFn, LossGradFn]:
    def loss_fn(x):
        return models.loss(weights, x, kind)

    def loss_grad(x):
        bundle = models.value_and_grad_input(weights, kind, x)
        return bundle.loss, bundle.grads["x"]

    return loss_fn, loss_grad


def _init_point(x: np.ndarray, cfg: AttackConfig, seed) -> np.ndarray:
    return gaussian_perturb(x, seed) if cfg.gaussian_init else x.copy()


# ---------------------------------------------------------------------------
# fixed-step signed ascent
# ---------------------------------------------------------------------------


def pgd_core(loss_grad: LossGradFn, loss_fn: LossFn, x: np.ndarray, cfg: AttackConfig, seed) -> AttackResult:
    x_cur = _init_point(x, cfg, seed)
    # the loss at the point after step t is the loss the step-(t+1) gradient
    # call evaluates anyway, so each step costs one fused loss+grad pass
    if cfg.steps == 0:
        init_loss = loss_fn(x_cur)
        check_finite(init_loss, "attack loss")
        return AttackResult(x_cur, x_cur.copy(), init_loss)
    init_loss, g = loss_grad(x_cur)
    check_finite(init_loss, "attack loss")
    res = AttackResult(x_cur, x_cur.copy(), init_loss)
    alpha = cfg.alpha
    for t in range(cfg.steps):
        x_cur = project(x, x_cur + alpha * sign(g), cfg.epsilon)
        if t < cfg.steps - 1:
            step_loss, g = loss_grad(x_cur)
        else:
            step_loss = loss_fn(x_cur)
        check_finite(step_loss, "attack loss")
        res.step_losses.append(step_loss)
    res.x_adv = x_cur
    return res


def pgd_attack(weights: ClassifierWeights, x: np.ndarray, kind: LossKind, cfg: AttackConfig, seed) -> AttackResult:
    """Iterated signed-gradient ascent with projection after every step."""
    loss_fn, loss_grad = _bind_loss(weights, kind)
    return pgd_core(loss_grad, loss_fn, x, cfg, seed)


def fgsm_attack(weights: ClassifierWeights, x: np.ndarray, kind: LossKind, cfg: AttackConfig, seed) -> AttackResult:
    """Single signed step of size epsilon."""
    one_step = AttackConfig(
        epsilon=cfg.epsilon, steps=min(cfg.steps, 1), family=AttackFamily.FGSM,
        step_size=cfg.epsilon, loss=cfg.loss, gaussian_init=cfg.gaussian_init,
    )
    loss_fn, loss_grad = _bind_loss(weights, kind)
    return pgd_core(loss_grad, loss_fn, x, one_step, seed)


# ---------------------------------------------------------------------------
# backtracking line search
# ---------------------------------------------------------------------------


def armijo_accepts(loss_at_trial: float, loss_at_current: float, alpha: float, p: np.ndarray, c: float) -> bool:
    """Sufficient-increase test: L(x + alpha p) >= L(x) + c alpha p.p."""
    return loss_at_trial >= loss_at_current + c * alpha * float(np.vdot(p, p))


def bls_core(loss_fn: LossFn, x_prime: np.ndarray, p: np.ndarray, loss_cur: float, bls: BLSConfig) -> tuple[float, bool]:
    """Largest step in {alpha0 * rho^k} passing the sufficient-increase test.

    Trial points lie along the raw gradient ``p``.  If no trial in
    ``max_backtracks`` attempts passes, returns ``alpha0 * rho^max_backtracks``
    with ``accepted=False``.
    """
    alpha = bls.alpha0
    for _ in range(bls.max_backtracks):
        trial_loss = loss_fn(x_prime + alpha * p)
        check_finite(trial_loss, "line-search trial loss")
        if armijo_accepts(trial_loss, loss_cur, alpha, p, bls.c):
            return alpha, True
        alpha *= bls.rho
    return alpha, False


def bls_search(weights: ClassifierWeights, x_prime: np.ndarray, kind: LossKind, bls: BLSConfig) -> tuple[float, bool]:
    """Line search at ``x_prime``, computing the gradient internally."""
    loss_fn, loss_grad = _bind_loss(weights, kind)
    loss_cur, p = loss_grad(x_prime)
    return bls_core(loss_fn, x_prime, p, loss_cur, bls)


def pgd_bls_core(loss_grad: LossGradFn, loss_fn: LossFn, x: np.ndarray, cfg: AttackConfig, bls: BLSConfig, seed) -> AttackResult:
    x_cur = _init_point(x, cfg, seed)
    if cfg.steps == 0:
        init_loss = loss_fn(x_cur)
        check_finite(init_loss, "attack loss")
        return AttackResult(x_cur, x_cur.copy(), init_loss)
    loss_cur, p = loss_grad(x_cur)
    check_finite(loss_cur, "attack loss")
    res = AttackResult(x_cur, x_cur.copy(), loss_cur)
    for t in range(cfg.steps):
        alpha, accepted = bls_core(loss_fn, x_cur, p, loss_cur, bls)
        if not accepted:
            res.bls_warnings += 1
        direction = sign(p) if bls.sign_direction else p
        x_cur = project(x, x_cur + alpha * direction, cfg.epsilon)
        if t < cfg.steps - 1:
            loss_cur, p = loss_grad(x_cur)
            step_loss = loss_cur
        else:
            step_loss = loss_fn(x_cur)
        check_finite(step_loss, "attack loss")
        res.step_losses.append(step_loss)
    res.x_adv = x_cur
    return res


def pgd_bls_attack(weights: ClassifierWeights, x: np.ndarray, kind: LossKind, cfg: AttackConfig, bls: BLSConfig, seed) -> AttackResult:
    """PGD with the step size chosen by backtracking line search.

    The sufficient-increase test walks along the raw gradient; the applied
    update direction is sign(gradient) by default (``bls.sign_direction``).
    """
    loss_fn, loss_grad = _bind_loss(weights, kind)
    return pgd_bls_core(loss_grad, loss_fn, x, cfg, bls, seed)


# ---------------------------------------------------------------------------
# margin-loss attack
# ---------------------------------------------------------------------------


def cw_objective(weights: ClassifierWeights, x: np.ndarray, labels: np.ndarray, kappa: float = 0.0) -> tuple[float, np.ndarray]:
    """Attack objective: negated mean clamped margin, and its input gradient.

    Driving this upward shrinks z_label - max_{j != label} z_j; once a
    point is misclassified the clamp flattens the objective there.
    """
    x_node = engine.variable(x)
    logits = models.forward_node(weights, x_node)
    obj = engine.neg(engine.cw_margin(logits, labels, kappa))
    check_finite(obj.value, "margin objective")
    (gx,) = engine.backward(obj, [x_node])
    return float(obj.value), gx


def cw_inf_attack(weights: ClassifierWeights, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig, seed, kappa: float = 0.0) -> AttackResult:
    """Projected signed ascent on the negated clamped margin."""

    def loss_fn(z):
        x_node = engine.constant(z)
        logits = models.forward_node(weights, x_node)
        return float(engine.neg(engine.cw_margin(logits, labels, kappa)).value)

    def loss_grad(z):
        return cw_objective(weights, z, labels, kappa)

    return pgd_core(loss_grad, loss_fn, x, cfg, seed)


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


def make_loss_kind(weights: ClassifierWeights, x: np.ndarray, y: np.ndarray, loss: str) -> LossKind:
    if loss == "ce":
        return CrossEntropy(y)
    return KLToReference(models.forward(weights, x))


def run_attack(weights: ClassifierWeights, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, seed, *, rnn_params=None, bls: BLSConfig | None = None) -> AttackResult:
    """Run the configured attack family on one batch."""
    if cfg.family == AttackFamily.LEARNED:
        from .learned import learned_attack  # deferred: learned builds on this module

        if rnn_params is None:
            raise ConfigError("learned attack requires optimizer parameters")
        kind = make_loss_kind(weights, x, y, cfg.loss)
        x_adv, record = learned_attack(weights, rnn_params, x, kind, cfg.epsilon, cfg.steps, seed,
                                       gaussian_init=cfg.gaussian_init)
        return AttackResult(x_adv, record.initial_input, record.initial_loss, list(record.losses))
    if cfg.family == AttackFamily.CW_INF:
        return cw_inf_attack(weights, x, y, cfg, seed)
    kind = make_loss_kind(weights, x, y, cfg.loss)
    if cfg.family == AttackFamily.PGD:
        return pgd_attack(weights, x, kind, cfg, seed)
    if cfg.family == AttackFamily.PGD_BLS:
        return pgd_bls_attack(weights, x, kind, cfg, bls or BLSConfig(alpha0=cfg.epsilon), seed)
    if cfg.family == AttackFamily.FGSM:
        return fgsm_attack(weights, x, kind, cfg, seed)
    raise ConfigError(f"unknown attack family {cfg.family}")
