"""Outer-loop training: plain, adversarial, TRADES, and their learned-
optimizer variants.

Per batch the adversarial objectives run an inner maximizer to produce
perturbed inputs, then take one classifier step treating those inputs
as constants.  The learned-optimizer objectives additionally ascend the
cell parameters on the weighted unrolled loss before the classifier
step, in that order, both updates scaled by the batch-mean convention.

All trainers are bit-reproducible given (config, dataset): every source
of randomness is derived from the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine, learned, models
from .attacks import AttackConfig, AttackFamily, BLSConfig, run_attack
from .data import Batch, Dataset, batches
from .errors import ConfigError, DivergenceError, NonFiniteError
from .learned import RnnOptimizerParams, init_rnn_params, meta_step, save_rnn_params
from .models import (ClassifierSpec, ClassifierWeights, CrossEntropy, GradBundle,
                     KLToReference, desk_cnn_spec, init_classifier, save_checkpoint,
                     value_and_grad_params)

OBJECTIVES = ("plain", "advtrain", "trades", "rnn-adv", "rnn-trades")

Hook = Callable[[str, dict], None]


@dataclass
class TrainConfig:
    objective: str = "plain"
    epochs: int = 5
    batch_size: int = 64
    inner_steps: int = 10
    epsilon: float = 0.3
    step_size: float | None = None  # inner PGD step; defaults to epsilon / 4
    alpha1: float = 0.05            # cell learning rate (ascent)
    alpha2: float = 0.05            # classifier learning rate (descent)
    momentum: float = 0.0           # classifier momentum, 0.9 typical when on
    trades_lambda: float = 6.0      # KL term enters as 1 / lambda
    warmup_epochs: int = 0          # plain epochs before the adversarial loop
    warmup_alpha2: float | None = None  # pretraining rate (defaults to alpha2)
    seed: int = 0
    hidden_size: int = 10
    phi_init_scale: float = 0.1
    num_classes: int = 10

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if self.objective in ("rnn-adv", "rnn-trades") and self.inner_steps < 1:
            raise ConfigError("learned-optimizer objectives need inner_steps >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.trades_lambda <= 0:
            raise ConfigError("trades_lambda must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")

    @property
    def inner_alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


@dataclass
class EpochStats:
    epoch: int
    theta_loss: float
    phi_loss: float | None
    nat_acc: float | None
    steps: int

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "theta_loss": self.theta_loss, "phi_loss": self.phi_loss,
             "nat_acc": self.nat_acc, "steps": self.steps},
            sort_keys=True,
        )


@dataclass
class TrainLog:
    entries: list[EpochStats] = field(default_factory=list)


class SGD:
    """Constant-rate gradient stepper with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], direction: float = -1.0) -> None:
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            tensors[name] += direction * self.lr * v


def _shuffle_seed(cfg: TrainConfig, epoch: int):
    return (cfg.seed, 7, epoch)


def _attack_seed(cfg: TrainConfig, epoch: int, batch_index: int):
    return (cfg.seed, 11, epoch, batch_index)


def _natural_accuracy(weights: ClassifierWeights, data: Dataset, chunk: int = 512) -> float:
    correct = 0
    for start in range(0, len(data), chunk):
        x = data.images[start:start + chunk]
        y = data.labels[start:start + chunk]
        correct += int((models.forward(weights, x).argmax(axis=1) == y).sum())
    return 100.0 * correct / len(data)


def _emit(hooks: Hook | None, event: str, info: dict) -> None:
    if hooks is not None:
        hooks(event, info)


class _Run:
    """Shared scaffolding: epoch loop, logging, per-epoch checkpoints."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, val_data: Dataset | None,
                 out_dir, hooks: Hook | None, spec: ClassifierSpec | None):
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        if int(dataset.labels.max()) >= cfg.num_classes:
            raise ConfigError("dataset labels exceed num_classes")
        self.cfg = cfg
        self.dataset = dataset
        self.val_data = val_data
        self.out_dir = Path(out_dir) if out_dir else None
        self.hooks = hooks
        spec = spec or desk_cnn_spec(dataset.images.shape[1:], cfg.num_classes)
        self.weights = init_classifier(spec, (cfg.seed, 3))
        self.log = TrainLog()
        self.steps = 0
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "trainlog.jsonl").write_text("")

    def epochs(self):
        for epoch in range(self.cfg.epochs):
            yield epoch, batches(self.dataset, self.cfg.batch_size, _shuffle_seed(self.cfg, epoch))

    def finish_epoch(self, epoch: int, theta_losses: list[float],
                     phi_losses: list[float] | None, params: RnnOptimizerParams | None) -> None:
        nat = _natural_accuracy(self.weights, self.val_data) if self.val_data is not None else None
        stats = EpochStats(
            epoch=epoch,
            theta_loss=float(np.mean(theta_losses)) if theta_losses else 0.0,
            phi_loss=float(np.mean(phi_losses)) if phi_losses else None,
            nat_acc=nat,
            steps=self.steps,
        )
        self.log.entries.append(stats)
        if self.out_dir:
            with open(self.out_dir / "trainlog.jsonl", "a") as f:
                f.write(stats.to_json() + "\n")
            save_checkpoint(self.weights, self.out_dir / f"theta-e{epoch + 1:02d}.ckpt")
            if params is not None:
                save_rnn_params(params, self.out_dir / f"phi-e{epoch + 1:02d}.ckpt")


class _Warmup:
    """Plain cross-entropy pretraining phase for adversarial objectives.

    Starting from a naturally trained classifier instead of a random one
    is the sanctioned alternative initialization; at desk scale the
    adversarial objectives need it to leave the uniform-prediction
    plateau within the epoch budget.  The phase runs its own optimizer
    (typically with momentum and a larger rate) so the adversarial loop
    can use a gentler constant rate without inheriting stale velocity.
    """

    def __init__(self, cfg: TrainConfig):
        # pretraining always uses heavy-ball momentum; it needs to reach a
        # competent classifier within very few epochs
        self.opt = SGD(cfg.warmup_alpha2 if cfg.warmup_alpha2 is not None else cfg.alpha2, 0.9)

    def epoch(self, run: _Run, epoch_batches: list[Batch]) -> list[float]:
        return [_theta_step(run, self.opt, b.x, b.y) for b in epoch_batches]


def _theta_step(run: _Run, opt: SGD, x: np.ndarray, y: np.ndarray) -> float:
    try:
        bundle = value_and_grad_params(run.weights, CrossEntropy(y), x)
    except NonFiniteError as exc:
        raise DivergenceError(f"classifier loss diverged: {exc}") from exc
    opt.step(run.weights.tensors, bundle.grads)
    run.steps += 1
    _emit(run.hooks, "theta_update", {"loss": bundle.loss, "step": run.steps})
    return bundle.loss


def _trades_theta_grad(weights: ClassifierWeights, x: np.ndarray, x_adv: np.ndarray,
                       y: np.ndarray, lam: float) -> GradBundle:
    """Gradient of CE(f(x), y) + KL(f(x) || f(x_adv)) / lambda over weights.

    Both forward passes share the same weight nodes, so the KL term
    contributes through the clean and the perturbed branch alike.
    """
    names = sorted(weights.tensors)
    nodes = {n: engine.variable(weights.tensors[n]) for n in names}
    logits_clean = models.forward_node(weights, engine.constant(x), nodes)
    logits_adv = models.forward_node(weights, engine.constant(x_adv), nodes)
    ce = engine.softmax_cross_entropy(logits_clean, y)
    kl = engine.kl_softmax(logits_clean, logits_adv)
    total = engine.add(ce, engine.mul(kl, engine.constant(1.0 / lam)))
    engine.check_finite(total.value, "loss")
    grads = dict(zip(names, engine.backward(total, [nodes[n] for n in names])))
    return GradBundle(float(total.value), grads)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def train_plain(cfg: TrainConfig, dataset: Dataset, *, val_data: Dataset | None = None,
                out_dir=None, hooks: Hook | None = None,
                spec: ClassifierSpec | None = None) -> tuple[ClassifierWeights, TrainLog]:
    """Minimize the mean cross-entropy on clean inputs."""
    run = _Run(cfg, dataset, val_data, out_dir, hooks, spec)
    opt = SGD(cfg.alpha2, cfg.momentum)
    for epoch, epoch_batches in run.epochs():
        losses = [_theta_step(run, opt, b.x, b.y) for b in epoch_batches]
        run.finish_epoch(epoch, losses, None, None)
    return run.weights, run.log


def train_advtrain(cfg: TrainConfig, dataset: Dataset, inner: AttackConfig | None = None, *,
                   bls: BLSConfig | None = None, val_data: Dataset | None = None,
                   out_dir=None, hooks: Hook | None = None,
                   spec: ClassifierSpec | None = None) -> tuple[ClassifierWeights, TrainLog]:
    """Adversarial training: fit the classifier on inner-maximizer outputs.

    The inner attack is PGD or PGD with line search; its output enters the
    classifier gradient as a constant.
    """
    run = _Run(cfg, dataset, val_data, out_dir, hooks, spec)
    if inner is None:
        inner = AttackConfig(epsilon=cfg.epsilon, steps=cfg.inner_steps,
                             family=AttackFamily.PGD, step_size=cfg.inner_alpha)
    if inner.family not in (AttackFamily.PGD, AttackFamily.PGD_BLS):
        raise ConfigError(f"advtrain inner family must be pgd or pgd-bls, got {inner.family}")
    opt = SGD(cfg.alpha2, cfg.momentum)
    warmup = _Warmup(cfg)
    for epoch, epoch_batches in run.epochs():
        if epoch < cfg.warmup_epochs:
            run.finish_epoch(epoch, warmup.epoch(run, epoch_batches), None, None)
            continue
        losses = []
        for i, b in enumerate(epoch_batches):
            result = run_attack(run.weights, b.x, b.y, inner, _attack_seed(cfg, epoch, i), bls=bls)
            _emit(run.hooks, "attack", {"final_loss": result.step_losses[-1] if result.step_losses else result.initial_loss})
            losses.append(_theta_step(run, opt, result.x_adv, b.y))
        run.finish_epoch(epoch, losses, None, None)
    return run.weights, run.log


def train_trades(cfg: TrainConfig, dataset: Dataset, inner: AttackConfig | None = None, *,
                 val_data: Dataset | None = None, out_dir=None, hooks: Hook | None = None,
                 spec: ClassifierSpec | None = None) -> tuple[ClassifierWeights, TrainLog]:
    """Trade-off objective: clean cross-entropy plus a scaled KL term.

    The inner maximizer drives KL(f(x) || f(x')) with the clean-input
    distribution held fixed; the classifier then minimizes
    CE(f(x), y) + KL(f(x) || f(x')) / lambda.
    """
    run = _Run(cfg, dataset, val_data, out_dir, hooks, spec)
    if inner is None:
        inner = AttackConfig(epsilon=cfg.epsilon, steps=cfg.inner_steps,
                             family=AttackFamily.PGD, step_size=cfg.inner_alpha, loss="kl")
    opt = SGD(cfg.alpha2, cfg.momentum)
    warmup = _Warmup(cfg)
    for epoch, epoch_batches in run.epochs():
        if epoch < cfg.warmup_epochs:
            run.finish_epoch(epoch, warmup.epoch(run, epoch_batches), None, None)
            continue
        losses = []
        for i, b in enumerate(epoch_batches):
            result = run_attack(run.weights, b.x, b.y, inner, _attack_seed(cfg, epoch, i))
            _emit(run.hooks, "attack", {"final_loss": result.step_losses[-1] if result.step_losses else result.initial_loss})
            try:
                bundle = _trades_theta_grad(run.weights, b.x, result.x_adv, b.y, cfg.trades_lambda)
            except NonFiniteError as exc:
                raise DivergenceError(f"classifier loss diverged: {exc}") from exc
            opt.step(run.weights.tensors, bundle.grads)
            run.steps += 1
            _emit(run.hooks, "theta_update", {"loss": bundle.loss, "step": run.steps})
            losses.append(bundle.loss)
        run.finish_epoch(epoch, losses, None, None)
    return run.weights, run.log


def _phi_ascent(params: RnnOptimizerParams, bundle: GradBundle, lr: float) -> None:
    params.u += lr * bundle.grads["u"]
    params.w += lr * bundle.grads["w"]
    params.v += lr * bundle.grads["v"]


def train_rnn_adv(cfg: TrainConfig, dataset: Dataset, *, val_data: Dataset | None = None,
                  out_dir=None, hooks: Hook | None = None,
                  spec: ClassifierSpec | None = None) -> tuple[ClassifierWeights, RnnOptimizerParams, TrainLog]:
    """Co-train the classifier with the learned inner maximizer.

    Per batch: unroll the cell for the configured number of steps, ascend
    the cell on the weighted per-step losses, then descend the classifier
    on the final iterate.  Cell gradients never touch classifier storage
    and vice versa.
    """
    run = _Run(cfg, dataset, val_data, out_dir, hooks, spec)
    params = init_rnn_params(cfg.hidden_size, (cfg.seed, 5), cfg.phi_init_scale)
    opt = SGD(cfg.alpha2, cfg.momentum)
    warmup = _Warmup(cfg)
    for epoch, epoch_batches in run.epochs():
        if epoch < cfg.warmup_epochs:
            run.finish_epoch(epoch, warmup.epoch(run, epoch_batches), None, params)
            continue
        theta_losses, phi_losses = [], []
        for i, b in enumerate(epoch_batches):
            kind = CrossEntropy(b.y)
            try:
                bundle, x_final, record = meta_step(
                    run.weights, params, b.x, kind, cfg.epsilon, cfg.inner_steps,
                    _attack_seed(cfg, epoch, i))
            except NonFiniteError as exc:
                raise DivergenceError(f"unrolled attack diverged: {exc}") from exc
            _emit(run.hooks, "attack", {"final_loss": record.losses[-1]})
            _phi_ascent(params, bundle, cfg.alpha1)
            _emit(run.hooks, "phi_update", {"meta_loss": bundle.loss})
            phi_losses.append(bundle.loss)
            theta_losses.append(_theta_step(run, opt, x_final, b.y))
        run.finish_epoch(epoch, theta_losses, phi_losses, params)
    return run.weights, params, run.log


def train_rnn_trades(cfg: TrainConfig, dataset: Dataset, *, val_data: Dataset | None = None,
                     out_dir=None, hooks: Hook | None = None,
                     spec: ClassifierSpec | None = None) -> tuple[ClassifierWeights, RnnOptimizerParams, TrainLog]:
    """Learned maximizer on the KL inner problem, trade-off outer loss.

    The unrolled losses and the gradients feeding the cell are both
    KL(f(x) || f(x'_t)) with the clean distribution fixed; the classifier
    step uses the clean cross-entropy plus the scaled final-step KL.
    """
    run = _Run(cfg, dataset, val_data, out_dir, hooks, spec)
    params = init_rnn_params(cfg.hidden_size, (cfg.seed, 5), cfg.phi_init_scale)
    opt = SGD(cfg.alpha2, cfg.momentum)
    warmup = _Warmup(cfg)
    for epoch, epoch_batches in run.epochs():
        if epoch < cfg.warmup_epochs:
            run.finish_epoch(epoch, warmup.epoch(run, epoch_batches), None, params)
            continue
        theta_losses, phi_losses = [], []
        for i, b in enumerate(epoch_batches):
            kind = KLToReference(models.forward(run.weights, b.x))
            try:
                bundle, x_final, record = meta_step(
                    run.weights, params, b.x, kind, cfg.epsilon, cfg.inner_steps,
                    _attack_seed(cfg, epoch, i))
            except NonFiniteError as exc:
                raise DivergenceError(f"unrolled attack diverged: {exc}") from exc
            _emit(run.hooks, "attack", {"final_loss": record.losses[-1]})
            _phi_ascent(params, bundle, cfg.alpha1)
            _emit(run.hooks, "phi_update", {"meta_loss": bundle.loss})
            phi_losses.append(bundle.loss)
            try:
                theta_bundle = _trades_theta_grad(run.weights, b.x, x_final, b.y, cfg.trades_lambda)
            except NonFiniteError as exc:
                raise DivergenceError(f"classifier loss diverged: {exc}") from exc
            opt.step(run.weights.tensors, theta_bundle.grads)
            run.steps += 1
            _emit(run.hooks, "theta_update", {"loss": theta_bundle.loss, "step": run.steps})
            theta_losses.append(theta_bundle.loss)
        run.finish_epoch(epoch, theta_losses, phi_losses, params)
    return run.weights, params, run.log


def train(cfg: TrainConfig, dataset: Dataset, **kwargs):
    """Dispatch on the configured objective.

    Returns ``(weights, log)`` or ``(weights, cell_params, log)`` for the
    learned-optimizer objectives.
    """
    if cfg.objective == "plain":
        return train_plain(cfg, dataset, **kwargs)
    if cfg.objective == "advtrain":
        return train_advtrain(cfg, dataset, **kwargs)
    if cfg.objective == "trades":
        return train_trades(cfg, dataset, **kwargs)
    if cfg.objective == "rnn-adv":
        return train_rnn_adv(cfg, dataset, **kwargs)
    if cfg.objective == "rnn-trades":
        return train_rnn_trades(cfg, dataset, **kwargs)
    raise ConfigError(f"unknown objective {cfg.objective!r}")
