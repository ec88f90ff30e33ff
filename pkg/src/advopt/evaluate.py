"""Robustness evaluation: accuracy tables, trajectories, landscapes,
transfer attacks and attacker step generalization.

Everything here is read-only over model weights and bit-reproducible
given a seed.  Reports are emitted as CSV and JSON; figure rendering
lives in :mod:`advopt.plots` so this module stays plot-free.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import models
from .attacks import AttackConfig, AttackFamily, BLSConfig, run_attack
from .data import Batch, Dataset
from .errors import AdvoptError, ConfigError, ShapeMismatchError
from .learned import RnnOptimizerParams
from .models import ClassifierWeights

EVAL_BATCH = 128


def _check_feasible(x: np.ndarray, x_adv: np.ndarray, epsilon: float) -> None:
    gap = np.abs(x_adv - x).max() if x.size else 0.0
    if gap > epsilon + 1e-12 or (x_adv.size and (x_adv.min() < -1e-12 or x_adv.max() > 1 + 1e-12)):
        raise AdvoptError(f"attack produced an infeasible iterate (gap {gap})")


def accuracy(weights: ClassifierWeights, dataset: Dataset, chunk: int = 512) -> float:
    """Natural accuracy in percent."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    correct = 0
    for start in range(0, len(dataset), chunk):
        x = dataset.images[start:start + chunk]
        y = dataset.labels[start:start + chunk]
        correct += int((models.predict(weights, x) == y).sum())
    return 100.0 * correct / len(dataset)


def robust_accuracy(weights: ClassifierWeights, cfg: AttackConfig, dataset: Dataset, *,
                    rnn_params: RnnOptimizerParams | None = None,
                    bls: BLSConfig | None = None, seed=0,
                    batch_size: int = EVAL_BATCH) -> float:
    """Percent of test points still classified correctly after the attack.

    Batches are visited in dataset order; per-batch attack seeds derive
    from ``seed`` so the whole evaluation is reproducible.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    correct = 0
    for bi, start in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        result = run_attack(weights, x, y, cfg, (seed, 13, bi), rnn_params=rnn_params, bls=bls)
        _check_feasible(x, result.x_adv, cfg.epsilon)
        correct += int((models.predict(weights, result.x_adv) == y).sum())
    return 100.0 * correct / len(dataset)


# ---------------------------------------------------------------------------
# accuracy tables
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Rows per defense, columns Natural + one per attack + row minimum."""

    defenses: list[str] = field(default_factory=list)
    attacks: list[str] = field(default_factory=list)
    natural: dict[str, float] = field(default_factory=dict)
    cells: dict[str, dict[str, float]] = field(default_factory=dict)
    mins: dict[str, float] = field(default_factory=dict)

    def add_defense(self, name: str, natural_acc: float, attack_accs: dict[str, float]) -> None:
        if name in self.cells:
            raise ConfigError(f"duplicate defense row {name!r}")
        for a in attack_accs:
            if a not in self.attacks:
                self.attacks.append(a)
        self.defenses.append(name)
        self.natural[name] = natural_acc
        self.cells[name] = dict(attack_accs)

    def to_csv(self) -> str:
        header = ["Defense", "Natural", *self.attacks, "Min"]
        lines = [",".join(header)]
        for d in self.defenses:
            row = [d, str(self.natural[d])]
            row += [str(self.cells[d][a]) for a in self.attacks]
            row.append(str(self.mins[d]) if d in self.mins else "")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"attacks": self.attacks,
             "rows": {d: {"natural": self.natural[d], "cells": self.cells[d],
                          "min": self.mins.get(d)} for d in self.defenses}},
            sort_keys=True, indent=2)


def min_across_attacks(report: EvalReport) -> EvalReport:
    """Fill the row-wise minimum over attack columns (Natural excluded)."""
    if not report.attacks:
        raise ConfigError("report has no attack columns")
    for d in report.defenses:
        report.mins[d] = min(report.cells[d][a] for a in report.attacks)
    return report


# ---------------------------------------------------------------------------
# attack tags (CLI / table column grammar)
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"^(fgsm|pgd-bls|pgd|bls|cw|learned)(\d*)$")

_TAG_DEFAULT_STEPS = {"fgsm": 1, "pgd": 10, "pgd-bls": 10, "bls": 10, "cw": 100, "learned": 10}
_TAG_FAMILY = {"fgsm": AttackFamily.FGSM, "pgd": AttackFamily.PGD,
               "pgd-bls": AttackFamily.PGD_BLS, "bls": AttackFamily.PGD_BLS,
               "cw": AttackFamily.CW_INF, "learned": AttackFamily.LEARNED}
_TAG_LABEL = {"fgsm": "FGSM", "pgd": "PGD", "pgd-bls": "PGD-BLS", "bls": "PGD-BLS",
              "cw": "CW", "learned": "Learned"}


def parse_attack_tag(tag: str, epsilon: float) -> tuple[str, AttackConfig]:
    """Turn a compact tag like ``pgd100`` into a column name and config."""
    m = _TAG_RE.match(tag.strip().lower())
    if not m:
        raise ConfigError(f"unknown attack tag {tag!r}")
    base, digits = m.groups()
    steps = int(digits) if digits else _TAG_DEFAULT_STEPS[base]
    cfg = AttackConfig(epsilon=epsilon, steps=steps, family=_TAG_FAMILY[base])
    return f"{_TAG_LABEL[base]}-{steps}", cfg


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryLog:
    """Per-attack mean loss after each step, over one evaluation batch."""

    names: list[str]
    initial: dict[str, float]
    losses: dict[str, list[float]]

    def to_csv(self) -> str:
        lines = [",".join(["step", *self.names])]
        lines.append(",".join(["0", *(str(self.initial[n]) for n in self.names)]))
        steps = len(next(iter(self.losses.values()))) if self.losses else 0
        for t in range(steps):
            lines.append(",".join([str(t + 1), *(str(self.losses[n][t]) for n in self.names)]))
        return "\n".join(lines) + "\n"


def attack_trajectory(weights: ClassifierWeights,
                      attack_specs: list[tuple[str, AttackConfig, RnnOptimizerParams | None]],
                      batch: Batch, steps: int, seed=0) -> TrajectoryLog:
    """Run each attack for ``steps`` steps on the same batch and seed.

    Sharing the seed means every attack starts from the same perturbed
    point, so step-0 losses coincide.
    """
    names, initial, losses = [], {}, {}
    for name, cfg, params in attack_specs:
        run_cfg = AttackConfig(epsilon=cfg.epsilon, steps=steps, family=cfg.family,
                               step_size=cfg.step_size, loss=cfg.loss,
                               gaussian_init=cfg.gaussian_init)
        result = run_attack(weights, batch.x, batch.y, run_cfg, seed, rnn_params=params)
        if len(result.step_losses) != steps:
            raise AdvoptError(f"attack {name} logged {len(result.step_losses)} steps, wanted {steps}")
        names.append(name)
        initial[name] = result.initial_loss
        losses[name] = list(result.step_losses)
    return TrajectoryLog(names, initial, losses)


# ---------------------------------------------------------------------------
# loss landscape
# ---------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    """Loss over a plane spanned by the gradient-sign and a random
    sign-vector direction around one input."""

    offsets: np.ndarray          # shared u/v axis values
    z: np.ndarray                # z[i, j] = loss at x + offsets[i] d1 + offsets[j] d2
    d1: np.ndarray
    d2: np.ndarray

    def to_csv(self) -> str:
        lines = [",".join(["u/v", *(str(v) for v in self.offsets)])]
        for i, u in enumerate(self.offsets):
            lines.append(",".join([str(u), *(str(z) for z in self.z[i])]))
        return "\n".join(lines) + "\n"


def loss_landscape(weights: ClassifierWeights, x: np.ndarray, label: int,
                   extent: float, resolution: int, seed=0) -> LandscapeGrid:
    """Cross-entropy surface around one input.

    Direction one is the sign of the input gradient at ``x`` (computed
    once); direction two is a seeded random +-1 vector.  With an odd
    resolution the grid contains the exact center, where the loss equals
    the unperturbed loss.
    """
    if resolution < 2:
        raise ConfigError("resolution must be >= 2")
    if extent <= 0:
        raise ConfigError("extent must be > 0")
    from .attacks import sign

    xb = x[None] if x.ndim == 3 else x
    if xb.shape[0] != 1:
        raise ShapeMismatchError("landscape expects a single input")
    y = np.array([label])
    bundle = models.value_and_grad_input(weights, models.CrossEntropy(y), xb)
    d1 = sign(bundle.grads["x"][0])
    rng = np.random.default_rng(seed)
    d2 = rng.integers(0, 2, size=xb.shape[1:]).astype(np.float64) * 2.0 - 1.0

    step = 2.0 * extent / (resolution - 1)
    offsets = (np.arange(resolution) - (resolution - 1) / 2.0) * step  # exact 0.0 center when odd
    pts = (xb[0][None, None] + offsets[:, None, None, None, None] * d1[None, None]
           + offsets[None, :, None, None, None] * d2[None, None])
    flat = pts.reshape(-1, *xb.shape[1:])
    logits = np.concatenate([models.forward(weights, flat[i:i + EVAL_BATCH])
                             for i in range(0, flat.shape[0], EVAL_BATCH)])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    z = -logp[:, label].reshape(resolution, resolution)
    return LandscapeGrid(offsets, z, d1, d2)


# ---------------------------------------------------------------------------
# transfer attacks
# ---------------------------------------------------------------------------


def transfer_eval(surrogate_weights: ClassifierWeights, target_weights: ClassifierWeights,
                  cfg: AttackConfig, dataset: Dataset, *, seed=0,
                  rnn_params: RnnOptimizerParams | None = None,
                  batch_size: int = EVAL_BATCH) -> float:
    """Craft adversarial examples on the surrogate, score them on the target."""
    if (surrogate_weights.spec.input_shape != target_weights.spec.input_shape
            or surrogate_weights.spec.num_classes != target_weights.spec.num_classes):
        raise ShapeMismatchError("surrogate and target specs are incompatible")
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    correct = 0
    for bi, start in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        result = run_attack(surrogate_weights, x, y, cfg, (seed, 13, bi), rnn_params=rnn_params)
        _check_feasible(x, result.x_adv, cfg.epsilon)
        correct += int((models.predict(target_weights, result.x_adv) == y).sum())
    return 100.0 * correct / len(dataset)


# ---------------------------------------------------------------------------
# attacker step generalization
# ---------------------------------------------------------------------------


def step_generalization(weights: ClassifierWeights, params: RnnOptimizerParams,
                        dataset: Dataset, steps_list: list[int], epsilon: float, *,
                        seed=0) -> dict[int, float]:
    """Robust accuracy under the learned attack at several step counts.

    The hidden state always starts at zero and carries through the whole
    run, however long; nothing is retrained.
    """
    out = {}
    for steps in steps_list:
        cfg = AttackConfig(epsilon=epsilon, steps=steps, family=AttackFamily.LEARNED)
        out[steps] = robust_accuracy(weights, cfg, dataset, rnn_params=params, seed=seed)
    return out
