"""Learned inner maximizer: a coordinate-wise, bias-free RNN optimizer.

One tiny parameter set (input matrix ``u``, recurrence ``w``, readout
``v``; no bias terms) is shared across every pixel coordinate, each of
which carries its own hidden state.  Per step the cell absorbs the
current objective gradient into the hidden state and reads the update
out of the refreshed state:

    h' = tanh(u g + w h)
    delta = tanh(v h')

Removing the biases makes (g=0, h=0) an exact fixed point, so a
converged attack is not pushed away from its optimum, and a
zero-initialized optimizer performs no update at all.

Training the optimizer differentiates a weighted sum of the per-step
losses through the unrolled recurrence.  The objective gradients fed
to the cell are treated as constants (first-order unrolling): no
second derivatives of the classifier are formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine, models
from .attacks import project
from .container import read_container, write_container
from .data import gaussian_perturb
from .engine import check_finite
from .errors import ConfigError, DataFormatError, ShapeMismatchError
from .models import ClassifierWeights, GradBundle, LossKind


@dataclass
class RnnOptimizerParams:
    """Bias-free cell matrices, shared across all coordinates."""

    u: np.ndarray  # [d, 1]
    w: np.ndarray  # [d, d]
    v: np.ndarray  # [1, d]

    def __post_init__(self):
        d = self.u.shape[0]
        if self.u.shape != (d, 1) or self.w.shape != (d, d) or self.v.shape != (1, d):
            raise ShapeMismatchError(
                f"inconsistent cell shapes u={self.u.shape} w={self.w.shape} v={self.v.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "RnnOptimizerParams":
        return RnnOptimizerParams(self.u.copy(), self.w.copy(), self.v.copy())


def init_rnn_params(hidden_size: int, seed, scale: float = 0.1) -> RnnOptimizerParams:
    """Uniform [-scale, scale] initialization; early updates stay near zero."""
    if hidden_size < 1:
        raise ConfigError(f"hidden_size must be >= 1, got {hidden_size}")
    rng = np.random.default_rng(seed)
    d = hidden_size
    return RnnOptimizerParams(
        u=rng.uniform(-scale, scale, (d, 1)),
        w=rng.uniform(-scale, scale, (d, d)),
        v=rng.uniform(-scale, scale, (1, d)),
    )


def param_count(params: RnnOptimizerParams) -> int:
    """Trainable scalars: d + d^2 + d for the bias-free cell."""
    d = params.hidden_size
    return d + d * d + d


def zero_hidden(x: np.ndarray, hidden_size: int) -> np.ndarray:
    """All-zero hidden state, one d-vector per coordinate of ``x``."""
    return np.zeros(x.shape + (hidden_size,))


def rnn_step(params: RnnOptimizerParams, g: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One cell application per coordinate.

    ``g`` has any shape; ``h`` is ``g.shape + (d,)``.  Returns the update
    (same shape as ``g``, every entry strictly inside (-1, 1)) and the new
    hidden state.  The arithmetic is identical at every coordinate.
    """
    d = params.hidden_size
    if h.shape != g.shape + (d,):
        raise ShapeMismatchError(f"hidden shape {h.shape} does not match gradient {g.shape} + ({d},)")
    g_flat = g.reshape(-1, 1)
    h_flat = h.reshape(-1, d)
    h_next = np.tanh(g_flat @ params.u.T + h_flat @ params.w.T)
    delta = np.tanh(h_next @ params.v[0])
    return delta.reshape(g.shape), h_next.reshape(h.shape)


@dataclass
class UnrollRecord:
    """Trace of one unrolled attack: step losses plus optional tensors."""

    initial_input: np.ndarray
    initial_loss: float
    losses: list[float] = field(default_factory=list)
    inputs: list[np.ndarray] | None = None
    gradients: list[np.ndarray] | None = None
    hidden: list[np.ndarray] | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)


def learned_attack(weights: ClassifierWeights, params: RnnOptimizerParams, x: np.ndarray,
                   kind: LossKind, epsilon: float, steps: int, seed, *,
                   gaussian_init: bool = True, record_inputs: bool = False,
                   record_gradients: bool = False) -> tuple[np.ndarray, UnrollRecord]:
    """Run the learned optimizer for ``steps`` projected updates.

    The hidden state starts at zero and persists across all steps without
    reinitialization, however many there are.
    """
    x_cur = gaussian_perturb(x, seed) if gaussian_init else x.copy()
    if steps == 0:
        return x_cur, UnrollRecord(x_cur.copy(), models.loss(weights, x_cur, kind))
    bundle = models.value_and_grad_input(weights, kind, x_cur)
    record = UnrollRecord(x_cur.copy(), bundle.loss)
    if record_inputs:
        record.inputs = []
    if record_gradients:
        record.gradients = []
    h = zero_hidden(x, params.hidden_size)
    for t in range(steps):
        g = bundle.grads["x"]
        if record_gradients:
            record.gradients.append(g)
        delta, h = rnn_step(params, g, h)
        x_cur = project(x, x_cur + delta, epsilon)
        if t < steps - 1:
            bundle = models.value_and_grad_input(weights, kind, x_cur)
            step_loss = bundle.loss
        else:
            step_loss = models.loss(weights, x_cur, kind)
        check_finite(step_loss, "unrolled attack loss")
        record.losses.append(step_loss)
        if record_inputs:
            record.inputs.append(x_cur.copy())
    return x_cur, record


def meta_loss(record: UnrollRecord, weights: ClassifierWeights | None = None,
              kind: LossKind | None = None) -> float:
    """Weighted sum of per-step losses with linearly increasing weights.

    Step ``t`` (1-based) contributes ``t * loss_t``, so later steps matter
    more but early progress is still rewarded.  When ``weights`` and
    ``kind`` are given the losses are recomputed from the recorded
    iterates instead of trusting the stored values.
    """
    if weights is not None and kind is not None:
        if record.inputs is None:
            raise ConfigError("record has no stored iterates to recompute from")
        losses = [models.loss(weights, xt, kind) for xt in record.inputs]
    else:
        losses = record.losses
    return float(sum((t + 1) * l for t, l in enumerate(losses)))


# ---------------------------------------------------------------------------
# meta-gradient through the unrolled recurrence
# ---------------------------------------------------------------------------


def _unroll_tape(weights: ClassifierWeights, params: RnnOptimizerParams, x: np.ndarray,
                 kind: LossKind, epsilon: float, steps: int, seed, gaussian_init: bool = True):
    """Build the differentiable unroll and return (meta_node, cell_nodes, record).

    Each iterate's classifier pass is taped once and a stopped backward
    extracts the objective gradient g_t at that iterate.  Because the
    cell input is detached (first-order unrolling), the loss term at
    step t contributes exactly w_t * (dx_t/d(cell params))^T g_t to the
    meta-gradient, so the meta graph uses the linear surrogate
    w_t * <g_t, x_t> instead of the full classifier subgraph; the
    gradients are mathematically identical and the classifier caches
    never enter the long backward pass.  Reported losses are the real
    ones from the taped passes.
    """
    x0 = gaussian_perturb(x, seed) if gaussian_init else x.copy()
    record = UnrollRecord(x0.copy(), 0.0)
    record.gradients = []

    d = params.hidden_size
    n = x.size
    lo = np.maximum(x - epsilon, 0.0)
    hi = np.minimum(x + epsilon, 1.0)

    u_node = engine.variable(params.u)
    w_node = engine.variable(params.w)
    v_node = engine.variable(params.v)
    u_row = engine.transpose2(u_node)   # [1, d]
    w_t = engine.transpose2(w_node)     # [d, d]
    v_col = engine.transpose2(v_node)   # [d, 1]

    def loss_and_grad_at(x_node):
        loss = models.loss_node(models.forward_node(weights, x_node), kind)
        check_finite(loss.value, "unrolled attack loss")
        (g,) = engine.backward(loss, [x_node], stop=(x_node,))
        return float(loss.value), g

    x_cur = engine.variable(x0)
    record.initial_loss, g = loss_and_grad_at(x_cur)

    h = engine.constant(np.zeros((n, d)))
    meta = None
    for t in range(steps):
        record.gradients.append(g)
        g_const = engine.constant(g.reshape(n, 1))

        h = engine.tanh(engine.add(engine.matmul(g_const, u_row), engine.matmul(h, w_t)))
        delta = engine.tanh(engine.matmul(h, v_col))
        x_cur = engine.clamp(engine.add(x_cur, engine.reshape(delta, x.shape)), lo, hi)

        step_loss, g = loss_and_grad_at(x_cur)
        record.losses.append(step_loss)
        surrogate = engine.matmul(engine.reshape(x_cur, (1, n)), engine.constant(g.reshape(n, 1)))
        weighted = engine.mul(engine.reshape(surrogate, ()), engine.constant(float(t + 1)))
        meta = weighted if meta is None else engine.add(meta, weighted)

    return meta, (u_node, w_node, v_node), x_cur, record


def meta_grad(weights: ClassifierWeights, params: RnnOptimizerParams, x: np.ndarray,
              kind: LossKind, epsilon: float, steps: int, seed, *,
              gaussian_init: bool = True) -> GradBundle:
    """Gradient of the weighted unrolled loss with respect to the cell.

    First-order semantics: the objective gradients driving the cell are
    detached, and the projection back-propagates the clamp convention
    (1 inside the ball, 0 at clamped coordinates).
    """
    bundle, _, _ = meta_step(weights, params, x, kind, epsilon, steps, seed,
                             gaussian_init=gaussian_init)
    return bundle


def meta_step(weights: ClassifierWeights, params: RnnOptimizerParams, x: np.ndarray,
              kind: LossKind, epsilon: float, steps: int, seed, *,
              gaussian_init: bool = True) -> tuple[GradBundle, np.ndarray, UnrollRecord]:
    """One training-side unroll: meta-gradient, final iterate and trace."""
    if steps < 1:
        raise ConfigError(f"unroll needs steps >= 1, got {steps}")
    meta, (u_node, w_node, v_node), x_final, record = _unroll_tape(
        weights, params, x, kind, epsilon, steps, seed, gaussian_init=gaussian_init,
    )
    gu, gw, gv = engine.backward(meta, [u_node, w_node, v_node])
    grads = {"u": gu, "w": gw, "v": gv}
    for name, g in grads.items():
        check_finite(g, f"meta-gradient of {name}")
    return GradBundle(meta_loss(record), grads), x_final.value, record


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_rnn_params(params: RnnOptimizerParams, path) -> None:
    meta = {"kind": "rnn_optimizer", "hidden_size": params.hidden_size}
    write_container(path, meta, {"u": params.u, "w": params.w, "v": params.v})


def load_rnn_params(path) -> RnnOptimizerParams:
    meta, tensors = read_container(path)
    if meta.get("kind") != "rnn_optimizer":
        raise DataFormatError(f"{path}: not an optimizer checkpoint")
    try:
        params = RnnOptimizerParams(tensors["u"], tensors["w"], tensors["v"])
    except (KeyError, ShapeMismatchError) as exc:
        raise DataFormatError(f"{path}: malformed optimizer checkpoint: {exc}") from exc
    if params.hidden_size != meta.get("hidden_size"):
        raise DataFormatError(f"{path}: hidden size mismatch with stored tensors")
    return params
