"""KAN and MLP classifiers in plain numpy with hand-written backprop.

A KAN edge computes ``w_b * silu(x) + w_s * spline(clamp(x))`` and every
output unit sums its incoming edges.  Networks expose their parameters as a
flat list of arrays (updated in place by the optimiser) and a matching list
of gradients from :meth:`gradients`.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kanboost.splines import SplineGrid, basis_values_and_derivatives, build_grid

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _check_width(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected a (rows, {width}) batch, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# KAN
# --------------------------------------------------------------------------


@dataclass
class KanLayer:
    """One KAN layer: an ``n_out x n_in`` matrix of learnable edge functions.

    Inputs are divided by ``input_scale`` and clamped into the grid domain
    before the spline is evaluated; the silu residual sees the raw input.
    """

    grid: SplineGrid
    spline_coeffs: np.ndarray  # (n_out, n_in, B)
    base_weights: np.ndarray  # (n_out, n_in)
    spline_scales: np.ndarray  # (n_out, n_in)
    input_scale: float = 3.0

    def __post_init__(self):
        q, p, b = self.spline_coeffs.shape
        if b != self.grid.n_basis:
            raise ValueError(f"spline_coeffs has {b} bases, grid has {self.grid.n_basis}")
        if self.base_weights.shape != (q, p) or self.spline_scales.shape != (q, p):
            raise ValueError("base_weights/spline_scales must be (n_out, n_in)")

    @classmethod
    def init(cls, n_in: int, n_out: int, grid: SplineGrid, rng: np.random.Generator,
             input_scale: float = 3.0) -> "KanLayer":
        B = grid.n_basis
        bound = 1.0 / math.sqrt(n_in)
        return cls(
            grid=grid,
            spline_coeffs=rng.normal(0.0, 0.1 / math.sqrt(B), size=(n_out, n_in, B)),
            base_weights=rng.uniform(-bound, bound, size=(n_out, n_in)),
            spline_scales=np.ones((n_out, n_in)),
            input_scale=input_scale,
        )

    @property
    def n_in(self) -> int:
        return self.base_weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.base_weights.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.spline_coeffs, self.base_weights, self.spline_scales]

    def clamp(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map raw inputs into the grid domain; returns (u, du/dx)."""
        lo, hi = self.grid.domain
        scaled = x / self.input_scale
        u = np.clip(scaled, lo, hi)
        inside = (scaled >= lo) & (scaled <= hi)
        return u, inside / self.input_scale

    def forward(self, x, keep: bool = False):
        x = _check_width(x, self.n_in)
        rows = x.shape[0]
        u, du = self.clamp(x)
        basis, dbasis = basis_values_and_derivatives(self.grid, u)
        weighted = self.spline_coeffs * self.spline_scales[..., None]
        out = silu(x) @ self.base_weights.T + basis.reshape(rows, -1) @ weighted.reshape(self.n_out, -1).T
        if not keep:
            return out
        return out, (x, du, basis, dbasis)

    def backward(self, cache, dout: np.ndarray):
        """Gradients w.r.t. (coeffs, base weights, scales) and the layer input."""
        x, du, basis, dbasis = cache
        rows = x.shape[0]
        Q, P, B = self.spline_coeffs.shape
        # moment[q, p, b] = sum_r dout[r, q] * basis[r, p, b]
        moment = (dout.T @ basis.reshape(rows, P * B)).reshape(Q, P, B)
        d_coeffs = moment * self.spline_scales[..., None]
        d_scales = np.einsum("qpb,qpb->qp", moment, self.spline_coeffs)
        d_base = dout.T @ silu(x)

        weighted = self.spline_coeffs * self.spline_scales[..., None]
        through_spline = (dout @ weighted.reshape(Q, P * B)).reshape(rows, P, B)
        dx = (dout @ self.base_weights) * silu_grad(x)
        dx += np.einsum("rpb,rpb->rp", through_spline, dbasis) * du
        return [d_coeffs, d_base, d_scales], dx


@dataclass
class KanNetwork:
    layers: list[KanLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a KAN needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def init(cls, widths: Sequence[int], grid: SplineGrid | None = None, seed: int = 0,
             input_scale: float = 3.0) -> "KanNetwork":
        if grid is None:
            grid = build_grid(5, 7, (-1.0, 1.0))
        rng = np.random.default_rng(seed)
        return cls([KanLayer.init(a, b, grid, rng, input_scale) for a, b in zip(widths, widths[1:])])

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def hidden(self, x) -> np.ndarray:
        """Activations entering the last layer."""
        if len(self.layers) < 2:
            raise ValueError("hidden activations need a network with at least two layers")
        for layer in self.layers[:-1]:
            x = layer.forward(x)
        return x

    def gradients(self, x, y, loss_fn):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, keep=True)
            caches.append(cache)
        loss, dout = loss_fn(x, y)
        grads: list[np.ndarray] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            layer_grads, dout = layer.backward(cache, dout)
            grads = layer_grads + grads
        return loss, grads


# --------------------------------------------------------------------------
# MLP baseline
# --------------------------------------------------------------------------


@dataclass
class MlpNetwork:
    """Dense layers with silu between them and a linear output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[0],):
                raise ValueError("bias length must match weight rows")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError(f"layer widths do not chain: {a.shape[0]} -> {b.shape[1]}")

    @classmethod
    def init(cls, widths: Sequence[int], seed: int = 0) -> "MlpNetwork":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(widths, widths[1:]):
            bound = 1.0 / math.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x) -> np.ndarray:
        a = _check_width(x, self.widths[0])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if i == last else silu(z)
        return a

    def gradients(self, x, y, loss_fn):
        a = _check_width(x, self.widths[0])
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = z if i == last else silu(z)
        loss, dz = loss_fn(a, y)
        grads: list[np.ndarray] = []
        for i in range(last, -1, -1):
            if i != last:
                dz = dz * silu_grad(pre[i])
            grads = [dz.T @ inputs[i], dz.sum(axis=0)] + grads
            dz = dz @ self.weights[i]
        return loss, grads


# --------------------------------------------------------------------------
# Losses, optimiser, schedule
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    rows, C = logits.shape
    if labels.shape != (rows,):
        raise ValueError(f"need {rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows), labels]
    loss = float(np.mean(log_norm - picked))
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(rows), labels] -= 1.0
    return loss, grad / rows


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


LOSSES: dict[str, Callable] = {"cross_entropy": softmax_cross_entropy, "mse": mse_loss}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (epoch // step_size)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_size: int = 10
    gamma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")


@dataclass
class TrainResult:
    net: KanNetwork | MlpNetwork
    losses: list[float] = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(net, features, labels, config: TrainConfig, loss: str = "cross_entropy") -> TrainResult:
    """Shuffled mini-batch Adam with a step-decay schedule.

    ``net`` is updated in place and returned alongside the mean training
    loss of every epoch.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.shape[0] != n:
        raise ValueError("features and labels differ in length")
    loss_fn = LOSSES[loss]
    params = net.params()
    state = AdamState.zeros_like(params)
    beta1, beta2 = config.betas
    result = TrainResult(net)
    for epoch in range(config.epochs):
        lr = step_lr(epoch, config.learning_rate, config.step_size, config.gamma)
        order = epoch_order(n, config.seed, epoch)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_loss, grads = net.gradients(X[idx], y[idx], loss_fn)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, batch_loss)
            adam_step(params, grads, state, lr, beta1, beta2, config.eps)
            total += batch_loss * len(idx)
        mean_loss = total / n
        log.debug("epoch %d lr %.3g loss %.6f", epoch, lr, mean_loss)
        result.losses.append(mean_loss)
    return result


def predict_classes(net, features) -> np.ndarray:
    return np.argmax(net.forward(features), axis=1)


def write_loss_trace(path, losses: Sequence[float], header=("epoch", "loss")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, value in enumerate(losses):
            w.writerow([i, repr(float(value))])


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

NET_MAGIC = b"KBNET\x00"
NET_VERSION = 1
_KIND = {"kan": 0, "mlp": 1}


def save_network(net, path) -> None:
    """Versioned little-endian binary dump of a KAN or MLP."""
    kind = "kan" if isinstance(net, KanNetwork) else "mlp"
    widths = net.widths
    chunks = [NET_MAGIC, struct.pack("<HBH", NET_VERSION, _KIND[kind], len(widths))]
    chunks.append(struct.pack(f"<{len(widths)}I", *widths))
    if kind == "kan":
        first = net.layers[0]
        for layer in net.layers:
            if layer.grid != first.grid or layer.input_scale != first.input_scale:
                raise ValueError("serialisation needs one grid shared by all layers")
        g = first.grid
        chunks.append(struct.pack("<HIddd", g.degree, g.interval_count, *g.domain, first.input_scale))
    for p in net.params():
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_network(path):
    data = Path(path).read_bytes()
    if not data.startswith(NET_MAGIC):
        raise ValueError(f"{path}: not a network file")
    pos = len(NET_MAGIC)
    version, kind, n_widths = struct.unpack_from("<HBH", data, pos)
    if version != NET_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos += struct.calcsize("<HBH")
    widths = list(struct.unpack_from(f"<{n_widths}I", data, pos))
    pos += 4 * n_widths

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
        return arr

    pairs = list(zip(widths, widths[1:]))
    if kind == _KIND["kan"]:
        degree, intervals, lo, hi, scale = struct.unpack_from("<HIddd", data, pos)
        pos += struct.calcsize("<HIddd")
        grid = build_grid(degree, intervals, (lo, hi))
        layers = []
        for n_in, n_out in pairs:
            coeffs = take((n_out, n_in, grid.n_basis))
            base = take((n_out, n_in))
            scales = take((n_out, n_in))
            layers.append(KanLayer(grid, coeffs, base, scales, scale))
        net = KanNetwork(layers)
    elif kind == _KIND["mlp"]:
        weights, biases = [], []
        for n_in, n_out in pairs:
            weights.append(take((n_out, n_in)))
            biases.append(take((n_out,)))
        net = MlpNetwork(weights, biases)
    else:
        raise ValueError(f"{path}: unknown network kind {kind}")
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return net
