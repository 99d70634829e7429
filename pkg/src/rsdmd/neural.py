"""Small numpy multilayer perceptron with exact backpropagation.

Used by the DQN and PPO agents and by the trainable dictionary.  Besides
parameter gradients the network also provides exact first and second
derivatives with respect to its *inputs* (tanh networks), which the
generator of a learned dictionary needs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ArchitectureMismatch, InvalidInput, NonFiniteUpdate, ShapeMismatch, StaleCache

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, a, z):
    # derivative expressed through the activation value where possible
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(z.dtype)


class Mlp:
    """Fully connected network, hidden activation ``tanh`` or ``relu``, identity output.

    Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    def __init__(self, layer_sizes, activation="tanh", rng=None, weights=None, biases=None):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise InvalidInput(f"invalid layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise InvalidInput(f"activation must be one of {ACTIVATIONS}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        if weights is None:
            rng = np.random.default_rng(rng)
            weights, biases = [], []
            for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
                limit = np.sqrt(6.0 / (n_in + n_out))
                weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
                biases.append(np.zeros(n_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for w, b, n_in, n_out in zip(self.weights, self.biases, layer_sizes[:-1], layer_sizes[1:]):
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ShapeMismatch("parameter shapes do not match layer sizes")
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in the fixed order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation, weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ShapeMismatch(f"expected input width {self.n_inputs}, got shape {x.shape}")
        acts, pre = [x], []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            a = z if i == last else _act(self.activation, z)
            acts.append(a)
        self._cache = (acts, pre)
        return a[0] if squeeze else a

    __call__ = forward

    def backward(self, loss_grad) -> list[np.ndarray]:
        """Gradients of a scalar loss given ``d loss / d output`` for the cached batch."""
        if self._cache is None:
            raise StaleCache("backward called without a recorded forward pass")
        acts, pre = self._cache
        g = np.asarray(loss_grad, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeMismatch(f"loss gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * _act_grad(self.activation, acts[i], pre[i - 1])
        return grads

    def input_gradient(self, loss_grad) -> np.ndarray:
        """``d loss / d input`` for the cached batch."""
        if self._cache is None:
            raise StaleCache("input_gradient called without a recorded forward pass")
        acts, pre = self._cache
        g = np.atleast_2d(np.asarray(loss_grad, dtype=float))
        for i in range(len(self.weights) - 1, -1, -1):
            g = g @ self.weights[i].T
            if i > 0:
                g = g * _act_grad(self.activation, acts[i], pre[i - 1])
        return g

    def input_derivatives(self, x, order=2):
        """Outputs with exact input Jacobian ``(m, out, d)`` and Hessian ``(m, out, d, d)``.

        Forward-mode propagation through the layers.  For ``relu`` networks the
        second derivative is zero almost everywhere.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_inputs:
            raise ShapeMismatch(f"expected input width {self.n_inputs}, got shape {x.shape}")
        m, d = x.shape
        a = x
        jac = np.broadcast_to(np.eye(d), (m, d, d))
        hess = np.zeros((m, d, d, d)) if order >= 2 else None
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            jz = np.einsum("kj,mkd->mjd", w, jac)
            hz = np.einsum("kj,mkde->mjde", w, hess) if order >= 2 else None
            if i == last:
                a, jac, hess = z, jz, hz
                break
            if self.activation == "tanh":
                a = np.tanh(z)
                s1 = 1.0 - a * a
                jac = s1[..., None] * jz
                if order >= 2:
                    s2 = -2.0 * a * s1
                    hess = s1[..., None, None] * hz + s2[..., None, None] * jz[..., :, None] * jz[..., None, :]
            else:
                a = np.maximum(z, 0.0)
                s1 = (z > 0).astype(float)
                jac = s1[..., None] * jz
                if order >= 2:
                    hess = s1[..., None, None] * hz
        return a, jac, hess

    def architecture(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            **self.architecture(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        if data.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version {data.get('version')!r}")
        return cls(data["layer_sizes"], data["activation"], weights=data["weights"], biases=data["biases"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    err = pred - np.asarray(target, dtype=float)
    return float(np.mean(err**2)), 2.0 * err / err.size


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss and its gradient with respect to ``pred``.

    ``0.5 e^2`` for ``|e| <= delta``, ``delta (|e| - delta/2)`` otherwise.
    """
    if not delta > 0:
        raise InvalidInput("delta must be positive")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    err = pred - target
    abs_err = np.abs(err)
    small = abs_err <= delta
    loss = np.where(small, 0.5 * err**2, delta * (abs_err - 0.5 * delta))
    grad = np.where(small, err, delta * np.sign(err))
    n = max(err.size, 1)
    return float(loss.sum() / n), grad / n


def clip_gradients(grads, max_abs=100.0):
    """Elementwise clamp of every gradient array to ``[-max_abs, max_abs]``."""
    return [np.clip(g, -max_abs, max_abs) for g in grads]


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidInput(f"unknown optimizer {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "learning_rate": self.learning_rate, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerState":
        data = dict(data)
        data["m"] = [np.array(a, dtype=float) for a in data.get("m", [])]
        data["v"] = [np.array(a, dtype=float) for a in data.get("v", [])]
        return cls(**data)


def optimizer_step(net: Mlp, grads, state: OptimizerState) -> Mlp:
    """Apply one SGD or Adam update to ``net`` in place and return it."""
    params = net.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeMismatch("gradient shapes do not match parameters")
    if state.kind == "sgd":
        updates = [state.learning_rate * g for g in grads]
    else:
        if not state.m:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        state.step += 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1**state.step
        c2 = 1.0 - b2**state.step
        updates = []
        for g, m, v in zip(grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            updates.append(state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps))
    new = [p - u for p, u in zip(params, updates)]
    if not all(np.all(np.isfinite(p)) for p in new):
        raise NonFiniteUpdate("optimizer step produced non-finite parameters")
    for p, q in zip(params, new):
        p[...] = q
    return net


def soft_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    """``target <- tau * source + (1 - tau) * target`` elementwise, in place."""
    if not 0.0 < tau <= 1.0:
        raise InvalidInput("tau must lie in (0, 1]")
    if target.architecture() != source.architecture():
        raise ArchitectureMismatch(f"{target.architecture()} vs {source.architecture()}")
    for t, s in zip(target.params, source.params):
        t *= 1.0 - tau
        t += tau * s
    return target


def numerical_gradients(net: Mlp, x, loss_fn, step=1e-6) -> list[np.ndarray]:
    """Central finite-difference gradients of ``loss_fn(net.forward(x))`` for every parameter."""
    grads = []
    for p in net.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            fp = loss_fn(net.forward(x))
            p[idx] = orig - step
            fm = loss_fn(net.forward(x))
            p[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-8) -> float:
    """``max |a - b| / max(|a| + |b|, floor)`` over all entries of two array lists."""
    worst = 0.0
    for x, y in zip(a, b):
        x = np.asarray(x)
        y = np.asarray(y)
        denom = np.maximum(np.abs(x) + np.abs(y), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)) if x.size else 0.0)
    return worst


def gradient_check(layer_sizes, activation="tanh", seed=0, batch=5, step=1e-6) -> float:
    """Max relative error between backprop and central differences on a random net and batch."""
    rng = np.random.default_rng(seed)
    net = Mlp(layer_sizes, activation, rng=rng)
    # keep biases non-zero so they are exercised
    for b in net.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(batch, layer_sizes[0]))
    coef = rng.normal(size=(batch, layer_sizes[-1]))

    def loss_fn(out):
        return float(np.sum(coef * out) + 0.5 * np.sum(out**2))

    out = net.forward(x)
    analytic = net.backward(coef + out)
    numeric = numerical_gradients(net, x, loss_fn, step=step)
    return max_relative_error(analytic, numeric)
