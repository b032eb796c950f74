"""Small numpy MLP engine: tanh hidden layers, linear output, exact backprop, Adam.

Arrays are float64 and row-major ``(batch, features)``. Any non-finite value
produced by a forward pass or an optimizer step raises :class:`NonFiniteError`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

CHECKPOINT_FORMAT = "lanemoe.checkpoint/1"


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


class SchemaMismatchError(ValueError):
    pass


class Backbone(Protocol):
    """Anything that maps a batch to outputs and backpropagates into its params."""

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]: ...

    def backward(self, cache: list, grad_out: np.ndarray) -> list[np.ndarray]: ...

    def params(self) -> list[np.ndarray]: ...


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MlpNet:
    """Fully connected net: affine + tanh on hidden layers, affine output."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        hidden_gain: float = np.sqrt(2.0),
        output_gain: float = 1.0,
    ):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            gain = output_gain if k == n_layers - 1 else hidden_gain
            self.weights.append(_orthogonal(rng, self.sizes[k], self.sizes[k + 1], gain))
            self.biases.append(np.zeros(self.sizes[k + 1]))

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ShapeError(f"input has {x.shape[1]} columns, net expects {self.sizes[0]}")
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            cache.append(h)
        if not np.isfinite(h).all():
            raise NonFiniteError("non-finite network output")
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list | None, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. ``params()``, same order."""
        if not cache:
            raise MissingCacheError("backward needs the cache from forward")
        g = np.asarray(grad_out, dtype=float)
        if g.shape != cache[-1].shape:
            raise ShapeError(f"output grad shape {g.shape} != output shape {cache[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for k in range(len(self.weights) - 1, -1, -1):
            a_in = cache[k]
            grads[2 * k] = a_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * (1.0 - a_in * a_in)
        return grads

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.parameter_count:
            raise ShapeError(f"expected {self.parameter_count} values, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "MlpNet":
        other = MlpNet.__new__(MlpNet)
        other.sizes = list(self.sizes)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class AdamState:
    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": np.concatenate([a.ravel() for a in self.m]).tolist() if self.m else [],
            "v": np.concatenate([a.ravel() for a in self.v]).tolist() if self.v else [],
        }

    def load_dict(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.beta1, self.beta2, self.eps = doc["beta1"], doc["beta2"], doc["eps"]
        for name in ("m", "v"):
            flat = np.asarray(doc[name], dtype=float)
            i = 0
            for a in getattr(self, name):
                a[...] = flat[i : i + a.size].reshape(a.shape)
                i += a.size


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    max_grad_norm: float | None = None,
) -> float:
    """Clip gradients to ``max_grad_norm`` then apply one Adam update in place.

    Returns the gradient norm before clipping.
    """
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("params and grads do not match")
    if max_grad_norm is not None:
        grads, norm = clip_by_global_norm(grads, max_grad_norm)
    else:
        norm = global_norm(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.isfinite(p).all():
            raise NonFiniteError("non-finite parameter after Adam step")
    return norm


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(
    path,
    nets: dict[str, MlpNet],
    schema_hash: str,
    optimizer: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema_hash": schema_hash,
        "nets": {name: {"sizes": net.sizes, "params": net.get_flat().tolist()} for name, net in nets.items()},
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, expected_schema_hash: str | None = None) -> tuple[dict[str, MlpNet], dict]:
    """Read a checkpoint; returns ``(nets, document)``.

    Raises:
        SchemaMismatchError: the stored observation-schema hash differs.
    """
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    if expected_schema_hash is not None and doc["schema_hash"] != expected_schema_hash:
        raise SchemaMismatchError(
            f"{path}: observation schema {doc['schema_hash']} does not match {expected_schema_hash}"
        )
    nets = {}
    for name, body in doc["nets"].items():
        net = MlpNet(body["sizes"])
        net.set_flat(np.asarray(body["params"]))
        nets[name] = net
    return nets, doc
