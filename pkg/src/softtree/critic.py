"""Fully connected value network plus the shared optimizer machinery.

The critic maps a state vector to one estimated cost-to-go per discrete
action (ReLU hidden layers, identity output). Everything is float64 and
hand-differentiated; the Adam and Polyak helpers work on plain lists of
arrays so tree parameters reuse them unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MLP_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases per layer; weights[l] has shape (out, in)."""

    weights: tuple
    biases: tuple

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        )
        object.__setattr__(
            self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        )
        if len(self.weights) != len(self.biases):
            raise ValueError(
                f"{len(self.weights)} weight arrays vs {len(self.biases)} bias arrays"
            )
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {layer}: weight {w.shape} vs bias {b.shape}")
            if layer > 0 and w.shape[1] != self.weights[layer - 1].shape[0]:
                raise ValueError(
                    f"layer {layer}: input width {w.shape[1]} does not match "
                    f"previous output width {self.weights[layer - 1].shape[0]}"
                )

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def to_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        weights = tuple(arrays[0::2])
        biases = tuple(arrays[1::2])
        return replace(self, weights=weights, biases=biases)


@dataclass(frozen=True)
class MlpGradients:
    d_weights: tuple
    d_biases: tuple

    def to_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.d_weights, self.d_biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(widths, seed: int) -> MlpParams:
    """Glorot-uniform weights (+-sqrt(6 / (fan_in + fan_out))), zero biases."""
    widths = tuple(int(v) for v in widths)
    if len(widths) < 2:
        raise ValueError(f"need at least input and output widths, got {widths}")
    if any(v < 1 for v in widths):
        raise ValueError(f"layer widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


# --------------------------------------------------------------------------
# forward / backward


def mlp_forward_batch(net: MlpParams, x: np.ndarray):
    """Batched forward pass.

    Returns the output array of shape (B, out) and the cache of per-layer
    inputs that the backward pass consumes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise ValueError(f"input shape {x.shape} does not match width {net.widths[0]}")
    inputs = []
    h = x
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        h = h @ w.T + b
        if layer < last:
            h = np.maximum(h, 0.0)  # relu everywhere except the linear head
    return h, inputs


def mlp_forward(net: MlpParams, x: np.ndarray):
    """Single-input forward pass; returns (output (A,), cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a flat input vector, got shape {x.shape}")
    out, cache = mlp_forward_batch(net, x[None, :])
    return out[0], cache


def mlp_backward_batch(
    net: MlpParams, cache, upstream: np.ndarray
) -> MlpGradients:
    """Gradients summed over the batch, given d(loss)/d(output).

    The cache must come from a forward pass of the same network; shape
    mismatches are rejected rather than silently misattributed.
    """
    if len(cache) != len(net.weights):
        raise ValueError(
            f"cache holds {len(cache)} layers, network has {len(net.weights)}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 2 or upstream.shape[1] != net.widths[-1]:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match width {net.widths[-1]}"
        )
    if upstream.shape[0] != cache[0].shape[0]:
        raise ValueError(
            f"upstream batch {upstream.shape[0]} vs cache batch {cache[0].shape[0]}"
        )
    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.weights)
    delta = upstream
    for layer in range(len(net.weights) - 1, -1, -1):
        inp = cache[layer]
        if inp.shape[1] != net.weights[layer].shape[1]:
            raise ValueError(
                f"cache layer {layer} width {inp.shape[1]} does not match "
                f"weight width {net.weights[layer].shape[1]}"
            )
        d_weights[layer] = delta.T @ inp
        d_biases[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ net.weights[layer]
            # relu gate: the stored input of this layer is the previous
            # layer's activation, zero exactly where the unit was clamped
            delta = delta * (cache[layer] > 0.0)
    return MlpGradients(tuple(d_weights), tuple(d_biases))


def mlp_backward(net: MlpParams, cache, upstream: np.ndarray) -> MlpGradients:
    """Single-input backward pass."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 1:
        raise ValueError(f"expected a flat upstream vector, got {upstream.shape}")
    return mlp_backward_batch(net, cache, upstream[None, :])


# --------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: tuple
    v: tuple
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(
    arrays,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if not 0.0 < lr:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"moment decays must lie in [0, 1), got {beta1}, {beta2}")
    return AdamState(
        m=tuple(np.zeros_like(a) for a in arrays),
        v=tuple(np.zeros_like(a) for a in arrays),
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(arrays, grads, state: AdamState):
    """One Adam update over a list of arrays; returns (new arrays, new state)."""
    if len(arrays) != len(state.m) or len(grads) != len(state.m):
        raise ValueError(
            f"got {len(arrays)} arrays / {len(grads)} gradients for "
            f"{len(state.m)} optimizer slots"
        )
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_arrays = []
    new_m = []
    new_v = []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {a.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays.append(a - step)
        new_m.append(m)
        new_v.append(v)
    return new_arrays, replace(state, m=tuple(new_m), v=tuple(new_v), step=t)


def polyak_update(target_arrays, online_arrays, tau: float):
    """Exponential tracking: target <- (1 - tau) * target + tau * online."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if len(target_arrays) != len(online_arrays):
        raise ValueError(
            f"{len(target_arrays)} target arrays vs {len(online_arrays)} online"
        )
    out = []
    for t, o in zip(target_arrays, online_arrays):
        if t.shape != o.shape:
            raise ValueError(f"target shape {t.shape} does not match {o.shape}")
        out.append((1.0 - tau) * t + tau * o)
    return out


# --------------------------------------------------------------------------
# checkpoints


def save_mlp(net: MlpParams, path: str | Path) -> None:
    """Write the network as a versioned JSON checkpoint."""
    payload = {
        "format_version": MLP_CHECKPOINT_VERSION,
        "kind": "mlp",
        "widths": list(net.widths),
        "layers": [
            {"weights": w.tolist(), "biases": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_mlp(path: str | Path) -> MlpParams:
    """Read a network checkpoint written by :func:`save_mlp`."""
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "mlp":
        raise ValueError(f"checkpoint kind {payload.get('kind')!r} is not 'mlp'")
    version = payload.get("format_version")
    if version != MLP_CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported network checkpoint version {version!r}, "
            f"expected {MLP_CHECKPOINT_VERSION}"
        )
    weights = tuple(
        np.array(layer["weights"], dtype=np.float64) for layer in payload["layers"]
    )
    biases = tuple(
        np.array(layer["biases"], dtype=np.float64) for layer in payload["layers"]
    )
    net = MlpParams(weights, biases)
    if list(net.widths) != list(payload["widths"]):
        raise ValueError(
            f"checkpoint widths {payload['widths']} do not match layer shapes "
            f"{list(net.widths)}"
        )
    return net
