"""Dense feed-forward networks with hand-rolled differentiation.

Supports the layer family {Dense, relu, tanh} over float64 tensors and
provides every derivative the rest of the toolkit needs, all matrix-free:

* ``grad``        -- reverse-mode gradient of the summed per-datum loss,
* ``jvp``/``vjp`` -- Jacobian-vector / vector-Jacobian products of the model,
* ``jacobian``    -- per-sample Jacobians, assembled row by row,
* ``hessian_vec`` -- exact Hessian-vector products via forward-over-reverse
  (Pearlmutter's trick),
* ``ggn_vec``     -- Generalized Gauss-Newton products J^T Lambda J v.

Conventions: mse is the half sum of squared errors per datum (so its output
Hessian is the identity), cross_entropy is -log softmax at the target class,
and the relu derivative at exactly 0 is 0. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .trees import ParamTree, unflatten

LOSSES = ("mse", "cross_entropy")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True
    # Constant (non-trainable) vector added to the affine output; lets tiny
    # hand-specified nets carry fixed offsets without extra parameters.
    shift: Optional[tuple] = None

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimensionError(f"dense layer dims must be >= 1, got {self}")
        if self.shift is not None:
            object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))
            if len(self.shift) != self.out_dim:
                raise DimensionError(
                    f"dense shift length {len(self.shift)} != out_dim {self.out_dim}"
                )


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.kind!r}, expected {ACTIVATIONS}")


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus declared input/output dims; last layer is Dense (raw logits)."""

    layers: tuple
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionError("model must have at least one layer")
        if not isinstance(self.layers[-1], Dense):
            raise DimensionError("last layer must be Dense (raw outputs, no nonlinearity)")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise DimensionError(
                        f"layer {i} (Dense) expects input dim {layer.in_dim}, got {width}"
                    )
                width = layer.out_dim
        if width != self.output_dim:
            raise DimensionError(
                f"declared output_dim {self.output_dim} != final layer width {width}"
            )

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append(
                    {
                        "type": "dense",
                        "in": layer.in_dim,
                        "out": layer.out_dim,
                        "bias": layer.bias,
                        "shift": list(layer.shift) if layer.shift is not None else None,
                    }
                )
            else:
                layers.append({"type": "activation", "kind": layer.kind})
        return {"input_dim": self.input_dim, "output_dim": self.output_dim, "layers": layers}

    @classmethod
    def from_dict(cls, spec: dict) -> "ModelSpec":
        layers = []
        for entry in spec["layers"]:
            if entry["type"] == "dense":
                layers.append(
                    Dense(
                        entry["in"],
                        entry["out"],
                        bias=entry.get("bias", True),
                        shift=tuple(entry["shift"]) if entry.get("shift") else None,
                    )
                )
            elif entry["type"] == "activation":
                layers.append(Activation(entry["kind"]))
            else:
                raise DomainError(f"unknown layer type {entry['type']!r}")
        return cls(tuple(layers), spec["input_dim"], spec["output_dim"])


def mlp(input_dim: int, hidden: Sequence[int], output_dim: int, activation: str = "tanh") -> ModelSpec:
    """Fully-connected net: Dense/act pairs through ``hidden``, Dense head."""
    layers = []
    width = input_dim
    for h in hidden:
        layers.append(Dense(width, h))
        layers.append(Activation(activation))
        width = h
    layers.append(Dense(width, output_dim))
    return ModelSpec(tuple(layers), input_dim, output_dim)


@dataclass(frozen=True)
class Batch:
    """Paired inputs (N x input_dim) and targets with a common leading N >= 1."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.atleast_2d(np.asarray(self.inputs, dtype=np.float64)))
        targets = np.asarray(self.targets)
        if targets.dtype.kind in "iu":
            targets = targets.reshape(-1)
        else:
            targets = np.atleast_2d(targets.astype(np.float64))
        object.__setattr__(self, "targets", targets)
        if self.inputs.shape[0] < 1:
            raise DimensionError("batch must contain at least one datum")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError(
                f"inputs have N={self.inputs.shape[0]} but targets have N={self.targets.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def init_params(model: ModelSpec, seed: int = 0, scale: float = 1.0) -> ParamTree:
    """Seeded init: W ~ N(0, scale^2/in_dim), b = 0. Leaf names dense_<k>/{w,b}."""
    rng = np.random.default_rng(seed)
    params: ParamTree = {}
    k = 0
    for layer in model.layers:
        if isinstance(layer, Dense):
            entry = {"w": rng.standard_normal((layer.in_dim, layer.out_dim)) * scale / np.sqrt(layer.in_dim)}
            if layer.bias:
                entry["b"] = np.zeros(layer.out_dim)
            params[f"dense_{k}"] = entry
            k += 1
    return params


def dense_layer_names(model: ModelSpec) -> list[str]:
    return [f"dense_{k}" for k in range(sum(isinstance(l, Dense) for l in model.layers))]


def _check_loss(loss: str) -> str:
    if loss not in LOSSES:
        raise DomainError(f"unknown loss {loss!r}, expected one of {LOSSES}")
    return loss


def _dense_params(model: ModelSpec, params: ParamTree):
    """Per-Dense (W, b) arrays, validated against the layer spec."""
    out = []
    k = 0
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, Dense):
            continue
        name = f"dense_{k}"
        if name not in params:
            raise DimensionError(f"params missing entry {name!r} for layer {i}")
        entry = params[name]
        w = np.asarray(entry["w"], dtype=np.float64)
        if w.shape != (layer.in_dim, layer.out_dim):
            raise DimensionError(
                f"layer {i} ({name}) weight shape {w.shape} != {(layer.in_dim, layer.out_dim)}"
            )
        b = None
        if layer.bias:
            b = np.asarray(entry["b"], dtype=np.float64)
            if b.shape != (layer.out_dim,):
                raise DimensionError(f"layer {i} ({name}) bias shape {b.shape} != ({layer.out_dim},)")
        out.append((layer, w, b))
        k += 1
    return out


def _as_batch_2d(model: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.input_dim:
        raise DimensionError(
            f"input has trailing dim {x2.shape[1]}, model expects {model.input_dim}"
        )
    return x2, single


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_deriv(kind: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    # relu'(0) := 0 by convention.
    return np.where(z > 0.0, 1.0, 0.0) if kind == "relu" else 1.0 - out * out


def _forward_core(model: ModelSpec, params: ParamTree, x2: np.ndarray):
    """Forward pass keeping per-layer caches for the backward passes."""
    dense = iter(_dense_params(model, params))
    a = x2
    caches = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            _, w, b = next(dense)
            caches.append(("dense", a, w, b))
            a = a @ w
            if b is not None:
                a = a + b
            if layer.shift is not None:
                a = a + np.asarray(layer.shift)
        else:
            z = a
            a = _act(layer.kind, z)
            caches.append(("act", layer.kind, z, a))
    return a, caches


def forward(model: ModelSpec, params: ParamTree, x) -> np.ndarray:
    """Deterministic model outputs, shape (..., output_dim)."""
    x2, single = _as_batch_2d(model, x)
    out, _ = _forward_core(model, params, x2)
    return out[0] if single else out


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _target_onehot(targets: np.ndarray, n_classes: int) -> np.ndarray:
    if targets.ndim == 1:
        idx = targets.astype(np.intp)
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= n_classes:
            raise DomainError(f"class index outside [0, {n_classes})")
        hot = np.zeros((idx.shape[0], n_classes))
        hot[np.arange(idx.shape[0]), idx] = 1.0
        return hot
    if targets.shape[1] != n_classes:
        raise DimensionError(
            f"one-hot targets have {targets.shape[1]} columns, model has {n_classes} classes"
        )
    return np.asarray(targets, dtype=np.float64)


def loss_value(loss: str, output, target) -> float:
    """Summed per-datum loss over the (possibly single-row) batch."""
    _check_loss(loss)
    out = np.atleast_2d(np.asarray(output, dtype=np.float64))
    if loss == "mse":
        tgt = np.atleast_2d(np.asarray(target, dtype=np.float64))
        if tgt.shape != out.shape:
            raise DimensionError(f"mse target shape {tgt.shape} != output shape {out.shape}")
        diff = out - tgt
        return float(0.5 * np.sum(diff * diff))
    hot = _target_onehot(np.asarray(target), out.shape[1])
    logz = out - out.max(axis=1, keepdims=True)
    log_softmax = logz - np.log(np.exp(logz).sum(axis=1, keepdims=True))
    return float(-np.sum(hot * log_softmax))


def _loss_output_grad(loss: str, outputs: np.ndarray, targets) -> np.ndarray:
    """d(summed loss)/d(outputs), shape (N, C)."""
    if loss == "mse":
        tgt = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if tgt.shape != outputs.shape:
            raise DimensionError(f"mse target shape {tgt.shape} != output shape {outputs.shape}")
        return outputs - tgt
    hot = _target_onehot(np.asarray(targets), outputs.shape[1])
    return _softmax(outputs) - hot


def _collect_backward(model, caches, g, tangent_caches=None, rg=None, v_dense=None):
    """Shared reverse sweep.

    With only ``g``: plain backprop, returns the flat gradient. With the
    Pearlmutter extras (forward tangents per cache, ``rg`` = R{g}, and the
    direction's dense params) it returns the flat R{gradient} instead.
    """
    rop = rg is not None
    grads = []
    for idx in range(len(caches) - 1, -1, -1):
        cache = caches[idx]
        if cache[0] == "dense":
            _, a, w, b = cache
            if rop:
                t_a = tangent_caches[idx]
                vw, vb = v_dense.pop()
                r_dw = t_a.T @ g + a.T @ rg
                entry = {"w": r_dw}
                if b is not None:
                    entry["b"] = rg.sum(axis=0)
                grads.append(entry)
                g, rg = g @ w.T, rg @ w.T + g @ vw.T
            else:
                entry = {"w": a.T @ g}
                if b is not None:
                    entry["b"] = g.sum(axis=0)
                grads.append(entry)
                g = g @ w.T
        else:
            _, kind, z, out = cache
            d1 = _act_deriv(kind, z, out)
            if rop:
                t_z = tangent_caches[idx]
                if kind == "tanh":
                    d2 = -2.0 * out * d1  # tanh'' = -2 tanh (1 - tanh^2)
                    rg = d2 * t_z * g + d1 * rg
                else:
                    rg = d1 * rg  # relu'' = 0 a.e.
                g = d1 * g
            else:
                g = d1 * g
    grads.reverse()
    flat = [
        leaf.ravel()
        for entry in grads
        for leaf in ([entry["w"], entry["b"]] if "b" in entry else [entry["w"]])
    ]
    return np.concatenate(flat)


def grad(model: ModelSpec, params: ParamTree, batch: Batch, loss: str) -> np.ndarray:
    """Exact gradient of the summed per-datum loss, as a flat vector."""
    _check_loss(loss)
    outputs, caches = _forward_core(model, params, batch.inputs)
    g = _loss_output_grad(loss, outputs, batch.targets)
    return _collect_backward(model, caches, g)


def _forward_with_tangent(model: ModelSpec, params: ParamTree, x2: np.ndarray, v_tree: ParamTree):
    """Forward pass carrying tangents; returns output, its tangent, and caches."""
    dense = _dense_params(model, params)
    v_dense = _dense_params(model, v_tree)
    caches, tangent_caches = [], []
    a, t = x2, np.zeros_like(x2)
    di = 0
    for layer in model.layers:
        if isinstance(layer, Dense):
            _, w, b = dense[di]
            _, vw, vb = v_dense[di]
            di += 1
            caches.append(("dense", a, w, b))
            tangent_caches.append(t)
            t = t @ w + a @ vw
            if vb is not None:
                t = t + vb
            a = a @ w
            if b is not None:
                a = a + b
            if layer.shift is not None:
                a = a + np.asarray(layer.shift)
        else:
            z, t_z = a, t
            a = _act(layer.kind, z)
            caches.append(("act", layer.kind, z, a))
            tangent_caches.append(t_z)
            t = _act_deriv(layer.kind, z, a) * t_z
    return a, t, caches, tangent_caches


def jvp(model: ModelSpec, params: ParamTree, x, v) -> np.ndarray:
    """J_theta f(x, params) . v -- forward-mode tangent through the net."""
    x2, single = _as_batch_2d(model, x)
    v_tree = unflatten(v, params)
    _, t, _, _ = _forward_with_tangent(model, params, x2, v_tree)
    return t[0] if single else t


def vjp(model: ModelSpec, params: ParamTree, x, u) -> np.ndarray:
    """J_theta^T u, summed over the rows of a batched cotangent ``u``."""
    x2, _ = _as_batch_2d(model, x)
    u2 = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u2.shape != (x2.shape[0], model.output_dim):
        raise DimensionError(
            f"cotangent shape {u2.shape} != output shape {(x2.shape[0], model.output_dim)}"
        )
    _, caches = _forward_core(model, params, x2)
    return _collect_backward(model, caches, u2)


def jacobian(model: ModelSpec, params: ParamTree, x) -> np.ndarray:
    """Per-sample Jacobians, shape (N, C, P); rows match ``vjp`` with unit cotangents."""
    x2, _ = _as_batch_2d(model, x)
    n, c = x2.shape[0], model.output_dim
    _, caches = _forward_core(model, params, x2)
    rows = []
    for cls in range(c):
        g = np.zeros((n, c))
        g[:, cls] = 1.0
        parts = []
        gi = g
        for idx in range(len(caches) - 1, -1, -1):
            cache = caches[idx]
            if cache[0] == "dense":
                _, a, w, b = cache
                dw = np.einsum("ni,nj->nij", a, gi).reshape(n, -1)
                parts.append(np.concatenate([dw, gi], axis=1) if b is not None else dw)
                gi = gi @ w.T
            else:
                _, kind, z, out = cache
                gi = _act_deriv(kind, z, out) * gi
        parts.reverse()
        rows.append(np.concatenate(parts, axis=1))
    return np.stack(rows, axis=1)


def hessian_vec(model: ModelSpec, params: ParamTree, batch: Batch, loss: str, v) -> np.ndarray:
    """Exact (sum_n loss_n) Hessian-vector product via forward-over-reverse."""
    _check_loss(loss)
    v_tree = unflatten(v, params)
    outputs, t_out, caches, tangent_caches = _forward_with_tangent(
        model, params, batch.inputs, v_tree
    )
    g = _loss_output_grad(loss, outputs, batch.targets)
    if loss == "mse":
        rg = t_out
    else:
        p = _softmax(outputs)
        pt = p * t_out
        rg = pt - p * pt.sum(axis=1, keepdims=True)
    v_dense = [(vw, vb) for _, vw, vb in _dense_params(model, v_tree)]
    return _collect_backward(model, caches, g, tangent_caches, rg, v_dense)


def ggn_vec(model: ModelSpec, params: ParamTree, x, loss: str, v) -> np.ndarray:
    """Sum_n J_n^T Lambda_n J_n v with Lambda the output Hessian of the loss."""
    _check_loss(loss)
    x2, _ = _as_batch_2d(model, x)
    v_tree = unflatten(v, params)
    outputs, t_out, caches, _ = _forward_with_tangent(model, params, x2, v_tree)
    if loss == "mse":
        s = t_out
    else:
        p = _softmax(outputs)
        pt = p * t_out
        s = pt - p * pt.sum(axis=1, keepdims=True)
    return _collect_backward(model, caches, s)
