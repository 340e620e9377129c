"""Function-approximator substrate: MLPs, a GRU cell, Adam, gradient audits.

Every learned component stores its weights as one flat parameter vector whose
layout (named segments) is derived from a small frozen spec. Forward passes
slice the vector with static offsets, so the same code runs eagerly and under
``jax.jit``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Any, Callable, Mapping, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

ACTIVATIONS: dict[str, Callable] = {
    "silu": jax.nn.silu,
    "relu": jax.nn.relu,
    "elu": jax.nn.elu,
    "tanh": jnp.tanh,
}

OUTPUT_HEADS = ("linear", "logits", "unit_interval", "nonnegative")


class ShapeError(ValueError):
    """Input or parameter shape does not match an approximator spec."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a forward pass, gradient or loss."""


class Segment(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _layout(entries: list[tuple[str, tuple[int, ...]]]) -> tuple[Segment, ...]:
    out, offset = [], 0
    for name, shape in entries:
        seg = Segment(name, shape, offset)
        out.append(seg)
        offset += seg.size
    return tuple(out)


@dataclass(frozen=True)
class ApproximatorSpec:
    """Multilayer perceptron architecture.

    ``out_scale`` multiplies the initial output-layer weights; 0 gives a
    network whose initial output is exactly the output bias (zero).
    """

    input_dim: int
    output_dim: int
    hidden_layers: int = 2
    hidden_units: int = 64
    activation: str = "silu"
    output_head: str = "linear"
    out_scale: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_units < 1:
            raise ShapeError(f"dimensions must be >= 1: {self}")
        if self.hidden_layers < 1:
            raise ShapeError("hidden_layers must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]

    @property
    def layout(self) -> tuple[Segment, ...]:
        entries = []
        w = self.widths
        for i, (a, b) in enumerate(zip(w[:-1], w[1:])):
            entries.append((f"layer{i}.weight", (a, b)))
            entries.append((f"layer{i}.bias", (b,)))
        return _layout(entries)

    @property
    def size(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size


@dataclass(frozen=True)
class GruSpec:
    """Gated recurrent cell; ``forward`` input is ``concat(x, h)``."""

    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ShapeError(f"dimensions must be >= 1: {self}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim

    @property
    def layout(self) -> tuple[Segment, ...]:
        h = self.hidden_dim
        return _layout([
            ("input.weight", (self.input_dim, 3 * h)),
            ("hidden.weight", (h, 3 * h)),
            ("bias", (3 * h,)),
        ])

    @property
    def size(self) -> int:
        return (self.input_dim + self.hidden_dim + 1) * 3 * self.hidden_dim


Spec = ApproximatorSpec | GruSpec


def unpack(spec: Spec, params) -> dict[str, jnp.ndarray]:
    """Named views of a flat parameter vector."""
    if params.shape != (spec.size,):
        raise ShapeError(f"parameter vector has shape {params.shape}, spec needs ({spec.size},)")
    return {s.name: params[s.offset:s.offset + s.size].reshape(s.shape) for s in spec.layout}


def init_params(spec: Spec, key, dtype=jnp.float64) -> jnp.ndarray:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``key``.

    ``key`` may be an int seed or a JAX PRNG key.
    """
    if isinstance(key, int):
        key = jax.random.PRNGKey(key)
    chunks = []
    weights = [s for s in spec.layout if s.name.endswith("weight")]
    keys = jax.random.split(key, len(weights))
    k_iter = iter(keys)
    last_weight = weights[-1].name
    for seg in spec.layout:
        if seg.name.endswith("bias"):
            chunks.append(jnp.zeros(seg.size, dtype))
            continue
        fan_in = seg.shape[0]
        if isinstance(spec, GruSpec):
            fan_in = spec.input_dim + spec.hidden_dim
        bound = 1.0 / math.sqrt(fan_in)
        if isinstance(spec, ApproximatorSpec) and seg.name == last_weight:
            bound *= spec.out_scale
        w = jax.random.uniform(next(k_iter), (seg.size,), dtype, -bound, bound)
        chunks.append(w)
    return jnp.concatenate(chunks)


def _check_input(spec: Spec, x) -> None:
    if x.shape[-1] != spec.input_dim + (spec.hidden_dim if isinstance(spec, GruSpec) else 0):
        raise ShapeError(
            f"input has trailing dimension {x.shape[-1]}, spec {type(spec).__name__} "
            f"expects {spec.input_dim + (spec.hidden_dim if isinstance(spec, GruSpec) else 0)}")


def _apply_head(kind: str, y):
    if kind == "unit_interval":
        return jax.nn.sigmoid(y)
    if kind == "nonnegative":
        return jax.nn.softplus(y)
    return y


def _mlp_layers(spec: ApproximatorSpec, params, x, trace: list | None = None):
    p = unpack(spec, params)
    act = ACTIVATIONS[spec.activation]
    n = len(spec.widths) - 1
    for i in range(n):
        x = x @ p[f"layer{i}.weight"] + p[f"layer{i}.bias"]
        if i < n - 1:
            x = act(x)
        if trace is not None:
            trace.append((f"layer{i}", x))
    x = _apply_head(spec.output_head, x)
    if trace is not None:
        trace.append(("head", x))
    return x


def gru_step(spec: GruSpec, params, x, h):
    """One recurrent update ``h' = (1 - u) * n + u * h``.

    With all-zero parameters ``u = 1/2`` and ``n = 0``, so ``h' = h / 2``.
    """
    p = unpack(spec, params)
    hd = spec.hidden_dim
    gx = x @ p["input.weight"] + p["bias"]
    gh = h @ p["hidden.weight"]
    reset = jax.nn.sigmoid(gx[..., :hd] + gh[..., :hd])
    update = jax.nn.sigmoid(gx[..., hd:2 * hd] + gh[..., hd:2 * hd])
    cand = jnp.tanh(gx[..., 2 * hd:] + reset * gh[..., 2 * hd:])
    return (1.0 - update) * cand + update * h


def forward(spec: Spec, params, x):
    """Evaluate an approximator on ``x`` (leading batch dims allowed)."""
    _check_input(spec, x)
    if isinstance(spec, GruSpec):
        return gru_step(spec, params, x[..., :spec.input_dim], x[..., spec.input_dim:])
    return _mlp_layers(spec, params, x)


def backward(spec: Spec, params, x, output_adjoint) -> jnp.ndarray:
    """Gradient of ``sum(output_adjoint * forward(x))`` w.r.t. the parameters."""
    _check_input(spec, x)
    if isinstance(spec, ApproximatorSpec):
        trace: list = []
        _mlp_layers(spec, params, x, trace)
        for name, value in trace:
            if not bool(jnp.all(jnp.isfinite(value))):
                raise NonFiniteError(f"non-finite intermediate in {name}")
    out, vjp = jax.vjp(lambda p: forward(spec, p, x), params)
    if output_adjoint.shape != out.shape:
        raise ShapeError(f"adjoint shape {output_adjoint.shape} != output shape {out.shape}")
    (grad,) = vjp(output_adjoint)
    return grad


# --------------------------------------------------------------------------- optimizer


class OptimizerState(NamedTuple):
    first_moment: Any
    second_moment: Any
    step_count: jnp.ndarray
    learning_rate: jnp.ndarray


def adam_init(params, learning_rate: float) -> OptimizerState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return OptimizerState(zeros, zeros, jnp.zeros((), jnp.int64),
                          jnp.asarray(learning_rate, jnp.float64))


def global_norm(tree) -> jnp.ndarray:
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.sqrt(sum(jnp.sum(jnp.square(g)) for g in leaves))


def optimizer_step(params, grads, state: OptimizerState, *, b1: float = 0.9, b2: float = 0.999,
                   eps: float = 1e-8, clip_norm: float | None = 100.0):
    """Adam update with global-norm clipping.

    Non-finite gradients are rejected: eagerly with ``NonFiniteError``; under
    ``jit`` the update is skipped and parameters/state are returned unchanged.
    """
    norm = global_norm(grads)
    finite = jnp.isfinite(norm)
    if not isinstance(norm, jax.core.Tracer) and not bool(finite):
        raise NonFiniteError("non-finite gradient passed to optimizer_step")
    if clip_norm is not None:
        scale = jnp.minimum(1.0, clip_norm / jnp.maximum(norm, 1e-12))
        grads = jax.tree_util.tree_map(lambda g: g * scale.astype(g.dtype), grads)
    count = state.step_count + 1
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.first_moment, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.second_moment, grads)
    c1 = 1 - b1 ** count.astype(jnp.float64)
    c2 = 1 - b2 ** count.astype(jnp.float64)
    lr = state.learning_rate

    def upd(p, m, v):
        step = lr * (m / c1) / (jnp.sqrt(v / c2) + eps)
        return p - step.astype(p.dtype)

    new_params = jax.tree_util.tree_map(upd, params, m, v)
    new_state = OptimizerState(m, v, count, lr)
    keep = lambda new, old: jax.tree_util.tree_map(lambda a, b: jnp.where(finite, a, b), new, old)
    return keep(new_params, params), keep(new_state, state)


# --------------------------------------------------------------------------- audits


def gradient_audit(loss_fn: Callable, params, *, eps: float = 1e-5, max_coords: int | None = None,
                   seed: int = 0, chunk: int = 64) -> float:
    """Max relative error between autodiff and central finite differences.

    ``loss_fn`` maps ``params`` (array or pytree) to a scalar. With
    ``max_coords`` set, a seeded random subset of coordinates is checked.
    Error per coordinate: ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    flat, unravel = ravel_pytree(params)
    f = jax.jit(lambda v: loss_fn(unravel(v)))
    analytic = np.asarray(jax.grad(lambda v: loss_fn(unravel(v)))(flat))
    n = flat.shape[0]
    coords = np.arange(n)
    if max_coords is not None and max_coords < n:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))
    batched = jax.jit(jax.vmap(f))
    numeric = np.empty(len(coords))
    for start in range(0, len(coords), chunk):
        idx = coords[start:start + chunk]
        basis = jnp.zeros((len(idx), n), flat.dtype).at[jnp.arange(len(idx)), idx].set(eps)
        plus = np.asarray(batched(flat[None, :] + basis))
        minus = np.asarray(batched(flat[None, :] - basis))
        numeric[start:start + len(idx)] = (plus - minus) / (2 * eps)
    err = np.abs(analytic[coords] - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if len(err) else 0.0


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FOSPCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def flatten_tree(tree: Mapping, prefix: str = "") -> dict[str, np.ndarray]:
    """Nested dicts of arrays -> ``{"a/b": array}``."""
    out: dict[str, np.ndarray] = {}
    for k, v in tree.items():
        name = f"{prefix}/{k}" if prefix else str(k)
        if isinstance(v, Mapping):
            out.update(flatten_tree(v, name))
        else:
            out[name] = np.asarray(v)
    return out


def unflatten_tree(flat: Mapping[str, np.ndarray], prefix: str = "") -> dict:
    tree: dict = {}
    for name, value in flat.items():
        if prefix:
            if not name.startswith(prefix + "/"):
                continue
            name = name[len(prefix) + 1:]
        node = tree
        parts = name.split("/")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return tree


def encode_checkpoint(segments: Mapping[str, np.ndarray]) -> bytes:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<HI", CKPT_VERSION, len(segments))
    for name, arr in segments.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    return bytes(buf)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic bytes (not a FOSPCKPT file)")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size, f"payload of {name!r}"), "<f8").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return out


def save_checkpoint(path, segments: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(segments))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
