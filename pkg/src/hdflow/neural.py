"""Flat-parameter MLPs with hand-written reverse mode, Adam and checkpoints.

Every trainable network in the package is an :class:`MlpSpec` plus a flat
float64 vector (:class:`ParamSet`). Layer ``i`` stores a weight matrix of
shape ``(fan_in, fan_out)`` followed by its bias, row-major, so a batch
``x`` of shape ``(B, fan_in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import RngStream

ACTIVATIONS = ("silu", "tanh")
PARAM_FORMAT_VERSION = 1
_MAGIC = b"HDFPARAM"


class CheckpointError(Exception):
    """Base class for unreadable parameter files."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """File is truncated or structurally malformed."""


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "silu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d["activation"])


@dataclass(frozen=True, eq=False)
class ParamSet:
    spec: MlpSpec
    values: np.ndarray
    version: int = PARAM_FORMAT_VERSION

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {v.shape}")
        object.__setattr__(self, "values", v)

    @cached_property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _split(self.spec, self.values)

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return replace(self, values=values)

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


def _split(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out, i = [], 0
    w = spec.layer_widths
    for a, b in zip(w[:-1], w[1:]):
        W = flat[i : i + a * b].reshape(a, b)
        i += a * b
        out.append((W, flat[i : i + b]))
        i += b
    return out


def init_params(spec: MlpSpec, rng: RngStream) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    flat = np.zeros(spec.n_params)
    for W, _ in _split(spec, flat):
        a, b = W.shape
        lim = np.sqrt(6.0 / (a + b))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    return ParamSet(spec, flat)


def zeros_params(spec: MlpSpec) -> ParamSet:
    return ParamSet(spec, np.zeros(spec.n_params))


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "silu":
        return x * expit(x)
    return np.tanh(x)


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "silu":
        s = expit(pre)
        return s * (1.0 + pre * (1.0 - s))
    return 1.0 - post * post


def forward(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Batched forward pass; ``x`` has shape ``(B, n_in)`` or ``(n_in,)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.spec.n_in:
        raise ValueError(f"input width {x.shape[-1]} != {params.spec.n_in}")
    act = params.spec.activation
    layers = params.layers
    h = x
    for W, b in layers[:-1]:
        h = _act(act, h @ W + b)
    W, b = layers[-1]
    return h @ W + b


def forward_cache(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass that also returns what :func:`backward` needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.n_in:
        raise ValueError(f"expected input of shape (B, {params.spec.n_in}), got {x.shape}")
    act = params.spec.activation
    cache = []
    h = x
    for W, b in params.layers[:-1]:
        pre = h @ W + b
        post = _act(act, pre)
        cache.append((h, pre, post))
        h = post
    W, b = params.layers[-1]
    cache.append((h, None, None))
    return h @ W + b, cache


def backward(params: ParamSet, cache: list, dy: np.ndarray, need_input_grad: bool = True):
    """Reverse pass for ``sum(dy * forward(x))``.

    Returns ``(grad_flat, grad_x)``; the parameter gradient is summed over the batch.
    """
    act = params.spec.activation
    grad = np.zeros(params.spec.n_params)
    glayers = _split(params.spec, grad)
    g = np.asarray(dy, dtype=np.float64)
    n = len(params.layers)
    for i in range(n - 1, -1, -1):
        W, _ = params.layers[i]
        h_in, _, _ = cache[i]
        gW, gb = glayers[i]
        gW[...] = h_in.T @ g
        gb[...] = g.sum(axis=0)
        if i == 0 and not need_input_grad:
            return grad, None
        g = g @ W.T
        if i > 0:
            _, pre, post = cache[i - 1]
            g = g * _act_grad(act, pre, post)
    return grad, g


def mlp_forward(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("mlp_forward takes a single vector; use forward() for batches")
    return forward(params, x[None])[0]


def mlp_grad(params: ParamSet, x, output_cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<mlp(x), cotangent>`` w.r.t. the parameters and ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ct = np.asarray(output_cotangent, dtype=np.float64)
    if x.shape != (params.spec.n_in,):
        raise ValueError(f"input shape {x.shape} != ({params.spec.n_in},)")
    if ct.shape != (params.spec.n_out,):
        raise ValueError(f"cotangent shape {ct.shape} != ({params.spec.n_out},)")
    _, cache = forward_cache(params, x[None])
    gp, gx = backward(params, cache, ct[None])
    return gp, gx[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-4, **kw) -> "AdamState":
        n = params.spec.n_params
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, **kw)


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(state: AdamState, params: ParamSet, grads: np.ndarray) -> tuple[AdamState, ParamSet]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ValueError(f"gradient shape {grads.shape} != {params.values.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("non-finite gradient entries")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    new_values = params.values - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(m=m, v=v, step=step, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)
    return new_state, params.with_values(new_values)


@dataclass(frozen=True)
class TimeEmbedding:
    dim: int = 32
    max_period: float = 1000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError("time embedding dim must be even")


def time_embed(t, emb: TimeEmbedding) -> np.ndarray:
    """Interleaved ``[sin, cos]`` features of ``t`` at frequencies ``max_period**(i/half)``.

    Scalar ``t`` gives shape ``(dim,)``; an array of times gives ``(n, dim)``.
    """
    t = np.asarray(t, dtype=np.float64)
    half = emb.dim // 2
    freqs = emb.max_period ** (np.arange(half) / half)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (emb.dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# --- checkpoint files -------------------------------------------------------
#
# layout: magic(8) | version u16 | descriptor length u32 | descriptor json |
#         n_params u64 | float64 LE values | sha256 of everything before (32)


def params_to_bytes(params: ParamSet) -> bytes:
    desc = json.dumps({"spec": params.spec.to_dict()}, sort_keys=True).encode()
    body = (
        _MAGIC
        + struct.pack("<HI", params.version, len(desc))
        + desc
        + struct.pack("<Q", params.spec.n_params)
        + params.values.astype("<f8").tobytes()
    )
    return body + hashlib.sha256(body).digest()


def params_from_bytes(raw: bytes) -> ParamSet:
    if len(raw) < len(_MAGIC) + 6 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointCorruptError("missing parameter-file header")
    off = len(_MAGIC)
    version, dlen = struct.unpack_from("<HI", raw, off)
    if version != PARAM_FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported parameter format version {version}")
    off += 6
    if len(raw) < off + dlen + 8:
        raise CheckpointCorruptError("truncated descriptor")
    try:
        desc = json.loads(raw[off : off + dlen])
        spec = MlpSpec.from_dict(desc["spec"])
    except (ValueError, KeyError) as exc:
        raise CheckpointCorruptError(f"bad descriptor: {exc}") from exc
    off += dlen
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    end = off + 8 * n
    if n != spec.n_params or len(raw) != end + 32:
        raise CheckpointCorruptError("truncated or oversized parameter block")
    if hashlib.sha256(raw[:end]).digest() != raw[end:]:
        raise CheckpointChecksumError("parameter checksum mismatch")
    values = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64)
    return ParamSet(spec, values, version)


def save_params(params: ParamSet, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())



# --- conditional networks ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalMlp:
    """MLP over ``[x, c * keep, null_flag, time_embed(t)]`` predicting a vector like ``x``.

    Used for noise predictors and velocity fields. ``t`` is a scalar time in
    ``[0, 1]`` (diffusion step over step count, or flow time).
    """

    params: ParamSet
    x_dim: int
    c_dim: int
    emb: TimeEmbedding = TimeEmbedding()

    @classmethod
    def create(cls, x_dim: int, c_dim: int, hidden: tuple[int, ...], rng: RngStream, emb: TimeEmbedding = TimeEmbedding()):
        spec = MlpSpec((x_dim + c_dim + 1 + emb.dim, *hidden, x_dim))
        return cls(init_params(spec, rng), x_dim, c_dim, emb)

    def with_params(self, params: ParamSet) -> "ConditionalMlp":
        return replace(self, params=params)

    def inputs(self, x, t, c, null) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n, self.c_dim))
        null = np.broadcast_to(np.asarray(null, dtype=np.float64).reshape(-1, 1), (n, 1))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        return np.concatenate([x, c * (1.0 - null), null, time_embed(t, self.emb)], axis=1)

    def __call__(self, x, t, c, null=False) -> np.ndarray:
        out = forward(self.params, self.inputs(x, t, c, null))
        return out[0] if np.ndim(x) == 1 else out

    def regression_grad(self, x, t, c, null, target) -> tuple[float, np.ndarray]:
        """Batch mean of ``||net - target||^2`` and its parameter gradient."""
        out, cache = forward_cache(self.params, self.inputs(x, t, c, null))
        r = out - target
        n = out.shape[0]
        g, _ = backward(self.params, cache, 2.0 * r / n, need_input_grad=False)
        return float(np.sum(r * r) / n), g
