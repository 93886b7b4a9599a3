"""Building blocks of the capsule / recurrent / attention classifier.

All forward functions take batched input with a leading batch axis
(``[B, T, ...]``); passing a single unbatched sample (``[T, ...]``) is also
accepted and returns an unbatched result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ContractError, DimensionError, Tensor

LOG_EPS = 1e-9


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(values, dtype=None) -> Tensor:
    return tc.parameter(values, dtype=dtype)


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    """Add a batch axis if ``x`` is a single sample of rank ``ndim``."""
    if x.ndim == ndim:
        return tc.reshape(x, (1, *x.shape)), True
    if x.ndim != ndim + 1:
        raise DimensionError(f"expected rank {ndim} or {ndim + 1} input, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return tc.reshape(y, y.shape[1:]) if squeeze else y


def _add_bias(y: Tensor, bias: Tensor) -> Tensor:
    b = tc.reshape(bias, (1,) * (y.ndim - 1) + bias.shape)
    return y + tc.broadcast_to(b, y.shape)


# ---------------------------------------------------------------- conv block


@dataclass
class ConvBlockParams:
    kernel: Tensor  # [1, 1, bands, channels]
    bias: Tensor  # [channels]

    @classmethod
    def init(cls, rng, bands: int, channels: int, dtype=None) -> "ConvBlockParams":
        k = glorot_uniform(rng, (1, 1, bands, channels), bands, channels)
        return cls(_param(k, dtype), _param(np.zeros(channels), dtype))

    def tensors(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


def conv_block_forward(x: Tensor, p: ConvBlockParams) -> Tensor:
    """Per-timestep 1x1 convolution + bias + ReLU: ``[B,T,H,W,bands] -> [B,T,H,W,C]``."""
    x, squeeze = _batched(x, 4)
    if x.shape[-1] != p.kernel.shape[2]:
        raise DimensionError(f"conv block expects {p.kernel.shape[2]} bands, got input {x.shape}")
    y = tc.relu(_add_bias(tc.conv2d(x, p.kernel), p.bias))
    return _unbatch(y, squeeze)


# ----------------------------------------------------------- primary capsules


@dataclass
class PrimaryCapsParams:
    kernel: Tensor  # [kh, kw, C, num_primary * caps_dim]
    bias: Tensor
    num_primary: int
    caps_dim: int

    def __post_init__(self):
        if self.num_primary * self.caps_dim != self.kernel.shape[-1]:
            raise DimensionError(
                f"primary caps: {self.num_primary}x{self.caps_dim} != kernel output channels {self.kernel.shape[-1]}"
            )

    @classmethod
    def init(cls, rng, kh: int, kw: int, channels: int, num_primary: int, caps_dim: int, dtype=None):
        out = num_primary * caps_dim
        k = glorot_uniform(rng, (kh, kw, channels, out), kh * kw * channels, out)
        return cls(_param(k, dtype), _param(np.zeros(out), dtype), num_primary, caps_dim)

    def tensors(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


def primary_caps_forward(x: Tensor, p: PrimaryCapsParams) -> Tensor:
    """Valid conv collapsing the patch to 1x1, ReLU, then split into capsules.

    ``[B,T,H,W,C] -> [B,T,num_primary,caps_dim]``
    """
    x, squeeze = _batched(x, 4)
    y = tc.relu(_add_bias(tc.conv2d(x, p.kernel), p.bias))
    if y.shape[-3:-1] != (1, 1):
        raise DimensionError(f"primary caps kernel must cover the whole patch, conv output is {y.shape}")
    y = tc.reshape(y, (*y.shape[:-3], p.num_primary, p.caps_dim))
    return _unbatch(y, squeeze)


# ------------------------------------------------------------------- routing


def squash(v: Tensor) -> Tensor:
    """Scale each trailing-axis vector to norm |v|^2 / (1 + |v|^2).

    Written as ``v * |v| / (1 + |v|^2)`` so the zero vector maps to zero
    without a division by its norm.
    """
    n2 = tc.sum(v * v, axis=-1, keepdims=True)
    scale = tc.sqrt(n2) / (n2 + 1.0)
    return v * tc.broadcast_to(scale, v.shape)


@dataclass
class CapsuleLayerParams:
    transform: Tensor  # [num_primary, num_out_caps, d_out, d_in]
    routing_iters: int = 3

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ContractError("routing_iters must be >= 1")

    @property
    def num_out_caps(self) -> int:
        return self.transform.shape[1]

    @classmethod
    def init(cls, rng, num_primary, num_out_caps, d_in, d_out, routing_iters=3, dtype=None):
        w = glorot_uniform(rng, (num_primary, num_out_caps, d_out, d_in), d_in, d_out)
        return cls(_param(w, dtype), routing_iters)

    def tensors(self) -> dict[str, Tensor]:
        return {"transform": self.transform}


@dataclass
class RoutingTrace:
    couplings: list[np.ndarray]  # one [N, num_primary, num_out] array per iteration


def dynamic_routing(
    primary: Tensor,
    p: CapsuleLayerParams,
    couplings: np.ndarray | None = None,
    detach_logits: bool = True,
) -> tuple[Tensor, RoutingTrace]:
    """Routing-by-agreement from primary capsules ``[..., Np, d_in]`` to ``[..., No, d_out]``.

    With ``detach_logits`` the agreement updates run outside the tape, so the
    output's gradient flows through the predictions only, with the final
    coupling coefficients held constant. ``couplings`` (shape
    ``[N, Np, No]`` over the flattened leading axes) replaces the final
    coupling outright, which makes the forward value match what the tape
    differentiates.
    """
    Np, No, d_out, d_in = p.transform.shape
    if primary.shape[-2:] != (Np, d_in):
        raise DimensionError(f"routing expects [..., {Np}, {d_in}] capsules, got {primary.shape}")
    lead = primary.shape[:-2]
    n = int(np.prod(lead, dtype=np.int64))
    u = tc.reshape(primary, (n, Np, d_in))
    u_hat = tc.einsum("ijdk,nik->nijd", p.transform, u)

    u_hat_const = tc.detach(u_hat) if detach_logits else u_hat
    logits = tc.tensor(np.zeros((n, Np, No)), dtype=u_hat.dtype)
    trace = RoutingTrace([])
    v = None
    for it in range(p.routing_iters):
        last = it == p.routing_iters - 1
        c = tc.softmax(logits, axis=2)
        if last and couplings is not None:
            c = tc.tensor(couplings, dtype=u_hat.dtype)
        trace.couplings.append(np.array(c.data))
        preds = u_hat if last else u_hat_const
        if detach_logits:
            c = tc.detach(c)
        v = squash(tc.einsum("nij,nijd->njd", c, preds))
        if not last:
            agree = tc.einsum("nijd,njd->nij", u_hat_const, tc.detach(v) if detach_logits else v)
            logits = logits + agree
    return tc.reshape(v, (*lead, No, d_out)), trace


# ---------------------------------------------------------------------- LSTM


@dataclass
class LSTMParams:
    """One direction; gate blocks ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4U, input_dim]
    w_hh: Tensor  # [4U, U]
    bias: Tensor  # [4U]

    @property
    def units(self) -> int:
        return self.w_hh.shape[1]

    @classmethod
    def init(cls, rng, input_dim: int, units: int, dtype=None) -> "LSTMParams":
        w_ih = glorot_uniform(rng, (4 * units, input_dim), input_dim, 4 * units)
        w_hh = glorot_uniform(rng, (4 * units, units), units, 4 * units)
        b = np.zeros(4 * units)
        b[units:2 * units] = 1.0
        return cls(_param(w_ih, dtype), _param(w_hh, dtype), _param(b, dtype))

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}


def lstm_forward(x: Tensor, p: LSTMParams) -> Tensor:
    """Unidirectional many-to-many LSTM, zero initial state: ``[B,T,F] -> [B,T,U]``."""
    B, T, F = x.shape
    U = p.units
    if p.w_ih.shape[1] != F:
        raise DimensionError(f"LSTM expects {p.w_ih.shape[1]} input features, got {x.shape}")
    xw = tc.matmul(tc.reshape(x, (B * T, F)), tc.transpose(p.w_ih))
    xw = tc.reshape(_add_bias(xw, p.bias), (B, T, 4 * U))
    w_hh_t = tc.transpose(p.w_hh)
    h = tc.tensor(np.zeros((B, U)), dtype=x.dtype)
    c = tc.tensor(np.zeros((B, U)), dtype=x.dtype)
    outs = []
    for t in range(T):
        z = xw[:, t, :]
        if t > 0:
            z = z + tc.matmul(h, w_hh_t)
        i = tc.sigmoid(z[:, 0:U])
        f = tc.sigmoid(z[:, U:2 * U])
        g = tc.tanh(z[:, 2 * U:3 * U])
        o = tc.sigmoid(z[:, 3 * U:4 * U])
        c = i * g if t == 0 else f * c + i * g
        h = o * tc.tanh(c)
        outs.append(h)
    return tc.stack(outs, axis=1)


def bilstm_forward(x: Tensor, p_fwd: LSTMParams, p_bwd: LSTMParams) -> Tensor:
    """``[B,T,F] -> [B,T,2U]``; row t is ``[h_fwd(t); h_bwd(t)]``.

    The backward direction reads the reversed sequence and its outputs are
    flipped back so both halves of row t refer to input timestep t.
    """
    x, squeeze = _batched(x, 2)
    if x.shape[1] < 1:
        raise ContractError("bilstm_forward: need T >= 1")
    fwd = lstm_forward(x, p_fwd)
    bwd = tc.flip(lstm_forward(tc.flip(x, 1), p_bwd), 1)
    return _unbatch(tc.concat([fwd, bwd], axis=-1), squeeze)


# ----------------------------------------------------------------- attention


@dataclass
class AttentionParams:
    """Independent (projection, bias, context) triple per output timestep."""

    w: Tensor  # [T, D, D]
    b: Tensor  # [T, D]
    u: Tensor  # [T, D]

    @classmethod
    def init(cls, rng, T: int, D: int, dtype=None) -> "AttentionParams":
        w = glorot_uniform(rng, (T, D, D), D, D)
        u = glorot_uniform(rng, (T, D), D, 1)
        return cls(_param(w, dtype), _param(np.zeros((T, D)), dtype), _param(u, dtype))

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b, "u": self.u}


def attention_forward(h: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Time-distributed attention ``[B,T,D] -> ([B,T,D], alpha [B,T,T])``.

    For output step i, every input step t is scored with step i's own
    parameters: ``u_t = tanh(W[i] h_t + b[i])``, ``alpha_t = softmax_t(u_t . ctx[i])``,
    and row i of the output is ``sum_t alpha_t h_t``.
    """
    h, squeeze = _batched(h, 2)
    B, T, D = h.shape
    if p.w.shape != (T, D, D):
        raise DimensionError(f"attention params {p.w.shape} do not match hidden states {h.shape}")
    proj = tc.einsum("ide,nte->nitd", p.w, h)
    bias = tc.broadcast_to(tc.reshape(p.b, (1, T, 1, D)), (B, T, T, D))
    u = tc.tanh(proj + bias)
    scores = tc.einsum("nitd,id->nit", u, p.u)
    alpha = tc.softmax(scores, axis=2)
    s = tc.einsum("nit,ntd->nid", alpha, h)
    return _unbatch(s, squeeze), _unbatch(alpha, squeeze)


# --------------------------------------------------------------------- dense


@dataclass
class DenseParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, dtype=None) -> "DenseParams":
        w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        return cls(_param(w, dtype), _param(np.zeros(n_out), dtype))

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def dense_forward(x: Tensor, p: DenseParams, activation: str = "linear") -> Tensor:
    """Affine map over the last axis followed by ``activation``.

    ``activation`` is one of linear, relu, tanh, sigmoid, softmax.
    """
    n_out, n_in = p.weight.shape
    if x.shape[-1] != n_in:
        raise DimensionError(f"dense expects {n_in} input features, got shape {x.shape}")
    lead = x.shape[:-1]
    y = tc.matmul(tc.reshape(x, (-1, n_in)), tc.transpose(p.weight))
    y = tc.reshape(_add_bias(y, p.bias), (*lead, n_out))
    if activation == "softmax":
        return tc.softmax(y, axis=-1)
    return tc.elementwise(y, activation)


# ---------------------------------------------------------------------- loss


def cross_entropy_loss(probs: Tensor, label, class_weight=1.0) -> Tensor:
    """Weighted cross-entropy with one label supervising every timestep.

    For a single sample ``probs`` is ``[T, K]`` and the loss is
    ``-(w / T) * sum_t log(probs[t, label] + 1e-9)``. With a batch
    (``[B, T, K]``, ``label`` and ``class_weight`` of length B) the per-sample
    losses are averaged over the batch.
    """
    if probs.ndim == 2:
        probs = tc.reshape(probs, (1, *probs.shape))
        label = [label]
        class_weight = [class_weight]
    B, T, K = probs.shape
    labels = np.asarray(label, dtype=np.int64).reshape(-1)
    weights = np.broadcast_to(np.asarray(class_weight, dtype=np.float64), (B,))
    if labels.shape != (B,):
        raise ContractError(f"expected {B} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"label out of range [0, {K}): {labels.tolist()}")
    picked = probs[np.arange(B)[:, None], np.arange(T)[None, :], labels[:, None]]
    coef = tc.tensor(np.repeat(weights[:, None], T, axis=1) / (T * B), dtype=probs.dtype)
    return -tc.sum(tc.log(picked + LOG_EPS) * coef)
