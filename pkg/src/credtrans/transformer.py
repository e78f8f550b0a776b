"""Attention and transformer layers, plus the covariate-free prior path.

Shapes: ``x`` is ``(N, T+1, w)`` with model width ``w = 2b``; the CLS token is
the last row.  All dense maps are time-distributed (shared across rows).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigError
from .layers import Dense, LayerNorm, Module, glorot_uniform


def attention(K, Q, V) -> tuple[ad.Tensor, ad.Tensor]:
    """``A = softmax(Q K^T / sqrt(w))``, ``H = A V``; returns ``(H, A)``."""
    K, Q, V = ad.as_tensor(K), ad.as_tensor(Q), ad.as_tensor(V)
    if K.shape != Q.shape or K.shape[:-1] != V.shape[:-1]:
        raise ValueError(f"attention shape mismatch K{K.shape} Q{Q.shape} V{V.shape}")
    logits = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(K.shape[-1]))
    A = ad.softmax_rows(logits)
    return ad.matmul(A, V), A


class SingleHeadAttention(Module):
    """Keys, queries and values ``phi(b + W x_t)`` of full width ``w``."""

    def __init__(self, width: int, activation: str, rng: np.random.Generator):
        self.width = width
        self.w_k = Dense(width, width, activation, rng)
        self.w_q = Dense(width, width, activation, rng)
        self.w_v = Dense(width, width, activation, rng)

    def kqv(self, x) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[-1]}")
        return self.w_k(x), self.w_q(x), self.w_v(x)

    def __call__(self, x, train: bool = False, rng=None):
        """Returns ``(H, [A], cls_value)`` where ``cls_value`` is the CLS row of ``V``."""
        K, Q, V = self.kqv(x)
        H, A = attention(K, Q, V)
        return H, [A], ad.select(V, -1, axis=-2)

    def value_only(self, c, train: bool = False, rng=None) -> ad.Tensor:
        """Attention output of a lone token (it can only attend to itself)."""
        return self.w_v(c)


class MultiHeadAttention(Module):
    """``Concat(a_1 H_1, ..., a_M H_M) W^O`` with per-head ``d = w / M``.

    With head scaling on, ``a_m = sigmoid(s_m)`` lies in (0, 1); in train mode
    each scaled head ``a_m H_m`` passes through inverted dropout.
    """

    def __init__(
        self,
        width: int,
        heads: int,
        activation: str,
        rng: np.random.Generator,
        head_scaling: bool = True,
        dropout: float = 0.0,
        scale_init: float = 5.0,
    ):
        if heads < 1 or width % heads:
            raise ConfigError(f"{heads} heads do not divide model width {width}")
        self.width = width
        self.heads = heads
        self.d = width // heads
        self.dropout = dropout
        self.w_k = [Dense(width, self.d, activation, rng) for _ in range(heads)]
        self.w_q = [Dense(width, self.d, activation, rng) for _ in range(heads)]
        self.w_v = [Dense(width, self.d, activation, rng) for _ in range(heads)]
        self.w_o = Parameter(glorot_uniform(rng, width, width), decay=True)
        self.head_logits = Parameter(np.full(heads, scale_init)) if head_scaling else None

    def head_scales(self) -> ad.Tensor | None:
        return None if self.head_logits is None else ad.sigmoid(self.head_logits)

    def _combine(self, heads, train, rng) -> ad.Tensor:
        scales = self.head_scales()
        parts = []
        for m, h in enumerate(heads):
            if scales is not None:
                h = ad.mul(h, ad.select(scales, m, axis=0))
                h = ad.dropout(h, self.dropout, train, rng)
            parts.append(h)
        return ad.matmul(ad.concat(parts, axis=-1), self.w_o)

    def __call__(self, x, train: bool = False, rng=None):
        """Returns ``(H_MHA, [A_1..A_M], cls_value)``."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[-1]}")
        heads, attn, cls_vals = [], [], []
        for m in range(self.heads):
            K, Q, V = self.w_k[m](x), self.w_q[m](x), self.w_v[m](x)
            H, A = attention(K, Q, V)
            heads.append(H)
            attn.append(A)
            cls_vals.append(ad.select(V, -1, axis=-2))
        return self._combine(heads, train, rng), attn, self._combine(cls_vals, train, rng)

    def value_only(self, c, train: bool = False, rng=None) -> ad.Tensor:
        return self._combine([self.w_v[m](c) for m in range(self.heads)], train, rng)


class SwiGLU(Module):
    """``linear(x) * silu(W x + b)``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.linear = Dense(n_in, n_out, "linear", rng)
        self.gate = Dense(n_in, n_out, "silu", rng)

    def __call__(self, x) -> ad.Tensor:
        return ad.mul(self.linear(x), self.gate(x))


def swiglu(x, block: SwiGLU) -> ad.Tensor:
    return block(x)


class FeedForwardChain(Module):
    """``norm2 . drop . fnn2 . drop . fnn1 . norm1``, shared by both CLS paths."""

    def __init__(
        self,
        width: int,
        hidden: int,
        rng: np.random.Generator,
        dropout: float = 0.0,
        use_swiglu: bool = False,
    ):
        self.dropout = dropout
        self.norm1 = LayerNorm(width)
        if use_swiglu:
            self.fnn1 = SwiGLU(width, hidden, rng)
            self.fnn2 = Dense(hidden, width, "linear", rng)
        else:
            self.fnn1 = Dense(width, hidden, "gelu", rng)
            self.fnn2 = Dense(hidden, width, "gelu", rng)
        self.norm2 = LayerNorm(width)

    def __call__(self, x, train: bool = False, rng=None) -> ad.Tensor:
        z = self.fnn1(self.norm1(x))
        z = ad.dropout(z, self.dropout, train, rng)
        z = ad.dropout(self.fnn2(z), self.dropout, train, rng)
        return self.norm2(z)


class TransformerLayer(Module):
    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        heads: int = 1,
        head_scaling: bool = False,
        activation: str = "gelu",
        hidden: int = 32,
        dropout: float = 0.0,
        use_swiglu: bool = False,
    ):
        if heads == 1 and not head_scaling:
            self.attn = SingleHeadAttention(width, activation, rng)
        else:
            self.attn = MultiHeadAttention(width, heads, activation, rng, head_scaling, dropout)
        self.ffn = FeedForwardChain(width, hidden, rng, dropout, use_swiglu)

    def __call__(self, x, train: bool = False, rng=None):
        """``z_trans = z_skip1 + chain(z_skip1)`` with ``z_skip1 = x + H(x)``.

        Returns ``(z_trans, attention matrices, cls_value)``.
        """
        H, A, cls_value = self.attn(x, train, rng)
        skip1 = ad.add(x, H)
        return ad.add(skip1, self.ffn(skip1, train, rng)), A, cls_value

    def prior_path(self, value, train: bool = False, rng=None) -> ad.Tensor:
        """The chain applied to a value vector without attention or residuals."""
        return self.ffn(value, train, rng)


def deep_forward(x_plus, layers, train: bool = False, rng=None, need_prior: bool = True):
    """Run the transformer stack and the parallel prior path.

    Layer 1 feeds the CLS row of its value matrix to the prior path; every
    later layer first re-projects the previous prior vector through its own
    value map.  Returns ``(c_trans, c_prior, attention per layer, z_final)``;
    ``c_prior`` is ``None`` when ``need_prior`` is false.
    """
    if not layers:
        raise ConfigError("need at least one transformer layer")
    z = x_plus
    prior = None
    records = []
    for i, layer in enumerate(layers):
        z, A, cls_value = layer(z, train, rng)
        records.append(A)
        if need_prior:
            value = cls_value if i == 0 else layer.attn.value_only(prior, train, rng)
            prior = layer.prior_path(value, train, rng)
    return ad.select(z, -1, axis=-2), prior, records, z
