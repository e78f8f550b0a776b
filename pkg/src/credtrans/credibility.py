"""Credibility gate, exponential decoder, and the CLS attention decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .layers import Dense, Module


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"credibility alpha must lie in [0, 1], got {alpha}")
    return alpha


def sample_gate(alpha: float, rng: np.random.Generator) -> int:
    """One Bernoulli(alpha) draw; shared by the whole minibatch of a step."""
    return int(rng.random() < check_alpha(alpha))


def credibility_gate(c_trans, c_prior, alpha: float, train: bool, rng=None, z: float | None = None):
    """``Z c_trans + (1 - Z) c_prior``; returns ``(c_cred, Z)``.

    Predict mode uses ``Z = 1`` unless ``z`` overrides it (``z = 0`` gives the
    prior predictor, ``0 < z < 1`` a deterministic mixture).
    """
    check_alpha(alpha)
    if z is None:
        z = sample_gate(alpha, rng) if train else 1
    if z == 1:
        return ad.as_tensor(c_trans), z
    if z == 0:
        return ad.as_tensor(c_prior), z
    return ad.add(ad.scale(c_trans, z), ad.scale(c_prior, 1.0 - z)), z


class Decoder(Module):
    """``exp(z2(z1(c)))`` with ``z1: w -> hidden`` (GELU) and linear ``z2: hidden -> 1``.

    ``z2`` starts at zero weights, so the untrained model predicts
    ``exp(output_bias)`` everywhere.
    """

    def __init__(self, width: int, rng: np.random.Generator, hidden: int = 16, output_bias: float = 0.0):
        self.hidden = Dense(width, hidden, "gelu", rng)
        self.out = Dense(hidden, 1, "linear", rng, init="zeros")
        self.out.bias.value[:] = output_bias

    def log_mu(self, c) -> ad.Tensor:
        return ad.reshape(self.out(self.hidden(c)), (-1,))

    def __call__(self, c) -> ad.Tensor:
        return ad.exp(self.log_mu(c))


def decode(c_cred, decoder: Decoder) -> ad.Tensor:
    return decoder(c_cred)


@dataclass
class CredibilityDecomposition:
    """``v_trans = P v_cls + (1 - P) v_covariate`` for the CLS attention row."""

    P: np.ndarray
    v_cls: np.ndarray
    v_covariate: np.ndarray
    v_trans: np.ndarray
    attention_row: np.ndarray

    def reconstruct(self) -> np.ndarray:
        P = self.P[..., None]
        return P * self.v_cls + (1.0 - P) * self.v_covariate


def decompose_cls_attention(A, V, atol: float = 1e-10) -> CredibilityDecomposition:
    """Split the CLS row of ``A V`` into its self part and covariate part.

    Works on single ``(T+1, T+1)`` / ``(T+1, w)`` matrices or batches of them.
    """
    A = np.asarray(A.value if isinstance(A, ad.Tensor) else A, dtype=np.float64)
    V = np.asarray(V.value if isinstance(V, ad.Tensor) else V, dtype=np.float64)
    row = A[..., -1, :]
    P = row[..., -1]
    if np.any(P >= 1.0 - 1e-12):
        raise ValueError("degenerate decomposition: all attention mass on the CLS token")
    weights = row[..., :-1] / (1.0 - P)[..., None]
    v_cov = np.einsum("...j,...jk->...k", weights, V[..., :-1, :])
    v_cls = V[..., -1, :]
    v_trans = np.einsum("...j,...jk->...k", row, V)
    out = CredibilityDecomposition(P, v_cls, v_cov, v_trans, row)
    err = np.max(np.abs(out.reconstruct() - v_trans)) if v_trans.size else 0.0
    if not err <= atol * max(1.0, float(np.max(np.abs(v_trans), initial=0.0))):
        raise ArithmeticError(f"credibility identity violated by {err:.3e}")
    return out
