"""Feature tokenizer: raw covariate rows to the augmented input tensor.

Every covariate becomes a ``b``-vector (entity embedding for categorical
covariates, a two-layer FNN or a differentiable piecewise linear encoding for
continuous ones), optionally scaled by a learned gate in (0, 1].  A learned
positional encoding is concatenated to each row and the CLS token appended,
giving a ``(T+1) x 2b`` matrix per instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import CATEGORICAL, CONTINUOUS, Dataset
from .errors import ConfigError, DataError
from .layers import Dense, Module

OTHER_LEVEL = "__other__"


@dataclass
class Covariate:
    name: str
    kind: str
    embedding: str | None = None  # None: follow the model config
    bins: int | None = None
    levels: list[str] | None = None
    other_level: bool = False

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ConfigError(f"covariate {self.name!r}: kind must be categorical or continuous")
        if self.embedding not in (None, "fnn", "ple"):
            raise ConfigError(f"covariate {self.name!r}: embedding must be fnn or ple")
        if self.bins is not None and self.bins < 1:
            raise ConfigError(f"covariate {self.name!r}: bins must be >= 1")


@dataclass
class Schema:
    covariates: list[Covariate]
    b: int = 5

    def __post_init__(self):
        if self.b < 1:
            raise ConfigError("embedding dimension b must be >= 1")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        if not self.covariates:
            raise ConfigError("schema needs at least one covariate")

    @property
    def categorical(self) -> list[Covariate]:
        return [c for c in self.covariates if c.kind == CATEGORICAL]

    @property
    def continuous(self) -> list[Covariate]:
        return [c for c in self.covariates if c.kind == CONTINUOUS]

    @property
    def T1(self) -> int:
        return len(self.categorical)

    @property
    def T2(self) -> int:
        return len(self.continuous)

    @property
    def T(self) -> int:
        return len(self.covariates)

    @property
    def n_levels(self) -> list[int]:
        out = []
        for c in self.categorical:
            if c.levels is None:
                raise ConfigError(f"levels of {c.name!r} are unknown before fitting")
            out.append(len(c.levels) + (1 if c.other_level else 0))
        return out

    def pairs(self) -> list[tuple[str, str]]:
        return [(c.name, c.kind) for c in self.covariates]


def count_input_parameters(schema: Schema) -> int:
    """Closed-form size of the raw input tensor's embeddings.

    ``b * sum(n_t) + T2 * (2b + b(b+1))`` when every continuous covariate uses
    the FNN embedding; PLE covariates instead contribute
    ``B_t`` log bin lengths plus ``B_t * b + b`` FNN weights.
    """
    b = schema.b
    total = b * sum(schema.n_levels)
    for c in schema.continuous:
        if c.embedding in (None, "fnn"):
            total += 2 * b + b * (b + 1)
        else:
            bins = c.bins or 16
            total += bins + bins * b + b
    return total


# ------------------------------------------------------------------ scalers


class RobustScaler:
    """``(x - median) / IQR`` with type-7 (linear interpolation) quantiles."""

    def __init__(self, median: float | None = None, iqr: float | None = None, fallback: bool = False):
        self.median = median
        self.iqr = iqr
        self.fallback = fallback

    def fit(self, values) -> "RobustScaler":
        values = np.asarray(values, dtype=np.float64)
        q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        iqr = q3 - q1
        self.median = float(med)
        self.fallback = not iqr > 0
        self.iqr = float(iqr) if iqr > 0 else 1.0
        return self

    @property
    def fitted(self) -> bool:
        return self.median is not None

    def transform(self, x):
        if not self.fitted:
            raise RuntimeError("RobustScaler is not fitted")
        return (np.asarray(x, dtype=np.float64) - self.median) / self.iqr

    __call__ = transform


class Vocabulary:
    def __init__(self, levels, other: bool = False):
        self.levels = [str(v) for v in levels]
        if len(set(self.levels)) != len(self.levels):
            raise DataError("duplicate levels in vocabulary")
        self.other = other
        self.index = {lvl: i for i, lvl in enumerate(self.levels)}

    def __len__(self) -> int:
        return len(self.levels) + (1 if self.other else 0)

    def encode(self, values, name: str = "") -> np.ndarray:
        values = np.asarray(values).astype(str)
        uniq, inverse = np.unique(values, return_inverse=True)
        lookup = np.empty(len(uniq), dtype=np.intp)
        for k, u in enumerate(uniq):
            code = self.index.get(u)
            if code is None:
                if not self.other:
                    raise DataError(f"unknown level {u!r} for covariate {name!r}")
                code = len(self.levels)
            lookup[k] = code
        return lookup[inverse.reshape(-1)]


# --------------------------------------------------------------- embeddings


class EntityEmbedding(Module):
    def __init__(self, n_levels: int, b: int, rng: np.random.Generator):
        self.table = Parameter(rng.uniform(-0.05, 0.05, size=(n_levels, b)), decay=True)

    def __call__(self, codes) -> ad.Tensor:
        return ad.take_rows(self.table, codes)


class FnnEmbedding(Module):
    """``tanh(W2 (W1 x + b1) + b2)``: linear ``1 -> b`` then tanh ``b -> b``."""

    def __init__(self, b: int, rng: np.random.Generator):
        self.layer1 = Dense(1, b, "linear", rng)
        self.layer2 = Dense(b, b, "tanh", rng)

    def __call__(self, x) -> ad.Tensor:
        x = ad.reshape(ad.as_tensor(x), (-1, 1))
        return self.layer2(self.layer1(x))


def ple_boundaries(log_deltas, start: float, eps: float) -> np.ndarray:
    """Bin boundaries over the surviving bins.

    Lengths ``exp(log_deltas)`` below ``eps`` collapse into the previous bin and
    drop out; the rest are accumulated from ``start``.
    """
    deltas = np.exp(np.asarray(log_deltas, dtype=np.float64))
    keep = deltas >= eps
    if not keep.any():
        raise ValueError("degenerate PLE: every bin collapsed")
    return start + np.concatenate([[0.0], np.cumsum(deltas[keep])])


def ple_encode(x, boundaries) -> np.ndarray:
    """Piecewise linear encoding of scalar or 1-D ``x`` (NumPy in, NumPy out)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = ad.ple_encode(x, np.asarray(boundaries, dtype=np.float64)).value
    return out


def quantile_bins(values, n_bins: int) -> tuple[float, np.ndarray]:
    """Start ``s`` and log bin lengths with boundaries at empirical quantiles.

    The start sits 1e-6 below the minimum.  Tied quantiles are merged, so a
    covariate with few distinct values gets fewer bins.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise DataError("degenerate PLE: covariate is constant on the training data")
    start = lo - 1e-6
    inner = np.quantile(values, np.arange(1, n_bins) / n_bins)
    edges = np.unique(np.concatenate([[start], inner, [hi]]))
    edges = edges[edges >= start]
    return start, np.log(np.diff(edges))


class PleEmbedding(Module):
    """Differentiable PLE with learned log bin lengths, then ``tanh`` FNN ``B -> b``."""

    def __init__(self, start: float, log_deltas, eps: float, b: int, rng: np.random.Generator):
        self.start = float(start)
        self.eps = float(eps)
        self.log_deltas = Parameter(np.asarray(log_deltas, dtype=np.float64))
        self.fnn = Dense(self.n_bins, b, "tanh", rng)

    @property
    def n_bins(self) -> int:
        return self.log_deltas.shape[0]

    def boundaries(self) -> tuple[ad.Tensor, np.ndarray]:
        """All ``B+1`` boundaries (collapsed bins have zero width) and the keep mask."""
        deltas = ad.exp(self.log_deltas)
        keep = deltas.value >= self.eps
        if not keep.any():
            raise ValueError("degenerate PLE: every bin collapsed")
        widths = ad.mul(deltas, keep.astype(np.float64))
        cum = ad.cumsum(widths)
        bounds = ad.add(ad.concat([np.zeros(1), cum], axis=0), self.start)
        return bounds, keep

    def encode(self, x) -> ad.Tensor:
        bounds, keep = self.boundaries()
        return ad.mul(ad.ple_encode(x, bounds), keep.astype(np.float64))

    def __call__(self, x) -> ad.Tensor:
        return self.fnn(self.encode(x))


class FeatureGate(Module):
    """Per-covariate multiplier ``sigmoid(g)``, ``g`` initialised at 3.

    ``g`` is clamped to +-700 first so the gate never underflows to 0.
    """

    def __init__(self, init: float = 3.0):
        self.logit = Parameter(np.array([init]))

    def gate(self) -> ad.Tensor:
        return ad.sigmoid(ad.clip(self.logit, -700.0, 700.0))

    def value(self) -> float:
        return float(self.gate().value[0])

    def __call__(self, emb) -> ad.Tensor:
        return ad.mul(emb, self.gate())


# ---------------------------------------------------------------- tokenizer


@dataclass
class TokenBatch:
    """Pre-processed model input: category codes and scaled continuous values."""

    codes: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return self.codes.shape[0] if self.codes.size else self.values.shape[0]

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.codes[idx], self.values[idx])


@dataclass
class TokenizerState:
    """Everything besides parameters needed to rebuild a fitted tokenizer."""

    levels: dict[str, list[str]] = field(default_factory=dict)
    scalers: dict[str, tuple[float, float, bool]] = field(default_factory=dict)
    ple: dict[str, tuple[float, float, int]] = field(default_factory=dict)


class FeatureTokenizer(Module):
    def __init__(
        self,
        schema: Schema,
        state: TokenizerState,
        rng: np.random.Generator,
        gates: bool = False,
        robust_scaling: bool = True,
        ple_log_deltas: dict[str, np.ndarray] | None = None,
    ):
        self.schema = schema
        self.state = state
        self.use_gates = gates
        self.robust_scaling = robust_scaling
        b = schema.b
        self.vocab = {}
        self.scalers = {}
        embedders = []
        for cov in schema.covariates:
            if cov.kind == CATEGORICAL:
                levels = state.levels[cov.name]
                self.vocab[cov.name] = Vocabulary(levels, other=cov.other_level)
                embedders.append(EntityEmbedding(len(self.vocab[cov.name]), b, rng))
            else:
                med, iqr, flag = state.scalers.get(cov.name, (0.0, 1.0, False))
                self.scalers[cov.name] = RobustScaler(med, iqr, flag)
                if cov.embedding in (None, "fnn"):
                    embedders.append(FnnEmbedding(b, rng))
                else:
                    start, eps, n_bins = state.ple[cov.name]
                    if ple_log_deltas and cov.name in ple_log_deltas:
                        log_d = ple_log_deltas[cov.name]
                    else:
                        log_d = np.zeros(n_bins)
                    embedders.append(PleEmbedding(start, log_d, eps, b, rng))
        self.embedders = embedders
        self.gates = [FeatureGate() for _ in schema.covariates] if gates else []
        self.positional = Parameter(rng.normal(0.0, 0.02, size=(schema.T, b)))
        self.cls = Parameter(rng.normal(0.0, 0.02, size=2 * b))

    @classmethod
    def fit(
        cls,
        schema: Schema,
        data: Dataset,
        rng: np.random.Generator,
        gates: bool = False,
        robust_scaling: bool = True,
    ) -> "FeatureTokenizer":
        """Fit vocabularies, scalers and quantile bins on training data, then build."""
        state = TokenizerState()
        log_deltas = {}
        for cov in schema.covariates:
            col = data.columns.get(cov.name)
            if col is None:
                raise DataError(f"dataset has no column {cov.name!r}")
            if cov.kind == CATEGORICAL:
                levels = cov.levels if cov.levels is not None else sorted(np.unique(col.astype(str)))
                state.levels[cov.name] = [str(v) for v in levels]
            else:
                if robust_scaling:
                    sc = RobustScaler().fit(col)
                    state.scalers[cov.name] = (sc.median, sc.iqr, sc.fallback)
                    scaled = sc.transform(col)
                else:
                    scaled = np.asarray(col, dtype=np.float64)
                if cov.embedding == "ple":
                    start, log_d = quantile_bins(scaled, cov.bins or 16)
                    eps = 1e-4 * float(scaled.max() - scaled.min())
                    state.ple[cov.name] = (start, eps, len(log_d))
                    log_deltas[cov.name] = log_d
        return cls(schema, state, rng, gates=gates, robust_scaling=robust_scaling,
                   ple_log_deltas=log_deltas)

    @property
    def b(self) -> int:
        return self.schema.b

    @property
    def token_names(self) -> list[str]:
        return [c.name for c in self.schema.covariates] + ["CLS"]

    def encode(self, data: Dataset) -> TokenBatch:
        codes, values = [], []
        for cov in self.schema.covariates:
            col = data.columns.get(cov.name)
            if col is None:
                raise DataError(f"dataset has no column {cov.name!r}")
            if cov.kind == CATEGORICAL:
                codes.append(self.vocab[cov.name].encode(col, cov.name))
            else:
                x = np.asarray(col, dtype=np.float64)
                values.append(self.scalers[cov.name](x) if self.robust_scaling else x)
        n = data.n
        return TokenBatch(
            np.stack(codes, axis=1) if codes else np.zeros((n, 0), dtype=np.intp),
            np.stack(values, axis=1) if values else np.zeros((n, 0)),
        )

    def embed(self, batch: TokenBatch) -> list[ad.Tensor]:
        """Per-covariate embeddings, each ``(N, b)``, gates applied."""
        out = []
        i_cat = i_cont = 0
        for t, (cov, emb) in enumerate(zip(self.schema.covariates, self.embedders)):
            if cov.kind == CATEGORICAL:
                e = emb(batch.codes[:, i_cat])
                i_cat += 1
            else:
                e = emb(batch.values[:, i_cont])
                i_cont += 1
            if self.use_gates:
                e = self.gates[t](e)
            out.append(e)
        return out

    def __call__(self, batch: TokenBatch) -> ad.Tensor:
        """Augmented input tensor ``(N, T+1, 2b)``."""
        n = len(batch)
        T, b = self.schema.T, self.b
        raw = ad.stack(self.embed(batch), axis=1)
        pos = ad.broadcast_to(self.positional, (n, T, b))
        x = ad.concat([raw, pos], axis=-1)
        cls_row = ad.broadcast_to(ad.reshape(self.cls, (1, 1, 2 * b)), (n, 1, 2 * b))
        return ad.concat([x, cls_row], axis=1)


def build_augmented_tensor(tokenizer: FeatureTokenizer, batch: TokenBatch) -> ad.Tensor:
    return tokenizer(batch)
