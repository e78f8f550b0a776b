"""Claim-count datasets: CSV ingestion, learn/test splits and a synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

DEFAULT_COLUMNS = {"exposure": "Exposure", "count": "ClaimNb", "id": "IDpol"}


@dataclass
class Dataset:
    """Covariate columns plus exposure ``v_i`` and claim count ``Y_i`` per row.

    Categorical columns hold level labels (str), continuous columns float64.
    ``true_rate`` is only set for synthetic data.
    """

    columns: dict[str, np.ndarray]
    exposure: np.ndarray
    counts: np.ndarray
    ids: np.ndarray | None = None
    true_rate: np.ndarray | None = None

    def __post_init__(self):
        self.exposure = np.asarray(self.exposure, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        n = self.exposure.shape[0]
        if self.counts.shape[0] != n or any(len(c) != n for c in self.columns.values()):
            raise DataError("all columns must have the same length")
        if self.ids is None:
            self.ids = np.arange(n)
        if np.any(self.exposure <= 0):
            row = int(np.argmax(self.exposure <= 0)) + 1
            raise DataError(f"nonpositive exposure on row {row}")
        if np.any(self.counts < 0) or np.any(self.counts != np.round(self.counts)):
            raise DataError("claim counts must be nonnegative integers")

    @property
    def n(self) -> int:
        return int(self.exposure.shape[0])

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            columns={k: v[idx] for k, v in self.columns.items()},
            exposure=self.exposure[idx],
            counts=self.counts[idx],
            ids=self.ids[idx],
            true_rate=None if self.true_rate is None else self.true_rate[idx],
        )

    @property
    def total_exposure(self) -> float:
        return float(self.exposure.sum())

    @property
    def total_claims(self) -> float:
        return float(self.counts.sum())

    @property
    def empirical_frequency(self) -> float:
        """Portfolio frequency ``sum(Y) / sum(v)``."""
        return self.total_claims / self.total_exposure

    def summary(self) -> dict:
        return {
            "n": self.n,
            "exposure": self.total_exposure,
            "claims": self.total_claims,
            "frequency": self.empirical_frequency,
        }


def load_csv(
    path: str | Path,
    covariates: Sequence[tuple[str, str]],
    column_map: Mapping[str, str] | None = None,
) -> Dataset:
    """Read a cleaned claim-count CSV.

    ``covariates`` lists ``(name, kind)`` pairs; ``column_map`` maps the keys
    ``exposure``, ``count``, ``id`` and optionally covariate names to CSV
    headers.  Row numbers in error messages count data rows from 1.
    """
    cmap = {**DEFAULT_COLUMNS, **(column_map or {})}
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    frame.columns = [c.strip().strip('"') for c in frame.columns]

    def column(key: str) -> pd.Series:
        header = cmap.get(key, key)
        if header not in frame.columns:
            raise DataError(f"missing column {header!r} in {path}")
        return frame[header].str.strip().str.strip('"')

    def numeric(key: str) -> np.ndarray:
        raw = column(key)
        values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.argmax(bad)) + 1
            raise DataError(f"unparseable value {raw.iloc[row - 1]!r} in column {key!r} on row {row}")
        return values

    cols: dict[str, np.ndarray] = {}
    for name, kind in covariates:
        if kind == CATEGORICAL:
            values = column(name).to_numpy(dtype=object).astype(str)
            empty = values == ""
            if empty.any():
                row = int(np.argmax(empty)) + 1
                raise DataError(f"missing value in column {name!r} on row {row}")
            cols[name] = values
        elif kind == CONTINUOUS:
            cols[name] = numeric(name)
        else:
            raise DataError(f"unknown covariate kind {kind!r} for {name!r}")

    exposure = numeric("exposure")
    if np.any(exposure <= 0):
        row = int(np.argmax(exposure <= 0)) + 1
        raise DataError(f"nonpositive exposure on row {row}")
    counts = numeric("count")
    bad = (counts < 0) | (counts != np.round(counts))
    if bad.any():
        row = int(np.argmax(bad)) + 1
        raise DataError(f"claim count must be a nonnegative integer on row {row}")
    ids = None
    if cmap.get("id") in frame.columns:
        ids = frame[cmap["id"]].to_numpy(dtype=object).astype(str)
    return Dataset(columns=cols, exposure=exposure, counts=counts, ids=ids)


def read_split_index(path: str | Path) -> np.ndarray:
    """Test-set row ids, one 0-based integer per line."""
    ids = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise DataError(f"split file {path}: bad row id {line!r} on line {lineno}") from None
    return np.asarray(ids, dtype=np.int64)


def write_split_index(path: str | Path, ids) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in ids))


def apply_split(dataset: Dataset, test_ids) -> tuple[Dataset, Dataset]:
    """Partition into (learning, test); ``test_ids`` are 0-based row positions."""
    test_ids = np.asarray(test_ids, dtype=np.int64)
    if test_ids.size and (test_ids.min() < 0 or test_ids.max() >= dataset.n):
        bad = test_ids[(test_ids < 0) | (test_ids >= dataset.n)][0]
        raise DataError(f"split row id {bad} out of range for {dataset.n} rows")
    if np.unique(test_ids).size != test_ids.size:
        raise DataError("split index contains duplicate row ids")
    is_test = np.zeros(dataset.n, dtype=bool)
    is_test[test_ids] = True
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


def random_split_ids(n: int, test_fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n_test = int(round(n * test_fraction))
    return np.sort(rng.choice(n, size=n_test, replace=False))


# ------------------------------------------------------------------ synthetic


@dataclass
class CategoricalSpec:
    name: str
    probs: list[float]
    effects: list[float]

    @property
    def levels(self) -> list[str]:
        return [f"{self.name}{k}" for k in range(len(self.probs))]


@dataclass
class ContinuousSpec:
    """``dist`` is ``uniform`` (low, high) or ``normal`` (mean, sd)."""

    name: str
    dist: str
    params: tuple[float, float]
    coef: float


@dataclass
class InteractionSpec:
    """Adds ``coef * f(first) * f(second)`` to the log rate.

    ``f`` is the raw value for a continuous covariate and the indicator of
    ``level`` (an index) for a categorical one.
    """

    first: str
    second: str
    coef: float
    level: int = 0


@dataclass
class SyntheticSpec:
    n: int
    categorical: list[CategoricalSpec]
    continuous: list[ContinuousSpec]
    intercept: float
    interaction: InteractionSpec | None = None
    exposure: tuple[float, float] = (0.2, 1.0)
    rate_bounds: tuple[float, float] = (1e-4, 10.0)

    @property
    def covariates(self) -> list[tuple[str, str]]:
        return [(c.name, CATEGORICAL) for c in self.categorical] + [
            (c.name, CONTINUOUS) for c in self.continuous
        ]


def default_synthetic_spec(n: int = 20_000) -> SyntheticSpec:
    """Two categorical and three continuous covariates with one interaction."""
    return SyntheticSpec(
        n=n,
        categorical=[
            CategoricalSpec("area", [0.3, 0.3, 0.2, 0.2], [0.0, 0.3, -0.4, 0.6]),
            CategoricalSpec("brand", [0.25, 0.2, 0.2, 0.15, 0.1, 0.1], [0.0, 0.2, -0.2, 0.5, -0.5, 0.1]),
        ],
        continuous=[
            ContinuousSpec("age", "uniform", (-1.0, 1.0), -0.6),
            ContinuousSpec("power", "normal", (0.0, 1.0), 0.4),
            ContinuousSpec("noise", "uniform", (0.0, 1.0), 0.0),
        ],
        intercept=-1.5,
        interaction=InteractionSpec("age", "power", 0.5),
    )


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample covariates, exposures and ``Y ~ Poisson(v * lambda(x))``."""
    rng = np.random.default_rng(seed)
    n = spec.n
    cols: dict[str, np.ndarray] = {}
    features: dict[str, np.ndarray] = {}
    log_rate = np.full(n, float(spec.intercept))
    for c in spec.categorical:
        probs = np.asarray(c.probs, dtype=np.float64)
        codes = rng.choice(len(probs), size=n, p=probs / probs.sum())
        cols[c.name] = np.asarray(c.levels, dtype=object)[codes].astype(str)
        features[c.name] = codes
        log_rate += np.asarray(c.effects)[codes]
    for c in spec.continuous:
        a, b = c.params
        if c.dist == "uniform":
            x = rng.uniform(a, b, size=n)
        elif c.dist == "normal":
            x = rng.normal(a, b, size=n)
        else:
            raise ValueError(f"unknown distribution {c.dist!r}")
        cols[c.name] = x
        features[c.name] = x
        log_rate += c.coef * x
    if spec.interaction is not None:
        it = spec.interaction
        cat_names = {c.name for c in spec.categorical}

        def factor(name):
            if name in cat_names:
                return (features[name] == it.level).astype(np.float64)
            return features[name]

        log_rate += it.coef * factor(it.first) * factor(it.second)
    lo, hi = spec.rate_bounds
    rate = np.clip(np.exp(log_rate), lo, hi)
    exposure = rng.uniform(*spec.exposure, size=n)
    counts = rng.poisson(exposure * rate).astype(np.float64)
    return Dataset(columns=cols, exposure=exposure, counts=counts, true_rate=rate)
