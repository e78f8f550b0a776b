"""CLS attention extraction, aggregation and plot-ready exports.

Multi-head layers are reduced to the head average; deep models give one set
of records (and one summary) per layer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DataError

BIN_WIDTH = 0.005
N_BINS = int(round(1.0 / BIN_WIDTH))


@dataclass
class AttentionRecord:
    id: object
    attention: np.ndarray  # a_{T+1, j}, j = 1..T+1
    mu: float

    def __post_init__(self):
        if abs(float(np.sum(self.attention)) - 1.0) > 1e-9:
            raise ValueError("attention row does not sum to 1")

    @property
    def P(self) -> float:
        return float(self.attention[-1])


@dataclass
class AttentionRecords:
    """Column-wise store of CLS attention rows; iterating yields :class:`AttentionRecord`."""

    token_names: list[str]
    ids: np.ndarray
    attention: np.ndarray  # (N, T+1)
    mu: np.ndarray
    layer: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.attention = np.asarray(self.attention, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        n = self.attention.shape[0]
        if self.attention.ndim != 2 or self.attention.shape[1] != len(self.token_names):
            raise ValueError("attention must be (N, number of tokens)")
        if self.ids.shape != (n,) or self.mu.shape != (n,):
            raise ValueError("ids, attention and mu differ in length")
        if n and np.max(np.abs(self.attention.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("attention rows do not sum to 1")

    def __len__(self) -> int:
        return self.attention.shape[0]

    def __getitem__(self, i: int) -> AttentionRecord:
        return AttentionRecord(_plain(self.ids[i]), self.attention[i].copy(), float(self.mu[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def P(self) -> np.ndarray:
        return self.attention[:, -1]

    @classmethod
    def from_records(cls, records, token_names: list[str], layer: int = 0) -> "AttentionRecords":
        records = list(records)
        T1 = len(token_names)
        att = np.array([r.attention for r in records]).reshape(len(records), T1)
        return cls(token_names, np.array([r.id for r in records]), att,
                   np.array([r.mu for r in records]), layer)

    def concat(self, other: "AttentionRecords") -> "AttentionRecords":
        if other.token_names != self.token_names:
            raise ValueError("record sets have different tokens")
        return AttentionRecords(
            self.token_names, np.concatenate([self.ids, other.ids]),
            np.concatenate([self.attention, other.attention]),
            np.concatenate([self.mu, other.mu]), self.layer,
        )


def extract_layers(model, data: Dataset, chunk: int = 8192) -> list[AttentionRecords]:
    """Predict-mode CLS attention rows for every layer (heads averaged)."""
    batch = model.encode(data)
    n = len(batch)
    ids = data.ids if data.ids is not None else np.arange(n)
    rows = [[] for _ in model.layers]
    mus = []
    for start in range(0, n, chunk):
        part = batch.take(np.arange(start, min(n, start + chunk)))
        out = model.forward(part, train=False)
        mus.append(out.mu)
        for layer, heads in enumerate(out.attention):
            rows[layer].append(np.mean([A.value[:, -1, :] for A in heads], axis=0))
    mu = np.concatenate(mus) if mus else np.zeros(0)
    T1 = len(model.tokenizer.token_names)
    return [
        AttentionRecords(model.tokenizer.token_names, ids,
                         np.concatenate(r) if r else np.zeros((0, T1)), mu, layer)
        for layer, r in enumerate(rows)
    ]


def extract_attention(model, data: Dataset, layer: int = -1) -> AttentionRecords:
    """Records of one layer (the last by default)."""
    layers = extract_layers(model, data)
    try:
        records = layers[layer]
    except IndexError:
        raise ValueError(f"model has {len(layers)} layers, no layer {layer}") from None
    return records


@dataclass
class AttentionSummary:
    token_names: list[str]
    mean_attention: np.ndarray  # last entry is the mean credibility factor P
    count: int
    histogram: np.ndarray  # counts of P over bins of width BIN_WIDTH on [0, 1]
    scatter: dict[str, list[tuple]] = field(default_factory=dict)
    layer: int = 0

    @property
    def mean_P(self) -> float:
        return float(self.mean_attention[-1])

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, N_BINS + 1)

    def means(self) -> dict[str, float]:
        return {t: float(a) for t, a in zip(self.token_names, self.mean_attention)}


def p_histogram(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    idx = np.minimum(np.floor(P / BIN_WIDTH).astype(np.int64), N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS)


def summarize(records, data: Dataset | None = None, scatter=()) -> AttentionSummary:
    """Means over instances, the histogram of ``P`` and ``(value, attention)`` pairs.

    ``records`` must follow the row order of ``data`` when scatter pairs are
    requested.  Wrap plain record lists with :meth:`AttentionRecords.from_records`.
    """
    if not isinstance(records, AttentionRecords):
        raise TypeError("summarize expects AttentionRecords (see AttentionRecords.from_records)")
    if len(records) == 0:
        raise ValueError("cannot summarize an empty record set")
    pairs = {}
    covariates = records.token_names[:-1]
    for name in scatter:
        if name not in covariates:
            raise KeyError(f"unknown covariate {name!r} for scatter export")
        if data is None or data.n != len(records):
            raise DataError("scatter pairs need the dataset the records were extracted from")
        t = covariates.index(name)
        values = data.columns[name]
        pairs[name] = [(_plain(v), float(a)) for v, a in zip(values, records.attention[:, t])]
    return AttentionSummary(
        token_names=list(records.token_names),
        mean_attention=records.attention.mean(axis=0),
        count=len(records),
        histogram=p_histogram(records.P),
        scatter=pairs,
        layer=records.layer,
    )


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def merge(a: AttentionSummary, b: AttentionSummary) -> AttentionSummary:
    """Count-weighted combination; equals summarising the concatenated records."""
    if a.token_names != b.token_names:
        raise ValueError("summaries have different tokens")
    n = a.count + b.count
    scatter = {k: list(a.scatter.get(k, [])) + list(b.scatter.get(k, []))
               for k in dict.fromkeys([*a.scatter, *b.scatter])}
    return AttentionSummary(
        a.token_names,
        (a.count * a.mean_attention + b.count * b.mean_attention) / n,
        n,
        a.histogram + b.histogram,
        scatter,
        a.layer,
    )


# ------------------------------------------------------------------ export


def summary_to_dict(s: AttentionSummary) -> dict:
    edges = s.bin_edges
    return {
        "layer": s.layer,
        "count": s.count,
        "mean_attention": [{"token_name": t, "mean_attention": float(a)}
                           for t, a in zip(s.token_names, s.mean_attention)],
        "p_histogram": [{"bin_lo": float(edges[k]), "bin_hi": float(edges[k + 1]), "count": int(c)}
                        for k, c in enumerate(s.histogram)],
        "scatter": {k: [{"value": v, "attention": a} for v, a in pairs] for k, pairs in s.scatter.items()},
    }


def summary_from_dict(d: dict) -> AttentionSummary:
    means = d["mean_attention"]
    return AttentionSummary(
        token_names=[m["token_name"] for m in means],
        mean_attention=np.array([m["mean_attention"] for m in means], dtype=np.float64),
        count=int(d["count"]),
        histogram=np.array([h["count"] for h in d["p_histogram"]], dtype=np.int64),
        scatter={k: [(p["value"], p["attention"]) for p in v] for k, v in d["scatter"].items()},
        layer=int(d.get("layer", 0)),
    )


def export(summary: AttentionSummary, path, fmt: str = "json") -> list[Path]:
    """Write a summary.  ``json`` gives one file; ``csv`` a directory of tables.

    CSV layout: ``mean_attention.csv`` (token_name, mean_attention),
    ``p_histogram.csv`` (bin_lo, bin_hi, count) and one
    ``scatter_<covariate>.csv`` (value, attention) per scatter covariate.
    Floats are written with ``repr`` so a re-read is exact.
    """
    path = Path(path)
    d = summary_to_dict(summary)
    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(d, indent=1))
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    path.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, header, rows):
        p = path / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(p)

    table("mean_attention.csv", ["token_name", "mean_attention"],
          [(m["token_name"], repr(m["mean_attention"])) for m in d["mean_attention"]])
    table("p_histogram.csv", ["bin_lo", "bin_hi", "count"],
          [(repr(h["bin_lo"]), repr(h["bin_hi"]), h["count"]) for h in d["p_histogram"]])
    for name, pairs in d["scatter"].items():
        table(f"scatter_{name}.csv", ["value", "attention"],
              [(repr(p["value"]) if isinstance(p["value"], float) else p["value"], repr(p["attention"]))
               for p in pairs])
    meta = {"layer": summary.layer, "count": summary.count, "scatter": list(d["scatter"])}
    (path / "summary_meta.json").write_text(json.dumps(meta))
    written.append(path / "summary_meta.json")
    return written


def load_summary(path, fmt: str = "json") -> AttentionSummary:
    path = Path(path)
    if fmt == "json":
        return summary_from_dict(json.loads(path.read_text()))
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    meta = json.loads((path / "summary_meta.json").read_text())

    def rows(name):
        with open(path / name, newline="") as fh:
            return list(csv.DictReader(fh))

    means = rows("mean_attention.csv")
    hist = rows("p_histogram.csv")
    scatter = {}
    for name in meta["scatter"]:
        pairs = []
        for r in rows(f"scatter_{name}.csv"):
            try:
                value = float(r["value"])
            except ValueError:
                value = r["value"]
            pairs.append((value, float(r["attention"])))
        scatter[name] = pairs
    return AttentionSummary(
        token_names=[m["token_name"] for m in means],
        mean_attention=np.array([float(m["mean_attention"]) for m in means]),
        count=int(meta["count"]),
        histogram=np.array([int(h["count"]) for h in hist], dtype=np.int64),
        scatter=scatter,
        layer=int(meta["layer"]),
    )


def export_instances(records: AttentionRecords, data: Dataset, path) -> Path:
    """Per-instance table: id, covariates, mu, every CLS attention weight and P."""
    if data.n != len(records):
        raise DataError("records and dataset differ in length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    covs = records.token_names[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *covs, "mu", *[f"attn_{t}" for t in records.token_names], "P"])
        for i in range(len(records)):
            w.writerow([_plain(records.ids[i]), *[_plain(data.columns[c][i]) for c in covs],
                        repr(float(records.mu[i])), *map(repr, records.attention[i].tolist()),
                        repr(float(records.P[i]))])
    return path
