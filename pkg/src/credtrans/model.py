"""Credibility-weighted transformer model: tokenizer, transformer stack, gate and decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .credibility import Decoder, check_alpha, credibility_gate, sample_gate
from .data import Dataset
from .errors import ConfigError
from .layers import LayerNorm, Module
from .tokenizer import FeatureTokenizer, Schema, TokenBatch, TokenizerState
from .transformer import TransformerLayer, deep_forward


@dataclass
class ModelConfig:
    b: int = 5
    layers: int = 1
    heads: int = 1
    alpha: float = 0.9
    dropout: float = 0.01
    kqv_activation: str = "gelu"
    embedding: str = "fnn"
    bins: int = 16
    swiglu: bool = False
    head_scaling: bool = False
    gates: bool = False
    robust_scaling: bool = True
    ffn_hidden: int | None = None
    decoder_hidden: int = 16

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.b < 1 or self.layers < 1 or self.heads < 1:
            raise ConfigError("b, layers and heads must be >= 1")
        if (2 * self.b) % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide model width {2 * self.b}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.kqv_activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kqv_activation!r}")
        if self.embedding not in ("fnn", "ple"):
            raise ConfigError("embedding must be fnn or ple")

    @property
    def width(self) -> int:
        return 2 * self.b

    @property
    def hidden(self) -> int:
        """Feed-forward width: 32 at ``b = 5``, scaled proportionally otherwise."""
        return self.ffn_hidden if self.ffn_hidden is not None else max(1, round(32 * self.b / 5))

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def improved(cls, **overrides) -> "ModelConfig":
        settings = dict(
            b=40, layers=3, heads=2, alpha=0.98, embedding="ple", swiglu=True,
            head_scaling=True, gates=True,
        )
        settings.update(overrides)
        return cls(**settings)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    log_mu: ad.Tensor
    z: float
    attention: list = field(default_factory=list)
    c_trans: ad.Tensor | None = None
    c_prior: ad.Tensor | None = None

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu.value)


class CredibilityTransformer(Module):
    def __init__(
        self,
        tokenizer: FeatureTokenizer,
        config: ModelConfig,
        rng: np.random.Generator,
        output_bias: float = 0.0,
    ):
        self.config = config
        self.tokenizer = tokenizer
        w = config.width
        self.input_norm = LayerNorm(w)
        self.layers = [
            TransformerLayer(
                w, rng, heads=config.heads, head_scaling=config.head_scaling,
                activation=config.kqv_activation, hidden=config.hidden,
                dropout=config.dropout, use_swiglu=config.swiglu,
            )
            for _ in range(config.layers)
        ]
        self.decoder = Decoder(w, rng, hidden=config.decoder_hidden, output_bias=output_bias)

    @classmethod
    def build(cls, schema: Schema, config: ModelConfig, data: Dataset, seed) -> "CredibilityTransformer":
        """Fit the tokenizer on ``data`` and initialise at the homogeneous predictor."""
        rng = np.random.default_rng(seed)
        schema = apply_embedding_default(schema, config)
        tok = FeatureTokenizer.fit(schema, data, rng, gates=config.gates,
                                   robust_scaling=config.robust_scaling)
        return cls(tok, config, rng, output_bias=float(np.log(data.empirical_frequency)))

    @classmethod
    def from_state(cls, schema: Schema, config: ModelConfig, state: TokenizerState,
                   params: dict[str, np.ndarray]) -> "CredibilityTransformer":
        rng = np.random.default_rng(0)
        tok = FeatureTokenizer(schema, state, rng, gates=config.gates,
                               robust_scaling=config.robust_scaling)
        model = cls(tok, config, rng)
        model.load_state_dict(params)
        return model

    @property
    def predict_gate(self) -> int:
        return 1 if self.config.alpha > 0 else 0

    @property
    def schema(self) -> Schema:
        return self.tokenizer.schema

    def encode(self, data: Dataset) -> TokenBatch:
        return self.tokenizer.encode(data)

    def forward(
        self,
        batch: TokenBatch,
        train: bool = False,
        rng: np.random.Generator | None = None,
        z: float | None = None,
        keep_prior: bool = False,
    ) -> ForwardOutput:
        """One pass.  In train mode ``rng`` drives dropout and the gate draw.

        Predict mode uses ``Z = 1``, except for ``alpha = 0`` where the
        attention path never trains and the prior path is the predictor.
        """
        if z is None:
            z = sample_gate(self.config.alpha, rng) if train else self.predict_gate
        x = self.input_norm(self.tokenizer(batch))
        need_prior = keep_prior or z != 1
        c_trans, c_prior, attn, _ = deep_forward(x, self.layers, train, rng, need_prior=need_prior)
        c_cred, z = credibility_gate(c_trans, c_prior, self.config.alpha, train, rng, z=z)
        return ForwardOutput(self.decoder.log_mu(c_cred), z, attn, c_trans, c_prior)

    def predict(self, data: Dataset | TokenBatch, z: float | None = None, chunk: int = 16384) -> np.ndarray:
        """Predict-mode frequencies ``mu(x)`` (dropout off, gate from :attr:`predict_gate` unless overridden)."""
        batch = self.encode(data) if isinstance(data, Dataset) else data
        n = len(batch)
        out = np.empty(n)
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            out[idx] = self.forward(batch.take(idx), train=False, z=z).mu
        return out

    def parameter_table(self) -> dict[str, int]:
        """Parameter counts grouped like the architecture table."""
        tok = self.tokenizer
        table = {
            "feature_tokenizer": sum(e.num_parameters() for e in tok.embedders),
            "positional_encoding": tok.positional.value.size,
            "cls_token": tok.cls.value.size,
        }
        if tok.gates:
            table["feature_gates"] = sum(g.num_parameters() for g in tok.gates)
        table["input_normalization"] = self.input_norm.num_parameters()
        table["transformer"] = sum(layer.num_parameters() for layer in self.layers)
        table["decoder"] = self.decoder.num_parameters()
        table["total"] = self.num_parameters()
        return {k: int(v) for k, v in table.items()}


def apply_embedding_default(schema: Schema, config: ModelConfig) -> Schema:
    """Resolve per-covariate embedding/bins left unset, and take ``b`` from the config."""
    covs = [
        replace(c, embedding=c.embedding or config.embedding, bins=c.bins or config.bins)
        if c.kind == "continuous" else c
        for c in schema.covariates
    ]
    return Schema(covs, b=config.b)
