"""Self-describing model files: versioned JSON with base64 little-endian f64 blobs."""

from __future__ import annotations

import base64
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import CredibilityTransformer, ModelConfig
from .tokenizer import Covariate, Schema, TokenizerState

FORMAT = "credtrans-model"
VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(blob: dict) -> np.ndarray:
    if blob.get("dtype") != "<f8":
        raise DataError(f"unsupported array dtype {blob.get('dtype')!r}")
    raw = base64.b64decode(blob["data"])
    shape = tuple(int(s) for s in blob["shape"])
    a = np.frombuffer(raw, dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise DataError(f"array blob holds {a.size} values, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape).astype(np.float64)


def schema_to_dict(schema: Schema) -> dict:
    return {"b": schema.b, "covariates": [asdict(c) for c in schema.covariates]}


def schema_from_dict(d: dict) -> Schema:
    return Schema([Covariate(**c) for c in d["covariates"]], b=int(d["b"]))


def model_to_dict(model: CredibilityTransformer, history=None, seed=None, optimizer=None) -> dict:
    state = model.tokenizer.state
    return {
        "format": FORMAT,
        "version": VERSION,
        "seed": seed,
        "config": model.config.to_dict(),
        "optimizer": optimizer,
        "schema": schema_to_dict(model.schema),
        "tokenizer": {
            "levels": state.levels,
            "scalers": {k: list(v) for k, v in state.scalers.items()},
            "ple": {k: list(v) for k, v in state.ple.items()},
        },
        "parameters": [{"name": name, **encode_array(p.value)} for name, p in model.named_parameters()],
        "history": list(history or []),
    }


def model_from_dict(d: dict) -> tuple[CredibilityTransformer, dict]:
    """Rebuild a model; also returns the stored metadata (seed, history, optimizer)."""
    if d.get("format") != FORMAT:
        raise DataError("not a credtrans model file")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported model file version {d.get('version')!r} (expected {VERSION})")
    try:
        config = ModelConfig.from_dict(d["config"])
        schema = schema_from_dict(d["schema"])
        tok = d["tokenizer"]
        state = TokenizerState(
            levels={k: list(v) for k, v in tok["levels"].items()},
            scalers={k: (float(a), float(b), bool(c)) for k, (a, b, c) in tok["scalers"].items()},
            ple={k: (float(a), float(b), int(c)) for k, (a, b, c) in tok["ple"].items()},
        )
        params = {p["name"]: decode_array(p) for p in d["parameters"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file: {exc}") from exc
    model = CredibilityTransformer.from_state(schema, config, state, params)
    meta = {k: d.get(k) for k in ("seed", "history", "optimizer")}
    return model, meta


def save_model(path, model: CredibilityTransformer, history=None, seed=None, optimizer=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model, history, seed, optimizer), indent=1))


def load_model(path) -> tuple[CredibilityTransformer, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(d)
