"""Poisson deviance objective, optimizers, early-stopped fitting and ensembles."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import Dataset
from .errors import ConfigError, DataError, NumericalError

OPTIMIZERS = ("nadam", "adam", "adamW")


# ---------------------------------------------------------------- deviance


def _check_batch(counts, exposure) -> tuple[np.ndarray, np.ndarray]:
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    exposure = np.asarray(exposure, dtype=np.float64).reshape(-1)
    if counts.shape != exposure.shape:
        raise DataError("counts and exposure differ in length")
    if counts.size == 0:
        raise DataError("empty batch")
    if not np.all(exposure > 0):
        raise DataError("exposure must be strictly positive")
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise DataError("counts must be nonnegative integers")
    return counts, exposure


def _xlogx_over(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``y log(y / m)`` with the ``y = 0`` limit taken as 0."""
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = y[pos] * np.log(y[pos] / m[pos])
    return out


def poisson_deviance(mu, counts, exposure) -> float:
    """Average Poisson deviance ``(2/n) sum[v mu - Y - Y log(v mu / Y)]``."""
    counts, exposure = _check_batch(counts, exposure)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if mu.shape != counts.shape:
        raise DataError("predictions and counts differ in length")
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise ValueError("frequencies must be finite and strictly positive")
    vmu = exposure * mu
    terms = vmu - counts + _xlogx_over(counts, vmu)
    return float(max(0.0, 2.0 * terms.mean()))


def unit_deviances(mu, counts, exposure) -> np.ndarray:
    counts, exposure = _check_batch(counts, exposure)
    vmu = exposure * np.asarray(mu, dtype=np.float64).reshape(-1)
    return 2.0 * (vmu - counts + _xlogx_over(counts, vmu))


def null_deviance(data: Dataset, frequency: float | None = None) -> float:
    """Deviance of the homogeneous predictor (default: the data's own mean)."""
    lam = data.empirical_frequency if frequency is None else frequency
    return poisson_deviance(np.full(data.n, lam), data.counts, data.exposure)


def deviance_loss(log_mu: ad.Tensor, counts, exposure) -> ad.Tensor:
    """Differentiable average deviance, parametrised by ``log mu``."""
    counts, exposure = _check_batch(counts, exposure)
    n = counts.size
    vmu = ad.mul(ad.exp(log_mu), exposure)
    varying = ad.sum(ad.sub(vmu, ad.mul(log_mu, counts)))
    pos = counts > 0
    const = -counts.sum() - np.sum(counts[pos] * np.log(exposure[pos] / counts[pos]))
    return ad.scale(ad.add(varying, const), 2.0 / n)


# -------------------------------------------------------------- optimizers


@dataclass
class OptimizerConfig:
    kind: str = "nadam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 0.0
    batch_size: int = 1024
    epochs: int = 100
    patience: int = 15

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.weight_decay > 0 and self.kind != "adamW":
            raise ConfigError("weight decay is only applied by adamW")
        if not self.lr > 0 or not self.eps > 0:
            raise ConfigError("lr and eps must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")

    @classmethod
    def nadam(cls, **kw) -> "OptimizerConfig":
        return cls(**kw)

    @classmethod
    def normformer(cls, **kw) -> "OptimizerConfig":
        return cls(**{"kind": "adam", "lr": 0.002, "beta2": 0.98, **kw})

    @classmethod
    def adamw(cls, **kw) -> "OptimizerConfig":
        return cls(**{"kind": "adamW", "weight_decay": 0.02, "beta2": 0.95, "batch_size": 4096, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
        if preset is None:
            return cls(**d)
        makers = {"nadam": cls.nadam, "normformer": cls.normformer, "adamw": cls.adamw}
        if preset not in makers:
            raise ConfigError(f"unknown optimizer preset {preset!r}")
        return makers[preset](**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    m_schedule: float = 1.0  # running product of Nadam momentum coefficients


def init_state(params: list[Parameter]) -> OptimizerState:
    return OptimizerState([np.zeros_like(p.value) for p in params],
                          [np.zeros_like(p.value) for p in params])


def optimizer_step(params: list[Parameter], grads: list[np.ndarray], state: OptimizerState,
                   config: OptimizerConfig) -> OptimizerState:
    """Apply one update in place.  Decay touches only parameters flagged ``decay``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    b1, b2, lr, eps = config.beta1, config.beta2, config.lr, config.eps
    state.t += 1
    t = state.t
    if config.kind == "nadam":
        u_t = b1 * (1.0 - 0.5 * 0.96 ** (0.004 * t))
        u_next = b1 * (1.0 - 0.5 * 0.96 ** (0.004 * (t + 1)))
        sched = state.m_schedule * u_t
        sched_next = sched * u_next
        state.m_schedule = sched
    else:
        step = lr * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if m.shape != p.value.shape or g.shape != p.value.shape:
            raise ValueError(f"shape mismatch in optimizer state for {p.name or i}")
        if config.kind == "adamW" and p.decay and config.weight_decay:
            p.value -= lr * config.weight_decay * p.value
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        if config.kind == "nadam":
            m_bar = (1.0 - u_t) * g / (1.0 - sched) + u_next * m / (1.0 - sched_next)
            v_hat = v / (1.0 - b2**t)
            p.value -= lr * m_bar / (np.sqrt(v_hat) + eps)
        else:
            p.value -= step * m / (np.sqrt(v) + eps)
    return state


class Optimizer:
    def __init__(self, params: list[Parameter], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.state = init_state(self.params)

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state, self.config)


def make_optimizer(model, config: OptimizerConfig) -> Optimizer:
    return Optimizer(model.parameters(), config)


# ----------------------------------------------------------------- fitting


def stratified_split(counts, seed, validation_fraction: float = 0.1,
                     exposure=None) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation indices, stratified by claim count and exposure.

    Rows are ordered by claim count (capped at 3), then exposure, and cut into
    consecutive blocks of about ``1 / validation_fraction`` rows; one row at a
    random position of each block goes to validation.  Claim occurrence, claim totals
    and exposure are thereby split almost exactly in proportion.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError("validation fraction must lie in (0, 1)")
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.size
    rng = np.random.default_rng(seed)
    secondary = np.zeros(n) if exposure is None else np.asarray(exposure, dtype=np.float64)
    order = np.lexsort((rng.random(n), secondary, np.minimum(counts, 3)))
    n_val = int(n * validation_fraction)
    edges = (np.arange(n_val + 1) * n) // max(n_val, 1)
    picks = edges[:-1] + np.floor(rng.random(n_val) * np.diff(edges)).astype(np.intp)
    mask = np.zeros(n, dtype=bool)
    mask[order[np.minimum(picks, n - 1)]] = True
    train, val = np.flatnonzero(~mask), np.flatnonzero(mask)
    if train.size == 0 or val.size == 0:
        raise DataError("learning data too small for a train/validation split")
    return train, val


@dataclass
class TrainRun:
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def val_losses(self) -> list[float]:
        return [h["val_loss"] for h in self.history]


def _eval_loss(model, batch, counts, exposure, epoch: int = 0) -> float:
    with np.errstate(over="ignore"):
        mu = model.predict(batch)
    try:
        return poisson_deviance(mu, counts, exposure)
    except ValueError as exc:
        raise NumericalError(f"non-finite predictions at epoch {epoch}") from exc


def fit(model, learning: Dataset, config: OptimizerConfig, seed: int, log=None) -> TrainRun:
    """Minibatch training with early stopping; the model ends at its best epoch.

    Epoch 0 records the losses of the untrained model.  The credibility gate
    and dropout are active only for the gradient steps; the recorded losses
    are predict-mode deviances.
    """
    if learning.n == 0:
        raise DataError("learning data is empty")
    split_seq, shuffle_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    tr, va = stratified_split(learning.counts, split_seq, exposure=learning.exposure)
    batch = model.encode(learning)
    tb, vb = batch.take(tr), batch.take(va)
    y_tr, v_tr = learning.counts[tr], learning.exposure[tr]
    y_va, v_va = learning.counts[va], learning.exposure[va]
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    opt = make_optimizer(model, config)

    run = TrainRun(seed=int(seed))
    val = _eval_loss(model, vb, y_va, v_va)
    run.history.append({"epoch": 0, "train_loss": _eval_loss(model, tb, y_tr, v_tr), "val_loss": val})
    run.best_val_loss, run.params = val, model.state_dict()
    wait = 0
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(len(tr))
        total = 0.0
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start:start + config.batch_size]
            with ad.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                out = model.forward(tb.take(idx), train=True, rng=noise_rng)
                loss = deviance_loss(out.log_mu, y_tr[idx], v_tr[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {start // config.batch_size}")
            model.zero_grad()
            ad.backward(tape, loss)
            opt.step()
            total += value * idx.size
        val = _eval_loss(model, vb, y_va, v_va, epoch)
        run.history.append({"epoch": epoch, "train_loss": total / perm.size, "val_loss": val})
        if log is not None:
            log(f"seed {seed} epoch {epoch}: train {total / perm.size:.5f} val {val:.5f}")
        if val < run.best_val_loss:
            run.best_val_loss, run.best_epoch, run.params = val, epoch, model.state_dict()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    model.load_state_dict(run.params)
    return run


# --------------------------------------------------------------- ensembles


def ensemble_predict(models, data) -> np.ndarray:
    """Arithmetic mean of the members' predicted frequencies."""
    models = list(models)
    if not models:
        raise ValueError("empty ensemble")
    return np.mean([m.predict(data) for m in models], axis=0)


@dataclass
class Ensemble:
    members: list
    runs: list[TrainRun] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty ensemble")

    def predict(self, data) -> np.ndarray:
        return ensemble_predict(self.members, data)

    def __len__(self) -> int:
        return len(self.members)


def evaluate(model, data: Dataset) -> tuple[float, np.ndarray]:
    """Predict-mode deviance and per-instance frequencies for a model or ensemble."""
    mu = model.predict(data)
    return poisson_deviance(mu, data.counts, data.exposure), mu


def _train_member(args):
    from .model import CredibilityTransformer

    schema, model_config, opt_config, learning, seed = args
    model = CredibilityTransformer.build(schema, model_config, learning, seed)
    run = fit(model, learning, opt_config, seed)
    return model, run


def train_ensemble(schema, model_config, opt_config: OptimizerConfig, learning: Dataset,
                   seeds, workers: int = 1) -> Ensemble:
    """One independently seeded member per seed; members may train in parallel processes."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(schema, model_config, opt_config, learning, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_member, jobs))
    else:
        results = [_train_member(job) for job in jobs]
    return Ensemble([m for m, _ in results], [r for _, r in results])
