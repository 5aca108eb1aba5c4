"""Scaling, windowing, the four training objectives and the training loop."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd

from utils import tensor_core as tc
from utils.errors import DomainError, NumericalError, ValidationError
from utils.panel import SECONDS_PER_HOUR, DemandPanel
from utils.tensor_core import Tensor
from utils.tgcn_model import ForecastHeads, HeadKind, TgcnConfig, TgcnParams, init_params, tgcn_forward

N_FEATURES = 5
CLIP_EPS = 1e-6


class ModelKind(str, Enum):
    GAUSSIAN = "gaussian"
    TOBIT = "tobit"
    QR = "qr"
    CENSORED_QR = "censored_qr"

    @classmethod
    def parse(cls, name: "str | ModelKind") -> "ModelKind":
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"unknown model kind {name!r}; expected one of {[k.value for k in cls]}") from None

    @property
    def head(self) -> HeadKind:
        return HeadKind.GAUSSIAN if self in (ModelKind.GAUSSIAN, ModelKind.TOBIT) else HeadKind.QUANTILE

    @property
    def censoring_aware(self) -> bool:
        return self in (ModelKind.TOBIT, ModelKind.CENSORED_QR)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0003
    grad_clip_norm: float = 1.0
    batch_size: int = 256
    max_epochs: int = 1000
    early_stop_delta: float = 0.001
    early_stop_patience: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    window: int = 168
    quantiles: tuple[float, ...] = (0.05, 0.5, 0.95)
    seed: int | None = None
    log_every: int = 10

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.grad_clip_norm <= 0:
            raise ValidationError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.window < 1:
            raise ValidationError("batch_size, max_epochs and window must be >= 1")
        if self.early_stop_patience < 1 or self.early_stop_delta < 0:
            raise ValidationError("early_stop_patience must be >= 1 and early_stop_delta >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if not self.quantiles or any(not 0 < q < 1 for q in self.quantiles) or list(self.quantiles) != sorted(set(self.quantiles)):
            raise ValidationError(f"quantiles must be sorted, distinct and inside (0, 1), got {self.quantiles}")


# Scaling

@dataclass(frozen=True)
class NodeScaler:
    """Per-node affine map onto [0, 1]; node axis last."""
    node_min: np.ndarray
    node_max: np.ndarray

    @property
    def span(self) -> np.ndarray:
        span = self.node_max - self.node_min
        # constant nodes map to 0
        return np.where(span > 0, span, 1.0)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.node_min) / self.span

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * self.span + self.node_min

    def inverse_width(self, width: np.ndarray) -> np.ndarray:
        """Interval lengths back in kWh (no offset)."""
        return np.asarray(width, dtype=np.float64) * self.span


@dataclass(frozen=True)
class ScaledPanel:
    """Panel values in time-major layout (hours, nodes), scaled per node."""
    node_ids: tuple[str, ...]
    start: int
    scaler: NodeScaler
    observed: np.ndarray
    true: np.ndarray
    threshold: np.ndarray  # NaN where uncensored
    censored: np.ndarray

    @property
    def n_hours(self) -> int:
        return self.observed.shape[0]


def split_sizes(n_samples: int, split: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(math.floor(split[0] * n_samples + 1e-9))
    n_val = int(math.floor(split[1] * n_samples + 1e-9))
    return n_train, n_val, n_samples - n_train - n_val


def scale_panel(panel: DemandPanel, window: int, split: Sequence[float], scaler: NodeScaler | None = None) -> ScaledPanel:
    """
    Scale observed, true demand and thresholds with one per-node map.

    The map comes from the observed demand of the hours the training windows
    touch, unless a fitted scaler is passed in.
    """
    observed = panel.observed.T
    if scaler is None:
        n_samples = panel.n_hours - window
        if n_samples < 1:
            raise ValidationError(f"panel of {panel.n_hours} hours is too short for a {window}-hour window")
        n_train = max(1, split_sizes(n_samples, split)[0])
        fit_part = observed[: n_train + window]
        scaler = NodeScaler(fit_part.min(axis=0), fit_part.max(axis=0))
    elif len(scaler.node_min) != panel.n_nodes:
        raise ValidationError(f"scaler fitted on {len(scaler.node_min)} nodes, panel has {panel.n_nodes}")

    return ScaledPanel(
        node_ids=panel.node_ids,
        start=panel.start,
        scaler=scaler,
        observed=scaler.transform(observed),
        true=scaler.transform(panel.true.T),
        threshold=scaler.transform(panel.threshold.T),
        censored=panel.censored.T.copy(),
    )


# Windows

@dataclass(frozen=True)
class WindowSplit:
    inputs: np.ndarray     # (n, l, k, 5)
    target: np.ndarray     # (n, k) scaled observed demand at t + 1
    tau: np.ndarray        # (n, k) threshold where censored, NaN elsewhere
    censored: np.ndarray   # (n, k)
    true: np.ndarray       # (n, k) scaled latent demand, evaluation only
    hours: np.ndarray      # (n,) epoch seconds of the target hour

    def __len__(self) -> int:
        return len(self.target)

    def subset(self, index) -> "WindowSplit":
        return WindowSplit(*(a[index] for a in (self.inputs, self.target, self.tau, self.censored, self.true, self.hours)))


@dataclass(frozen=True)
class WindowDataset:
    train: WindowSplit
    val: WindowSplit
    test: WindowSplit
    node_ids: tuple[str, ...]
    scaler: NodeScaler
    window: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def calendar_features(hour_seconds: np.ndarray) -> np.ndarray:
    """sin/cos of hour-of-day and day-of-week, shape (n, 4)."""
    stamps = pd.to_datetime(np.asarray(hour_seconds, dtype=np.int64), unit="s", utc=True)
    hour = stamps.hour.to_numpy()
    dow = stamps.dayofweek.to_numpy()
    return np.column_stack(
        [
            np.sin(2 * np.pi * hour / 24),
            np.cos(2 * np.pi * hour / 24),
            np.sin(2 * np.pi * dow / 7),
            np.cos(2 * np.pi * dow / 7),
        ]
    )


def make_windows(scaled: ScaledPanel, window: int, split: Sequence[float] = (0.8, 0.1, 0.1)) -> WindowDataset:
    """Stride-1 windows of `window` hours predicting the next hour, split in time order."""
    T, k = scaled.observed.shape
    n = T - window
    if n < 1:
        raise ValidationError(f"panel of {T} hours is too short for a {window}-hour window")

    hour_seconds = scaled.start + SECONDS_PER_HOUR * np.arange(T)
    features = np.empty((T, k, N_FEATURES))
    features[..., 0] = scaled.observed
    features[..., 1:] = calendar_features(hour_seconds)[:, None, :]

    starts = np.arange(n)
    inputs = features[starts[:, None] + np.arange(window)[None, :]]
    targets = starts + window
    everything = WindowSplit(
        inputs=inputs,
        target=scaled.observed[targets],
        tau=scaled.threshold[targets],
        censored=scaled.censored[targets],
        true=scaled.true[targets],
        hours=hour_seconds[targets],
    )
    n_train, n_val, _ = split_sizes(n, split)
    return WindowDataset(
        train=everything.subset(slice(0, n_train)),
        val=everything.subset(slice(n_train, n_train + n_val)),
        test=everything.subset(slice(n_train + n_val, n)),
        node_ids=scaled.node_ids,
        scaler=scaled.scaler,
        window=window,
    )


# Losses

def _check_quantile(q: float) -> None:
    if not 0 < q < 1:
        raise DomainError(f"quantile must lie in (0, 1), got {q}")


def _pinball(e: Tensor, q: float) -> Tensor:
    # max{q e, (q - 1) e} == q e + relu(-e)
    return tc.mean(q * e + tc.relu(-e))


def tilted_loss(y, f, q: float) -> Tensor:
    _check_quantile(q)
    return _pinball(tc.sub(y, f), q)


def censored_tilted_loss(y, f, tau, censored, quantiles: Sequence[float]) -> Tensor:
    """
    Sum over quantiles of the right-censored pinball loss rho_q(y - min(tau*, f_q)).

    f has a trailing quantile axis. tau* is the threshold where censored and
    +inf elsewhere, so uncensored points reduce to the plain tilted loss.
    """
    y = np.asarray(y.values if isinstance(y, Tensor) else y, dtype=np.float64)
    censored = np.asarray(censored, dtype=bool)
    tau = np.asarray(tau, dtype=np.float64)
    if censored.any() and not np.allclose(y[censored], tau[censored], rtol=1e-12, atol=1e-12):
        raise ValidationError("censored targets must equal their threshold")
    f = tc.as_tensor(f)
    if f.shape[-1] != len(quantiles):
        raise DomainError(f"predictions carry {f.shape[-1]} quantiles, expected {len(quantiles)}")

    neg_tau = np.where(censored, -np.where(censored, tau, 0.0), -np.inf)
    total = None
    for j, q in enumerate(quantiles):
        _check_quantile(q)
        # y - min(tau*, f) == y + max(-f, -tau*); ties put the gradient on the threshold
        e = tc.add(y, tc.maximum(-f[..., j], neg_tau))
        term = _pinball(e, q)
        total = term if total is None else total + term
    return total


def quantile_loss(y, f, quantiles: Sequence[float]) -> Tensor:
    """Sum over quantiles of the plain tilted loss; f has a trailing quantile axis."""
    total = None
    for j, q in enumerate(quantiles):
        term = tilted_loss(y, tc.as_tensor(f)[..., j], q)
        total = term if total is None else total + term
    return total


def gaussian_nll(y, mu, sigma) -> Tensor:
    return -tc.mean(tc.gaussian_log_pdf(y, mu, sigma))


def tobit_loss(y, mu, sigma, censored, reduce: str = "sum") -> Tensor:
    """
    Negative Tobit log-likelihood for right censoring: density terms for observed
    points, log-survival terms for censored ones. `reduce="mean"` averages instead.
    """
    l = np.asarray(censored, dtype=np.float64)
    log_pdf = tc.gaussian_log_pdf(y, mu, sigma)
    log_surv = tc.log_survival(y, mu, sigma)
    terms = (1.0 - l) * log_pdf + l * log_surv
    if reduce == "sum":
        return -tc.sum(terms)
    if reduce == "mean":
        return -tc.mean(terms)
    raise DomainError(f"reduce must be 'sum' or 'mean', got {reduce!r}")


def model_loss(kind: ModelKind, heads: ForecastHeads, split: WindowSplit, quantiles: Sequence[float]) -> Tensor:
    """Training objective for a batch. Censoring-unaware models never see flags or thresholds."""
    y = split.target
    if kind is ModelKind.GAUSSIAN:
        return gaussian_nll(y, heads.mu, heads.sigma)
    if kind is ModelKind.TOBIT:
        return tobit_loss(y, heads.mu, heads.sigma, split.censored, reduce="mean")
    if kind is ModelKind.QR:
        return quantile_loss(y, heads.quantiles, quantiles)
    return censored_tilted_loss(y, heads.quantiles, split.tau, split.censored, quantiles)


# Optimisation

def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the global norm stays below max_norm; returns the clipped grads and the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + CLIP_EPS)
        return [g * scale for g in grads], norm
    return list(grads), norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.0003, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# Training loop

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: TgcnParams
    config: TgcnConfig
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_loss) for r in self.history],
            columns=["epoch", "train_loss", "val_loss"],
        )


def evaluate_loss(kind: ModelKind, A_hat, params: TgcnParams, config: TgcnConfig, split: WindowSplit, batch_size: int) -> float:
    """Sample-weighted mean objective over a split, without recording gradients."""
    if len(split) == 0:
        return float("nan")
    frozen = TgcnParams.from_arrays(params.to_arrays())
    for t in frozen.tensors():
        t.requires_grad = False
    total = 0.0
    for lo in range(0, len(split), batch_size):
        batch = split.subset(slice(lo, lo + batch_size))
        heads = tgcn_forward(A_hat, batch.inputs, frozen, config)
        total += model_loss(kind, heads, batch, config.quantiles).item() * len(batch)
    return total / len(split)


def train(
    model_kind: ModelKind | str,
    dataset: WindowDataset,
    config: TrainConfig,
    A_hat: np.ndarray,
    model_config: TgcnConfig | None = None,
    seed: int | None = None,
) -> TrainResult:
    """
    Mini-batch Adam with global-norm clipping and early stopping on validation loss.

    Returns the parameters of the best validation epoch.
    """
    kind = ModelKind.parse(model_kind)
    if seed is None:
        seed = config.seed or 0
    if len(dataset.train) == 0:
        raise ValidationError("training split is empty")
    A_hat = np.asarray(A_hat, dtype=np.float64)
    if A_hat.shape != (dataset.n_nodes, dataset.n_nodes):
        raise ValidationError(f"adjacency of shape {A_hat.shape} does not match {dataset.n_nodes} nodes")

    model_config = model_config or TgcnConfig()
    model_config = TgcnConfig(
        **(model_config.to_dict() | {"n_nodes": dataset.n_nodes, "head": kind.head.value, "quantiles": list(config.quantiles)})
    )
    params = init_params(model_config, seed)
    optimizer = Adam(params.tensors(), lr=config.lr)
    rng = np.random.default_rng(seed)
    val_split = dataset.val
    if len(val_split) == 0:
        logging.warning("Validation split is empty; early stopping watches the training loss")
        val_split = dataset.train

    result = TrainResult(params=params.copy(), config=model_config)
    best_val = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(dataset.train))
        running = 0.0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = dataset.train.subset(order[lo: lo + config.batch_size])
            optimizer.zero_grad()
            heads = tgcn_forward(A_hat, batch.inputs, params, model_config)
            loss = model_loss(kind, heads, batch, model_config.quantiles)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"{kind.value}: non-finite loss at epoch {epoch}, batch {b}")
            grads = tc.backward(loss, optimizer.params)
            grads, _ = clip_grad_norm(grads, config.grad_clip_norm)
            optimizer.step(grads)
            running += loss.item() * len(batch)

        train_loss = running / len(dataset.train)
        val_loss = evaluate_loss(kind, A_hat, params, model_config, val_split, config.batch_size)
        if not np.isfinite(val_loss):
            raise NumericalError(f"{kind.value}: non-finite validation loss at epoch {epoch}")
        result.history.append(EpochRecord(epoch, train_loss, val_loss))
        if epoch % config.log_every == 0 or epoch == 1:
            logging.info("%s epoch %s: train %.6f, val %.6f", kind.value, epoch, train_loss, val_loss)

        if val_loss < best_val - config.early_stop_delta:
            best_val = val_loss
            stale = 0
            result.params = params.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logging.info(
                    "%s: no validation gain of %s for %s epochs, stopping at epoch %s (best %s)",
                    kind.value, config.early_stop_delta, stale, epoch, result.best_epoch,
                )
                result.stopped_early = True
                break

    return result
