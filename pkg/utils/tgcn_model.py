"""
T-GCN forecaster: a two-layer graph convolution per hour feeding one LSTM over the
whole graph, with a linear head per node.

The head is either Gaussian (mean and a softplus scale) or a set of quantiles.
"""

import dataclasses
import json
import zipfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from utils import tensor_core as tc
from utils.errors import DomainError, NumericalError, ValidationError
from utils.tensor_core import Tensor

CHECKPOINT_VERSION = 1
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
SIGMA_FLOOR = 1e-6
GATES = ("i", "f", "o", "c")


class HeadKind(str, Enum):
    GAUSSIAN = "gaussian"
    QUANTILE = "quantile"


@dataclass(frozen=True)
class TgcnConfig:
    n_nodes: int = 1
    n_features: int = 5
    channels: tuple[int, int] = (16, 8)
    hidden: int = 32
    head: HeadKind = HeadKind.GAUSSIAN
    quantiles: tuple[float, ...] = (0.05, 0.5, 0.95)
    outer_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "head", HeadKind(self.head))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.n_nodes < 1 or self.n_features < 1 or self.hidden < 1:
            raise ValidationError("n_nodes, n_features and hidden must be >= 1")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValidationError(f"channels must be two positive sizes, got {self.channels}")
        if self.outer_activation not in ("identity", "relu"):
            raise ValidationError(f"outer_activation must be identity or relu, got {self.outer_activation!r}")
        if not self.quantiles or any(not 0 < q < 1 for q in self.quantiles):
            raise ValidationError(f"quantiles must lie strictly inside (0, 1), got {self.quantiles}")
        if list(self.quantiles) != sorted(set(self.quantiles)):
            raise ValidationError(f"quantiles must be sorted and distinct, got {self.quantiles}")

    @property
    def head_size(self) -> int:
        return 2 if self.head is HeadKind.GAUSSIAN else len(self.quantiles)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head"] = self.head.value
        d["channels"] = list(self.channels)
        d["quantiles"] = list(self.quantiles)
        return d


@dataclass
class TgcnParams:
    """All trainable tensors. LSTM weights are kept per gate, as in the cell equations."""
    W0: Tensor
    W1: Tensor
    W: dict[str, Tensor]  # input -> gate, (k * c2, H)
    U: dict[str, Tensor]  # hidden -> gate, (H, H)
    b: dict[str, Tensor]  # (H,)
    head_W: Tensor        # (k, H, head_size)
    head_b: Tensor        # (k, head_size)

    def named(self) -> list[tuple[str, Tensor]]:
        items = [("W0", self.W0), ("W1", self.W1)]
        for gate in GATES:
            items += [(f"W_{gate}", self.W[gate]), (f"U_{gate}", self.U[gate]), (f"b_{gate}", self.b[gate])]
        items += [("head_W", self.head_W), ("head_b", self.head_b)]
        return items

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TgcnParams":
        try:
            return cls(
                W0=tc.parameter(arrays["W0"]),
                W1=tc.parameter(arrays["W1"]),
                W={g: tc.parameter(arrays[f"W_{g}"]) for g in GATES},
                U={g: tc.parameter(arrays[f"U_{g}"]) for g in GATES},
                b={g: tc.parameter(arrays[f"b_{g}"]) for g in GATES},
                head_W=tc.parameter(arrays["head_W"]),
                head_b=tc.parameter(arrays["head_b"]),
            )
        except KeyError as e:
            raise ValidationError(f"parameter set is missing {e.args[0]}") from e

    def copy(self) -> "TgcnParams":
        return TgcnParams.from_arrays(self.to_arrays())

    def check_shapes(self, config: TgcnConfig) -> None:
        c1, c2 = config.channels
        k, H = config.n_nodes, config.hidden
        expected = {
            "W0": (config.n_features, c1),
            "W1": (c1, c2),
            "head_W": (k, H, config.head_size),
            "head_b": (k, config.head_size),
        }
        for gate in GATES:
            expected |= {f"W_{gate}": (k * c2, H), f"U_{gate}": (H, H), f"b_{gate}": (H,)}
        for name, t in self.named():
            if t.shape != expected[name]:
                raise DomainError(f"parameter {name} has shape {t.shape}, expected {expected[name]}")


def init_params(config: TgcnConfig, seed: int = 0) -> TgcnParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    c1, c2 = config.channels
    k, H = config.n_nodes, config.hidden

    def uniform(fan_in, shape):
        r = 1.0 / np.sqrt(fan_in)
        return tc.parameter(rng.uniform(-r, r, size=shape))

    return TgcnParams(
        W0=uniform(config.n_features, (config.n_features, c1)),
        W1=uniform(c1, (c1, c2)),
        W={g: uniform(k * c2, (k * c2, H)) for g in GATES},
        U={g: uniform(H, (H, H)) for g in GATES},
        b={g: tc.parameter(np.zeros(H)) for g in GATES},
        head_W=uniform(H, (k, H, config.head_size)),
        head_b=tc.parameter(np.zeros((k, config.head_size))),
    )


@dataclass(frozen=True)
class ForecastHeads:
    kind: HeadKind
    mu: Tensor | None = None         # (..., k)
    sigma: Tensor | None = None      # (..., k), > 0
    quantiles: Tensor | None = None  # (..., k, |Q|)


def _check_finite(t: Tensor, layer: str, step: int | None = None) -> None:
    if not np.all(np.isfinite(t.values)):
        where = layer if step is None else f"{layer} at step {step}"
        raise NumericalError(f"non-finite values in {where}")


def gcn_forward(A_hat, X, W0, W1, outer_activation: str = "identity") -> Tensor:
    """act(A_hat relu(A_hat X W0) W1) for X of shape (..., k, F)."""
    A_hat = tc.as_tensor(A_hat)
    X = tc.as_tensor(X)
    k = A_hat.shape[0]
    if A_hat.ndim != 2 or A_hat.shape[1] != k:
        raise DomainError(f"adjacency must be square, got {A_hat.shape}")
    if X.ndim < 2 or X.shape[-2] != k:
        raise DomainError(f"features of shape {X.shape} do not match a {k}-node adjacency")
    hidden = tc.relu(A_hat @ X @ W0)
    out = A_hat @ hidden @ W1
    return tc.relu(out) if outer_activation == "relu" else out


def lstm_step(g_t, h_prev, c_prev, params: TgcnParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on the flattened graph embedding g_t of shape (..., k * c2)."""
    g_t = tc.as_tensor(g_t)
    if g_t.shape[-1] != params.W["i"].shape[0]:
        raise DomainError(f"LSTM input of width {g_t.shape[-1]} does not match W of shape {params.W['i'].shape}")

    def gate(name):
        return g_t @ params.W[name] + h_prev @ params.U[name] + params.b[name]

    i_t = tc.sigmoid(gate("i"))
    f_t = tc.sigmoid(gate("f"))
    o_t = tc.sigmoid(gate("o"))
    c_tilde = tc.tanh(gate("c"))
    c_t = f_t * c_prev + i_t * c_tilde
    h_t = o_t * tc.tanh(c_t)
    return h_t, c_t


def tgcn_forward(A_hat, window, params: TgcnParams, config: TgcnConfig) -> ForecastHeads:
    """
    One-step-ahead forecast from a window of shape (l, k, F) or (batch, l, k, F).

    Outputs carry the batch axis only if the window had one.
    """
    window = np.asarray(window, dtype=np.float64)
    single = window.ndim == 3
    if single:
        window = window[None]
    if window.ndim != 4:
        raise DomainError(f"window must have shape (l, k, F) or (batch, l, k, F), got {window.shape}")
    batch, length, k, _ = window.shape
    if length < 1:
        raise DomainError("window length must be >= 1")
    A_hat = np.asarray(A_hat, dtype=np.float64)
    c2 = params.W1.shape[1]
    H = params.U["i"].shape[0]

    h = tc.Tensor(np.zeros((batch, H)))
    c = tc.Tensor(np.zeros((batch, H)))
    for t in range(length):
        g = gcn_forward(A_hat, window[:, t], params.W0, params.W1, config.outer_activation)
        _check_finite(g, "graph convolution", t)
        h, c = lstm_step(tc.reshape(g, (batch, k * c2)), h, c, params)
        _check_finite(h, "LSTM", t)

    # (batch, 1, 1, H) @ (k, H, out) -> (batch, k, 1, out)
    out = tc.reshape(tc.reshape(h, (batch, 1, 1, H)) @ params.head_W, (batch, k, config.head_size))
    out = out + params.head_b
    _check_finite(out, "output head")
    if single:
        out = out[0]

    if config.head is HeadKind.GAUSSIAN:
        mu = out[..., 0]
        sigma = tc.softplus(out[..., 1]) + SIGMA_FLOOR
        return ForecastHeads(HeadKind.GAUSSIAN, mu=mu, sigma=sigma)
    return ForecastHeads(HeadKind.QUANTILE, quantiles=out)


def permute_nodes(params: TgcnParams, perm, config: TgcnConfig) -> TgcnParams:
    """
    Relabel the nodes of a model: node perm[j] of the old model becomes node j.

    Only the node-indexed blocks move: LSTM input rows and the per-node heads.
    """
    perm = np.asarray(perm)
    k, c2 = config.n_nodes, config.channels[1]
    if sorted(perm.tolist()) != list(range(k)):
        raise DomainError(f"{perm.tolist()} is not a permutation of {k} nodes")
    rows = (perm[:, None] * c2 + np.arange(c2)[None, :]).reshape(-1)

    arrays = params.to_arrays()
    for gate in GATES:
        arrays[f"W_{gate}"] = arrays[f"W_{gate}"][rows]
    arrays["head_W"] = arrays["head_W"][perm]
    arrays["head_b"] = arrays["head_b"][perm]
    return TgcnParams.from_arrays(arrays)


@dataclass
class Checkpoint:
    params: TgcnParams
    config: TgcnConfig
    model_kind: str
    node_ids: tuple[str, ...]
    node_min: np.ndarray
    node_max: np.ndarray
    adjacency: np.ndarray
    meta: dict = dataclasses.field(default_factory=dict)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Named arrays in one .npz, with the config and metadata as a JSON string."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": checkpoint.config.to_dict(),
        "model_kind": checkpoint.model_kind,
        "node_ids": list(checkpoint.node_ids),
        "meta": checkpoint.meta,
    }
    arrays = {
        "header": np.array(json.dumps(header, sort_keys=True)),
        "node_min": np.asarray(checkpoint.node_min, dtype=np.float64),
        "node_max": np.asarray(checkpoint.node_max, dtype=np.float64),
        "adjacency": np.asarray(checkpoint.adjacency, dtype=np.float64),
    }
    arrays |= {f"param/{name}": values for name, values in checkpoint.params.to_arrays().items()}
    # np.savez stamps entries with the wall clock; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, values in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
            with archive.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(values), allow_pickle=False)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            arrays = {key.removeprefix("param/"): archive[key] for key in archive.files if key.startswith("param/")}
            node_min, node_max = archive["node_min"], archive["node_max"]
            adjacency = archive["adjacency"]
    except (OSError, ValueError, KeyError) as e:
        raise ValidationError(f"{path}: unreadable checkpoint: {e}") from e

    if header.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = TgcnConfig(**header["config"])
    params = TgcnParams.from_arrays(arrays)
    params.check_shapes(config)
    return Checkpoint(
        params=params,
        config=config,
        model_kind=header["model_kind"],
        node_ids=tuple(header["node_ids"]),
        node_min=node_min,
        node_max=node_max,
        adjacency=adjacency,
        meta=header.get("meta", {}),
    )
