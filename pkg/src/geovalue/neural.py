"""Dense two-branch regression networks written directly on numpy.

Three topologies share one layout: optional ``feature`` and ``image`` branches
whose outputs are concatenated (feature first) and fed to a ``head`` ending in
a single linear unit.

* ``F``  -- feature branch + head
* ``I``  -- image branch + head
* ``FI`` -- both branches + head

The objective is ``mean((y_hat - y)**2) + l2 * sum(W**2)`` over weight matrices
(biases are not penalized). Dropout is inverted: surviving activations are
scaled by ``1 / (1 - p)`` at train time so evaluation needs no rescaling.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evaluation import mse, r_squared

logger = logging.getLogger(__name__)

TOPOLOGIES = ("F", "I", "FI")
BRANCHES = ("feature", "image", "head")
ACTIVATIONS = ("relu", "linear")

NN_MAGIC = b"GVNN"
NN_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.name = name


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class MissingEmbeddingError(KeyError):
    pass


@dataclass
class Dense:
    W: np.ndarray  # [out, in]
    b: np.ndarray
    activation: str = "relu"
    dropout: float = 0.0

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths. Each tuple starts with the branch input width."""

    feature_dims: tuple = (40, 128, 64)
    image_dims: tuple = (2048, 512, 128)
    head_hidden: tuple = (64,)


@dataclass
class DenseModel:
    topology: str
    branches: dict[str, list[Dense]]
    version: int = 0

    @property
    def feature_dim(self) -> int | None:
        layers = self.branches.get("feature")
        return layers[0].in_dim if layers else None

    @property
    def image_dim(self) -> int | None:
        layers = self.branches.get("image")
        return layers[0].in_dim if layers else None

    def layers(self):
        for branch in BRANCHES:
            for i, layer in enumerate(self.branches.get(branch, [])):
                yield f"{branch}.{i}", layer

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers():
            out[name + ".W"] = layer.W
            out[name + ".b"] = layer.b
        return out

    def copy(self) -> "DenseModel":
        return copy.deepcopy(self)

    def predict(self, X_feat=None, X_img=None) -> np.ndarray:
        return forward(self, X_feat, X_img, mode="eval")[0]


def _check_chain(layers: Sequence[Dense], where: str) -> None:
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"{where}: layer output {a.out_dim} does not feed input {b.in_dim}")


def validate(model: DenseModel) -> None:
    if model.topology not in TOPOLOGIES:
        raise ShapeError(f"unknown topology {model.topology!r}")
    need = {"F": ("feature", "head"), "I": ("image", "head"), "FI": ("feature", "image", "head")}
    if set(model.branches) != set(need[model.topology]):
        raise ShapeError(f"topology {model.topology} needs branches {need[model.topology]}")
    for name, layers in model.branches.items():
        if not layers:
            raise ShapeError(f"branch {name} is empty")
        _check_chain(layers, name)
    concat = sum(model.branches[b][-1].out_dim for b in ("feature", "image") if b in model.branches)
    if model.branches["head"][0].in_dim != concat:
        raise ShapeError(f"head expects {model.branches['head'][0].in_dim} inputs, branches give {concat}")
    if model.branches["head"][-1].out_dim != 1:
        raise ShapeError("head must end in a single output")
    for name, layer in model.layers():
        if layer.activation not in ACTIVATIONS:
            raise ShapeError(f"{name}: unknown activation {layer.activation!r}")
        if not 0.0 <= layer.dropout < 1.0:
            raise ShapeError(f"{name}: dropout must be in [0, 1)")


def _he_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / in_dim)
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)


def build_model(kind: str, arch: ArchConfig | None = None, seed: int = 0,
                dropout: tuple = (0.3, 0.2), dtype=np.float64) -> DenseModel:
    """Build an F, I or FI network with He-uniform weights and zero biases.

    ``dropout[0]`` follows the first image-branch layer and ``dropout[1]`` the
    last feature-branch layer; a topology without that branch ignores it.
    """
    if kind not in TOPOLOGIES:
        raise ShapeError(f"unknown topology {kind!r}")
    arch = arch or ArchConfig()
    rng = np.random.default_rng(seed)

    def stack(dims, drops, last_activation="relu"):
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            act = last_activation if i == len(dims) - 2 else "relu"
            layers.append(Dense(_he_uniform(rng, d_out, d_in, dtype), np.zeros(d_out, dtype),
                                act, drops.get(i, 0.0)))
        return layers

    branches = {}
    concat = 0
    if kind in ("F", "FI"):
        n = len(arch.feature_dims) - 1
        branches["feature"] = stack(arch.feature_dims, {n - 1: dropout[1]})
        concat += arch.feature_dims[-1]
    if kind in ("I", "FI"):
        branches["image"] = stack(arch.image_dims, {0: dropout[0]})
        concat += arch.image_dims[-1]
    branches["head"] = stack((concat, *arch.head_hidden, 1), {}, last_activation="linear")
    model = DenseModel(kind, branches)
    validate(model)
    return model


@dataclass
class ForwardCache:
    version: int
    X_feat: np.ndarray | None
    X_img: np.ndarray | None
    # per branch, per layer: (input, pre-activation, dropout mask or None)
    layers: dict[str, list[tuple]] = field(default_factory=dict)
    pred: np.ndarray | None = None


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _run_branch(layers, a, train, rng, record):
    for layer in layers:
        z = a @ layer.W.T + layer.b
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        mask = None
        if train and layer.dropout > 0.0:
            keep = 1.0 - layer.dropout
            mask = (rng.random(h.shape) < keep).astype(h.dtype) / h.dtype.type(keep)
            h = h * mask
        if record is not None:
            record.append((a, z, mask))
        a = h
    return a


def _check_inputs(model: DenseModel, X_feat, X_img):
    dtype = model.branches["head"][0].W.dtype
    m = None
    out = []
    for branch, X in (("feature", X_feat), ("image", X_img)):
        if branch not in model.branches:
            if X is not None:
                raise ShapeError(f"topology {model.topology} takes no {branch} input")
            out.append(None)
            continue
        if X is None:
            raise ShapeError(f"topology {model.topology} needs a {branch} input")
        X = np.asarray(X, dtype=dtype)
        want = model.branches[branch][0].in_dim
        if X.ndim != 2 or X.shape[1] != want:
            raise ShapeError(f"{branch} input must be [m x {want}], got {X.shape}")
        if m is not None and X.shape[0] != m:
            raise ShapeError("feature and image inputs disagree on row count")
        m = X.shape[0]
        out.append(X)
    return out


def forward(model: DenseModel, X_feat=None, X_img=None, mode: str = "eval", rng=None):
    """Return ``(predictions, cache)``; ``cache`` is ``None`` in eval mode.

    Dropout runs only in ``train`` mode and draws its masks from ``rng`` (a
    seed or a ``numpy.random.Generator``).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X_feat, X_img = _check_inputs(model, X_feat, X_img)
    train = mode == "train"
    rng = _as_rng(rng) if train else None
    cache = ForwardCache(model.version, X_feat, X_img) if train else None

    parts = []
    for branch, X in (("feature", X_feat), ("image", X_img)):
        if X is None:
            continue
        record = cache.layers.setdefault(branch, []) if train else None
        parts.append(_run_branch(model.branches[branch], X, train, rng, record))
    head_in = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    record = cache.layers.setdefault("head", []) if train else None
    out = _run_branch(model.branches["head"], head_in, train, rng, record)[:, 0]
    if train:
        cache.pred = out
    return out, cache


def mse_loss(y_hat, y) -> float:
    return mse(y_hat, y)


def l2_penalty(model: DenseModel, l2: float) -> float:
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if l2 == 0:
        return 0.0
    return float(l2 * sum(np.sum(layer.W.astype(np.float64) ** 2) for _, layer in model.layers()))


def objective(model: DenseModel, y_hat, y, l2: float) -> float:
    return mse_loss(y_hat, y) + l2_penalty(model, l2)


def _back_branch(layers, records, prefix, grad_out, l2, grads):
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        a_in, z, mask = records[i]
        if mask is not None:
            g = g * mask
        if layer.activation == "relu":
            g = g * (z > 0)
        grads[f"{prefix}.{i}.W"] = g.T @ a_in + (2.0 * l2) * layer.W
        grads[f"{prefix}.{i}.b"] = g.sum(axis=0)
        g = g @ layer.W
    return g


def backward(model: DenseModel, cache: ForwardCache, y, l2: float = 0.0) -> dict[str, np.ndarray]:
    """Gradients of ``MSE + l2 * sum(W**2)`` for every parameter, keyed like ``model.params()``."""
    if cache is None or cache.pred is None:
        raise StaleCacheError("backward needs the cache of a train-mode forward pass")
    if cache.version != model.version:
        raise StaleCacheError("model parameters changed since the forward pass")
    y = np.asarray(y, dtype=cache.pred.dtype)
    if y.shape != cache.pred.shape:
        raise ShapeError(f"labels shape {y.shape} vs predictions {cache.pred.shape}")
    m = y.shape[0]
    grads: dict[str, np.ndarray] = {}
    g = (2.0 / m) * (cache.pred - y)[:, None]
    g = _back_branch(model.branches["head"], cache.layers["head"], "head", g, l2, grads)
    start = 0
    for branch in ("feature", "image"):
        if branch not in model.branches:
            continue
        width = model.branches[branch][-1].out_dim
        _back_branch(model.branches[branch], cache.layers[branch], branch,
                     g[:, start:start + width], l2, grads)
        start += width
    return grads


def decayed_lr(lr0: float, alpha: float, t: int) -> float:
    """Learning rate after ``t`` processed batches: ``lr0 / (1 + alpha * t)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return lr0 / (1.0 + alpha * t)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.0005
    alpha: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2: float = 0.1
    dropout: tuple = (0.3, 0.2)
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.beta1, self.beta2, self.epsilon) <= 0 or self.alpha < 0:
            raise ValueError("rates must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.l2 < 0:
            raise ValueError("invalid batch_size/epochs/l2")


@dataclass
class Dataset:
    y: np.ndarray
    X_feat: np.ndarray | None = None
    X_img: np.ndarray | None = None
    ids: list | None = None

    def __len__(self) -> int:
        return len(self.y)

    def rows(self, idx) -> "Dataset":
        return Dataset(self.y[idx],
                       None if self.X_feat is None else self.X_feat[idx],
                       None if self.X_img is None else self.X_img[idx])


def make_dataset(kind: str, ids: Sequence[str], X_feat, y,
                 lookup: Callable[[str], np.ndarray | None] | None = None) -> Dataset:
    """Assemble model inputs for ``kind``; ``lookup`` maps a record id to its embedding."""
    X_img = None
    if kind in ("I", "FI"):
        if lookup is None:
            raise MissingEmbeddingError("image topologies need an embedding lookup")
        rows = []
        for rid in ids:
            vec = lookup(rid)
            if vec is None:
                raise MissingEmbeddingError(f"no embedding for id {rid!r}")
            rows.append(np.asarray(vec, dtype=np.float64))
        X_img = np.stack(rows) if rows else np.zeros((0, 0))
    return Dataset(np.asarray(y, dtype=np.float64),
                   np.asarray(X_feat, dtype=np.float64) if kind in ("F", "FI") else None,
                   X_img, list(ids))


@dataclass
class TrainResult:
    model: DenseModel  # parameters with the best validation MSE
    final_model: DenseModel
    history: list[dict]
    best_epoch: int
    steps: int


def _evaluate(model: DenseModel, data: Dataset) -> tuple[float, float]:
    pred = model.predict(data.X_feat, data.X_img)
    return mse(pred, data.y), r_squared(pred, data.y)


def train(model: DenseModel, train_set: Dataset, val_set: Dataset,
          config: TrainConfig = TrainConfig(), on_epoch=None) -> TrainResult:
    """Mini-batch Adam on ``MSE + L2`` with a per-batch decayed learning rate.

    The input model is not modified. The batch counter behind the decay runs
    across epochs. ``history`` holds one row per epoch with the learning rate
    of the last batch and eval-mode MSE/R² on both sets.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    params = model.params()
    n = len(train_set)
    best = model.copy()
    best_mse = math.inf
    best_epoch = 0
    history = []
    lr = config.lr0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = train_set.rows(order[start:start + config.batch_size])
            pred, cache = forward(model, batch.X_feat, batch.X_img, "train", dropout_rng)
            loss = mse(pred, batch.y)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            grads = backward(model, cache, batch.y, config.l2)
            lr = decayed_lr(config.lr0, config.alpha, state.t)
            adam_step(state, params, grads, lr, config.beta1, config.beta2, config.epsilon)
            model.version += 1
        train_mse, train_r2 = _evaluate(model, train_set)
        val_mse, val_r2 = _evaluate(model, val_set)
        row = {"epoch": epoch, "lr": lr, "train_mse": train_mse, "train_r2": train_r2,
               "val_mse": val_mse, "val_r2": val_r2}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if not math.isfinite(train_mse):
            raise TrainingDiverged(epoch, -1, train_mse)
        if val_mse < best_mse:
            best_mse, best_epoch = val_mse, epoch
            best = model.copy()
    if config.epochs > 0:
        logger.info("trained %s: best val mse %.5f at epoch %d of %d",
                    model.topology, best_mse, best_epoch, config.epochs)
    return TrainResult(best, model, history, best_epoch, state.t)


HISTORY_COLUMNS = ("epoch", "lr", "train_mse", "train_r2", "val_mse", "val_r2")


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in HISTORY_COLUMNS})


_TOPO_TAG = {"F": 0, "I": 1, "FI": 2}
_ACT_TAG = {"relu": 0, "linear": 1}


def save_model(model: DenseModel, path, steps: int = 0) -> None:
    """Checkpoint: magic, u16 version, u8 topology, u64 steps, then per branch a
    u32 layer count and per layer (u32 in, u32 out, u8 activation, f64 dropout),
    followed by every W and b as little-endian f64."""
    with open(path, "wb") as f:
        f.write(NN_MAGIC)
        f.write(struct.pack("<HBQ", NN_VERSION, _TOPO_TAG[model.topology], steps))
        for branch in BRANCHES:
            layers = model.branches.get(branch, [])
            f.write(struct.pack("<I", len(layers)))
            for layer in layers:
                f.write(struct.pack("<IIBd", layer.in_dim, layer.out_dim,
                                    _ACT_TAG[layer.activation], layer.dropout))
        for _, layer in model.layers():
            f.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def load_model(path) -> tuple[DenseModel, int]:
    data = Path(path).read_bytes()
    if data[:4] != NN_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, topo, steps = struct.unpack_from("<HBQ", data, 4)
    if version != NN_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<HBQ")
    topology = {v: k for k, v in _TOPO_TAG.items()}[topo]
    acts = {v: k for k, v in _ACT_TAG.items()}
    specs = {}
    for branch in BRANCHES:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        specs[branch] = []
        for _ in range(count):
            d_in, d_out, act, p = struct.unpack_from("<IIBd", data, pos)
            pos += struct.calcsize("<IIBd")
            specs[branch].append((d_in, d_out, acts[act], p))
    branches = {}
    for branch in BRANCHES:
        layers = []
        for d_in, d_out, act, p in specs[branch]:
            W = np.frombuffer(data, "<f8", d_in * d_out, pos).reshape(d_out, d_in).astype(np.float64)
            pos += 8 * d_in * d_out
            b = np.frombuffer(data, "<f8", d_out, pos).astype(np.float64)
            pos += 8 * d_out
            layers.append(Dense(W, b, act, p))
        if layers:
            branches[branch] = layers
    model = DenseModel(topology, branches)
    validate(model)
    return model, steps
