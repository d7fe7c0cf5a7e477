"""Attentive statistics pooling classifier trained with Adam.

The model pools a (feat_dim, T) FBANK matrix into attention-weighted mean
and standard deviation, then applies a two-class linear head. Gradients are
analytic. Parameters and optimizer state are float64; batch arithmetic
runs in the configured compute dtype (float32 for training by default).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VAR_FLOOR = 1e-9
PARAM_NAMES = ("W", "b", "v", "head_W", "head_b")
BONAFIDE, SPOOF = 1, 0


@dataclass
class AspModel:
    W: np.ndarray  # (attn_dim, feat_dim)
    b: np.ndarray  # (attn_dim,)
    v: np.ndarray  # (attn_dim,)
    head_W: np.ndarray  # (2, 2 * feat_dim)
    head_b: np.ndarray  # (2,)

    @property
    def feat_dim(self) -> int:
        return self.W.shape[1]

    @property
    def attn_dim(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "AspModel":
        return AspModel(**{k: v.copy() for k, v in self.params().items()})


def init_model(feat_dim: int, attn_dim: int = 128, seed: int = 0) -> AspModel:
    """Uniform +-sqrt(1/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return AspModel(
        W=uni((attn_dim, feat_dim), feat_dim),
        b=np.zeros(attn_dim),
        v=uni((attn_dim,), attn_dim),
        head_W=uni((2, 2 * feat_dim), 2 * feat_dim),
        head_b=np.zeros(2),
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def pad_batch(feats, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack (D, T_i) matrices frame-major into (B, T_max, D) with a (B, T_max) mask."""
    feats = [np.asarray(f) for f in feats]
    D = feats[0].shape[0]
    if any(f.shape[0] != D for f in feats):
        raise ValueError("all feature matrices must share the same row count")
    if any(f.shape[1] == 0 for f in feats):
        raise ValueError("feature matrix with zero frames")
    T = max(f.shape[1] for f in feats)
    H = np.zeros((len(feats), T, D), dtype=dtype)
    mask = np.zeros((len(feats), T), dtype=bool)
    for i, f in enumerate(feats):
        H[i, : f.shape[1]] = f.T
        mask[i, : f.shape[1]] = True
    return H, mask


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward(H: np.ndarray, mask: np.ndarray, model: AspModel):
    B, T, D = H.shape
    dt = H.dtype
    Z = (H.reshape(B * T, D) @ model.W.T.astype(dt)).reshape(B, T, -1) + model.b.astype(dt)
    G = np.tanh(Z)
    e = G @ model.v.astype(dt)
    e = np.where(mask, e, -np.inf)
    e_max = e.max(axis=1, keepdims=True)
    ex = np.exp(e - e_max)
    alpha = ex / ex.sum(axis=1, keepdims=True)
    H2 = H * H
    mu = np.matmul(alpha[:, None, :], H)[:, 0]
    m2 = np.matmul(alpha[:, None, :], H2)[:, 0]
    var = m2 - mu * mu
    active = var > VAR_FLOOR
    sigma = np.sqrt(np.where(active, var, VAR_FLOOR))
    pooled = np.concatenate([mu, sigma], axis=1)
    logits = pooled @ model.head_W.T.astype(dt) + model.head_b.astype(dt)
    cache = (H, H2, G, alpha, mu, sigma, active, pooled)
    return logits, cache


def attention_weights(frames: np.ndarray, model: AspModel) -> np.ndarray:
    H, mask = pad_batch([frames])
    return _forward(H, mask, model)[1][3][0]


def asp_pool(frames: np.ndarray, model: AspModel) -> np.ndarray:
    """Attention-weighted mean and std of ``frames`` (feat_dim, T) -> (2 * feat_dim,)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] == 0:
        raise ValueError("asp_pool needs a (feat_dim, T) matrix with T >= 1")
    if frames.shape[0] != model.feat_dim:
        raise ValueError(f"feature dim {frames.shape[0]} != model feat_dim {model.feat_dim}")
    H, mask = pad_batch([frames])
    return _forward(H, mask, model)[1][7][0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def _check_dims(H: np.ndarray, model: AspModel) -> None:
    if H.shape[2] != model.feat_dim:
        raise ValueError(f"feature dim {H.shape[2]} != model feat_dim {model.feat_dim}")


def forward_loss(H: np.ndarray, mask: np.ndarray, labels: np.ndarray, model: AspModel):
    """Mean softmax cross-entropy and the (B, 2) logits for a padded batch."""
    _check_dims(H, model)
    logits, _ = _forward(H, mask, model)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(len(labels)), labels]))
    return loss, logits


def backward(H: np.ndarray, mask: np.ndarray, labels: np.ndarray, model: AspModel):
    """Loss and exact gradients for every parameter."""
    _check_dims(H, model)
    labels = np.asarray(labels)
    B, T, D = H.shape
    logits, (H, H2, G, alpha, mu, sigma, active, pooled) = _forward(H, mask, model)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(B), labels]))

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    g_head_W = dlogits.T @ pooled
    g_head_b = dlogits.sum(axis=0)

    dpooled = dlogits @ model.head_W.astype(dlogits.dtype)
    dmu, dsigma = dpooled[:, :D], dpooled[:, D:]
    dvar = np.where(active, dsigma * 0.5 / sigma, 0.0)
    dmu_total = dmu - 2.0 * mu * dvar
    dalpha = np.matmul(H, dmu_total[:, :, None])[:, :, 0] + np.matmul(H2, dvar[:, :, None])[:, :, 0]
    de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))

    A = model.attn_dim
    G2 = G.reshape(B * T, A)
    g_v = de.reshape(-1) @ G2
    dZ = (de.reshape(-1, 1) * model.v.astype(G.dtype)) * (1.0 - G2 * G2)
    g_W = dZ.T @ H.reshape(B * T, D)
    g_b = dZ.sum(axis=0)
    grads = {"W": g_W, "b": g_b, "v": g_v, "head_W": g_head_W, "head_b": g_head_b}
    grads = {k: g.astype(np.float64) for k, g in grads.items()}
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_model(cls, model: AspModel, **kw) -> "OptimizerState":
        zeros = {k: np.zeros_like(p) for k, p in model.params().items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, **kw)


def adam_step(model: AspModel, grads: dict, state: OptimizerState, lr: float) -> None:
    """In-place Adam update; weight decay enters as an L2 term on the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in PARAM_NAMES:
        theta = getattr(model, name)
        g = grads[name] + state.weight_decay * theta
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 4
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_lr: float = 1e-6


def lr_at(schedule: LrSchedule, epoch: int, metric_history) -> float:
    """Learning rate for ``epoch`` (1-based) given the metrics of earlier epochs.

    Linear warmup reaches ``base_lr`` at the last warmup epoch. Afterwards
    the rate starts at ``base_lr`` and is multiplied by ``plateau_factor``
    each time the monitored metric fails to improve for ``plateau_patience``
    consecutive epochs; only post-warmup metrics are monitored.
    """
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if epoch <= schedule.warmup_epochs:
        return schedule.base_lr * epoch / schedule.warmup_epochs
    lr = schedule.base_lr
    best = math.inf
    bad = 0
    watched = list(metric_history)[schedule.warmup_epochs : epoch - 1]
    for value in watched:
        if value < best:
            best, bad = value, 0
        else:
            bad += 1
            if bad >= schedule.plateau_patience:
                lr = max(lr * schedule.plateau_factor, schedule.min_lr)
                bad = 0
    return lr


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    dev_fraction: float = 0.2
    attn_dim: int = 128
    schedule: LrSchedule = field(default_factory=LrSchedule)
    compute_dtype: str = "float32"  # batch arithmetic; parameters and Adam moments stay float64

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")


# full-size preset (batch 400, 100 epochs); the desk default is 64 x 30
FULL_SCALE = TrainConfig(batch_size=400, epochs=100)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    dev_loss: float


def dataset_loss(model: AspModel, feats, labels, batch_size: int = 64, dtype=np.float64) -> float:
    total = 0.0
    for s in range(0, len(feats), batch_size):
        H, mask = pad_batch(feats[s : s + batch_size], dtype)
        loss, _ = forward_loss(H, mask, np.asarray(labels[s : s + batch_size]), model)
        total += loss * H.shape[0]
    return total / len(feats)


def split_dev(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_dev = max(1, int(round(n * fraction)))
    return order[n_dev:], order[:n_dev]


def train(train_feats, train_labels, cfg: TrainConfig, dev_feats=None, dev_labels=None):
    """Fit an AspModel; returns (best-dev-loss model, per-epoch log).

    If no dev set is given, ``cfg.dev_fraction`` of the training data is held out.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(np.unique(train_labels)) < 2:
        raise ValueError("training data must contain both classes")
    if dev_feats is None:
        tr, dv = split_dev(len(train_feats), cfg.dev_fraction, cfg.seed)
        dev_feats = [train_feats[i] for i in dv]
        dev_labels = train_labels[dv]
        train_feats = [train_feats[i] for i in tr]
        train_labels = train_labels[tr]
    dev_labels = np.asarray(dev_labels, dtype=np.int64)

    feat_dim = np.asarray(train_feats[0]).shape[0]
    model = init_model(feat_dim, cfg.attn_dim, cfg.seed)
    state = OptimizerState.for_model(model)
    rng = np.random.default_rng(cfg.seed + 1)
    dtype = np.dtype(cfg.compute_dtype)
    history: list[float] = []
    logs: list[EpochLog] = []
    best, best_loss = model.copy(), math.inf
    n = len(train_feats)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg.schedule, epoch, history)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            H, mask = pad_batch([train_feats[i] for i in idx], dtype)
            loss, grads = backward(H, mask, train_labels[idx], model)
            adam_step(model, grads, state, lr)
            total += loss * len(idx)
        dev_loss = dataset_loss(model, dev_feats, dev_labels, cfg.batch_size, dtype)
        history.append(dev_loss)
        logs.append(EpochLog(epoch, lr, total / n, dev_loss))
        if dev_loss < best_loss:
            best, best_loss = model.copy(), dev_loss
    return best, logs


def score(model: AspModel, features) -> float:
    """logit(bonafide) - logit(spoof) for one (feat_dim, T) matrix."""
    frames = np.asarray(features, dtype=np.float64)
    if frames.shape[0] != model.feat_dim:
        raise ValueError(f"feature dim {frames.shape[0]} != model feat_dim {model.feat_dim}")
    H, mask = pad_batch([frames])
    logits, _ = _forward(H, mask, model)
    return float(logits[0, BONAFIDE] - logits[0, SPOOF])


def score_batch(model: AspModel, feats, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(feats), batch_size):
        H, mask = pad_batch(feats[s : s + batch_size])
        _check_dims(H, model)
        logits, _ = _forward(H, mask, model)
        out.append(logits[:, BONAFIDE] - logits[:, SPOOF])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# "ASP1" files: magic, u32 feat_dim, u32 attn_dim, f64 W, b, v, head_W, head_b
# ---------------------------------------------------------------------------

_MAGIC = b"ASP1"


def save_model(model: AspModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", model.feat_dim, model.attn_dim))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path) -> AspModel:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an ASP1 model file")
    D, A = struct.unpack("<II", data[4:12])
    shapes = {"W": (A, D), "b": (A,), "v": (A,), "head_W": (2, 2 * D), "head_b": (2,)}
    size = sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != 12 + 8 * size:
        raise ValueError(f"{path}: payload size mismatch")
    flat = np.frombuffer(data, dtype="<f8", offset=12)
    params, off = {}, 0
    for name in PARAM_NAMES:
        k = int(np.prod(shapes[name]))
        params[name] = flat[off : off + k].reshape(shapes[name]).copy()
        off += k
    return AspModel(**params)


def write_log(logs, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch\tlr\ttrain_loss\tdev_loss\n")
        for r in logs:
            fh.write(f"{r.epoch}\t{r.lr:.9g}\t{r.train_loss:.9g}\t{r.dev_loss:.9g}\n")
