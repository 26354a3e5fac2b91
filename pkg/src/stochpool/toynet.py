"""Minimal trainable network exercising the pooling heads end to end.

Architecture: conv3x3 -> batchnorm -> relu -> conv3x3 -> batchnorm -> relu
-> pooling head -> linear classifier, with hand-written backpropagation in
numpy.  The head is one of

    gap      plain global average pooling
    sap      stochastic average pooling with keep probability p
    dropout  elementwise dropout on the feature map, then global pooling

The training task is synthetic: 16x16 images containing one Gaussian blob
whose width and sign of amplitude encode the class, at a random position, so
the classes are separable from pooled activation statistics.

The classifier is zero-initialized, so the first-step loss is ln(n_classes)
with a uniform softmax.  Evaluation always runs the test phase and consumes
no randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidShapeError,
    TrainingFailureError,
)
from .pooling import Phase, dropout_mask, global_avg_pool, sap_backward, sap_forward
from .rng import RngStream, sample_normals
from .tensor import sample_gaussian, second_moment

__all__ = [
    "HEAD_KINDS",
    "SyntheticDataset",
    "make_synthetic_dataset",
    "ToyNetParams",
    "init_params",
    "TrainConfig",
    "forward",
    "backward",
    "softmax_cross_entropy",
    "evaluate",
    "TraceRow",
    "TrainResult",
    "train_toy",
    "write_trace_csv",
    "head_moment_diagnostic",
]

HEAD_KINDS = ("gap", "sap", "dropout")

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

TRACE_CSV_HEADER = "step,loss,train_acc,test_acc"


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# per-class blob (sigma, amplitude); width and sign carry the label
_CLASS_BLOBS = ((1.2, 1.0), (2.6, 1.0), (1.2, -1.0), (2.6, -1.0))
_NOISE_LEVEL = 0.15


@dataclass(eq=False)
class SyntheticDataset:
    images: np.ndarray  # (n, 1, size, size)
    labels: np.ndarray  # (n,) int64
    n_classes: int
    rng: RngStream  # generator stream the set was built from


def make_synthetic_dataset(
    n: int, n_classes: int = 4, rng: RngStream | None = None, size: int = 16
) -> SyntheticDataset:
    if rng is None:
        rng = RngStream(0)
    if not 1 <= n_classes <= len(_CLASS_BLOBS):
        raise InvalidConfigError(f"n_classes must be in [1, {len(_CLASS_BLOBS)}]")
    gen = rng.generator()
    labels = gen.permutation(np.arange(n, dtype=np.int64) % n_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = gen.uniform(size * 0.25, size * 0.75, size=(n, 2))
    noise = sample_normals(n * size * size, rng.substream(1)).reshape(n, size, size)
    images = np.empty((n, 1, size, size))
    for i in range(n):
        sigma, amp = _CLASS_BLOBS[labels[i]]
        d2 = (yy - centers[i, 0]) ** 2 + (xx - centers[i, 1]) ** 2
        images[i, 0] = amp * np.exp(-d2 / (2.0 * sigma * sigma)) + _NOISE_LEVEL * noise[i]
    return SyntheticDataset(images=images, labels=labels, n_classes=n_classes, rng=rng)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

PARAM_FIELDS = ("w1", "g1", "beta1", "w2", "g2", "beta2", "wfc", "bfc")


@dataclass(eq=False)
class ToyNetParams:
    # conv kernels carry no bias: each is followed by a batchnorm whose
    # shift would absorb it anyway
    w1: np.ndarray
    g1: np.ndarray
    beta1: np.ndarray
    rm1: np.ndarray
    rv1: np.ndarray
    w2: np.ndarray
    g2: np.ndarray
    beta2: np.ndarray
    rm2: np.ndarray
    rv2: np.ndarray
    wfc: np.ndarray
    bfc: np.ndarray

    def copy(self) -> "ToyNetParams":
        return ToyNetParams(**{k: getattr(self, k).copy() for k in self.__dataclass_fields__})


def init_params(
    rng: RngStream, c1: int = 8, c2: int = 16, n_classes: int = 4
) -> ToyNetParams:
    """He-scaled conv kernels, unit batchnorm, zero classifier."""

    def he(shape, stream, fan_in):
        return sample_normals(int(np.prod(shape)), stream).reshape(shape) * np.sqrt(2.0 / fan_in)

    return ToyNetParams(
        w1=he((c1, 1, 3, 3), rng.substream(0), 9),
        g1=np.ones(c1),
        beta1=np.zeros(c1),
        rm1=np.zeros(c1),
        rv1=np.ones(c1),
        w2=he((c2, c1, 3, 3), rng.substream(1), 9 * c1),
        g2=np.ones(c2),
        beta2=np.zeros(c2),
        rm2=np.zeros(c2),
        rv2=np.ones(c2),
        wfc=np.zeros((c2, n_classes)),
        bfc=np.zeros(n_classes),
    )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _conv3x3_forward(x, w):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, cin, 9, h, wd))
    for idx in range(9):
        ki, kj = divmod(idx, 3)
        cols[:, :, idx] = xp[:, :, ki : ki + h, kj : kj + wd]
    cols2 = cols.reshape(n, cin * 9, h * wd)
    out = np.matmul(w.reshape(cout, cin * 9), cols2).reshape(n, cout, h, wd)
    return out, cols2


def _conv3x3_backward(dout, cols2, w, x_shape):
    n, cin, h, wd = x_shape
    cout = w.shape[0]
    d2 = dout.reshape(n, cout, h * wd)
    dw = np.matmul(d2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, 3, 3)
    dcols = np.matmul(w.reshape(cout, cin * 9).T, d2).reshape(n, cin, 9, h, wd)
    dxp = np.zeros((n, cin, h + 2, wd + 2))
    for idx in range(9):
        ki, kj = divmod(idx, 3)
        dxp[:, :, ki : ki + h, kj : kj + wd] += dcols[:, :, idx]
    return dxp[:, :, 1:-1, 1:-1], dw


def _bn_forward(x, gamma, beta, running_mean, running_var, phase: Phase):
    if phase is Phase.TRAIN:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1.0 - _BN_MOMENTUM) * running_mean + _BN_MOMENTUM * mu
        new_rv = (1.0 - _BN_MOMENTUM) * running_var + _BN_MOMENTUM * var
    else:
        mu, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma), new_rm, new_rv


def _bn_backward(dout, bn_cache, batch_stats: bool):
    xhat, inv, gamma = bn_cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not batch_stats:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    n, _, h, w = dout.shape
    m = n * h * w
    s1 = dxhat.sum(axis=(0, 2, 3))
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward(
    params: ToyNetParams,
    x: np.ndarray,
    head: str,
    p: float,
    phase,
    rng: RngStream | None = None,
):
    """Run the network; returns (logits, cache).

    The cache carries every intermediate the backward pass needs plus the
    updated batchnorm running statistics (the caller commits them; forward
    itself mutates nothing).
    """
    if head not in HEAD_KINDS:
        raise InvalidConfigError(f"unknown head {head!r}")
    phase = Phase(phase)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params.w1.shape[1]:
        raise InvalidShapeError(f"input shape {x.shape} does not match conv1 {params.w1.shape}")

    c1_out, cols1 = _conv3x3_forward(x, params.w1)
    bn1_out, bn1_cache, rm1, rv1 = _bn_forward(
        c1_out, params.g1, params.beta1, params.rm1, params.rv1, phase
    )
    r1 = np.maximum(bn1_out, 0.0)

    c2_out, cols2 = _conv3x3_forward(r1, params.w2)
    bn2_out, bn2_cache, rm2, rv2 = _bn_forward(
        c2_out, params.g2, params.beta2, params.rm2, params.rv2, phase
    )
    feats = np.maximum(bn2_out, 0.0)

    drop_mask = None
    sap_state = None
    if head == "sap":
        pooled, sap_state = sap_forward(feats, None, p, phase, rng)
    elif head == "dropout" and phase is Phase.TRAIN:
        if rng is None:
            raise InvalidInputError("train phase needs an RngStream")
        drop_mask = dropout_mask(feats.shape, p, rng)
        pooled = global_avg_pool(feats * (drop_mask / p))
    else:
        pooled = global_avg_pool(feats)

    logits = pooled @ params.wfc + params.bfc[None, :]
    cache = {
        "phase": phase, "head": head, "p": float(p),
        "x_shape": x.shape, "cols1": cols1, "bn1_cache": bn1_cache, "bn1_out": bn1_out,
        "r1_shape": r1.shape, "cols2": cols2, "bn2_cache": bn2_cache, "bn2_out": bn2_out,
        "feats_shape": feats.shape, "drop_mask": drop_mask, "sap_state": sap_state,
        "pooled": pooled, "logits": logits, "params": params,
        "rm1": rm1, "rv1": rv1, "rm2": rm2, "rv2": rv2,
    }
    return logits, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def backward(cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients from a matching forward cache."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache["logits"].shape:
        raise InvalidShapeError(
            f"gradient shape {dlogits.shape} does not match cached logits "
            f"{cache['logits'].shape}"
        )
    params: ToyNetParams = cache["params"]
    phase: Phase = cache["phase"]
    batch_stats = phase is Phase.TRAIN
    n, _, h, w = cache["feats_shape"]
    hw = h * w

    grads: dict[str, np.ndarray] = {}
    grads["wfc"] = cache["pooled"].T @ dlogits
    grads["bfc"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params.wfc.T

    head = cache["head"]
    if head == "sap":
        dfeats = sap_backward(dpooled, cache["sap_state"])
    elif head == "dropout" and phase is Phase.TRAIN:
        dmean = dpooled[:, :, None, None] / hw
        dfeats = dmean * (cache["drop_mask"] / cache["p"])
    else:
        dfeats = np.broadcast_to(dpooled[:, :, None, None] / hw, cache["feats_shape"])

    dbn2 = dfeats * (cache["bn2_out"] > 0.0)
    dc2, grads["g2"], grads["beta2"] = _bn_backward(dbn2, cache["bn2_cache"], batch_stats)
    dr1, grads["w2"] = _conv3x3_backward(dc2, cache["cols2"], params.w2, cache["r1_shape"])
    dbn1 = dr1 * (cache["bn1_out"] > 0.0)
    dc1, grads["g1"], grads["beta1"] = _bn_backward(dbn1, cache["bn1_cache"], batch_stats)
    _, grads["w1"] = _conv3x3_backward(dc1, cache["cols1"], params.w1, cache["x_shape"])
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    head: str = "gap"
    p: float = 0.5
    steps: int = 2000
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    n_train: int = 512
    n_test: int = 256
    n_classes: int = 4
    c1: int = 8
    c2: int = 16
    eval_every: int = 100

    def validate(self) -> "TrainConfig":
        if self.head not in HEAD_KINDS:
            raise InvalidConfigError(f"head must be one of {HEAD_KINDS}")
        if not 0.0 < self.p <= 1.0:
            raise InvalidConfigError(f"keep probability must be in (0, 1], got {self.p}")
        if min(self.steps, self.batch_size, self.n_train, self.n_test) < 1:
            raise InvalidConfigError("steps, batch_size and dataset sizes must be >= 1")
        if self.seed < 0:
            raise InvalidConfigError("seed must be non-negative")
        return self


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss: float
    train_acc: float
    test_acc: float


@dataclass(eq=False)
class TrainResult:
    trace: list[TraceRow]
    final_train_acc: float
    final_test_acc: float
    params: ToyNetParams
    config: TrainConfig


def evaluate(params: ToyNetParams, head: str, p: float, images, labels) -> float:
    """Test-phase accuracy; deterministic, consumes no randomness."""
    logits, _ = forward(params, images, head, p, Phase.TEST)
    return float((logits.argmax(axis=1) == labels).mean())


def train_toy(cfg: TrainConfig) -> TrainResult:
    """Plain SGD on the synthetic task; deterministic trace given the seed."""
    cfg.validate()
    root = RngStream(cfg.seed)
    train_ds = make_synthetic_dataset(cfg.n_train, cfg.n_classes, root.substream(10))
    test_ds = make_synthetic_dataset(cfg.n_test, cfg.n_classes, root.substream(11))
    params = init_params(root.substream(12), cfg.c1, cfg.c2, cfg.n_classes)

    step_root = root.substream(13)
    trace: list[TraceRow] = []
    for step in range(cfg.steps):
        s = step_root.substream(step)
        idx = s.substream(0).generator().integers(0, cfg.n_train, cfg.batch_size)
        xb, yb = train_ds.images[idx], train_ds.labels[idx]
        logits, cache = forward(params, xb, cfg.head, cfg.p, Phase.TRAIN, s.substream(1))
        loss, dlogits = softmax_cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise TrainingFailureError(step)
        grads = backward(cache, dlogits)
        for name in PARAM_FIELDS:
            getattr(params, name)[...] -= cfg.lr * grads[name]
        params.rm1, params.rv1 = cache["rm1"], cache["rv1"]
        params.rm2, params.rv2 = cache["rm2"], cache["rv2"]
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            train_acc = evaluate(params, cfg.head, cfg.p, train_ds.images, train_ds.labels)
            test_acc = evaluate(params, cfg.head, cfg.p, test_ds.images, test_ds.labels)
            trace.append(TraceRow(step + 1, loss, train_acc, test_acc))
    return TrainResult(
        trace=trace,
        final_train_acc=trace[-1].train_acc,
        final_test_acc=trace[-1].test_acc,
        params=params,
        config=cfg,
    )


def write_trace_csv(result: TrainResult, path) -> None:
    lines = [TRACE_CSV_HEADER]
    for row in result.trace:
        lines.append(f"{row.step},{row.loss!r},{row.train_acc!r},{row.test_acc!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Head consistency diagnostic
# ---------------------------------------------------------------------------


def head_moment_diagnostic(
    head: str,
    p: float,
    seed: int = 0,
    shape: tuple[int, int, int, int] = (64, 64, 16, 16),
) -> dict[str, float]:
    """Second moments of a pooling head's output in both phases.

    Feeds standard-normal features through the head (the setting in which
    the consistency property is defined) and reports train/test second
    moments and their ratio.  A consistent head keeps the ratio near 1;
    the dropout head inflates it by about 1/p.
    """
    if head not in HEAD_KINDS:
        raise InvalidConfigError(f"unknown head {head!r}")
    stream = RngStream(seed).substream(42)
    x = sample_gaussian(shape, stream.substream(0))
    if head == "sap":
        train_out, _ = sap_forward(x, None, p, Phase.TRAIN, stream.substream(1))
        test_out, _ = sap_forward(x, None, p, Phase.TEST)
    elif head == "dropout":
        m = dropout_mask(x.shape, p, stream.substream(1))
        train_out = global_avg_pool(x * (m / p))
        test_out = global_avg_pool(x)
    else:
        train_out = global_avg_pool(x)
        test_out = global_avg_pool(x)
    train_sm = second_moment(train_out)
    test_sm = second_moment(test_out)
    return {"train": train_sm, "test": test_sm, "ratio": train_sm / test_sm}
