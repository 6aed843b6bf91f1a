"""Shallow MLP probe on frozen features, with a small lr x epochs grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import average_precision_score

from ..numcore import Rng, Tensor, gelu, log_softmax, logsigmoid, no_grad
from ..numcore import sum as tsum
from ..pretrain.optim import AdamW

METRICS = ("accuracy", "mAP")


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    hidden: int = 1024
    lrs: tuple = (1e-4, 1e-3)
    epochs: tuple = (20, 50, 100)
    batch_size: int = 64
    weight_decay: float = 0.0
    split: tuple = (0.6, 0.2, 0.2)  # train / val / test fractions for random splits


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class ProbeResult:
    metric: str
    test_score: float  # fraction in [0, 1]
    val_score: float
    lr: float
    epochs: int
    params: dict = field(repr=False, default_factory=dict)
    mean: np.ndarray | None = field(repr=False, default=None)
    std: np.ndarray | None = field(repr=False, default=None)

    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, np.float32) - self.mean) / self.std
        with no_grad():
            return _forward(self.params, Tensor(x)).data


def random_split(n: int, fractions: tuple, rng: Rng) -> Split:
    if n < 3:
        raise ProbeError(f"need at least 3 examples to split, got {n}")
    perm = rng.permutation(n)
    n_tr = max(1, int(round(fractions[0] * n)))
    n_va = max(1, int(round(fractions[1] * n)))
    n_tr = min(n_tr, n - n_va - 1)
    return Split(perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])


def _init(d_in: int, hidden: int, d_out: int, rng: Rng) -> dict[str, Tensor]:
    def unif(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(np.float32)
    return {
        "fc1.W": Tensor(unif((d_in, hidden), d_in), requires_grad=True, name="fc1.W"),
        "fc1.b": Tensor(unif((hidden,), d_in), requires_grad=True, name="fc1.b"),
        "fc2.W": Tensor(unif((hidden, d_out), hidden), requires_grad=True, name="fc2.W"),
        "fc2.b": Tensor(unif((d_out,), hidden), requires_grad=True, name="fc2.b"),
    }


def _forward(params: dict, x: Tensor) -> Tensor:
    return gelu(x @ params["fc1.W"] + params["fc1.b"]) @ params["fc2.W"] + params["fc2.b"]


def _loss(logits: Tensor, y: np.ndarray, multilabel: bool) -> Tensor:
    n = logits.shape[0]
    if multilabel:
        yt = y.astype(logits.dtype)
        ll = yt * logsigmoid(logits) + (1.0 - yt) * logsigmoid(-logits)
        return -tsum(ll) * (1.0 / (n * logits.shape[1]))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), y] = 1.0
    return -tsum(log_softmax(logits, axis=-1) * onehot) * (1.0 / n)


def score(logits: np.ndarray, y: np.ndarray, metric: str) -> float:
    if metric == "accuracy":
        return float(np.mean(np.argmax(logits, axis=1) == y))
    # macro mAP over classes that have at least one positive
    keep = y.sum(axis=0) > 0
    if not keep.any():
        raise ProbeError("mAP undefined: no positive labels in this split")
    return float(average_precision_score(y[:, keep], logits[:, keep], average="macro"))


def _check_labels(labels: np.ndarray) -> tuple[bool, int]:
    y = np.asarray(labels)
    if y.ndim == 2:
        if not np.isin(y, (0, 1)).all():
            raise ProbeError("multilabel targets must be 0/1")
        if (y.sum(axis=0) > 0).sum() < 2:
            raise ProbeError("multilabel data needs positives in at least two classes")
        return True, y.shape[1]
    if y.ndim != 1:
        raise ProbeError(f"labels must be 1-D (single label) or 2-D (multilabel), got shape {y.shape}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ProbeError(f"degenerate labels: only class {classes.tolist()} present")
    if classes.min() < 0:
        raise ProbeError("class labels must be non-negative integers")
    return False, int(classes.max()) + 1


def train_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig = ProbeConfig(),
                split: Split | None = None, seed: int = 0) -> ProbeResult:
    """Grid-search the probe on the validation split and report the test score of the winner."""
    X = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise ProbeError(f"features {X.shape} and labels {y.shape} do not line up")
    multilabel, n_out = _check_labels(y)
    if not multilabel:
        y = y.astype(np.int64)
    metric = "mAP" if multilabel else "accuracy"
    rng = Rng(seed, "probe")
    if split is None:
        split = random_split(len(X), cfg.split, rng.child("split"))
    mu = X[split.train].mean(axis=0)
    sd = X[split.train].std(axis=0) + 1e-6
    Z = (X - mu) / sd
    milestones = sorted(set(int(e) for e in cfg.epochs))

    best = None
    for lr in cfg.lrs:
        run_rng = rng.child(f"lr={lr!r}")
        params = _init(X.shape[1], cfg.hidden, n_out, run_rng)
        opt = AdamW(weight_decay=cfg.weight_decay)
        tr = split.train
        for epoch in range(1, milestones[-1] + 1):
            order = tr[run_rng.permutation(len(tr))]
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                for p in params.values():
                    p.grad = None
                _loss(_forward(params, Tensor(Z[idx])), y[idx], multilabel).backward()
                opt.step(params, lr)
            if epoch in milestones:
                with no_grad():
                    val = score(_forward(params, Tensor(Z[split.val])).data, y[split.val], metric)
                if best is None or val > best[0]:
                    with no_grad():
                        test = score(_forward(params, Tensor(Z[split.test])).data, y[split.test], metric)
                    snap = {n: Tensor(p.data.copy(), name=n) for n, p in params.items()}
                    best = (val, test, lr, epoch, snap)
    val, test, lr, epochs, snap = best
    return ProbeResult(metric, test, val, lr, epochs, snap, mu, sd)


@dataclass
class TaskResult:
    task: str
    metric: str
    mean: float  # percent
    ci95: float  # percent, half-width
    per_seed: list[float]


def confidence95(values) -> float:
    """Normal-approximation half-width: 1.96 * sample std / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))


def evaluate_task(task: str, features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig = ProbeConfig(),
                  seeds: int = 10, split: Split | None = None) -> TaskResult:
    """Repeat the probe over ``seeds`` seeds; with a fixed split only the probe init/order varies."""
    scores = [100.0 * train_probe(features, labels, cfg, split, seed=s).test_score for s in range(seeds)]
    metric = "mAP" if np.asarray(labels).ndim == 2 else "accuracy"
    return TaskResult(task, metric, float(np.mean(scores)), confidence95(scores), scores)
