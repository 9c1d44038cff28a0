"""Contrastive classifier and rule-based filtering.

The classifier is a small one-hidden-layer network over extracted feature
vectors, trained with cross entropy plus a weighted NT-Xent term computed on
the hidden activations (cosine similarities at temperature tau).  Filtering
removes images whose fine-rule ratio leaves the tolerance band (oracle
variant) or whose predicted class is not the on-rule class (learned
variant), and reports the regression error before and after.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .scenegen import RHO_TARGET
from .vision import FeatureRecord, evaluate_directory, verdict


class MitigationError(ValueError):
    pass


@dataclass
class MitigationConfig:
    lam: float = 1.0
    tau: float = 0.5
    hidden: int = 32
    epochs: int = 300
    lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise MitigationError("contrastive weight must be nonnegative")
        if self.tau <= 0:
            raise MitigationError("temperature must be positive")


def features_for_classifier(records: list[FeatureRecord],
                            task: str) -> np.ndarray:
    """Classifier inputs: the 4-D geometric embedding plus the rule ratio."""
    geom = analysis.embed(records, task, dim=4)
    ratios = np.array([r.ratio for r in records if r.valid])
    return np.column_stack([geom, ratios])


def nt_xent(z: np.ndarray, pos_index: np.ndarray, tau: float = 0.5) -> float:
    """Normalized temperature-scaled cross entropy over cosine similarities.

    pos_index[i] is the positive partner of anchor i; the denominator runs
    over every other sample.  Returns the mean anchor loss.
    """
    loss, _ = _nt_xent_value_grad(z, pos_index, tau)
    return loss


def _nt_xent_value_grad(z: np.ndarray, pos_index: np.ndarray, tau: float):
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise MitigationError("need at least two embeddings")
    norms = np.linalg.norm(z, axis=1)
    if norms.min() <= 0:
        raise MitigationError("zero-norm embedding")
    zn = z / norms[:, None]
    S = zn @ zn.T                              # cosine similarities
    logits = S / tau
    np.fill_diagonal(logits, -np.inf)          # k != i in the denominator
    mx = logits.max(axis=1, keepdims=True)
    P = np.exp(logits - mx)
    P /= P.sum(axis=1, keepdims=True)          # softmax over k != i
    idx = np.arange(n)
    loss = float(np.mean(-np.log(P[idx, pos_index])))
    # dL/dS: softmax weights minus the one-hot positive, averaged and scaled.
    G = P.copy()
    G[idx, pos_index] -= 1.0
    G /= n * tau
    # S = zn zn^T: symmetric contribution to each normalized embedding.
    dZn = (G + G.T) @ zn
    # back through the normalization zn = z / ||z||
    dz = (dZn - (np.sum(dZn * zn, axis=1, keepdims=True)) * zn) / norms[:, None]
    return loss, dz


@dataclass
class Classifier:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    config: MitigationConfig
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def hidden(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.feature_mean) / self.feature_scale
        return np.tanh(xs @ self.W1 + self.b1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.hidden(x) @ self.W2 + self.b2

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def to_json(self) -> str:
        d = {k: getattr(self, k).tolist()
             for k in ("W1", "b1", "W2", "b2", "feature_mean", "feature_scale")}
        d["config"] = {"lam": self.config.lam, "tau": self.config.tau,
                       "hidden": self.config.hidden,
                       "epochs": self.config.epochs,
                       "lr": self.config.lr, "seed": self.config.seed}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Classifier":
        d = json.loads(text)
        cfg = MitigationConfig(**d.pop("config"))
        return cls(config=cfg, **{k: np.array(v) for k, v in d.items()})


def _softmax(logits):
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    return e / e.sum(axis=1, keepdims=True)


def _positive_pairs(labels: np.ndarray, rng) -> np.ndarray:
    """For each anchor, a random same-class partner (fixed given the rng)."""
    n = labels.size
    pos = np.empty(n, dtype=np.int64)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise MitigationError(f"class {c} has fewer than 2 samples")
        shift = 1 + rng.integers(0, members.size - 1)
        pos[members] = members[(np.arange(members.size) + shift)
                               % members.size]
    return pos


def loss_and_grads(params, x, y, pos_index, lam, tau):
    """Total loss CE + lam * NT-Xent on hidden activations, with exact
    gradients for all four parameter arrays."""
    W1, b1, W2, b2 = params
    n = x.shape[0]
    A = x @ W1 + b1
    H = np.tanh(A)
    logits = H @ W2 + b2
    probs = _softmax(logits)
    ce = float(np.mean(-np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dH = dlogits @ W2.T
    loss = ce
    if lam > 0:
        ntx, dH_ntx = _nt_xent_value_grad(H, pos_index, tau)
        loss += lam * ntx
        dH = dH + lam * dH_ntx
    dA = dH * (1.0 - H * H)
    grads = (x.T @ dA, dA.sum(axis=0), H.T @ dlogits, dlogits.sum(axis=0))
    if not np.isfinite(loss):
        raise MitigationError("non-finite training loss")
    return loss, grads


@dataclass
class AccuracyReport:
    train_accuracy: float
    test_accuracy: float
    per_class_test: dict[int, float]
    loss_history: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        d = {"train_accuracy": self.train_accuracy,
             "test_accuracy": self.test_accuracy,
             "per_class_test": {str(k): v
                                for k, v in self.per_class_test.items()}}
        return json.dumps(d, indent=2, sort_keys=True)


def train_classifier(x: np.ndarray, labels: np.ndarray,
                     config: MitigationConfig | None = None
                     ) -> tuple[Classifier, AccuracyReport]:
    """Full-batch gradient descent on the combined objective, 80/20 split."""
    config = config or MitigationConfig()
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 3:
        raise MitigationError(f"need 3 classes, got {classes.size}")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(x.shape[0])
    n_train = int(round(0.8 * x.shape[0]))
    tr, te = perm[:n_train], perm[n_train:]
    mean = x[tr].mean(axis=0)
    scale = np.maximum(x[tr].std(axis=0), 1e-8)
    xs = (x - mean) / scale
    f = x.shape[1]
    h = config.hidden
    W1 = rng.standard_normal((f, h)) / np.sqrt(f)
    b1 = np.zeros(h)
    W2 = rng.standard_normal((h, 3)) / np.sqrt(h)
    b2 = np.zeros(3)
    pos = _positive_pairs(labels[tr], rng)
    history = []
    for _ in range(config.epochs):
        loss, g = loss_and_grads((W1, b1, W2, b2), xs[tr], labels[tr],
                                 pos, config.lam, config.tau)
        history.append(loss)
        W1 -= config.lr * g[0]
        b1 -= config.lr * g[1]
        W2 -= config.lr * g[2]
        b2 -= config.lr * g[3]
    clf = Classifier(W1=W1, b1=b1, W2=W2, b2=b2, config=config,
                     feature_mean=mean, feature_scale=scale)
    pred_tr = clf.predict(x[tr])
    pred_te = clf.predict(x[te])
    per_class = {}
    for c in classes:
        m = labels[te] == c
        per_class[int(c)] = float((pred_te[m] == c).mean()) if m.any() else float("nan")
    report = AccuracyReport(
        train_accuracy=float((pred_tr == labels[tr]).mean()),
        test_accuracy=float((pred_te == labels[te]).mean()),
        per_class_test=per_class, loss_history=history)
    return clf, report


def filter_records(records: list[FeatureRecord], task: str,
                   eps: float = 0.01,
                   classifier: Classifier | None = None
                   ) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """Split Valid records into kept and rejected.

    Oracle variant (no classifier): keep iff the extracted ratio lies within
    the fine band.  Learned variant: keep iff the predicted class is 1.
    """
    valid = [r for r in records if r.valid]
    if classifier is None:
        kept = [r for r in valid if verdict(r, task, eps).fine_ok]
    else:
        if not valid:
            return [], []
        x = features_for_classifier(valid, task)
        pred = classifier.predict(x)
        kept = [r for r, p in zip(valid, pred) if p == 1]
    kept_set = {id(r) for r in kept}
    rejected = [r for r in valid if id(r) not in kept_set]
    return kept, rejected


def filter_directory(path: Path, task: str, eps: float = 0.01,
                     size: int = 32,
                     classifier: Classifier | None = None) -> dict:
    """Evaluate a directory, filter it, and report regressions before/after."""
    records, summary = evaluate_directory(path, task, size=size, eps=eps)
    kept, rejected = filter_records(records, task, eps, classifier)
    out = {
        "task": task, "eps": eps, "n_images": summary["n_images"],
        "kept": [r.filename for r in kept],
        "rejected": [r.filename for r in rejected],
        "before": None, "after": None, "warning": "",
    }
    try:
        out["before"] = analysis.fit_rule_regression(records, task)
    except analysis.AnalysisError as e:
        out["warning"] = f"unfiltered regression failed: {e}"
        return out
    if not kept:
        out["warning"] = "empty kept set; filtered report omitted"
        return out
    try:
        out["after"] = analysis.fit_rule_regression(kept, task)
    except analysis.AnalysisError as e:
        out["warning"] = f"filtered regression failed: {e}"
    return out
