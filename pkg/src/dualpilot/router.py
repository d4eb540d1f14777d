"""Routing head: hashed n-gram features, a two-layer MLP over four actions, focal-loss training.

The head is deliberately small (about 300K parameters at the default
feature width of 576) so a forward pass costs well under a millisecond on
one CPU core.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimMismatch, EmptyCorpus
from .taxonomy import RoutingAction, route_label
from .text import tokenize

log = logging.getLogger(__name__)

DEFAULT_DIM = 576
HIDDEN = 512


# ---------------------------------------------------------------- features

class HashedNgramExtractor:
    """Signed feature hashing of query uni/bi-grams plus context tokens.

    Any object with the same ``__call__(query, context)`` signature and a
    ``dim`` attribute can replace it (e.g. a client for a frozen encoder).
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, context_weight: float = 0.5):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.context_weight = context_weight
        self._key = str(seed).encode()

    def _slot(self, feature: str):
        h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8,
                                           key=self._key).digest(), "little")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def __call__(self, query: str, context: str = "") -> np.ndarray:
        x = np.zeros(self.dim)
        toks = tokenize(query)
        feats = [(t, 1.0) for t in toks]
        feats += [(f"{a} {b}", 1.0) for a, b in zip(toks, toks[1:])]
        feats += [(f"ctx={t}", self.context_weight) for t in tokenize(context)]
        for f, w in feats:
            i, s = self._slot(f)
            x[i] += s * w
        norm = np.linalg.norm(x)
        if norm > 0:
            x /= norm
        return x


def extract_features(query_text: str, context_digest: str = "", dim: int = DEFAULT_DIM,
                     seed: int = 0) -> np.ndarray:
    return HashedNgramExtractor(dim, seed)(query_text, context_digest)


# ---------------------------------------------------------------- weights

@dataclass
class RouterWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0

    @property
    def dim(self):
        return self.W1.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[1]

    @property
    def n_actions(self):
        return self.W2.shape[1]

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())

    def arrays(self):
        return (self.W1, self.b1, self.W2, self.b2)

    @classmethod
    def init(cls, dim=DEFAULT_DIM, n_actions=4, hidden=HIDDEN, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.normal(0.0, np.sqrt(2.0 / dim), (dim, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, n_actions)),
            b2=np.zeros(n_actions),
            seed=seed,
        )

    @classmethod
    def zeros(cls, dim=DEFAULT_DIM, n_actions=4, hidden=HIDDEN):
        return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, n_actions)),
                   np.zeros(n_actions))

    def copy(self):
        return RouterWeights(*(a.copy() for a in self.arrays()), seed=self.seed)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return RouterWeights(*out, seed=self.seed)

    def save(self, path):
        path = Path(path)
        path.write_bytes(self.flat().astype("<f8").tobytes())
        sidecar = {"dim": self.dim, "hidden": self.hidden, "actions": self.n_actions, "seed": self.seed}
        Path(f"{path}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(f"{path}.json").read_text())
        vec = np.frombuffer(path.read_bytes(), dtype="<f8").astype(float)
        shell = cls.zeros(meta["dim"], meta["actions"], meta["hidden"])
        if vec.size != shell.n_params:
            raise DimMismatch(f"{path}: {vec.size} values, expected {shell.n_params}")
        w = shell.with_flat(vec)
        w.seed = meta.get("seed", 0)
        return w


ToolWeights = RouterWeights


# ---------------------------------------------------------------- inference

def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass(frozen=True)
class RouterDecision:
    action: RoutingAction
    confidence: float
    logits: tuple
    probs: tuple = field(default=(), repr=False)


def hidden_and_logits(weights: RouterWeights, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != weights.dim:
        raise DimMismatch(f"features have dim {X.shape[1]}, head expects {weights.dim}")
    pre = X @ weights.W1 + weights.b1
    h = np.maximum(pre, 0.0)
    return X, pre, h, h @ weights.W2 + weights.b2


def logits(weights: RouterWeights, X) -> np.ndarray:
    return hidden_and_logits(weights, X)[3]


def forward(weights: RouterWeights, features, actions=RoutingAction) -> RouterDecision:
    z = logits(weights, features)[0]
    p = softmax(z)
    idx = int(np.argmax(z))  # first maximum wins ties
    return RouterDecision(list(actions)[idx], float(p[idx]), tuple(z.tolist()), tuple(p.tolist()))


def backward(weights: RouterWeights, X, pre, h, dZ) -> RouterWeights:
    """Parameter gradients given dLoss/dlogits (already averaged as needed)."""
    dW2 = h.T @ dZ
    db2 = dZ.sum(axis=0)
    dpre = (dZ @ weights.W2.T) * (pre > 0)
    dW1 = X.T @ dpre
    db1 = dpre.sum(axis=0)
    return RouterWeights(dW1, db1, dW2, db2)


# ---------------------------------------------------------------- focal loss

@dataclass
class FocalConfig:
    gamma_focal: float = 2.0
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=float)
        if self.gamma_focal < 0:
            raise ValueError("gamma_focal must be >= 0")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("class weights must be finite and positive")


def inverse_frequency_weights(labels, n_classes=4):
    """``N / (K * n_c)`` per class; classes absent from ``labels`` get 1."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.ones(n_classes)
    present = counts > 0
    w[present] = len(labels) / (n_classes * counts[present])
    return tuple(w.tolist())


def focal_from_logits(Z, y, cfg: FocalConfig):
    """Mean focal loss and its gradient with respect to the logits."""
    P = softmax(Z)
    n = len(y)
    # log-softmax keeps the loss differentiable for very confident mistakes
    logp = Z[np.arange(n), y] - logsumexp(Z)
    pt = np.exp(logp)
    w = np.asarray(cfg.class_weights, dtype=float)[y]
    g = cfg.gamma_focal
    one_m = -np.expm1(logp)
    loss = -w * one_m ** g * logp
    # dL/dz_j = c * (delta_jy - p_j) with c = -w[(1-pt)^g - g (1-pt)^(g-1) pt log pt]
    if g == 0:
        c = -w
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dterm = np.where(one_m > 0, g * one_m ** (g - 1.0) * pt * logp, 0.0)
        c = -w * (one_m ** g - dterm)
    onehot = np.zeros_like(P)
    onehot[np.arange(n), y] = 1.0
    dZ = c[:, None] * (onehot - P)
    return loss.mean(), dZ / n


def focal_loss_and_grad(weights: RouterWeights, features, label, cfg: FocalConfig | None = None):
    """Focal loss of one or more samples and the exact parameter gradient."""
    cfg = cfg or FocalConfig()
    y = np.atleast_1d(np.asarray([getattr(l, "value", l) for l in np.atleast_1d(label)], dtype=int))
    X, pre, h, Z = hidden_and_logits(weights, features)
    loss, dZ = focal_from_logits(Z, y, cfg)
    return float(loss), backward(weights, X, pre, h, dZ)


# ---------------------------------------------------------------- training

class Adam:
    """Per-parameter adaptive-moment updates over a list of arrays (in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1 - self.beta1 ** self.t
        b2t = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainResult:
    weights: RouterWeights
    train_accuracy: float
    holdout_accuracy: float | None
    epoch_losses: list
    holdout_index: np.ndarray | None = None


def accuracy(weights, X, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits(weights, X), axis=1) == np.asarray(y)))


def _as_arrays(dataset):
    X = np.stack([np.asarray(x, dtype=float) for x, _ in dataset])
    y = np.array([getattr(a, "value", a) for _, a in dataset], dtype=int)
    return X, y


def train_supervised(dataset, cfg: FocalConfig | None = None, epochs: int = 5, seed: int = 0,
                     batch: int = 64, lr: float = 1e-3, holdout: float = 0.2, hidden: int = HIDDEN,
                     init: RouterWeights | None = None, n_actions: int = 4) -> TrainResult:
    """Mini-batch Adam on the focal loss.

    A seeded ``holdout`` fraction is kept aside for the reported held-out
    accuracy (none when the dataset has fewer than five samples).
    """
    if not dataset:
        raise ValueError("empty dataset")
    cfg = cfg or FocalConfig()
    X, y = _as_arrays(dataset)
    rng = np.random.default_rng(seed)
    n = len(y)
    perm = rng.permutation(n)
    n_hold = int(round(holdout * n)) if n >= 5 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    w = init.copy() if init is not None else RouterWeights.init(X.shape[1], n_actions, hidden, seed)
    opt = Adam(w.arrays(), lr=lr)
    losses = []
    Xt, yt = X[train], y[train]
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            Xb, pre, h, Z = hidden_and_logits(w, Xt[idx])
            _, dZ = focal_from_logits(Z, yt[idx], cfg)
            opt.step(backward(w, Xb, pre, h, dZ).arrays())
        full, _ = focal_from_logits(logits(w, Xt), yt, cfg)
        losses.append(float(full))
        log.debug("epoch %d loss %.6f", epoch, full)
    return TrainResult(
        weights=w,
        train_accuracy=accuracy(w, Xt, yt),
        holdout_accuracy=accuracy(w, X[hold], y[hold]) if n_hold else None,
        epoch_losses=losses,
        holdout_index=hold,
    )


def derive_labels(corpus, extractor=None):
    """One ``(features, route_label(complexity))`` pair per injected turn."""
    from .corpus import injected_turns

    extractor = extractor or HashedNgramExtractor()
    out = [
        (extractor(turn.text, meeting.domain_tag), route_label(turn.complexity))
        for meeting, turn in injected_turns(corpus)
    ]
    if not out:
        raise EmptyCorpus("no injected turns to label")
    return out
