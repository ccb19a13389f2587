"""Dual-stream multiple-instance aggregator over frozen tile embeddings.

Instance stream: every embedding ``h_i`` gets a score ``W_p h_i``; the
maximum is the instance-level bag score and its argmax is the critical
instance ``m``. Bag stream: queries ``q_i = W_q h_i`` are compared with the
critical query through a softmax over inner products, and the resulting
attention weights average the information vectors ``v_i = W_v h_i`` into a bag
vector ``b`` scored by ``W_b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

WEIGHT_NAMES = ("W_p", "W_q", "W_v", "W_b")


@dataclass
class Bag:
    embeddings: np.ndarray  # N x K
    label: int | None = None
    slide_id: str = ""
    coords: list = field(default_factory=list)
    instance_labels: list | None = None

    def __len__(self) -> int:
        return len(self.embeddings)


@dataclass
class BagPrediction:
    instance_scores: np.ndarray
    critical_index: int
    attention: np.ndarray
    bag_score: float
    instance_max: float
    final_score: float

    @property
    def label(self) -> int:
        return int(self.final_score >= 0.0)  # sigmoid(score) >= 0.5

    @property
    def probability(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.final_score))


class MilModel:
    def __init__(self, W_p, W_q, W_v, W_b):
        self.params = {n: w if isinstance(w, Tensor) else Tensor(w, requires_grad=True)
                       for n, w in zip(WEIGHT_NAMES, (W_p, W_q, W_v, W_b))}
        k = self.params["W_v"].shape[0]
        shapes = {"W_p": (1, k), "W_v": (k, k), "W_b": (1, k)}
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise T.DimensionError(f"{name} must be {shape}, got {self.params[name].shape}")
        if self.params["W_q"].ndim != 2 or self.params["W_q"].shape[1] != k:
            raise T.DimensionError(f"W_q must be L_q x {k}, got {self.params['W_q'].shape}")

    @classmethod
    def init(cls, k: int, query_dim: int = 128, seed: int = 0) -> "MilModel":
        """Uniform(+-1/sqrt(K)) projections; both score rows start at zero.

        Zero score rows keep every bag neutral at the start, so the early
        gradients are not spent undoing a random instance ranking.
        """
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(k)
        W_q = rng.uniform(-bound, bound, size=(query_dim, k))
        W_v = rng.uniform(-bound, bound, size=(k, k))
        return cls(np.zeros((1, k)), W_q, W_v, np.zeros((1, k)))

    @classmethod
    def zeros(cls, k: int, query_dim: int = 128) -> "MilModel":
        return cls(np.zeros((1, k)), np.zeros((query_dim, k)), np.zeros((k, k)), np.zeros((1, k)))

    @property
    def k(self) -> int:
        return self.params["W_v"].shape[0]

    @property
    def query_dim(self) -> int:
        return self.params["W_q"].shape[0]

    def __getattr__(self, name):
        if name in WEIGHT_NAMES:
            return self.__dict__["params"][name]
        raise AttributeError(name)

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in WEIGHT_NAMES]

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "mil", "k": self.k, "query_dim": self.query_dim, **(extra or {})}
        checkpoint.save_weights(path, header, {n: self.params[n].data for n in WEIGHT_NAMES})

    @classmethod
    def load(cls, path) -> tuple["MilModel", dict]:
        header, blobs = checkpoint.load_weights(path)
        if header.get("kind") != "mil":
            raise checkpoint.FormatError(f"{path} holds a {header.get('kind')!r} checkpoint, not a MIL model")
        return cls(*(blobs[n] for n in WEIGHT_NAMES)), header


def _as_tensor(h) -> Tensor:
    return h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=float))


def instance_stream(h, model: MilModel):
    """Per-instance scores, critical index (smallest on ties), and the max score ``c_m``."""
    h = _as_tensor(h)
    scores = T.matmul(h, T.transpose(model.W_p))[:, 0]
    m = int(np.argmax(scores.data))
    return scores, m, scores[m]


def attention_scores(h, model: MilModel, m: int) -> Tensor:
    """Softmax over ``<q_i, q_m>``; the critical instance takes part in the softmax."""
    h = _as_tensor(h)
    if not 0 <= m < h.shape[0]:
        raise IndexError(f"critical index {m} outside bag of {h.shape[0]}")
    q = T.matmul(h, T.transpose(model.W_q))
    logits = T.matmul(q, T.reshape(q[m], (-1, 1)))[:, 0]
    return T.softmax(logits)


def bag_stream(h, model: MilModel, s: Tensor):
    """Bag vector ``b = sum_i s_i v_i`` and its score ``c_b = W_b b``."""
    h = _as_tensor(h)
    v = T.matmul(h, T.transpose(model.W_v))
    b = T.matmul(T.reshape(s, (1, -1)), v)
    c_b = T.matmul(b, T.transpose(model.W_b))[0, 0]
    return b[0], c_b


def final_score(c_m, c_b):
    """Average of the instance-stream and bag-stream scores."""
    if isinstance(c_m, Tensor) or isinstance(c_b, Tensor):
        return (_as_tensor(c_m) + _as_tensor(c_b)) * 0.5
    return 0.5 * (c_m + c_b)


def mil_loss(c_m: Tensor, c_b: Tensor, y: int) -> Tensor:
    """Half the sum of the binary cross-entropies of both stream scores."""
    if y not in (0, 1):
        raise ValueError(f"bag label must be 0 or 1, got {y}")
    return (T.binary_cross_entropy_with_logits(c_m, y) + T.binary_cross_entropy_with_logits(c_b, y)) * 0.5


def forward(h, model: MilModel):
    scores, m, c_m = instance_stream(h, model)
    s = attention_scores(h, model, m)
    b, c_b = bag_stream(h, model, s)
    return scores, m, c_m, s, b, c_b


def predict(bag, model: MilModel) -> BagPrediction:
    h = bag.embeddings if isinstance(bag, Bag) else bag
    with T.no_grad():
        scores, m, c_m, s, _, c_b = forward(h, model)
    return BagPrediction(scores.data.copy(), m, s.data.copy(), float(c_b.data),
                         float(c_m.data), float(final_score(float(c_m.data), float(c_b.data))))


@dataclass
class MilTrainConfig:
    lr: float = 2e-5
    epochs: int = 50
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    query_dim: int = 128


def train_mil(bags: list, config: MilTrainConfig, seed: int, model: MilModel | None = None,
              progress=None) -> tuple[MilModel, list]:
    """One AdamW step per bag, bags visited in a seeded shuffled order each epoch."""
    usable = []
    for bag in bags:
        if len(bag) == 0:
            logger.warning("skipping bag %s with no instances", bag.slide_id)
            continue
        usable.append(bag)
    if not usable:
        raise ValueError("no non-empty bags to train on")
    k = usable[0].embeddings.shape[1]
    model = model or MilModel.init(k, config.query_dim, seed)
    opt = T.AdamW(model.parameters(), lr=config.lr, betas=tuple(config.betas),
                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    trace = []
    tensors = [Tensor(b.embeddings) for b in usable]
    for epoch in range(config.epochs):
        total = 0.0
        for i in rng.permutation(len(usable)):
            _, _, c_m, _, _, c_b = forward(tensors[i], model)
            loss = mil_loss(c_m, c_b, int(usable[i].label))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        trace.append({"epoch": epoch, "loss": total / len(usable)})
        if progress:
            progress(epoch, trace[-1])
    return model, trace
