"""Training loop for the catalyzer.

Positives are the exact input-space k-NN of each training point, mined once.
Negatives are the k_neg-th output-space neighbor under the current model,
mined at the start of every epoch and frozen for that epoch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .lattice import LatticeCodebook
from .losses import combined, koleo, triplet
from .neuralnet import Catalyzer, OptimizerState, lr_schedule, sgd_step
from .vecio import brute_force_knn

__all__ = [
    "LAMBDA_BY_DOUT",
    "default_lambda",
    "TrainConfig",
    "EpochStats",
    "TrainingError",
    "mine_positives",
    "mine_negatives",
    "StraightThroughQuantizer",
    "train_epoch",
    "train",
]

log = logging.getLogger(__name__)

# best regularization weight per output dimension (r = 10 lattice, Deep1M)
LAMBDA_BY_DOUT = {16: 0.05, 24: 0.02, 32: 0.01, 40: 0.005}


def default_lambda(d_out: int) -> float:
    """Tabulated lambda for the closest tabulated output dimension."""
    key = min(LAMBDA_BY_DOUT, key=lambda d: (abs(d - d_out), d))
    return LAMBDA_BY_DOUT[key]


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.02
    k_pos: int = 10
    k_neg: int = 50
    d_out: int = 24
    d_hidden: int = 1024
    epochs: int = 300
    batch_size: int = 1024
    momentum: float = 0.9
    seed: int = 0
    end_to_end: bool = False
    r2: int | None = None

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for name in ("k_pos", "k_neg", "epochs", "d_out", "d_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.end_to_end and not self.r2:
            raise ValueError("end-to-end training needs a lattice radius")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    rank_loss: float
    koleo: float
    total: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.lr:g}\t{self.rank_loss:.6f}\t{self.koleo:.6f}\t{self.total:.6f}"


TSV_HEADER = "epoch\tlr\trank_loss\tkoleo\ttotal"


def mine_positives(train, k_pos: int) -> np.ndarray:
    """``(n, k_pos)`` exact input-space neighbors of every training point,
    itself excluded."""
    n = len(train)
    if k_pos >= n:
        raise ValueError(f"k_pos={k_pos} must be smaller than the training set ({n})")
    return brute_force_knn(train, train, k_pos, exclude_self=True)


def mine_negatives(model: Catalyzer, train, k_neg: int) -> np.ndarray:
    """Index of the k_neg-th nearest other point of each f(x_i) in output space."""
    n = len(train)
    if k_neg >= n:
        raise ValueError(f"k_neg={k_neg} must be smaller than the training set ({n})")
    y = model.forward(train, block=4096)
    return brute_force_knn(y, y, k_neg, exclude_self=True)[:, k_neg - 1]


class StraightThroughQuantizer:
    """Lattice quantization as a layer: quantized forward, identity backward."""

    def __init__(self, codebook: LatticeCodebook):
        self.codebook = codebook

    def forward(self, y) -> np.ndarray:
        return self.codebook.quantize(y)

    def backward(self, grad) -> np.ndarray:
        return grad


def train_epoch(model: Catalyzer, train, config: TrainConfig, positives, negatives,
                state: OptimizerState, rng: np.random.Generator, epoch: int = 0,
                quantizer: StraightThroughQuantizer | None = None) -> EpochStats:
    """One shuffled pass: one triplet per anchor, one SGD step per batch.

    Anchors, their positives and negatives go through the network as a single
    batch; the regularizer only sees the anchor rows.
    """
    n = len(train)
    order = rng.permutation(n)
    sums = np.zeros(3)
    seen = 0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        b = len(idx)
        if b < 2:
            continue
        pos = positives[idx, rng.integers(0, positives.shape[1], b)]
        neg = negatives[idx]
        y = model.forward(train[np.concatenate([idx, pos, neg])], train=True)
        norms = np.linalg.norm(y, axis=1)
        if not np.all(np.abs(norms - 1) < 1e-3):
            raise TrainingError(f"network output left the unit sphere at epoch {epoch}, batch starting "
                                f"{start} (norms in [{np.nanmin(norms):.3g}, {np.nanmax(norms):.3g}])")
        ia = np.arange(b)
        if quantizer is None:
            c = combined(y, (ia, ia + b, ia + 2 * b), config.lam, koleo_rows=ia)
            rank, reg, total, grad = c.rank, c.koleo, c.loss, c.grad
        else:
            yq = quantizer.forward(y)
            t = triplet(yq[ia], yq[ia + b], yq[ia + 2 * b])
            k = koleo(y[ia])
            grad = quantizer.backward(np.concatenate([t.grad_anchor, t.grad_positive, t.grad_negative]))
            grad[:b] += config.lam * k.grad
            rank, reg = t.loss, k.loss
            total = rank + config.lam * reg
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                f"rank={rank} koleo={reg}")
        grads, _ = model.backward(grad)
        try:
            sgd_step(model.params, grads, state)
        except FloatingPointError as e:
            raise TrainingError(f"epoch {epoch}, batch starting {start}: {e}") from e
        sums += b * np.array([rank, reg, total])
        seen += b
    rank, reg, total = sums / max(seen, 1)
    return EpochStats(epoch, state.lr, float(rank), float(reg), float(total))


def train(train_vecs, config: TrainConfig, model: Catalyzer | None = None, on_epoch=None):
    """Train a catalyzer on ``train_vecs``; returns ``(model, history)``.

    ``on_epoch`` is called with each :class:`EpochStats`.
    """
    config.validate()
    train_vecs = np.ascontiguousarray(train_vecs, dtype=np.float32)
    bad = np.flatnonzero(~np.isfinite(train_vecs).all(axis=1))
    if len(bad):
        raise ValueError(f"{len(bad)} training vectors have non-finite values (first: row {bad[0]})")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = Catalyzer(train_vecs.shape[1], config.d_out, config.d_hidden, seed=config.seed)
    quantizer = StraightThroughQuantizer(LatticeCodebook(config.d_out, config.r2)) if config.end_to_end else None
    log.info("training %r with %s", model, asdict(config))

    positives = mine_positives(train_vecs, config.k_pos)
    state = OptimizerState(lr=lr_schedule(0, config.epochs), momentum=config.momentum)
    history = []
    for epoch in range(config.epochs):
        state.lr = lr_schedule(epoch, config.epochs)
        negatives = mine_negatives(model, train_vecs, config.k_neg)
        stats = train_epoch(model, train_vecs, config, positives, negatives, state, rng,
                            epoch=epoch, quantizer=quantizer)
        history.append(stats)
        log.debug(stats.tsv())
        if on_epoch is not None:
            on_epoch(stats)
    return model, history
