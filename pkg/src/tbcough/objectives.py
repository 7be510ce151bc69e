"""Class weights, weighted cross-entropy, GE2E and the combined objective.

Sign convention: every term here is a quantity to minimise. The combined
objective is ``(sum_b CE_b + alpha * sum_i GE2E_i) / B`` where ``CE_b`` is
the class-weighted negative log-likelihood of sample ``b``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

GE2E_W0 = 10.0
GE2E_B0 = -5.0
GE2E_MIN_W = 1e-6


class ObjectiveError(ValueError):
    pass


def class_weights(labels) -> np.ndarray:
    """beta indexed by label (0 = NOT_TB, 1 = TB).

    The under-represented class gets weight 1, the over-represented one
    its share of the training set. With an exact tie neither class is
    over-represented and both get 1.
    """
    labels = np.asarray(labels).astype(int)
    counts = np.bincount(labels, minlength=2)[:2]
    if np.any(counts == 0):
        raise ObjectiveError("class weights need both classes present")
    beta = np.ones(2)
    if counts[0] != counts[1]:
        major = int(np.argmax(counts))
        beta[major] = counts[major] / counts.sum()
    return beta


def weighted_ce(pred: np.ndarray, truth: np.ndarray, beta: np.ndarray,
                log_floor: float = 1e-12) -> float:
    """Batch mean of -beta . (y * log y_hat) on probability vectors.

    ``pred`` and ``truth`` are (B, 2) (or (2,) for one sample); ``beta`` is
    indexed by class. Probabilities below ``log_floor`` are clamped and a
    warning is logged.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ObjectiveError(f"prediction shape {pred.shape} vs truth {truth.shape}")
    true_prob = (pred * truth).sum(axis=1)
    if np.any(true_prob < log_floor):
        log.warning("weighted_ce: %d true-class probabilities clamped to %g",
                    int(np.sum(true_prob < log_floor)), log_floor)
    logp = np.log(np.maximum(pred, log_floor))
    per_sample = -(truth * logp * np.asarray(beta)[None, :]).sum(axis=1)
    return float(per_sample.mean())


@dataclass
class Ge2eParams:
    w: float = GE2E_W0
    b: float = GE2E_B0


def _onehot(labels: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ge2e_loss(emb: ad.Tensor, labels, w: ad.Tensor | float = GE2E_W0,
              b: ad.Tensor | float = GE2E_B0, n_classes: int = 2) -> ad.Tensor:
    """Softmax GE2E loss summed over all embeddings, classes as speakers.

    Each embedding is compared by cosine similarity with every class
    centroid; its own class centroid is computed without it. Similarities
    are scaled by ``w`` and shifted by ``b`` before the softmax over classes.
    """
    labels = np.asarray(labels).astype(int)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts < 2):
        raise ObjectiveError(f"GE2E needs >= 2 embeddings per class, got counts {counts.tolist()}")
    dt = emb.dtype
    w = ad.as_tensor(w, emb)
    b = ad.as_tensor(b, emb)
    onehot = _onehot(labels, n_classes, dt)
    sums = ad.Tensor(onehot.T) @ emb                              # (K, D)
    centroids = sums / counts[:, None].astype(dt)
    own_excl = (ad.Tensor(onehot) @ sums - emb) / (counts[labels] - 1)[:, None].astype(dt)
    en = ad.l2_normalize(emb)
    cos_all = en @ ad.transpose(ad.l2_normalize(centroids))       # (N, K)
    cos_own = (en * ad.l2_normalize(own_excl)).sum(axis=1, keepdims=True)
    sim = cos_all * (1.0 - onehot) + cos_own * onehot
    logits = sim * w + b
    return -(ad.log_softmax(logits, axis=1) * onehot).sum()


def weighted_ce_logits(logits: ad.Tensor, labels, beta) -> ad.Tensor:
    """Sum (not mean) over the batch of class-weighted NLL, from logits."""
    labels = np.asarray(labels).astype(int)
    weights = _onehot(labels, logits.shape[1], logits.dtype) * np.asarray(beta, dtype=logits.dtype)[None, :]
    return -(ad.log_softmax(logits, axis=1) * weights).sum()


def combined_loss(logits: ad.Tensor, labels, beta, embeddings: ad.Tensor | None = None,
                  alpha: float = 0.0, w: ad.Tensor | float = GE2E_W0,
                  b: ad.Tensor | float = GE2E_B0) -> ad.Tensor:
    """(sum_b weighted CE + alpha * sum_i GE2E) / B."""
    if alpha < 0:
        raise ObjectiveError("alpha must be >= 0")
    B = len(labels)
    total = weighted_ce_logits(logits, labels, beta)
    if alpha > 0:
        if embeddings is None:
            raise ObjectiveError("alpha > 0 needs embeddings")
        total = total + ge2e_loss(embeddings, labels, w, b) * alpha
    return total * (1.0 / B)
