"""Idealised class inputs, attention traces and band-power summaries."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import CoughSample
from .features import FeatureMatrix, FeatureSpec
from .models import ModelError, ModelParams, forward, make_batch

log = logging.getLogger(__name__)


@dataclass
class DreamConfig:
    n_frames: int = 80
    steps: int = 1000
    step_size: float = 0.1
    l2: float = 0.0
    seed: int = 0
    milestone_every: int = 10

    def __post_init__(self):
        if self.n_frames < 1 or self.steps < 0 or self.step_size <= 0 or self.l2 < 0:
            raise ValueError("bad dream configuration")


@dataclass
class DreamResult:
    features: FeatureMatrix        # standardised input space, (n_frames, n_in)
    target: int
    probability: float             # target-class probability on the result
    converged: bool
    milestones: list[tuple[int, float]] = field(default_factory=list)

    def log_power(self, params: ModelParams) -> np.ndarray:
        """The idealised matrix mapped back to log-power feature units."""
        return self.features.values * params.tensors["norm.std"] + params.tensors["norm.mean"]


def _objective(params_t, arch, x: ad.Tensor, target: int, l2: float, keep: float):
    mask = np.ones(x.shape[:2])
    out = forward(arch, params_t, x, mask, train=False, keep_prob=keep)
    logp = ad.log_softmax(out.logits, axis=1)
    loss = -logp[:, target].sum()
    if l2 > 0:
        loss = loss + (x * x).mean() * l2
    return loss, float(np.exp(logp.data[0, target]))


def dream(params: ModelParams, target: int, config: DreamConfig = DreamConfig(),
          bin_centers: np.ndarray | None = None, spec: FeatureSpec | None = None) -> DreamResult:
    """Optimise an all-zero input towards ``target`` with the weights frozen.

    Adam on the input with a monotone safeguard: a step that raises the
    objective is undone and the step size halved, so the objective never
    increases between recorded milestones.
    """
    if params.arch == "lr":
        raise ModelError("dreaming needs a recurrent model")
    if target not in (0, 1):
        raise ValueError("target must be 0 or 1")
    weights = params.as_tensors(dtype=np.float64)
    keep = params.meta.get("keep_prob", 0.5)
    x = np.zeros((1, config.n_frames, params.n_in))
    lr = config.step_size
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8

    xt = ad.Tensor(x, requires_grad=True)
    loss, prob = _objective(weights, params.arch, xt, target, config.l2, keep)
    milestones = [(0, prob)]
    t = 0
    for step in range(1, config.steps + 1):
        if loss.requires_grad:
            loss.backward()
        g = xt.grad if xt.grad is not None else np.zeros_like(x)
        t += 1
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        cand = x - lr * (m_new / (1 - b1 ** t)) / (np.sqrt(v_new / (1 - b2 ** t)) + eps)
        ct = ad.Tensor(cand, requires_grad=True)
        c_loss, c_prob = _objective(weights, params.arch, ct, target, config.l2, keep)
        if c_loss.data <= loss.data:
            x, m, v, xt, loss, prob = cand, m_new, v_new, ct, c_loss, c_prob
        else:
            lr *= 0.5
            xt.grad = None
        if step % config.milestone_every == 0:
            milestones.append((step, prob))
    converged = prob >= 0.99
    if not converged:
        log.warning("dream: target probability %.4f after %d steps", prob, config.steps)
    if bin_centers is None:
        bin_centers = np.zeros(0)
    fm = FeatureMatrix(x[0].copy(), np.asarray(bin_centers), spec or FeatureSpec())
    return DreamResult(fm, target, prob, converged, milestones)


@dataclass
class AttentionTrace:
    weights: np.ndarray
    times: np.ndarray
    provenance: str = ""

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance, "times": self.times.tolist(),
                           "weights": self.weights.tolist()}, indent=2)

    def to_csv(self) -> str:
        rows = ["time_s,weight"] + [f"{t!r},{w!r}" for t, w in zip(self.times, self.weights)]
        return "\n".join(rows) + "\n"


def attention_trace(params: ModelParams, sample, pad_to: int | None = None) -> AttentionTrace:
    """Attention weight per true frame of one cough."""
    if params.arch != "bilstm-att":
        raise ModelError(f"{params.arch} has no attention block")
    fm = sample.features if isinstance(sample, CoughSample) else sample
    provenance = sample.clip_path if isinstance(sample, CoughSample) else ""
    batch = make_batch(params, [fm], pad_to=pad_to)
    out = forward(params.arch, params.as_tensors(), ad.Tensor(batch.x), batch.mask)
    n = int(batch.lengths[0])
    weights = out.attention.data[0, :n].astype(np.float64)
    spec = fm.spec if isinstance(fm, FeatureMatrix) else FeatureSpec()
    times = np.arange(n) * spec.hop / spec.sample_rate
    return AttentionTrace(weights, times, provenance)


def band_power_summary(matrix, bins) -> tuple[np.ndarray, np.ndarray]:
    """(bin center Hz, mean over frames) for each requested bin."""
    fm = matrix if isinstance(matrix, FeatureMatrix) else FeatureMatrix(np.asarray(matrix), np.zeros(0))
    bins = np.asarray(list(bins), dtype=int)
    if bins.size == 0:
        raise ValueError("empty bin subset")
    if bins.min() < 0 or bins.max() >= fm.n_bins:
        raise IndexError(f"bin subset outside [0, {fm.n_bins})")
    centers = fm.bin_centers[bins] if len(fm.bin_centers) else np.full(len(bins), np.nan)
    return centers, fm.values[:, bins].mean(axis=0)
