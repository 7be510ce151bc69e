"""Training loop, 4-fold cross-validation, epoch selection, EER thresholds, ensembling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import atomic_write, save_checkpoint
from .dataset import Corpus, CoughSample, SplitPlan
from .metrics import Metrics, auc, eer_threshold, evaluate, roc_curve
from .models import (ARCHS, ModelError, ModelParams, forward, init_params, lr_fit, make_batch,
                     predict, set_normalizer)
from .objectives import GE2E_MIN_W, class_weights, combined_loss

log = logging.getLogger(__name__)

SPEEDS = (0.9, 1.0, 1.1)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "bilstm-att"
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 128
    alpha: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    keep_prob: float = 0.5
    augment: bool = True
    l2_strength: float = 1.0
    hidden: int = 32
    project_query: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.hidden < 1:
            raise ValueError("epochs, batch_size, learning_rate and hidden must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")

    @property
    def effective_alpha(self) -> float:
        # the GE2E term belongs to the attention model only
        return self.alpha if self.arch == "bilstm-att" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads) -> None:
        for k, g in grads.items():
            params[k] -= (self.lr * g).astype(params[k].dtype)


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else Sgd(config.learning_rate)


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                       min_per_class: int = 0) -> list[np.ndarray]:
    """Shuffled index batches with each class spread evenly over the batches.

    With ``min_per_class`` > 0 the batch count is reduced until every batch
    holds at least that many samples of every class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    if min_per_class:
        smallest = min(int(np.sum(labels == c)) for c in classes)
        if smallest < min_per_class:
            raise TrainingError(f"need >= {min_per_class} samples of each class, got {smallest}")
        n_batches = min(n_batches, smallest // min_per_class)
    chunks = [np.array_split(rng.permutation(np.flatnonzero(labels == c)), n_batches) for c in classes]
    return [rng.permutation(np.concatenate([ch[j] for ch in chunks])) for j in range(n_batches)]


def restrict_samples(samples: Sequence[CoughSample], bins) -> list[CoughSample]:
    if bins is None:
        return list(samples)
    bins = list(bins)
    return [CoughSample(s.features.restrict(bins), s.patient_id, s.label, s.corpus, s.clip_path, s.speed)
            for s in samples]


@dataclass
class FoldResult:
    fold: int
    dev_auc: list[float]
    dev_scores: list[np.ndarray]
    dev_labels: np.ndarray
    checkpoints: list[ModelParams]
    paths: list[str] = field(default_factory=list)


def _dev_eval(params: ModelParams, dev: Sequence[CoughSample]) -> tuple[np.ndarray, float]:
    scores = predict(params, [s.features for s in dev])
    labels = np.array([s.label for s in dev])
    return scores, auc(scores, labels)


def train_fold(train: Sequence[CoughSample], dev: Sequence[CoughSample], config: TrainConfig,
               fold: int = 0, out_dir=None) -> FoldResult:
    """Train one fold; one checkpoint and one dev AUC per epoch.

    ``train`` may include speed-perturbed copies; ``dev`` should not.
    """
    if not train or not dev:
        raise TrainingError(f"fold {fold + 1}: empty train or dev side")
    out_dir = Path(out_dir) if out_dir is not None else None
    dev_labels = np.array([s.label for s in dev])
    meta = {"fold": fold + 1, "seed": config.seed}
    n_in = train[0].features.n_bins

    def finish(params: ModelParams, epoch: int, result: FoldResult) -> None:
        scores, a = _dev_eval(params, dev)
        ckpt = params.copy()
        ckpt.meta.update(meta, epoch=epoch)
        result.dev_auc.append(a)
        result.dev_scores.append(scores)
        result.checkpoints.append(ckpt)
        if out_dir is not None:
            path = out_dir / f"fold{fold + 1}" / f"epoch{epoch:02d}.ckpt"
            save_checkpoint(ckpt, path)
            result.paths.append(str(path))
        log.info("fold %d epoch %d dev AUC %.4f", fold + 1, epoch, a)

    result = FoldResult(fold + 1, [], [], dev_labels, [])
    if config.arch == "lr":
        frames = np.concatenate([s.features.values for s in train])
        labels = np.concatenate([np.full(s.features.n_frames, s.label) for s in train])
        params = lr_fit(frames, labels, config.l2_strength)
        finish(params, 1, result)
        return result

    params = init_params(config.arch, n_in, seed=[config.seed, fold, 0], hidden=config.hidden,
                         project_query=config.project_query)
    params.meta["keep_prob"] = config.keep_prob
    set_normalizer(params, [s.features.values for s in train])
    labels = np.array([s.label for s in train])
    beta = class_weights(labels)
    alpha = config.effective_alpha
    rng = np.random.default_rng([config.seed, fold, 1])
    opt = make_optimizer(config)
    names = params.trainable
    if alpha == 0:
        names = [k for k in names if not k.startswith("ge2e.")]
    for epoch in range(1, config.epochs + 1):
        batches = stratified_batches(labels, config.batch_size, rng, min_per_class=2 if alpha > 0 else 0)
        for bi, idx in enumerate(batches):
            batch = make_batch(params, [train[i].features for i in idx])
            w = params.as_tensors(requires_grad=True)
            try:
                out = forward(config.arch, w, ad.Tensor(batch.x), batch.mask, train=True, rng=rng,
                              keep_prob=config.keep_prob)
                loss = combined_loss(out.logits, labels[idx], beta, out.embedding, alpha,
                                     w.get("ge2e.w", 10.0), w.get("ge2e.b", -5.0))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"fold {fold + 1} epoch {epoch} batch {bi + 1}: {exc}") from exc
            if not np.isfinite(loss.data).all():
                raise TrainingError(f"fold {fold + 1} epoch {epoch} batch {bi + 1}: non-finite loss")
            loss.backward()
            grads = {k: w[k].grad for k in names if w[k].grad is not None}
            opt.step(params.tensors, grads)
            if "ge2e.w" in params.tensors:
                np.maximum(params.tensors["ge2e.w"], GE2E_MIN_W, out=params.tensors["ge2e.w"])
        finish(params, epoch, result)
    return result


# -- cross-validation -----------------------------------------------------------

def select_epoch(dev_auc_rows) -> int:
    """1-based epoch with the highest mean dev AUC across folds; earliest on ties."""
    rows = [list(r) for r in dev_auc_rows]
    if not rows:
        raise ValueError("no folds")
    if len({len(r) for r in rows}) != 1:
        raise ValueError("folds report different epoch counts")
    return int(np.argmax(np.mean(np.array(rows, dtype=np.float64), axis=0))) + 1


@dataclass
class CvReport:
    arch: str
    epochs: int
    dev_auc: list[list[float]]
    mean_dev_auc: list[float]
    selected_epoch: int
    gammas: list[float]
    eers: list[float]
    gamma_mean: float
    gamma_std: float
    auc_mean: float
    auc_std: float
    seed: int
    config: dict
    bins: list[int] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CvReport":
        return cls(**json.loads(text))

    def table_row(self) -> str:
        """Threshold and AUC as 'mean +- std', the layout used for fold summaries."""
        return (f"{self.arch}: gamma {self.gamma_mean:.3f} +- {self.gamma_std:.3f}, "
                f"AUC {self.auc_mean:.3f} +- {self.auc_std:.3f}")


@dataclass
class CvResult:
    report: CvReport
    folds: list[FoldResult]

    @property
    def models(self) -> list[ModelParams]:
        e = self.report.selected_epoch
        return [f.checkpoints[e - 1] for f in self.folds]


def training_samples(corpus: Corpus, patients, config: TrainConfig) -> list[CoughSample]:
    speeds = SPEEDS if config.augment else (1.0,)
    return corpus.select(patients, speeds)


def cross_validate(corpus: Corpus, plan: SplitPlan, config: TrainConfig, out_dir=None,
                   bins=None) -> CvResult:
    folds = []
    for j, fold in enumerate(plan.folds):
        train = restrict_samples(training_samples(corpus, fold.train, config), bins)
        dev = restrict_samples(corpus.select(fold.dev), bins)
        folds.append(train_fold(train, dev, config, j, out_dir))
    rows = [f.dev_auc for f in folds]
    sel = select_epoch(rows)
    gammas, eers = [], []
    for f in folds:
        g, e = eer_threshold(f.dev_scores[sel - 1], f.dev_labels)
        gammas.append(g)
        eers.append(e)
    sel_auc = [r[sel - 1] for r in rows]
    report = CvReport(
        arch=config.arch,
        epochs=len(rows[0]),
        dev_auc=rows,
        mean_dev_auc=[float(v) for v in np.mean(rows, axis=0)],
        selected_epoch=sel,
        gammas=gammas,
        eers=eers,
        gamma_mean=float(np.mean(gammas)),
        gamma_std=float(np.std(gammas)),
        auc_mean=float(np.mean(sel_auc)),
        auc_std=float(np.std(sel_auc)),
        seed=config.seed,
        config=config.to_dict(),
        bins=None if bins is None else [int(b) for b in bins],
    )
    if out_dir is not None:
        atomic_write(Path(out_dir) / "cv_report.json", report.to_json())
    return CvResult(report, folds)


# -- test time ------------------------------------------------------------------

def ensemble_predict(models: Sequence[ModelParams], samples) -> np.ndarray:
    """Mean TB probability over the fold models, one value per sample."""
    if not models:
        raise ModelError("no models to ensemble")
    arch, n_in = models[0].arch, models[0].n_in
    for m in models:
        if m.arch != arch or m.n_in != n_in:
            raise ModelError("ensemble members differ in architecture or input width")
    mats = [s.features if isinstance(s, CoughSample) else s for s in samples]
    return np.mean([predict(m, mats) for m in models], axis=0)


def patient_scores(scores: np.ndarray, samples: Sequence[CoughSample]):
    """Mean cough score per patient, with that patient's label."""
    ids = sorted({s.patient_id for s in samples})
    pos = {p: i for i, p in enumerate(ids)}
    total = np.zeros(len(ids))
    count = np.zeros(len(ids))
    labels = np.zeros(len(ids), dtype=int)
    for sc, s in zip(scores, samples):
        total[pos[s.patient_id]] += sc
        count[pos[s.patient_id]] += 1
        labels[pos[s.patient_id]] = s.label
    return ids, total / count, labels


@dataclass
class HeldOutReport:
    cough: Metrics
    patient: Metrics
    gamma: float

    def to_json(self) -> str:
        return json.dumps({"gamma": self.gamma, "cough": self.cough.to_dict(),
                           "patient": self.patient.to_dict()}, indent=2, sort_keys=True)


def score_test_set(models: Sequence[ModelParams], test: Sequence[CoughSample], gamma: float,
                out_dir=None) -> tuple[HeldOutReport, np.ndarray]:
    scores = ensemble_predict(models, test)
    labels = np.array([s.label for s in test])
    _, pscores, plabels = patient_scores(scores, test)
    report = HeldOutReport(evaluate(scores, labels, gamma), evaluate(pscores, plabels, gamma), gamma)
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write(out_dir / "metrics.json", report.to_json())
        roc = roc_curve(scores, labels)
        lines = ["threshold,fpr,tpr"] + [f"{t!r},{f!r},{p!r}" for t, f, p in roc]
        atomic_write(out_dir / "roc.csv", "\n".join(lines) + "\n")
    return report, scores


@dataclass
class Experiment:
    cv: CvResult
    test: HeldOutReport
    test_scores: np.ndarray
    test_samples: list[CoughSample]


def run_experiment(corpus: Corpus, plan: SplitPlan, config: TrainConfig, out_dir=None,
                   bins=None) -> Experiment:
    cv = cross_validate(corpus, plan, config, out_dir, bins)
    test = restrict_samples(corpus.select(plan.test_patients), bins)
    report, scores = score_test_set(cv.models, test, cv.report.gamma_mean, out_dir)
    return Experiment(cv, report, scores, test)
