"""Greedy sequential forward search over feature bins."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

from .dataset import Corpus, SplitPlan
from .harness import TrainConfig, cross_validate

log = logging.getLogger(__name__)

Scorer = Callable[[list[int]], float]


@dataclass
class SfsTrace:
    steps: list[tuple[int, float]]
    selected: list[int]
    stop_reason: str
    best_score: float
    # per round: candidate bin -> score (skipped candidates absent)
    rounds: list[dict[int, float]] = field(default_factory=list)

    @property
    def order(self) -> list[int]:
        return [b for b, _ in self.steps]

    def to_json(self) -> str:
        d = asdict(self)
        d["steps"] = [[b, s] for b, s in self.steps]
        d["rounds"] = [{str(k): v for k, v in r.items()} for r in self.rounds]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SfsTrace":
        d = json.loads(text)
        return cls([(int(b), float(s)) for b, s in d["steps"]], d["selected"], d["stop_reason"],
                   d["best_score"], [{int(k): v for k, v in r.items()} for r in d["rounds"]])


def sfs(score: Scorer, n_bins: int, max_bins: int = 32, patience: int = 3) -> SfsTrace:
    """Add, each round, the bin whose inclusion scores highest (lowest index on ties).

    Stops after ``max_bins`` bins or ``patience`` consecutive rounds without
    beating the best score so far. ``selected`` is the prefix of the search
    order that reached the best score.
    """
    if not 1 <= max_bins <= n_bins:
        raise ValueError(f"max_bins must be in [1, {n_bins}]")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    chosen: list[int] = []
    steps: list[tuple[int, float]] = []
    rounds: list[dict[int, float]] = []
    best, best_len, stale = -math.inf, 0, 0
    reason = "max_bins"
    while len(chosen) < max_bins:
        scores: dict[int, float] = {}
        for b in range(n_bins):
            if b in chosen:
                continue
            s = score(chosen + [b])
            if not math.isfinite(s):
                log.warning("sfs: candidate bin %d gave non-finite score; skipped", b)
                continue
            scores[b] = float(s)
        rounds.append(scores)
        if not scores:
            reason = "no_candidates"
            break
        pick = max(scores, key=lambda b: (scores[b], -b))
        chosen.append(pick)
        steps.append((pick, scores[pick]))
        log.info("sfs round %d: +bin %d -> %.4f", len(chosen), pick, scores[pick])
        if scores[pick] > best:
            best, best_len, stale = scores[pick], len(chosen), 0
        else:
            stale += 1
            if stale >= patience:
                reason = "patience"
                break
    return SfsTrace(steps, chosen[:best_len], reason, best, rounds)


def cv_scorer(corpus: Corpus, plan: SplitPlan, config: TrainConfig) -> Scorer:
    """Mean dev AUC (best epoch) of the 4-fold protocol on the given bins."""
    def score(bins: list[int]) -> float:
        report = cross_validate(corpus, plan, config, bins=sorted(bins)).report
        return max(report.mean_dev_auc)
    return score


def run_sfs(corpus: Corpus, plan: SplitPlan, base_config: TrainConfig, max_bins: int = 32,
            patience: int = 3, epochs: int = 5) -> SfsTrace:
    """SFS with every candidate scored by cross-validation at a reduced epoch budget."""
    config = replace(base_config, epochs=epochs) if base_config.arch != "lr" else base_config
    n_bins = corpus.samples[0].features.n_bins
    return sfs(cv_scorer(corpus, plan, config), n_bins, max_bins, patience)


def mask_csv(bins: Sequence[int]) -> str:
    return ",".join(str(int(b)) for b in bins) + "\n"


def parse_mask_csv(text: str) -> list[int]:
    items = [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]
    if not items:
        raise ValueError("empty bin mask")
    bins = [int(t) for t in items]
    if len(set(bins)) != len(bins) or min(bins) < 0:
        raise ValueError("bin mask must hold distinct non-negative indices")
    return bins
