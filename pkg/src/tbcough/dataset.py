"""Corpus ingestion, patient-wise stratified splitting and a synthetic corpus.

Labels are stored as ints: 1 = TB, 0 = NOT_TB. Stratification always works
on patients, never on coughs; cough counts per side are reported alongside.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import (AudioClip, AudioError, FeatureMatrix, FeatureSpec, extract_features,
                       hz_to_mel, mel_edges, mel_to_hz, read_wav, speed_perturb, write_wav)

TB, NOT_TB = 1, 0
LABEL_NAMES = {TB: "TB", NOT_TB: "NOT_TB"}
MANIFEST_HEADER = ["clip_path", "patient_id", "label", "corpus"]
TEST_FRACTION = 25 / 74


class CorpusError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class CoughSample:
    features: FeatureMatrix
    patient_id: str
    label: int
    corpus: str
    clip_path: str = ""
    speed: float = 1.0


@dataclass
class Corpus:
    samples: list[CoughSample]

    def patients(self) -> dict[str, tuple[int, str]]:
        """patient_id -> (label, corpus tag)."""
        out: dict[str, tuple[int, str]] = {}
        for s in self.samples:
            out.setdefault(s.patient_id, (s.label, s.corpus))
        return out

    def summary(self) -> dict:
        originals = [s for s in self.samples if s.speed == 1.0]
        pats = self.patients()
        return {
            "patients": {LABEL_NAMES[k]: v for k, v in sorted(Counter(l for l, _ in pats.values()).items())},
            "coughs": {LABEL_NAMES[k]: v for k, v in sorted(Counter(s.label for s in originals).items())},
            "patients_per_corpus": dict(sorted(Counter(c for _, c in pats.values()).items())),
            "total_patients": len(pats),
            "total_coughs": len(originals),
        }

    def select(self, patient_ids: Iterable[str], speeds: Sequence[float] | None = (1.0,)) -> list[CoughSample]:
        ids = set(patient_ids)
        return [s for s in self.samples
                if s.patient_id in ids and (speeds is None or s.speed in speeds)]


def parse_label(text: str) -> int:
    t = text.strip().upper()
    if t == "TB":
        return TB
    if t in ("NOT_TB", "NOTTB", "NON_TB"):
        return NOT_TB
    raise CorpusError(f"unknown label {text!r}")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise CorpusError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = []
        for n, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 4:
                raise CorpusError(f"row {n}: expected 4 fields, got {len(row)}")
            clip, pid, label, corpus = (c.strip() for c in row)
            try:
                lab = parse_label(label)
            except CorpusError as exc:
                raise CorpusError(f"row {n}: {exc}") from None
            rows.append({"row": n, "clip_path": clip, "patient_id": pid, "label": lab, "corpus": corpus})
    if not rows:
        raise CorpusError("no samples in manifest")
    seen: dict[str, int] = {}
    for r in rows:
        prev = seen.setdefault(r["patient_id"], r["label"])
        if prev != r["label"]:
            raise CorpusError(f"row {r['row']}: patient {r['patient_id']} has conflicting labels")
    return rows


def load_corpus(manifest_path, spec: FeatureSpec = FeatureSpec(),
                speeds: Sequence[float] = (1.0,)) -> Corpus:
    """One CoughSample per manifest row and speed factor."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    samples = []
    for r in rows:
        clip_path = Path(r["clip_path"])
        if not clip_path.is_absolute():
            clip_path = manifest_path.parent / clip_path
        try:
            clip = read_wav(clip_path)
        except AudioError as exc:
            raise CorpusError(f"row {r['row']}: {exc}") from None
        for f in speeds:
            try:
                feats = extract_features(speed_perturb(clip, f), spec)
            except AudioError as exc:
                raise CorpusError(f"row {r['row']}: {exc}") from None
            samples.append(CoughSample(feats, r["patient_id"], r["label"], r["corpus"],
                                       r["clip_path"], f))
    return Corpus(samples)


# -- splitting -----------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    dev: tuple[str, ...]


@dataclass
class SplitPlan:
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]
    folds: list[Fold]
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "train_patients": list(self.train_patients),
            "test_patients": list(self.test_patients),
            "folds": [{"train": list(f.train), "dev": list(f.dev)} for f in self.folds],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(tuple(d["train_patients"]), tuple(d["test_patients"]),
                   [Fold(tuple(f["train"]), tuple(f["dev"])) for f in d["folds"]], d["seed"])


def _strata(patients: dict[str, tuple[int, str]]) -> dict[tuple[int, str], list[str]]:
    out: dict[tuple[int, str], list[str]] = defaultdict(list)
    for pid in sorted(patients):
        out[patients[pid]].append(pid)
    return dict(sorted(out.items()))


def _check_sides(patients, sides: dict[str, Iterable[str]]) -> None:
    labels = {l for l, _ in patients.values()}
    tags = {c for _, c in patients.values()}
    for name, ids in sides.items():
        ids = list(ids)
        if {patients[p][0] for p in ids} != labels or {patients[p][1] for p in ids} != tags:
            raise SplitError(f"{name} side does not contain every label and corpus tag")


def _largest_remainder(sizes: list[int], total: int) -> list[int]:
    n = sum(sizes)
    quotas = [s * total / n for s in sizes]
    alloc = [min(max(int(np.floor(q)), 1), s - 1) for q, s in zip(quotas, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - np.floor(quotas[i])), i))
    while sum(alloc) < total:
        grown = False
        for i in order:
            if sum(alloc) == total:
                break
            if alloc[i] < sizes[i] - 1 and alloc[i] < np.ceil(quotas[i]):
                alloc[i] += 1
                grown = True
        if not grown:
            break
    while sum(alloc) > total:
        i = max(range(len(sizes)), key=lambda j: (alloc[j] - quotas[j], j))
        if alloc[i] <= 1:
            break
        alloc[i] -= 1
    return alloc


def _as_patients(source) -> dict[str, tuple[int, str]]:
    return source.patients() if isinstance(source, Corpus) else dict(source)


def split_train_test(source, seed: int, n_test: int | None = None) -> SplitPlan:
    """Patient-wise stratified train/test split, then 4 folds on the train side.

    ``source`` is a Corpus or a mapping patient_id -> (label, corpus). With
    the default ``n_test``, 74 patients split 49/25.
    """
    patients = _as_patients(source)
    strata = _strata(patients)
    labels = {l for l, _ in patients.values()}
    if len(labels) < 2:
        raise SplitError("both labels are required")
    for key, ids in strata.items():
        if len(ids) < 2:
            raise SplitError(f"stratum {LABEL_NAMES[key[0]]}/{key[1]} has {len(ids)} patient(s); need >= 2")
    n = len(patients)
    if n_test is None:
        n_test = int(round(n * TEST_FRACTION))
    alloc = _largest_remainder([len(v) for v in strata.values()], n_test)
    rng = np.random.default_rng(seed)
    test: list[str] = []
    for k, ids in zip(alloc, strata.values()):
        shuffled = list(rng.permutation(ids))
        test.extend(str(p) for p in shuffled[:k])
    test_set = set(test)
    train = tuple(sorted(p for p in patients if p not in test_set))
    test_t = tuple(sorted(test_set))
    _check_sides(patients, {"train": train, "test": test_t})
    folds = make_folds({p: patients[p] for p in train}, k=4, seed=seed)
    return SplitPlan(train, test_t, folds, seed)


def make_folds(train_side, k: int = 4, seed: int = 0) -> list[Fold]:
    """Stratified k-fold over patients; dev sets partition the train side."""
    patients = _as_patients(train_side)
    strata = _strata(patients)
    rng = np.random.default_rng([seed, 1])
    dev: list[list[str]] = [[] for _ in range(k)]
    for (label, tag), ids in strata.items():
        per_fold = [0] * k
        for pid in rng.permutation(ids):
            # stay within one of every other fold for this stratum; among those,
            # prefer folds still missing this label or tag, then the smallest
            low = min(per_fold)

            def need(j):
                have = [patients[p] for p in dev[j]]
                return (all(l != label for l, _ in have)) + (all(c != tag for _, c in have))

            j = min((j for j in range(k) if per_fold[j] == low),
                    key=lambda j: (-need(j), len(dev[j]), j))
            dev[j].append(str(pid))
            per_fold[j] += 1
    folds = []
    for j in range(k):
        d = tuple(sorted(dev[j]))
        tr = tuple(sorted(p for p in patients if p not in set(d)))
        _check_sides(patients, {f"fold {j + 1} dev": d, f"fold {j + 1} train": tr})
        folds.append(Fold(tr, d))
    return folds


# -- synthetic corpus ----------------------------------------------------------

@dataclass
class SynthConfig:
    n_patients: int = 74
    tb_fraction: float = 28 / 74
    coughs_per_patient: int = 8
    signal_bins: tuple[int, ...] = (10, 11, 12, 13, 14)
    signal_strength: float = 9.0
    seed: int = 0
    n_mels: int = 80
    sample_rate: int = 44100
    mean_duration: float = 0.62
    std_duration: float = 0.32
    min_duration: float = 0.25
    max_duration: float = 1.0
    # per-patient nuisance resonance gain range (dB)
    nuisance_db: tuple[float, float] = (6.0, 15.0)
    # per-patient spectral tilt (dB/octave) and overall level (dB) ranges
    tilt_db: tuple[float, float] = (-4.0, -1.0)
    level_db: tuple[float, float] = (-6.0, 6.0)

    def validate(self) -> None:
        if self.n_patients < 8:
            raise ValueError("n_patients must be >= 8")
        if not 0 < self.tb_fraction < 1:
            raise ValueError("tb_fraction must be in (0, 1)")
        if self.coughs_per_patient < 1:
            raise ValueError("coughs_per_patient must be >= 1")
        if any(b < 0 or b >= self.n_mels for b in self.signal_bins):
            raise ValueError(f"signal_bins must lie in [0, {self.n_mels})")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("bad duration bounds")
        if self.min_duration * self.sample_rate < 2048:
            raise ValueError("min_duration shorter than one analysis frame")


@dataclass
class Patient:
    patient_id: str
    label: int
    corpus: str
    res_hz: float
    res_db: float
    res_width: float
    tilt_db: float
    level_db: float
    noise_db: float


@dataclass
class SynthClip:
    clip: AudioClip
    patient: Patient
    onset_s: float


def signal_band_hz(cfg: SynthConfig) -> tuple[float, float]:
    """Frequency band boosted for TB clips, aligned with the planted mel filters."""
    e = hz_to_mel(mel_edges(cfg.n_mels, cfg.sample_rate))
    first, last = min(cfg.signal_bins), max(cfg.signal_bins)
    lo = mel_to_hz((e[first] + e[first + 1]) / 2)
    hi = mel_to_hz((e[last + 1] + e[last + 2]) / 2)
    return float(lo), float(hi)


def make_patients(cfg: SynthConfig, rng: np.random.Generator) -> list[Patient]:
    n_tb = int(round(cfg.n_patients * cfg.tb_fraction))
    labels = [TB] * n_tb + [NOT_TB] * (cfg.n_patients - n_tb)
    patients = []
    counters = Counter()
    for i, lab in enumerate(labels):
        corpus = "A" if counters[lab] % 2 == 0 else "B"
        counters[lab] += 1
        patients.append(Patient(
            patient_id=f"P{i:03d}",
            label=lab,
            corpus=corpus,
            res_hz=float(np.exp(rng.uniform(np.log(150.0), np.log(10000.0)))),
            res_db=float(rng.uniform(*cfg.nuisance_db)),
            res_width=float(rng.uniform(0.2, 0.5)),
            tilt_db=float(rng.uniform(*cfg.tilt_db)),
            level_db=float(rng.uniform(*cfg.level_db)),
            # corpus B is the noisier recording environment
            noise_db=-45.0 if corpus == "A" else -35.0,
        ))
    return patients


def _shaping_db(freqs: np.ndarray, p: Patient, band: tuple[float, float], strength: float) -> np.ndarray:
    octaves = np.log2(np.maximum(freqs, 20.0) / 1000.0)
    db = p.tilt_db * octaves
    db += p.res_db * np.exp(-0.5 * (np.log2(np.maximum(freqs, 20.0) / p.res_hz) / p.res_width) ** 2)
    if p.label == TB and strength > 0:
        db += np.where((freqs >= band[0]) & (freqs <= band[1]), strength, 0.0)
    return db


def synth_cough(cfg: SynthConfig, p: Patient, rng: np.random.Generator,
                onset_s: float | None = None, duration_s: float | None = None) -> SynthClip:
    """One cough: shaped exponentially decaying noise burst over background noise."""
    sr = cfg.sample_rate
    if duration_s is None:
        duration_s = float(np.clip(rng.normal(cfg.mean_duration, cfg.std_duration),
                                   cfg.min_duration, cfg.max_duration))
    n = int(round(duration_s * sr))
    if onset_s is None:
        onset_s = float(rng.uniform(0.02, 0.35) * duration_s)
    tau = rng.uniform(0.03, 0.06)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    gain = 10.0 ** (_shaping_db(freqs, p, signal_band_hz(cfg), cfg.signal_strength) / 20.0)
    burst = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * gain, n)
    burst /= np.sqrt(np.mean(burst ** 2))
    t = np.arange(n) / sr - onset_s
    attack = 0.005
    env = np.where(t < 0, 0.0, np.where(t < attack, t / attack, np.exp(-(t - attack) / tau)))
    level = 10.0 ** ((p.level_db + rng.uniform(-2.0, 2.0)) / 20.0)
    noise = rng.standard_normal(n) * 10.0 ** (p.noise_db / 20.0)
    x = 0.05 * level * (burst * env + noise)
    return SynthClip(AudioClip(x, sr), p, onset_s)


def synth_clips(cfg: SynthConfig) -> list[SynthClip]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    patients = make_patients(cfg, rng)
    return [synth_cough(cfg, p, rng) for p in patients for _ in range(cfg.coughs_per_patient)]


def synth_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Write 16-bit WAVs plus manifest.csv and synth_config.json; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    clips = synth_clips(cfg)
    counts: Counter = Counter()
    rows = []
    for sc in clips:
        pid = sc.patient.patient_id
        name = f"wav/{pid}_{counts[pid]:03d}.wav"
        counts[pid] += 1
        write_wav(out_dir / name, sc.clip)
        rows.append([name, pid, LABEL_NAMES[sc.patient.label], sc.patient.corpus])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    meta = asdict(cfg)
    meta["signal_band_hz"] = list(signal_band_hz(cfg))
    (out_dir / "synth_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return manifest


def corpus_from_clips(clips: Sequence[SynthClip], spec: FeatureSpec = FeatureSpec(),
                      speeds: Sequence[float] = (1.0,)) -> Corpus:
    """In-memory equivalent of synth_corpus followed by load_corpus."""
    samples = []
    counts: Counter = Counter()
    for sc in clips:
        pid = sc.patient.patient_id
        name = f"wav/{pid}_{counts[pid]:03d}.wav"
        counts[pid] += 1
        # same 16-bit quantisation as the on-disk corpus
        q = np.round(np.clip(sc.clip.samples, -1.0, 32767 / 32768) * 32768) / 32768.0
        clip = AudioClip(q, sc.clip.sample_rate)
        for f in speeds:
            samples.append(CoughSample(extract_features(speed_perturb(clip, f), spec), pid,
                                       sc.patient.label, sc.patient.corpus, name, f))
    return Corpus(samples)
