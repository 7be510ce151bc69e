"""Command-line entry point: ``tbcough <command> [flags]``.

Commands map onto pipeline stages: synth, features, train, evaluate, sfs,
dream and attention. Every command writes into ``--out`` a
``resolved_config.json`` holding the full configuration, the tool version and
SHA-256 hashes of its inputs. Bad flags exit with status 2, runtime failures
with status 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, atomic_write, load_checkpoint
from .dataset import (Corpus, CoughSample, SplitPlan, SynthConfig, load_corpus, split_train_test,
                      synth_corpus)
from .features import FeatureMatrix, FeatureSpec, bin_centers, extract_features, read_wav
from .harness import SPEEDS, CvReport, TrainConfig, cross_validate, restrict_samples, score_test_set
from .introspection import DreamConfig, attention_trace, band_power_summary, dream
from .selection import mask_csv, parse_mask_csv, run_sfs

log = logging.getLogger("tbcough")

CONFIG_SECTIONS = {"manifest", "features", "train", "sfs", "dream", "synth", "out", "seed", "arch",
                   "alpha", "bins"}
SFS_KEYS = {"max_bins", "patience", "epochs"}


class CliError(RuntimeError):
    """A runtime failure reported as a one-line diagnostic with exit status 1."""


class UsageError(ValueError):
    """Invalid configuration; reported like a bad flag (exit status 2)."""


# -- configuration ----------------------------------------------------------------

def _checked(cls, section: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return section


def load_run_config(path: str | None) -> dict:
    """Read a JSON run configuration, rejecting unknown keys at every level."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    _checked(FeatureSpec, cfg.get("features", {}), "features")
    _checked(TrainConfig, cfg.get("train", {}), "train")
    _checked(DreamConfig, cfg.get("dream", {}), "dream")
    _checked(SynthConfig, cfg.get("synth", {}), "synth")
    bad = set(cfg.get("sfs", {})) - SFS_KEYS
    if bad:
        raise UsageError(f"unknown key(s) in [sfs]: {', '.join(sorted(bad))}")
    return cfg


def _pick(args, cfg: dict, name: str, default=None):
    value = getattr(args, name, None)
    return value if value is not None else cfg.get(name, default)


def feature_spec(cfg: dict) -> FeatureSpec:
    return FeatureSpec(**cfg.get("features", {}))


def train_config(args, cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    seed = _pick(args, cfg, "seed")
    if seed is not None:
        section["seed"] = seed
    for key in ("arch", "alpha"):
        value = _pick(args, cfg, key)
        if value is not None:
            section[key] = value
    if getattr(args, "epochs", None) is not None:
        section["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        section["learning_rate"] = args.lr
    if getattr(args, "no_augment", False):
        section["augment"] = False
    return TrainConfig(**section)


def read_bins(args, cfg: dict) -> list[int] | None:
    path = _pick(args, cfg, "bins")
    if path is None:
        return None
    try:
        return parse_mask_csv(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read bin mask {path}: {exc}") from exc


# -- provenance -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_hashes(manifest: Path) -> dict[str, str]:
    """Hash of the manifest and of every audio file it references."""
    from .dataset import read_manifest
    out = {str(manifest): sha256_file(manifest)}
    for row in read_manifest(manifest):
        p = Path(row["clip_path"])
        p = p if p.is_absolute() else manifest.parent / p
        if p.exists():
            out[str(p)] = sha256_file(p)
    return out


def write_resolved(out: Path, command: str, resolved: dict, inputs: dict[str, str]) -> None:
    doc = {"command": command, "tool_version": __version__, "config": resolved, "inputs": inputs}
    atomic_write(out / "resolved_config.json", json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


# -- corpus access ----------------------------------------------------------------

def save_feature_cache(corpus: Corpus, spec: FeatureSpec, out: Path) -> Path:
    index = [{"patient_id": s.patient_id, "label": s.label, "corpus": s.corpus,
              "clip_path": s.clip_path, "speed": s.speed} for s in corpus.samples]
    arrays = {f"m{i}": s.features.values for i, s in enumerate(corpus.samples)}
    import io
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = out / "features.npz"
    atomic_write(path, buf.getvalue())
    atomic_write(out / "features_index.json",
                 json.dumps({"spec": spec.to_dict(), "samples": index}, indent=2, sort_keys=True))
    return path


def load_feature_cache(directory: Path) -> tuple[Corpus, FeatureSpec]:
    try:
        meta = json.loads((directory / "features_index.json").read_text())
        data = np.load(directory / "features.npz")
    except OSError as exc:
        raise CliError(f"no feature cache in {directory}: {exc}") from exc
    spec = FeatureSpec(**meta["spec"])
    centers = bin_centers(spec)
    samples = [CoughSample(FeatureMatrix(data[f"m{i}"], centers, spec), r["patient_id"], r["label"],
                           r["corpus"], r["clip_path"], r["speed"])
               for i, r in enumerate(meta["samples"])]
    return Corpus(samples), spec


def obtain_corpus(args, cfg: dict, speeds) -> tuple[Corpus, FeatureSpec, dict[str, str], dict]:
    """Corpus from ``--features`` cache or ``--manifest``; returns (corpus, spec, hashes, source)."""
    if getattr(args, "features", None):
        d = Path(args.features)
        corpus, spec = load_feature_cache(d)
        wanted = set(speeds)
        corpus = Corpus([s for s in corpus.samples if s.speed in wanted])
        hashes = {str(d / "features.npz"): sha256_file(d / "features.npz")}
        return corpus, spec, hashes, {"feature_cache": str(d.resolve())}
    manifest = _pick(args, cfg, "manifest")
    if manifest is None:
        raise UsageError("either --manifest or --features is required")
    manifest = Path(manifest)
    spec = feature_spec(cfg)
    corpus = load_corpus(manifest, spec, speeds)
    return corpus, spec, manifest_hashes(manifest), {"manifest": str(manifest.resolve())}


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, cfg) -> None:
    section = dict(cfg.get("synth", {}))
    seed = _pick(args, cfg, "seed")
    if seed is not None:
        section["seed"] = seed
    for key in ("n_patients", "coughs_per_patient", "signal_strength"):
        if getattr(args, key) is not None:
            section[key] = getattr(args, key)
    for key in ("signal_bins", "nuisance_db", "tilt_db", "level_db"):
        if key in section:
            section[key] = tuple(section[key])
    synth = SynthConfig(**section)
    synth.validate()
    out = Path(args.out)
    manifest = synth_corpus(synth, out)
    write_resolved(out, "synth", {"synth": asdict(synth)}, {})
    print(f"wrote {manifest}")


def cmd_features(args, cfg) -> None:
    speeds = (1.0,) if args.no_augment else SPEEDS
    corpus, spec, hashes, source = obtain_corpus(args, cfg, speeds)
    out = Path(args.out)
    save_feature_cache(corpus, spec, out)
    if args.csv:
        for i, s in enumerate(corpus.samples):
            name = Path(s.clip_path).stem + f"_x{s.speed:g}.csv"
            atomic_write(out / "csv" / name, s.features.to_csv())
    write_resolved(out, "features", {**source, "feature_spec": spec.to_dict(), "speeds": list(speeds)}, hashes)
    print(json.dumps(corpus.summary(), sort_keys=True))


def cmd_train(args, cfg) -> None:
    config = train_config(args, cfg)
    speeds = SPEEDS if config.augment else (1.0,)
    corpus, spec, hashes, source = obtain_corpus(args, cfg, speeds)
    bins = read_bins(args, cfg)
    out = Path(args.out)
    plan = split_train_test(corpus, seed=config.seed)
    atomic_write(out / "split_plan.json", plan.to_json())
    resolved = {**source, "feature_spec": spec.to_dict(), "train": config.to_dict(), "bins": bins,
                "seed": config.seed}
    write_resolved(out, "train", resolved, hashes)
    result = cross_validate(corpus, plan, config, out, bins)
    print(json.dumps(corpus.summary(), sort_keys=True))
    print(result.report.table_row())


def _run_dir_config(run: Path) -> dict:
    try:
        return json.loads((run / "resolved_config.json").read_text())["config"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"missing checkpoints: {run} holds no train output ({exc})") from exc


def _selected_models(run: Path, report: CvReport) -> list:
    models = []
    for fold in range(1, 5):
        path = run / f"fold{fold}" / f"epoch{report.selected_epoch:02d}.ckpt"
        if not path.exists():
            raise CliError(f"missing checkpoints: {path} not found")
        models.append(load_checkpoint(path, expect_arch=report.arch))
    return models


def cmd_evaluate(args, cfg) -> None:
    run = Path(args.run)
    if not (run / "cv_report.json").exists():
        raise CliError(f"missing checkpoints: no cv_report.json in {run}; run `train` first")
    report = CvReport.from_json((run / "cv_report.json").read_text())
    models = _selected_models(run, report)
    plan = SplitPlan.from_json((run / "split_plan.json").read_text())
    train_cfg = _run_dir_config(run)
    if not args.features and _pick(args, cfg, "manifest") is None:
        # default to the corpus the run was trained on
        if "feature_cache" in train_cfg:
            args.features = train_cfg["feature_cache"]
        elif "manifest" in train_cfg:
            cfg = {**cfg, "manifest": train_cfg["manifest"], "features": train_cfg["feature_spec"]}
    corpus, _, hashes, source = obtain_corpus(args, cfg, (1.0,))
    test = restrict_samples(corpus.select(plan.test_patients), report.bins)
    out = Path(args.out) if args.out else run / "evaluate"
    test_report, scores = score_test_set(models, test, report.gamma_mean, out)
    rows = ["clip_path,patient_id,label,score"] + [
        f"{s.clip_path},{s.patient_id},{s.label},{sc!r}" for s, sc in zip(test, scores)]
    atomic_write(out / "test_scores.csv", "\n".join(rows) + "\n")
    for i in range(1, 5):
        hashes[str(run / f"fold{i}" / f"epoch{report.selected_epoch:02d}.ckpt")] = sha256_file(
            run / f"fold{i}" / f"epoch{report.selected_epoch:02d}.ckpt")
    write_resolved(out, "evaluate", {**source, "run": str(run.resolve()), "gamma": report.gamma_mean,
                                      "selected_epoch": report.selected_epoch, "bins": report.bins},
                   hashes)
    print(test_report.to_json())


def cmd_sfs(args, cfg) -> None:
    config = train_config(args, cfg)
    section = {"max_bins": 32, "patience": 3, "epochs": 5, **cfg.get("sfs", {})}
    for key in SFS_KEYS:
        if getattr(args, key) is not None:
            section[key] = getattr(args, key)
    speeds = SPEEDS if config.augment else (1.0,)
    corpus, spec, hashes, source = obtain_corpus(args, cfg, speeds)
    plan = split_train_test(corpus, seed=config.seed)
    trace = run_sfs(corpus, plan, config, section["max_bins"], section["patience"], section["epochs"])
    out = Path(args.out)
    atomic_write(out / "sfs_trace.json", trace.to_json())
    atomic_write(out / "bins.csv", mask_csv(trace.selected))
    write_resolved(out, "sfs", {**source, "feature_spec": spec.to_dict(), "train": config.to_dict(),
                                "sfs": section}, hashes)
    print(f"selected bins: {trace.selected} (stop: {trace.stop_reason}, best {trace.best_score:.4f})")


def _model_from_args(args) -> tuple:
    """(params, spec, bins, hashes) from --checkpoint or the first fold of --run."""
    if args.checkpoint:
        path = Path(args.checkpoint)
        spec, bins = FeatureSpec(), None
    else:
        run = Path(args.run)
        if not (run / "cv_report.json").exists():
            raise CliError(f"missing checkpoints: no cv_report.json in {run}")
        report = CvReport.from_json((run / "cv_report.json").read_text())
        path = run / "fold1" / f"epoch{report.selected_epoch:02d}.ckpt"
        conf = _run_dir_config(run)
        spec = FeatureSpec(**conf["feature_spec"])
        bins = report.bins
    if not path.exists():
        raise CliError(f"missing checkpoints: {path} not found")
    return load_checkpoint(path), spec, bins, {str(path): sha256_file(path)}


def cmd_dream(args, cfg) -> None:
    params, spec, bins, hashes = _model_from_args(args)
    section = dict(cfg.get("dream", {}))
    seed = _pick(args, cfg, "seed")
    if seed is not None:
        section["seed"] = seed
    if args.steps is not None:
        section["steps"] = args.steps
    dconf = DreamConfig(**section)
    centers = bin_centers(spec)
    if bins is not None and len(centers):
        centers = centers[bins]
    out = Path(args.out)
    targets = {"tb": [1], "not_tb": [0], "both": [0, 1]}[args.target]
    summary = {}
    results = {}
    for t in targets:
        res = dream(params, t, dconf, centers, spec)
        name = "tb" if t == 1 else "not_tb"
        fm = FeatureMatrix(res.log_power(params), centers, spec)
        atomic_write(out / f"dream_{name}.csv", fm.to_csv())
        results[name] = fm
        summary[name] = {"probability": res.probability, "converged": res.converged,
                         "milestones": res.milestones}
    summary_bins = read_bins(args, cfg)
    if summary_bins is not None:
        lines = ["bin,center_hz," + ",".join(f"mean_{k}" for k in results)]
        means = {k: band_power_summary(v, summary_bins) for k, v in results.items()}
        first = next(iter(means.values()))[0]
        for j, b in enumerate(summary_bins):
            lines.append(f"{b},{first[j]!r}," + ",".join(repr(float(means[k][1][j])) for k in results))
        atomic_write(out / "band_power.csv", "\n".join(lines) + "\n")
    atomic_write(out / "dream.json", json.dumps(summary, indent=2, sort_keys=True))
    write_resolved(out, "dream", {"dream": asdict(dconf), "target": args.target, "bins": bins}, hashes)
    for k, v in summary.items():
        print(f"{k}: p={v['probability']:.4f} converged={v['converged']}")


def cmd_attention(args, cfg) -> None:
    params, spec, bins, hashes = _model_from_args(args)
    out = Path(args.out)
    for clip_path in args.clip:
        clip = read_wav(clip_path)
        fm = extract_features(clip, spec)
        if bins is not None:
            fm = fm.restrict(bins)
        sample = CoughSample(fm, "", 0, "", str(clip_path))
        trace = attention_trace(params, sample)
        stem = Path(clip_path).stem
        atomic_write(out / f"attention_{stem}.json", trace.to_json())
        atomic_write(out / f"attention_{stem}.csv", trace.to_csv())
        hashes[str(clip_path)] = sha256_file(clip_path)
        print(f"{stem}: {len(trace.weights)} frames, peak at {trace.times[int(np.argmax(trace.weights))]:.3f} s")
    write_resolved(out, "attention", {"feature_spec": spec.to_dict(), "bins": bins}, hashes)


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tbcough", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tbcough {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
        sp.add_argument("--out", required=out_required, help="output directory")

    def corpus_flags(sp):
        sp.add_argument("--manifest", help="corpus manifest CSV")
        sp.add_argument("--features", help="feature cache directory written by `features`")

    def train_flags(sp):
        sp.add_argument("--arch", choices=["lr", "bilstm", "bilstm-att"])
        sp.add_argument("--alpha", type=float, help="GE2E weight (bilstm-att only)")
        sp.add_argument("--bins", help="bin mask CSV restricting the features")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float, help="learning rate")
        sp.add_argument("--no-augment", action="store_true", help="disable speed perturbation")

    sp = sub.add_parser("synth", help="write a synthetic cough corpus")
    common(sp)
    sp.add_argument("--n-patients", dest="n_patients", type=int)
    sp.add_argument("--coughs-per-patient", dest="coughs_per_patient", type=int)
    sp.add_argument("--signal-strength", dest="signal_strength", type=float, help="planted gain in dB")

    sp = sub.add_parser("features", help="extract and cache features")
    common(sp)
    corpus_flags(sp)
    sp.add_argument("--no-augment", action="store_true", help="skip the speed-perturbed copies")
    sp.add_argument("--csv", action="store_true", help="also dump one CSV per clip")

    sp = sub.add_parser("train", help="4-fold cross-validated training")
    common(sp)
    corpus_flags(sp)
    train_flags(sp)

    sp = sub.add_parser("evaluate", help="score the held-out patients with the fold ensemble")
    common(sp, out_required=False)
    corpus_flags(sp)
    sp.add_argument("--run", required=True, help="output directory of `train`")

    sp = sub.add_parser("sfs", help="sequential forward search over bins")
    common(sp)
    corpus_flags(sp)
    train_flags(sp)
    sp.add_argument("--max-bins", dest="max_bins", type=int)
    sp.add_argument("--patience", type=int)

    for name, helptext in (("dream", "idealised input for each class"),
                           ("attention", "attention weights over time for clips")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--run", help="train output; uses fold 1 at the selected epoch")
        src.add_argument("--checkpoint", help="a single checkpoint file")
        if name == "dream":
            sp.add_argument("--target", choices=["tb", "not_tb", "both"], default="both")
            sp.add_argument("--steps", type=int)
            sp.add_argument("--bins", help="bin mask CSV for the band-power summary")
        else:
            sp.add_argument("--clip", nargs="+", required=True, help="WAV files")
    return p


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train, "evaluate": cmd_evaluate,
            "sfs": cmd_sfs, "dream": cmd_dream, "attention": cmd_attention}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        out = _pick(args, cfg, "out")
        if out is not None:
            args.out = out
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tbcough: error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"tbcough: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
