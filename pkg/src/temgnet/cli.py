"""Command-line front end.

Exit codes: 0 success, 2 missing input, 3 data/domain error, 4 config error,
5 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, dataio, evalstats, kernels, sigproc
from .config import RunConfig
from .errors import ConfigError, ContractError, TemgnetError, VersionError
from .model import init_params, load_checkpoint, save_checkpoint
from .segmentation import SegmentDataset, segment, split_by_repetition
from .training import train, write_trace

log = logging.getLogger("temgnet")

EXIT_OK, EXIT_MISSING, EXIT_DATA, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3, 4, 5


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _update_manifest(run_dir, command, outputs, extra=None):
    """Record outputs (with hashes) and run metadata; the only place timestamps live."""
    path = Path(run_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[command] = {
        "outputs": {str(Path(o).relative_to(run_dir)): _sha256(o) for o in outputs},
        "metadata": {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "temgnet_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
            **(extra or {}),
        },
    }
    _dump_json(path, manifest)


def _subject_tag(subject):
    return f"subject_{int(subject):03d}"


def _preprocessed_files(cfg):
    files = sorted((cfg.run_dir / "preprocessed").glob("subject_*.temg"))
    if not files:
        raise FileNotFoundError(f"no preprocessed recordings under {cfg.run_dir / 'preprocessed'}; run 'preprocess' first")
    return files


# ---------------------------------------------------------------- commands


def cmd_preprocess(cfg: RunConfig):
    out_dir = cfg.run_dir / "preprocessed"
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, mu = cfg.filter_spec(), float(cfg["preprocess"]["mu"])
    train_reps = cfg["segment"]["train_reps"]
    outputs, clamped, sources = [], {}, {}
    for i, inp in enumerate(cfg.inputs()):
        if not inp.path.is_file():
            raise FileNotFoundError(f"input recording not found: {inp.path}")
        if inp.path.suffix.lower() == ".csv":
            rec = dataio.load_delimited(inp.path, subject=inp.subject or i + 1,
                                        sample_rate_hz=spec.sample_rate_hz, refined=inp.refined)
        else:
            rec = dataio.load_canonical(inp.path)
            if inp.subject is not None:
                rec.subject = inp.subject
        if rec.sample_rate_hz != spec.sample_rate_hz:
            raise ContractError(f"{inp.path}: sample rate {rec.sample_rate_hz} Hz, config expects {spec.sample_rate_hz}")
        out, stats, n_clamped = sigproc.preprocess(rec, spec, mu, train_reps)
        tag = _subject_tag(out.subject)
        if tag in sources:
            raise ContractError(f"subject {out.subject} appears in more than one input")
        sources[tag] = {"path": str(inp.path), "label_source": rec.label_source}
        dst = out_dir / f"{tag}.temg"
        dataio.save_canonical(dst, out)
        stats_path = out_dir / f"{tag}.scale.csv"
        with open(stats_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "max_abs"])
            for c, v in enumerate(stats.max_abs):
                w.writerow([c, repr(v)])
        clamped[tag] = n_clamped
        outputs += [dst, stats_path]
    _update_manifest(cfg.run_dir, "preprocess", outputs,
                     {"clamped_samples": clamped, "inputs": sources, "filter": asdict(spec), "mu": mu})
    return outputs


def _segment_one(cfg, path):
    rec = dataio.load_canonical(path)
    s = cfg["segment"]
    return rec, segment(rec, s["window_ms"], s["step_ms"], s["policy"])


def cmd_segment(cfg: RunConfig):
    out_dir = cfg.run_dir / "segments"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, counts = [], {}
    s = cfg["segment"]
    for path in _preprocessed_files(cfg):
        rec, ds = _segment_one(cfg, path)
        split = split_by_repetition(ds, s["train_reps"], s["test_reps"])
        dst = out_dir / f"{path.stem}.npz"
        np.savez(dst, start=ds.start, labels=ds.labels, repetitions=ds.repetitions, subjects=ds.subjects,
                 window=np.int64(ds.window), step=np.int64(ds.step))
        counts[path.stem] = {"windows": len(ds), "train": len(split.train), "test": len(split.test),
                             "dropped": split.dropped}
        outputs.append(dst)
    _update_manifest(cfg.run_dir, "segment", outputs, {"counts": counts})
    return outputs


def _load_splits(cfg):
    """{tag: Split} for every preprocessed subject, reusing saved segment indices when present."""
    s = cfg["segment"]
    out = {}
    for path in _preprocessed_files(cfg):
        rec = dataio.load_canonical(path)
        idx_path = cfg.run_dir / "segments" / f"{path.stem}.npz"
        if idx_path.exists():
            z = np.load(idx_path)
            ds = SegmentDataset([rec.signal], np.zeros(len(z["start"]), dtype=np.int64), z["start"],
                                z["labels"], z["repetitions"], z["subjects"], int(z["window"]), int(z["step"]))
        else:
            ds = segment(rec, s["window_ms"], s["step_ms"], s["policy"])
        out[path.stem] = split_by_repetition(ds, s["train_reps"], s["test_reps"])
    return out


def cmd_train(cfg: RunConfig):
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    splits = _load_splits(cfg)
    if cfg["train"]["mode"] == "pooled":
        jobs = {"pooled": SegmentDataset.concatenate([sp.train for sp in splits.values()])}
    else:
        jobs = {tag: sp.train for tag, sp in splits.items()}
    outputs = []
    meta = {"model": mcfg.to_dict(), "model_id": cfg["model"]["model_id"], "train": tcfg.to_dict(),
            "segment": dict(cfg["segment"])}
    for tag, ds in jobs.items():
        if ds.window != mcfg.window:
            raise ContractError(f"{tag}: segment window {ds.window} does not match model window {mcfg.window}")
        out_dir = cfg.run_dir / "models" / tag
        out_dir.mkdir(parents=True, exist_ok=True)
        model = init_params(mcfg, seed=int(cfg["model"]["seed"]))
        res = train(model, ds, tcfg)
        ck_meta = dict(meta, subject=tag, n_train_windows=len(ds))
        save_checkpoint(out_dir / "final.ckpt", res.model, ck_meta)
        save_checkpoint(out_dir / "best.ckpt", res.best_model, dict(ck_meta, best_epoch=res.best_epoch))
        write_trace(out_dir / "trace.csv", res.trace)
        outputs += [out_dir / "final.ckpt", out_dir / "best.ckpt", out_dir / "trace.csv"]
    _update_manifest(cfg.run_dir, "train", outputs, {"resolved_config": cfg.raw, "base_dir": str(cfg.base_dir)})
    return outputs


def _check_compatible(model, cfg):
    mcfg = cfg.model_config()
    if model.config != mcfg:
        raise VersionError(f"checkpoint model config {model.config.to_dict()} does not match run config {mcfg.to_dict()}")


def cmd_evaluate(cfg: RunConfig, checkpoint=None):
    splits = _load_splits(cfg)
    out_dir = cfg.run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    bs = int(cfg["evaluate"]["batch_size"])
    shared = load_checkpoint(checkpoint) if checkpoint else None
    per_subject, outputs = {}, []
    for tag, split in splits.items():
        if shared is not None:
            model = shared
        else:
            ck = cfg.run_dir / "models" / tag / "final.ckpt"
            if cfg["train"]["mode"] == "pooled":
                ck = cfg.run_dir / "models" / "pooled" / "final.ckpt"
            if not ck.exists():
                raise FileNotFoundError(f"checkpoint not found: {ck}")
            model = load_checkpoint(ck)
        _check_compatible(model, cfg)
        rep = evalstats.evaluate(model, split.test, batch_size=bs)
        per_subject[tag] = rep.accuracy
        _dump_json(out_dir / f"{tag}.eval.json", rep.to_dict())
        np.savetxt(out_dir / f"{tag}.confusion.csv", rep.confusion, fmt="%d", delimiter=",")
        outputs += [out_dir / f"{tag}.eval.json", out_dir / f"{tag}.confusion.csv"]
    accs = [per_subject[k] for k in sorted(per_subject)]
    summary = evalstats.aggregate_subjects(accs)
    report = {"model": cfg.model_config().to_dict(), "model_id": cfg["model"]["model_id"],
              "window_ms": cfg["segment"]["window_ms"], "per_subject": per_subject,
              "summary": summary.to_dict(), "format_version": 1}
    _dump_json(out_dir / "report.json", report)
    with open(out_dir / "accuracies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "accuracy"])
        for k in sorted(per_subject):
            w.writerow([k, repr(per_subject[k])])
    outputs += [out_dir / "report.json", out_dir / "accuracies.csv"]
    _update_manifest(cfg.run_dir, "evaluate", outputs)
    return outputs


def cmd_compare(reports, out_dir, mode="auto"):
    loaded = []
    for r in reports:
        r = Path(r)
        if not r.is_file():
            raise FileNotFoundError(f"report not found: {r}")
        body = json.loads(r.read_text())
        if body.get("format_version") != 1:
            raise VersionError(f"{r}: unsupported report version {body.get('format_version')}")
        loaded.append((r, body))
    if len(loaded) < 2:
        raise ContractError("compare needs at least two reports")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{i}:{p.parent.parent.name if p.name == 'report.json' else p.stem}" for i, (p, _) in enumerate(loaded)]
    summaries = {n: evalstats.aggregate_subjects([b["per_subject"][k] for k in sorted(b["per_subject"])]).to_dict()
                 for n, (_, b) in zip(names, loaded)}
    rows = []
    for i in range(len(loaded)):
        for j in range(i + 1, len(loaded)):
            a, b = loaded[i][1]["per_subject"], loaded[j][1]["per_subject"]
            common = sorted(set(a) & set(b))
            res = evalstats.wilcoxon_signed_rank([a[k] for k in common], [b[k] for k in common], mode=mode)
            rows.append({"a": names[i], "b": names[j], "n_subjects": len(common), **res.to_dict()})
    _dump_json(out_dir / "compare.json", {"summaries": summaries, "wilcoxon": rows})
    cols = ["a", "b", "n_subjects", "W", "W_plus", "W_minus", "n", "n_zero_dropped", "p", "mode", "band"]
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    with open(out_dir / "cohorts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["report", "n", "mean", "std", "q1", "median", "q3", "iqr"])
        for n, s in summaries.items():
            w.writerow([n, s["n"], repr(s["mean"]), "" if s["std"] is None else repr(s["std"]),
                        repr(s["q1"]), repr(s["median"]), repr(s["q3"]), repr(s["iqr"])])
    return [out_dir / "compare.json", out_dir / "compare.csv", out_dir / "cohorts.csv"]


def cmd_possim(checkpoint, out_dir):
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    sim, undefined = evalstats.pos_embedding_similarity(model.params["pos"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "possim.csv", sim, delimiter=",", fmt="%.17g")
    np.save(out_dir / "possim.npy", sim)
    near, far = evalstats.neighbor_contrast(sim)
    _dump_json(out_dir / "possim.json", {"n_rows": int(sim.shape[0]), "undefined_entries": int(undefined.sum()),
                                          "adjacent_mean": near, "distant_mean": far, "metric": "cosine"})
    return [out_dir / "possim.csv", out_dir / "possim.npy", out_dir / "possim.json"]


def cmd_synth(out, n_classes, noise, seed, subject):
    spec = dataio.SynthSpec(n_classes=n_classes, noise=noise, seed=seed, subject=subject)
    dataio.save_canonical(out, dataio.synth_generate(spec))
    return [Path(out)]


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="temgnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "segment", "train"):
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", required=True)
    sp = sub.add_parser("evaluate")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--checkpoint", help="evaluate this checkpoint on every subject instead of the trained ones")
    sp = sub.add_parser("compare")
    sp.add_argument("reports", nargs="+", help="report.json files produced by 'evaluate'")
    sp.add_argument("-o", "--out", default="compare")
    sp.add_argument("--mode", choices=("auto", "exact", "approx"), default="auto")
    sp = sub.add_parser("possim")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("-o", "--out", default="possim")
    sp = sub.add_parser("synth", help="write a synthetic recording in the canonical format")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--classes", type=int, default=17)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--subject", type=int, default=1)
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("preprocess", "segment", "train", "evaluate"):
        cfg = RunConfig.load(args.config)
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        return {"preprocess": cmd_preprocess, "segment": cmd_segment, "train": cmd_train}[args.command](cfg)
    if args.command == "compare":
        return cmd_compare(args.reports, args.out, args.mode)
    if args.command == "possim":
        return cmd_possim(args.checkpoint, args.out)
    return cmd_synth(args.out, args.classes, args.noise, args.seed, args.subject)


def main(argv=None):
    try:
        outputs = run(argv)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TemgnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    for o in outputs or []:
        print(o)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
