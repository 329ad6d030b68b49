"""``roilab`` command line: generate, train, compare, gradcheck.

Exit codes: 0 success, 1 verification failure (gradient check failed,
corrupt dataset or checkpoint, a training run failed), 2 usage error (bad
flags, bad config, unknown variant, missing seed, unusable output dir).

Every command that writes a directory also writes ``run_manifest.json``
there, recording the resolved config, seeds, code version, timestamps,
outputs and, for model runs, the initial backbone checksums.
``compare --manifest PATH`` replays a recorded comparison.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .checkpoint import CheckpointError, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import Dataset, DatasetFormatError, generate_context_shapes, load_dataset, save_dataset
from .gradcheck import DEFAULT_EPS, DEFAULT_THRESHOLD, fault_injection, run_suite
from .metrics import METRICS, build_report, render_report, report_filename
from .models import VARIANT_IDS, ModelVariant, build_model
from .train import deterministic, evaluate, train

log = logging.getLogger("roilab")

MANIFEST_NAME = "run_manifest.json"
EXTENSIONS = {"csv": "csv", "markdown": "md"}


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def code_version() -> dict:
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return {"package": __version__, "source_sha256": digest.hexdigest()}


def _parse_int_list(text: str, flag: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} is empty")
    if len(set(values)) != len(values):
        raise UsageError(f"{flag} has duplicates: {text}")
    return values


def _parse_variants(text: Optional[str]) -> List[str]:
    if text is None:
        return list(VARIANT_IDS)
    ids = [v.strip() for v in text.split(",") if v.strip()]
    if not ids:
        raise UsageError("--variants is empty")
    for v in ids:
        try:
            ModelVariant.parse(v)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if len(set(ids)) != len(ids):
        raise UsageError(f"--variants has duplicates: {text}")
    return ids


def _require_seed(seed: Optional[int]) -> int:
    if seed is None:
        raise UsageError("--seed is required; runs never default to a clock-derived seed")
    return seed


def _prepare_out(out: Optional[str]) -> Path:
    if out is None:
        raise UsageError("--out is required")
    root = Path(out)
    if (root / MANIFEST_NAME).exists():
        raise UsageError(f"{root} already holds a {MANIFEST_NAME}; choose a fresh --out directory")
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {root}: {exc.strerror}") from None
    return root


def _data_digest(directory: Path) -> str:
    return hashlib.sha256((directory / "manifest.jsonl").read_bytes()).hexdigest()


def _load_data(data: Optional[str]) -> Dataset:
    if data is None:
        raise UsageError("--data is required")
    return load_dataset(data)


def _backbone(cfg: ExperimentConfig, ds: Dataset):
    num_classes = ds.num_classes
    return cfg.backbone_config(
        input_size=ds.images.shape[-1], input_channels=ds.images.shape[1], num_classes=num_classes
    )


def write_manifest(root: Path, manifest: dict) -> Path:
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _base_manifest(command: str, cfg: ExperimentConfig, args, seeds) -> dict:
    return {
        "command": command,
        "argv": list(getattr(args, "argv", [])),
        "config": cfg.to_dict() if command != "generate" else {"synth": cfg.synth_config().to_dict()},
        "seeds": list(seeds),
        "deterministic": bool(getattr(args, "deterministic", False)),
        "version": code_version(),
        "started": _now(),
    }


def _file_name(variant: str) -> str:
    return variant.replace(":", "-")


def predictions_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "true_label", "predicted_label", "roi_area"])
    for r in records:
        w.writerow([r.sample_id, r.true_label, r.predicted_label, r.roi_area])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    seed = _require_seed(args.seed)
    cfg = load_config(args.config)
    root = _prepare_out(args.out)
    manifest = _base_manifest("generate", cfg, args, [seed])
    ds = generate_context_shapes(cfg.synth_config(), seed)
    save_dataset(ds, root)
    manifest["finished"] = _now()
    manifest["outputs"] = ["manifest.jsonl", "config.json", "images/", "masks/"]
    manifest["samples"] = len(ds)
    write_manifest(root, manifest)
    print(f"wrote {len(ds)} samples to {root}")
    return 0


def cmd_train(args) -> int:
    seed = _require_seed(args.seed)
    if args.variant is None:
        raise UsageError(f"--variant is required; valid ids: {', '.join(VARIANT_IDS)}")
    variant = _parse_variants(args.variant)
    if len(variant) != 1:
        raise UsageError("train takes exactly one --variant")
    cfg = load_config(args.config)
    ds = _load_data(args.data)
    root = _prepare_out(args.out)
    manifest = _base_manifest("train", cfg, args, [seed])
    manifest["variant"] = variant[0]
    manifest["data"] = {"path": str(Path(args.data).resolve()), "manifest_sha256": _data_digest(Path(args.data))}
    train_set, val_set = ds.split("train"), ds.split("test")
    with deterministic(args.deterministic):
        model = build_model(ModelVariant.parse(variant[0]), _backbone(cfg, ds), seed)
        manifest["backbone_checksums"] = {str(seed): model.backbone_checksum()}
        model, history = train(model, train_set, val_set if len(val_set) else None, cfg.train_config(seed))
    save_checkpoint(model, root / "model.ralb")
    (root / "history.csv").write_text(history.to_csv())
    manifest["finished"] = _now()
    manifest["outputs"] = ["model.ralb", "history.csv"]
    write_manifest(root, manifest)
    last = history.records[-1]
    print(f"{variant[0]} seed {seed}: train_acc {last.train_acc:.4f} val_acc {last.val_acc:.4f}")
    return 0


def run_compare(
    cfg: ExperimentConfig,
    data_dir: str,
    variants: Sequence[str],
    seeds: Sequence[int],
    out: Path,
    fmt: str,
    use_deterministic: bool,
    manifest: dict,
) -> dict:
    ds = load_dataset(data_dir)
    train_set, test_set = ds.split("train"), ds.split("test")
    if not len(test_set):
        raise UsageError(f"{data_dir} has no samples in the 'test' split")
    backbone = _backbone(cfg, ds)
    ecfg = cfg.eval_config()
    (out / "predictions").mkdir(exist_ok=True)

    pooled: Dict[str, list] = {v: [] for v in variants}
    checksums: Dict[str, str] = {}
    results: Dict[str, Dict[str, dict]] = {v: {} for v in variants}
    outputs = []
    with deterministic(use_deterministic):
        for seed in seeds:
            for variant in variants:
                model = build_model(ModelVariant.parse(variant), backbone, seed)
                checksum = model.backbone_checksum()
                if checksums.setdefault(str(seed), checksum) != checksum:
                    raise VerificationError(f"seed {seed}: {variant} starts from a different backbone")
                started = time.perf_counter()
                try:
                    model, _ = train(model, train_set, None, cfg.train_config(seed))
                except Exception as exc:
                    raise VerificationError(f"training failed for variant {variant}, seed {seed}: {exc}") from exc
                records = evaluate(model, test_set, ecfg.batch_size)
                name = f"predictions/seed{seed}_{_file_name(variant)}.csv"
                (out / name).write_text(predictions_csv(records))
                outputs.append(name)
                single = {m: build_report({variant: records}, ecfg.edges, m, backbone.num_classes, ecfg.footer) for m in METRICS}
                results[variant][str(seed)] = {m: single[m].footer[variant] for m in METRICS}
                log.info(
                    "%s seed %d: per_image %.4f  (%.0fs)",
                    variant, seed, results[variant][str(seed)]["per_image"], time.perf_counter() - started,
                )
                # tag ids by seed so pooled records stay distinct across seeds
                pooled[variant].extend(
                    type(r)(f"{seed}/{r.sample_id}", r.true_label, r.predicted_label, r.roi_area) for r in records
                )

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    for metric in METRICS:
        report = build_report(pooled, ecfg.edges, metric, backbone.num_classes, ecfg.footer)
        name = report_filename(metric, stamp, EXTENSIONS[fmt])
        (out / name).write_text(render_report(report, fmt))
        outputs.append(name)
    manifest.update(
        variants=list(variants),
        format=fmt,
        data={"path": str(Path(data_dir).resolve()), "manifest_sha256": _data_digest(Path(data_dir))},
        backbone_checksums=checksums,
        results=results,
        outputs=sorted(outputs),
    )
    return manifest


def cmd_compare(args) -> int:
    if args.manifest:
        try:
            recorded = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
        if recorded.get("command") != "compare":
            raise UsageError(f"{args.manifest} records a {recorded.get('command')!r} run, not compare")
        cfg = parse_config(recorded["config"], args.manifest)
        seeds, variants = recorded["seeds"], recorded["variants"]
        data = args.data or recorded["data"]["path"]
        fmt = recorded["format"]
        use_det = recorded["deterministic"] or args.deterministic
        if _data_digest(Path(data)) != recorded["data"]["manifest_sha256"]:
            raise VerificationError(f"dataset at {data} differs from the one recorded in {args.manifest}")
    else:
        if args.seeds is None:
            raise UsageError("--seeds is required (e.g. --seeds 1,2,3)")
        seeds = _parse_int_list(args.seeds, "--seeds")
        variants = _parse_variants(args.variants)
        cfg = load_config(args.config)
        data = args.data
        fmt = args.format or "csv"
        use_det = args.deterministic
    if data is None:
        raise UsageError("--data is required")
    out = _prepare_out(args.out)
    manifest = _base_manifest("compare", cfg, args, seeds)
    manifest["deterministic"] = bool(use_det)
    if args.manifest:
        manifest["replay_of"] = str(Path(args.manifest).resolve())
    run_compare(cfg, data, variants, seeds, out, fmt, use_det, manifest)
    manifest["finished"] = _now()
    write_manifest(out, manifest)
    print(f"compared {len(variants)} variant(s) x {len(seeds)} seed(s); reports in {out}")
    for name in manifest["outputs"]:
        if name.startswith("report_"):
            print("  " + name)
    return 0


def cmd_gradcheck(args) -> int:
    seeds = _parse_int_list(args.seeds, "--seeds") if args.seeds else [0, 1, 2, 3, 4]
    print(f"finite differences: central, eps={DEFAULT_EPS:g}, precision=float64, threshold={DEFAULT_THRESHOLD:g}")
    print(f"seeds: {','.join(map(str, seeds))}")
    if args.fault_inject:
        print(f"negative control: backward of {args.fault_inject!r} scaled by 1.5")
        try:
            with fault_injection(args.fault_inject):
                results = run_suite(seeds, include_model=not args.no_model)
        except AttributeError:
            raise UsageError(f"unknown op {args.fault_inject!r} for --fault-inject") from None
    else:
        results = run_suite(seeds, include_model=not args.no_model)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  max_rel_error  coords  skipped  status")
    for r in results:
        status = "ok" if r.passed() else "FAIL"
        print(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {r.checked:6d}  {r.skipped:7d}  {status}")
    failed = [r.name for r in results if not r.passed()]
    if failed:
        print(f"FAILED: {len(failed)} of {len(results)} checks above threshold")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="pin numeric libraries to one thread")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="roilab", description="ROI-conditioned classification experiments.")
    parser.add_argument("--version", action="version", version=f"roilab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic context-shapes dataset")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--variant", metavar="ID", help="one of: " + ", ".join(VARIANT_IDS))
    t.add_argument("--data", metavar="DIR")
    t.add_argument("--seed", type=int)

    c = sub.add_parser("compare", parents=[common], help="train and evaluate a variant x seed grid")
    c.add_argument("--data", metavar="DIR")
    c.add_argument("--seeds", metavar="N,N,...")
    c.add_argument("--variants", metavar="ID,ID,...", help="default: all nine")
    c.add_argument("--format", choices=sorted(EXTENSIONS))
    c.add_argument("--manifest", metavar="PATH", help="replay the comparison recorded in a run manifest")

    k = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a small model")
    k.add_argument("--seeds", metavar="N,N,...", help="default: 0,1,2,3,4")
    k.add_argument("--fault-inject", metavar="OP", help="negative control: corrupt the backward pass of OP")
    k.add_argument("--no-model", action="store_true", help="skip the whole-model checks")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "compare": cmd_compare, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"roilab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (VerificationError, DatasetFormatError, CheckpointError) as exc:
        print(f"roilab {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
