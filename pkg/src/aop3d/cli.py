"""Command-line entry point tying the pipeline together.

Every subcommand writes machine-readable JSON (deterministic key order,
17-significant-digit floats) to stdout or to --out files; human-oriented
progress goes to stderr. Exit codes: 0 success, 1 domain error, 2 usage
error. Commands that draw random numbers require --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile

from . import jsonio
from .errors import Aop3dError

INTENSITY_KINDS = ("raw", "mask-overlay", "distance")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj, path=None) -> None:
    text = jsonio.dumps(obj)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synthgen import SynthConfig, generate_benchmark
    from .volume import write_volume

    with open(args.config) as f:
        cfg = SynthConfig.from_json({**json.load(f), "seed": args.seed})
    image, labels = generate_benchmark(cfg)
    write_volume(image, args.out_intensity)
    write_volume(labels, args.out_labels)
    _say(f"synthesized {labels.n_instances} instances into {args.out_labels}")
    _emit({"instances": labels.n_instances, "shape": list(labels.shape),
           "seed": args.seed})
    return 0


def cmd_corrupt(args) -> int:
    from .synthgen import CorruptionSpec, corrupt_labels
    from .volume import read_volume, write_volume

    labels = read_volume(args.labels)
    with open(args.spec) as f:
        spec = CorruptionSpec.from_json({**json.load(f), "seed": args.seed})
    out = corrupt_labels(labels, spec)
    write_volume(out, args.out)
    _emit({"instances": out.n_instances, "seed": args.seed})
    return 0


def cmd_eval(args) -> int:
    from .metrics import IpqWeights, evaluate_ipq
    from .volume import read_volume

    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    report = evaluate_ipq(
        pred, gt, tau=args.tau,
        k=IpqWeights(args.k1, args.k2, args.k3), iq_mode=args.iq_mode,
    )
    _emit(report.to_json())
    return 0


def cmd_postprocess(args) -> int:
    from .postproc import PostprocParams, apply_postprocessing
    from .volume import read_volume, write_volume

    labels = read_volume(args.labels)
    with open(args.params) as f:
        params = PostprocParams.from_json(json.load(f))
    out = apply_postprocessing(labels, params)
    write_volume(out, args.out)
    _emit({"instances": out.n_instances})
    return 0


def cmd_optimize_seg(args) -> int:
    from .boengine import save_trace
    from .metrics import IpqWeights
    from .segopt import BenchmarkSet, optimize_segmentation

    bench = BenchmarkSet.from_manifest(args.bench)
    result = optimize_segmentation(
        bench,
        k=IpqWeights(args.k1, args.k2, args.k3),
        budget=args.budget,
        strategy=args.strategy,
        seed=args.seed,
        tau=args.tau,
    )
    if args.trace:
        save_trace(result.trace, args.trace)
        _say(f"trace written to {args.trace}")
    _say(
        f"best model {result.best_model!r} ipq {result.best_ipq:.4f} "
        f"(baseline {result.baseline_ipq:.4f})"
    )
    _emit(result.to_json(), args.out)
    return 0


def cmd_extract(args) -> int:
    from .instances import extract_instances, save_crop
    from .volume import read_volume

    labels = read_volume(args.labels)
    intensity = read_volume(args.intensity)
    crops = extract_instances(labels, intensity, margin=args.margin,
                              image_id=args.image_id)
    for crop in crops:
        save_crop(crop, args.out_dir)
    _say(f"saved {len(crops)} crops under {args.out_dir}")
    _emit({"crops": len(crops), "image": args.image_id})
    return 0


def cmd_features(args) -> int:
    from .instances import (geometric_features, list_crops, load_crop,
                            write_features_csv)

    keys = list_crops(args.crops)
    if not keys:
        raise Aop3dError(f"no crops found under {args.crops}")
    rows = []
    for image_id, instance_id in keys:
        crop = load_crop(os.path.join(args.crops, image_id, str(instance_id)))
        rows.append((image_id, instance_id, geometric_features(crop)))
    write_features_csv(rows, args.out)
    _emit({"rows": len(rows)})
    return 0


def cmd_label_spread(args) -> int:
    import csv

    import numpy as np

    from .instances import read_features_csv
    from .semisup import SeedLabels, label_spread, pca_reduce

    keys, matrix = read_features_csv(args.features)
    with open(args.seeds) as f:
        seed_map = json.load(f)["labels"]
    index = {f"{img}/{iid}": i for i, (img, iid) in enumerate(keys)}
    labels = {}
    for key, cls in seed_map.items():
        if key not in index:
            raise Aop3dError(f"seed references unknown instance {key!r}")
        labels[index[key]] = int(cls)
    n_classes = args.classes or (max(labels.values()) + 1)
    reduced = pca_reduce(matrix, variance_kept=args.variance_kept)
    result = label_spread(
        reduced.reduced,
        SeedLabels(labels=labels, n_classes=n_classes),
        alpha=args.alpha,
        gamma=args.gamma,
        iters=args.iters,
        tol=args.tol,
    )
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "instance_id", "class", "confidence", "flagged"])
        for i, (img, iid) in enumerate(keys):
            w.writerow([img, iid, int(result.labels[i]),
                        f"{float(result.confidence[i]):.17g}",
                        int(result.flagged[i])])
    _emit({
        "labeled": len(keys),
        "seeded": len(labels),
        "dimensions": int(reduced.reduced.shape[1]),
        "retained_variance": float(reduced.retained_variance),
        "iterations": result.n_iter,
    })
    return 0


def cmd_annotate(args) -> int:
    from .annoserve import serve

    serve(args.crops, args.classes, args.labels_out, port=args.port,
          host=args.host, ui_dir=args.ui_dir)
    return 0


def cmd_import_tiff(args) -> int:
    from .tiff import import_tiff
    from .volume import write_volume

    v = import_tiff(args.tiff_in)
    write_volume(v, args.out)
    _emit({"shape": list(v.shape)})
    return 0


# ------------------------------------------------- design-space optimizer


def run_external_objective(command_template: str, config: dict) -> float:
    """Write config JSON to a temp file, run the command, parse
    {"objective": float} from its stdout."""
    fd, path = tempfile.mkstemp(suffix=".json", prefix="aop3d_design_")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(config, f)
        command = command_template.replace("{config}", path)
        proc = subprocess.run(command, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(
                f"command exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        value = None
        for line in reversed(proc.stdout.strip().splitlines()):
            try:
                obj = json.loads(line)
            except ValueError:
                continue
            if isinstance(obj, dict) and "objective" in obj:
                value = float(obj["objective"])
                break
        if value is None:
            raise RuntimeError(
                f"no {{\"objective\": ...}} line in stdout: {proc.stdout.strip()[:200]!r}"
            )
        return value
    finally:
        os.unlink(path)


def optimize_design(spec: dict, budget: int, seed: int, on_trial=None):
    """Random-forest BO over a discrete design space with an external
    command as the objective."""
    from .boengine import CategoricalDim, SearchSpace, optimize

    dims = spec.get("dims")
    command = spec.get("command")
    if not dims or not isinstance(dims, dict):
        raise Aop3dError("design spec needs a non-empty 'dims' object")
    if not command or "{config}" not in command:
        raise Aop3dError("design spec 'command' must contain a {config} placeholder")
    space = SearchSpace(categoricals=tuple(
        CategoricalDim(name, tuple(choices)) for name, choices in dims.items()
    ))
    return optimize(
        space,
        lambda config: run_external_objective(command, config),
        budget=budget,
        strategy="bayes",
        seed=seed,
        on_trial=on_trial,
    )


def cmd_optimize_design(args) -> int:
    from .boengine import save_trace

    with open(args.spec) as f:
        spec = json.load(f)
    trace = optimize_design(spec, budget=args.budget, seed=args.seed)
    if args.trace:
        save_trace(trace, args.trace)
    best = trace.best
    ok = [t for t in trace.trials if t.ok]
    result = {
        "best_config": best.config if best else None,
        "best_objective": best.objective if best else None,
        "n_trials": len(trace.trials),
        "n_failed": len(trace.trials) - len(ok),
        "seed": args.seed,
    }
    _emit(result, args.out)
    return 0 if ok else 1


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aop3d",
        description="3D segmentation evaluation, postprocessing optimization, "
                    "and assisted annotation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic benchmark volume pair")
    s.add_argument("--config", required=True, help="SynthConfig JSON file")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-intensity", required=True, help="output .i3d path")
    s.add_argument("--out-labels", required=True, help="output .i3d path")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("corrupt", help="apply corruption operators to a label volume")
    s.add_argument("--labels", required=True, help="input label .i3d")
    s.add_argument("--spec", required=True, help="CorruptionSpec JSON file")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("eval", help="score a prediction against an annotation")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau", type=float, default=0.5, help="IoU threshold")
    s.add_argument("--k1", type=float, default=1.0)
    s.add_argument("--k2", type=float, default=1.0)
    s.add_argument("--k3", type=float, default=1.0)
    s.add_argument("--iq-mode", choices=["matched-predictions", "per-annotation"],
                   default="matched-predictions")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("postprocess", help="apply postprocessing to a label volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--params", required=True, help="PostprocParams JSON file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("optimize-seg",
                       help="jointly optimize model choice and postprocessing")
    s.add_argument("--bench", required=True, help="benchmark manifest JSON")
    s.add_argument("--budget", type=int, default=120)
    s.add_argument("--strategy", choices=["bayes", "random"], default="bayes")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--k1", type=float, default=1.0)
    s.add_argument("--k2", type=float, default=1.0)
    s.add_argument("--k3", type=float, default=1.0)
    s.add_argument("--out", help="result JSON path (default stdout)")
    s.add_argument("--trace", help="trace JSON-lines path")
    s.set_defaults(func=cmd_optimize_seg)

    s = sub.add_parser("extract", help="extract per-instance crops")
    s.add_argument("--labels", required=True)
    s.add_argument("--intensity", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--image-id", required=True)
    s.add_argument("--margin", type=int, default=4)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("features", help="compute geometric features for crops")
    s.add_argument("--crops", required=True, help="crop directory root")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("label-spread",
                       help="propagate seed classes to all instances")
    s.add_argument("--features", required=True, help="features CSV")
    s.add_argument("--seeds", required=True,
                   help='JSON {"labels": {"<image>/<id>": class}}')
    s.add_argument("--out", required=True, help="pseudo-label CSV path")
    s.add_argument("--classes", type=int, help="class count (default: max seed + 1)")
    s.add_argument("--variance-kept", type=float, default=0.95)
    s.add_argument("--alpha", type=float, default=0.99)
    s.add_argument("--gamma", type=float, default=None)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--tol", type=float, default=1e-9)
    s.set_defaults(func=cmd_label_spread)

    s = sub.add_parser("annotate", help="serve the assisted-annotation API")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--crops", required=True)
    s.add_argument("--classes", required=True, help="class list JSON file")
    s.add_argument("--labels-out", required=True, help="append-only label log")
    s.add_argument("--ui-dir", help="static UI directory to serve at /")
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("optimize-design",
                       help="optimize a discrete design space via an external command")
    s.add_argument("--spec", required=True, help="design space JSON file")
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", help="result JSON path (default stdout)")
    s.add_argument("--trace", help="trace JSON-lines path")
    s.set_defaults(func=cmd_optimize_design)

    s = sub.add_parser("import-tiff", help="convert a baseline TIFF stack to .i3d")
    s.add_argument("--in", required=True, dest="tiff_in", metavar="IN")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_tiff)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Aop3dError as e:
        _say(f"error: {e}")
        return 1
    except (OSError, ValueError) as e:
        _say(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
