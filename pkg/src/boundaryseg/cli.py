"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, gradcheck, render. Every run
writes a manifest to the output directory before computing anything, so
re-running with the same manifest (same configs, seed and thread count)
reproduces the outputs bit for bit. ``--threads`` (or the SEG_THREADS
env var) pins the BLAS worker count; it must be applied before numpy is
loaded, so the heavy imports stay inside the command handlers.
"""

import argparse
import os
import sys
from pathlib import Path

VERSION = "0.1.0"

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    """Usage or input error; prints the failing stage and exits nonzero."""


def _pin_threads(threads):
    if threads is None:
        threads = os.environ.get("SEG_THREADS")
    if threads is None:
        return
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def _parse_kv_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _write_manifest(out_dir, subcommand, args, extras=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"tool_version = {VERSION}", f"subcommand = {subcommand}"]
    for key in sorted(vars(args)):
        if key in ("func",):
            continue
        lines.append(f"{key} = {getattr(args, key)}")
    for key, val in (extras or {}).items():
        lines.append(f"{key} = {val}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def cmd_gen_data(args):
    from .phantom import PhantomSpec, generate_phantom, make_variant
    from .volumes import write_volume

    spec_path = _require_file(args.spec, "phantom spec")
    base = PhantomSpec.from_dict(_parse_kv_file(spec_path))
    out = Path(args.out)
    _write_manifest(out, "gen-data", args)
    for i in range(args.count):
        spec = make_variant(base, args.seed + i)
        vol, lab = generate_phantom(spec)
        write_volume(out / f"case{i:03d}.img.mvol", vol)
        write_volume(out / f"case{i:03d}.lbl.mvol", lab)
    print(f"gen-data: wrote {args.count} volume pair(s) to {out}")
    return 0


def _load_dataset(data_dir):
    from .volumes import normalize_intensities, read_volume

    data_dir = Path(data_dir)
    pairs = []
    for img_path in sorted(data_dir.glob("*.img.mvol")):
        lbl_path = img_path.with_name(img_path.name.replace(".img.mvol", ".lbl.mvol"))
        if not lbl_path.is_file():
            raise CliError(f"missing label file for {img_path}")
        pairs.append((normalize_intensities(read_volume(img_path)), read_volume(lbl_path)))
    if not pairs:
        raise CliError(f"no .img.mvol volumes in {data_dir}")
    return pairs


def cmd_train(args):
    import dataclasses

    from .network import NetworkConfig, build_network
    from .sampling import VolumeCropSampler
    from .training import TrainConfig, run_training

    net_cfg = NetworkConfig.from_dict(_parse_kv_file(_require_file(args.net_config, "network config"))) \
        if args.net_config else NetworkConfig.desk_default()
    train_values = _parse_kv_file(_require_file(args.train_config, "train config")) \
        if args.train_config else {}
    cfg = TrainConfig.from_dict(train_values) if train_values else TrainConfig.desk_default()
    # flags override file values
    overrides = {}
    for flag in ("alpha0", "total_epochs", "steps_per_epoch", "batch_size", "seed"):
        val = getattr(args, flag)
        if val is not None:
            overrides[flag] = val
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    resume = _require_file(args.resume, "resume checkpoint") if args.resume else None

    pairs = _load_dataset(args.data)
    out = Path(args.out)
    _write_manifest(out, "train", args, {"net_config_resolved": net_cfg,
                                         "train_config_resolved": cfg})
    sampler = VolumeCropSampler(pairs, net_cfg.input_size)
    net = build_network(net_cfg, rng_seed=cfg.seed)
    ckpt, log_path = run_training(cfg, net, sampler, checkpoint_dir=out,
                                  resume_from=resume)
    print(f"train: finished {ckpt.step} steps; log at {log_path}")
    return 0


def _rebuild_net(ckpt_path):
    from .network import NetworkConfig, build_network
    from .training import AdamState, load_checkpoint, restore_into

    ckpt = load_checkpoint(ckpt_path)
    cfg = NetworkConfig.from_text(ckpt.net_config_text)
    net = build_network(cfg, rng_seed=0)
    restore_into(net, AdamState(net.parameters()), ckpt)
    return net


def cmd_infer(args):
    from .inference import compose_labels, ensemble_predict
    from .volumes import normalize_intensities, read_volume, write_volume

    paths = [_require_file(args.checkpoint, "checkpoint")]
    for extra in args.ensemble or []:
        paths.append(_require_file(extra, "ensemble checkpoint"))
    vol_path = _require_file(args.volume, "volume")
    out = Path(args.out)
    _write_manifest(out, "infer", args)

    nets = [_rebuild_net(p) for p in paths]
    volume = normalize_intensities(read_volume(vol_path))
    field = ensemble_predict(nets, volume, tta=args.tta, overlap=args.overlap)
    labels = compose_labels(field, threshold=args.threshold)
    pred_path = out / "prediction.lbl.mvol"
    write_volume(pred_path, labels)
    print(f"infer: wrote {pred_path} (tta={field.tta_used}, "
          f"ensemble_size={field.ensemble_size})")
    return 0


def cmd_eval(args):
    from .inference import evaluate_labels
    from .volumes import LabelVolume, read_volume

    pred_path = _require_file(args.pred, "prediction labels")
    truth_path = _require_file(args.truth, "truth labels")
    pred = read_volume(pred_path)
    truth = read_volume(truth_path)
    for name, vol in (("pred", pred), ("truth", truth)):
        if not isinstance(vol, LabelVolume):
            raise CliError(f"{name} file is not a label volume")
    report = evaluate_labels(pred, truth)
    row = (f"{args.case},{report.kidneys_dice:.6f},{report.tumor_dice:.6f},"
           f"{report.composite_dice:.6f}")
    if args.out:
        out = Path(args.out)
        _write_manifest(out, "eval", args)
        (out / "metrics.csv").write_text(
            "case,kidneys_dice,tumor_dice,composite_dice\n" + row + "\n")
    print("case,kidneys_dice,tumor_dice,composite_dice")
    print(row)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import PASS_BOUND, run_gradient_suite, worst_error

    if args.precision != 64:
        raise CliError("gradcheck: only --precision 64 is supported "
                       "(finite differences are unreliable at 32-bit)")
    if args.seeds < 1:
        raise CliError("gradcheck: --seeds must be >= 1")
    results = run_gradient_suite(seeds=args.seeds)
    by_case = {}
    for r in results:
        by_case[r.name] = max(by_case.get(r.name, 0.0), r.error)
    for name, err in by_case.items():
        status = "ok" if err < PASS_BOUND else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e}  {status}")
    worst = worst_error(results)
    print(f"worst relative error over {args.seeds} seeds: {worst:.3e} "
          f"(bound {PASS_BOUND:g})")
    return 0 if worst < PASS_BOUND else 1


def cmd_render(args):
    from .render import render_slice, write_ppm
    from .volumes import LabelVolume, Volume, normalize_intensities, read_volume

    vol = read_volume(_require_file(args.volume, "volume"))
    if not isinstance(vol, Volume):
        raise CliError("render: --volume must be an intensity volume")
    vol = normalize_intensities(vol)
    labels = None
    if args.labels:
        labels = read_volume(_require_file(args.labels, "labels"))
        if not isinstance(labels, LabelVolume):
            raise CliError("render: --labels must be a label volume")
    out = Path(args.out)
    _write_manifest(out, "render", args)
    rgb = render_slice(vol, labels, args.axis, args.index)
    img_path = out / f"slice_{args.axis}{args.index:04d}.ppm"
    write_ppm(img_path, rgb)
    print(f"render: wrote {img_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="boundaryseg",
        description="Boundary-aware 3-D segmentation: phantom data, training, "
                    "inference, evaluation and verification tools.")
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS worker count (fallback: SEG_THREADS env var)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate phantom MVOL volume pairs")
    p.add_argument("--spec", required=True, help="phantom spec key-value file")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a directory of MVOL pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--net-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--total-epochs", dest="total_epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict labels for a volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", nargs="+", default=None,
                   help="additional member checkpoints")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="dice metrics for predicted vs truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--case", default="case")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--precision", type=int, default=64)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="slice image with label contours")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def run_cli(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _pin_threads(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - name the failing stage, exit nonzero
        print(f"error [{args.subcommand}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
