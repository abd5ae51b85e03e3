"""Command-line entry point: ``lwisp <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path


from .checkpoint import CheckpointError
from .data import DataError, DatasetManifest, make_synthetic_dataset
from .model import LwIspModel, ModelConfig, TeacherModel, count_conv_layers, count_params, estimate_flops
from .train import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    infer,
    load_run,
    train_student,
    train_teacher,
    write_metrics_csv,
)

log = logging.getLogger("lwisp")

STATS_SIZES = ((224, 224), (960, 960), (1440, 1984))


# ---------------------------------------------------------------- config
def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing config file: {path}")
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(","))
    return value


def config_from_items(items: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    changes = {}
    for key, raw in items.items():
        if key in train_fields:
            default = getattr(base, key)
        elif key in model_fields:
            default = getattr(base.model, key)
        else:
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = _coerce(raw, default) if isinstance(raw, str) else raw
    return base.replace(**changes)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags given here override it")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=("constant", "step"))
    p.add_argument("--lr-step-factor", type=float)
    p.add_argument("--lr-step-every", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--taps", help="tap pairs, e.g. up2,up3,up4 or up2:up3")
    p.add_argument("--ckpt-every", type=int, help="extra checkpoint every N epochs")
    p.add_argument("--no-fgam", action="store_true", help="drop the attention modules")
    p.add_argument("--widths", help="four encoder widths, e.g. 16,32,64,128")
    p.add_argument("--head-width", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_config(args) -> TrainConfig:
    items = read_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = config_from_items(items)
    overrides = {}
    for key in ("lr", "lr_schedule", "lr_step_factor", "lr_step_every", "alpha", "beta", "gamma",
                "batch", "epochs", "seed", "taps", "ckpt_every", "head_width", "dtype"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "widths", None):
        overrides["widths"] = tuple(int(v) for v in args.widths.split(","))
    if getattr(args, "no_fgam", False):
        overrides["use_fgam"] = False
    cfg = cfg.replace(**overrides)
    return cfg


# ---------------------------------------------------------------- commands
def _load_split(root, split: str) -> DatasetManifest | None:
    base = Path(root) / split
    if not base.is_dir():
        return None
    return DatasetManifest.load(root, split)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_teacher(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args)
    data = DatasetManifest.load(args.data, "train")
    ckpt = Path(args.ckpt) if args.ckpt else out / "teacher.ckpt"
    log.info("teacher training, seed %d", cfg.seed)
    _, report = train_teacher(cfg, data, out_path=ckpt, resume=args.resume, val=_load_split(args.data, "val"))
    paths = report.write(out, "teacher")
    print(report.summary(), end="")
    print(f"checkpoint: {ckpt}")
    print(f"report: {paths['epochs']}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args)
    data = DatasetManifest.load(args.data, "train")
    val = _load_split(args.data, "val")
    if val is not None:
        from .data import check_disjoint

        check_disjoint(data, val)
    ckpt = Path(args.ckpt) if args.ckpt else out / "student.ckpt"
    log.info("student training, seed %d", cfg.seed)
    _, report = train_student(cfg, data, teacher_ckpt=args.teacher, out_path=ckpt, resume=args.resume, val=val)
    paths = report.write(out, "student")
    print(report.summary(), end="")
    print(f"checkpoint: {ckpt}")
    print(f"report: {paths['epochs']}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_eval

    out = _out_dir(args)
    data = DatasetManifest.load(args.data, args.split)
    rows, _ = evaluate(args.ckpt, data)
    csv_path = out / "metrics.csv"
    agg = write_metrics_csv(csv_path, rows)
    plot_eval(rows, out / "metrics_psnr.png")
    print("id,psnr,ms_ssim")
    for r in rows + [agg]:
        print(f"{r['id']},{r['psnr']:.4f},{r['ms_ssim']:.6f}")
    print(f"metrics: {csv_path}")
    return 0


def cmd_infer(args) -> int:
    infer(args.ckpt, args.raw, args.out, pattern=args.pattern)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, TOLERANCE, run_suite

    scopes = list(SUITES) if args.scope == "all" else [args.scope]
    failures = 0
    lines = ["scope,seed,case,max_rel_error,checked,skipped,status"]
    for scope in scopes:
        rows, seconds = run_suite(scope, seeds=args.seeds, first_seed=args.first_seed)
        for seed, r in rows:
            status = "pass" if r.passed else "FAIL"
            failures += not r.passed
            lines.append(f"{scope},{seed},{r.name},{r.max_rel_error:.3e},{r.checked},{r.skipped},{status}")
        worst = max(r.max_rel_error for _, r in rows)
        log.info("%s: %d checks in %.1fs, worst rel. error %.2e", scope, len(rows), seconds, worst)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"{failures} failure(s), tolerance {TOLERANCE:g}")
    return 1 if failures else 0


def stats_rows(model: LwIspModel, teacher: TeacherModel | None = None) -> list[dict]:
    convs = count_conv_layers(model)
    row = {"model": "student", "params": count_params(model), **{f"convs_{k}": v for k, v in convs.items()}}
    for h, w in STATS_SIZES:
        row[f"flops_{h}x{w}"] = estimate_flops(model, (1, 4, h // 2, w // 2))
    rows = [row]
    if teacher is not None:
        convs = count_conv_layers(teacher)
        trow = {"model": "teacher", "params": count_params(teacher), **{f"convs_{k}": v for k, v in convs.items()}}
        for h, w in STATS_SIZES:
            trow[f"flops_{h}x{w}"] = estimate_flops(teacher, (1, 3, h, w))
        rows.append(trow)
    return rows


def cmd_stats(args) -> int:
    if args.ckpt:
        model, _, _, _ = load_run(args.ckpt)
        if not isinstance(model, LwIspModel):
            raise ValueError(f"stats expects a student checkpoint, {args.ckpt} holds a teacher")
        cfg = model.cfg
    else:
        cfg = build_config(args).model
        model = LwIspModel(cfg)
    rows = stats_rows(model, TeacherModel(cfg) if args.teacher_stats else None)
    if cfg.use_fgam:
        plain = LwIspModel(dataclasses.replace(cfg, use_fgam=False))
        rows += [dict(stats_rows(plain)[0], model="student w/o FGAM")]
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(str(r.get(k, "")) for k in keys) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    for r in rows:
        flops = "  ".join(f"{k[6:]}: {r[k] / 1e9:.3f}G" for k in keys if k.startswith("flops_"))
        print(f"# {r['model']}: {r['params']:,} params, {r['convs_trunk']} trunk convs, {flops}")
    return 0


def cmd_synth(args) -> int:
    for split, count, seed in (("train", args.count, args.seed), ("val", args.val_count, args.seed + 1000)):
        if count:
            make_synthetic_dataset(args.out, count, args.size, seed=seed, split=split)
    print(f"wrote synthetic dataset under {args.out}")
    return 0


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwisp", description="Lightweight RAW-to-RGB ISP network")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="fit the RGB-to-RGB teacher")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="dataset root holding train/ (and optionally val/)")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--ckpt", help="checkpoint path (default <out>/teacher.ckpt)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train", help="fit the student, distilling from a teacher if given")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="checkpoint path (default <out>/student.ckpt)")
    p.add_argument("--teacher", help="teacher checkpoint; without it beta is forced to 0")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-sample PSNR and MS-SSIM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="directory for metrics.csv and the figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="mosaic PNG to RGB PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--raw", required=True, help="single-channel Bayer mosaic PNG")
    p.add_argument("--out", required=True, help="output RGB PNG")
    p.add_argument("--pattern", default="RGGB")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--scope", default="all", choices=("ops", "blocks", "model", "all"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--out", help="also write the table to this CSV file")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="parameter, convolution and FLOP counts")
    _add_train_flags(p)
    p.add_argument("--ckpt", help="read the architecture from a student checkpoint")
    p.add_argument("--teacher-stats", action="store_true", help="also report the teacher")
    p.add_argument("--out", help="also write the table to this CSV file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--val-count", type=int, default=2)
    p.add_argument("--size", type=int, default=64, help="RGB extent; must be divisible by 32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, CheckpointError, DataError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
