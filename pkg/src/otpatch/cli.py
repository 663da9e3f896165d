"""Command-line entry point: ``otpatch <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Every JSON artifact
carries a ``provenance`` block with the effective configuration, and files
are written to a temporary name and renamed only on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import Volume, VolumeFormatError, atomic_write_bytes, load_volume, save_volume
from .fit import FitConfig, compare_losses, default_compare_configs, demo_phantom, fit_residual
from .metrics import ce_mask, evaluate
from .nploss import NPLossConfig, np_loss, offsets_for
from .ot import KINDS, SolverConfig, build_cost, exact_ot_1d, ipot, sinkhorn
from .phantom import Lesion, PhantomSpec, generate_suite

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SEED_ENV = "OTPATCH_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(raw: str) -> tuple[int, int, int]:
    parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"dims must be N or NX,NY,NZ, got {raw!r}")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be integers, got {raw!r}") from None


def _solver_args(p: argparse.ArgumentParser, default_kind: str = "ipot") -> None:
    p.add_argument("--solver", choices=KINDS, default=default_kind)
    p.add_argument("--iters", type=int, default=None, help="outer iterations (default: 100 ipot, 1000 sinkhorn)")
    p.add_argument("--inner-iters", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=None, help="absolute regularization")
    p.add_argument("--epsilon-ratio", type=float, default=0.1, help="epsilon = ratio * max(C) when --epsilon is unset")


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    p.add_argument("--threads", type=int, default=None, help="default: available CPUs; 1 is bit-reproducible")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="otpatch", description="Patch-wise optimal-transport loss, metrics and phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ot", help="solve one OT instance between two patch files")
    p.add_argument("patch_a")
    p.add_argument("patch_b")
    p.add_argument("--p", type=int, choices=(1, 2), default=1)
    _solver_args(p)
    p.add_argument("--out")
    _common_args(p)

    p = sub.add_parser("nploss", help="patch OT loss between two volumes")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--p", type=int, choices=(1, 2), default=1)
    p.add_argument("--offset-mode", choices=("single_random", "full_expectation"), default="single_random")
    p.add_argument("--per-patch", action="store_true", help="include per-patch values")
    _solver_args(p)
    p.add_argument("--out")
    _common_args(p)

    p = sub.add_parser("mask", help="write the CE mask of a native/standard-dose pair")
    p.add_argument("na")
    p.add_argument("sd")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--relative", action="store_true", help="threshold relative to each native voxel")
    p.add_argument("--out", required=True, help="mask volume path (VOL1, 0/1 voxels)")
    _common_args(p)

    p = sub.add_parser("metrics", help="PSNR, SSIM, MAE_CE and MAE_sigma report")
    p.add_argument("x_hat")
    p.add_argument("x_ref")
    p.add_argument("--na")
    p.add_argument("--sd")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--out")
    _common_args(p)

    p = sub.add_parser("phantom", help="write a synthetic dataset with manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--field", type=float, choices=(1.5, 3.0), default=3.0)
    p.add_argument("--noise", choices=("gaussian", "rician"), default="gaussian")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--lesion-enhancement", type=float, default=0.6)
    p.add_argument("--doses", default="0.1,0.2,0.33")
    _common_args(p)

    for name, helptext in (("fit", "fit a free residual under one loss"), ("compare", "l1 vs patch OT fits")):
        p = sub.add_parser(name, help=helptext)
        if name == "fit":
            p.add_argument("--loss", choices=("l1", "np"), default="np")
            p.add_argument("--init", choices=("zeros", "first_realization"), default="zeros")
        p.add_argument("--sigma", type=float, default=0.05)
        p.add_argument("--dims", type=_dims, default=(32, 32, 32))
        p.add_argument("--realizations", type=int, default=32)
        p.add_argument("--iterations", type=int, default=2000)
        p.add_argument("--n", type=int, default=4)
        p.add_argument("--offset-mode", choices=("single_random", "full_expectation"), default="single_random")
        _solver_args(p, default_kind="exact_sorted")
        p.add_argument("--out", help="output directory")
        _common_args(p)
    return parser


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _solver_cfg(args) -> SolverConfig:
    try:
        return SolverConfig(
            kind=args.solver,
            outer_iters=args.iters,
            inner_iters=args.inner_iters,
            epsilon=args.epsilon,
            epsilon_ratio=args.epsilon_ratio,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _provenance(command: str, config: dict, seed: int, threads: int) -> dict:
    return {
        "tool": "otpatch",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
    }


def _dump(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(payload, out: str | None) -> None:
    text = _dump(payload)
    if out:
        atomic_write_bytes(out, text.encode("utf-8"))
    sys.stdout.write(text)


def _load(path: str, what: str) -> Volume:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what}: file not found: {path}")
    try:
        return load_volume(p)
    except VolumeFormatError as exc:
        raise DataError(f"{what}: {path}: {exc}") from None


def _load_patch(path: str, what: str) -> np.ndarray:
    """Patch values from a VOL1 file, a JSON list, or whitespace/comma separated text."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what}: file not found: {path}")
    raw = p.read_bytes()
    if raw.startswith(b'{"magic"'):
        return _load(path, what).voxels.astype(np.float64)
    text = raw.decode("utf-8").strip()
    try:
        if text.startswith("["):
            values = np.asarray(json.loads(text), dtype=np.float64).ravel()
        else:
            values = np.asarray([float(t) for t in text.replace(",", " ").split()])
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{what}: cannot parse patch values in {path}: {exc}") from None
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise DataError(f"{what}: patch values must be a non-empty list of finite numbers")
    return values


def cmd_ot(args, seed: int, threads: int) -> None:
    a = _load_patch(args.patch_a, "patch_a")
    b = _load_patch(args.patch_b, "patch_b")
    if a.size != b.size:
        raise DataError(f"patch_b: length {b.size} does not match patch_a length {a.size}")
    cfg = _solver_cfg(args)
    exact_w, exact_plan = exact_ot_1d(a, b, args.p)
    if cfg.kind == "exact_sorted":
        plan, w = exact_plan, exact_w
    else:
        C = build_cost(a, b, args.p)
        plan, w = (sinkhorn if cfg.kind == "sinkhorn" else ipot)(C, cfg)
    payload = {
        "W": w,
        "exact_W": exact_w,
        "m": int(a.size),
        "row_residual": plan.row_residual,
        "col_residual": plan.col_residual,
        "pre_projection_residual": plan.pre_projection_residual,
        "mass": plan.mass,
        "provenance": _provenance("ot", {"p": args.p, "solver": cfg.to_dict(),
                                         "inputs": [args.patch_a, args.patch_b]}, seed, threads),
    }
    _emit(payload, args.out)


def cmd_nploss(args, seed: int, threads: int) -> None:
    a = _load(args.a, "a")
    b = _load(args.b, "b")
    if a.dims != b.dims:
        raise DataError(f"b: dims {list(b.dims)} do not match a dims {list(a.dims)}")
    try:
        cfg = NPLossConfig(n=args.n, solver=_solver_cfg(args), p=args.p, offset_mode=args.offset_mode, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        loss, per_patch = np_loss(a, b, cfg, threads=threads)
    except ValueError as exc:
        raise DataError(f"n: {exc}") from None
    payload = {
        "loss": loss,
        "num_patches": len(per_patch),
        "offsets": [list(o) for o in offsets_for(cfg)],
        "provenance": _provenance("nploss", {**cfg.to_dict(), "inputs": [args.a, args.b]}, seed, threads),
    }
    if args.per_patch:
        payload["per_patch"] = [{"origin": list(o), "W": w} for o, w in per_patch]
    _emit(payload, args.out)


def cmd_mask(args, seed: int, threads: int) -> None:
    na = _load(args.na, "na")
    sd = _load(args.sd, "sd")
    if na.dims != sd.dims:
        raise DataError(f"sd: dims {list(sd.dims)} do not match na dims {list(na.dims)}")
    try:
        mask = ce_mask(na, sd, args.threshold, relative=args.relative)
    except ValueError as exc:
        raise DataError(f"na: {exc}") from None
    save_volume(Volume(mask.mask.astype(np.float32)), args.out)
    payload = {
        "mask_path": args.out,
        "ce_voxel_count": mask.count,
        "total_voxels": int(mask.mask.size),
        "q95": mask.q95_used,
        "threshold": mask.threshold_used,
        "provenance": _provenance(
            "mask", {"threshold": args.threshold, "relative": args.relative, "inputs": [args.na, args.sd]},
            seed, threads,
        ),
    }
    sys.stdout.write(_dump(payload))


def cmd_metrics(args, seed: int, threads: int) -> None:
    x_hat = _load(args.x_hat, "x_hat")
    x_ref = _load(args.x_ref, "x_ref")
    if (args.na is None) != (args.sd is None):
        raise UsageError("metrics: --na and --sd must be given together")
    na = _load(args.na, "na") if args.na else None
    sd = _load(args.sd, "sd") if args.sd else None
    for name, v in (("x_ref", x_ref), ("na", na), ("sd", sd)):
        if v is not None and v.dims != x_hat.dims:
            raise DataError(f"{name}: dims {list(v.dims)} do not match x_hat dims {list(x_hat.dims)}")
    try:
        report = evaluate(x_hat, x_ref, na, sd, threshold=args.threshold, peak=args.peak)
    except ValueError as exc:
        raise DataError(f"metrics: {exc}") from None
    payload = report.to_dict()
    payload["provenance"] = _provenance(
        "metrics",
        {"threshold": args.threshold, "peak": args.peak,
         "inputs": {"x_hat": args.x_hat, "x_ref": args.x_ref, "na": args.na, "sd": args.sd}},
        seed, threads,
    )
    _emit(payload, args.out)


def cmd_phantom(args, seed: int, threads: int) -> None:
    try:
        doses = tuple(float(d) for d in args.doses.split(",") if d.strip())
    except ValueError:
        raise UsageError(f"--doses must be comma-separated numbers, got {args.doses!r}") from None
    dims = args.dims
    radius = max(1.0, min(dims) / 6)
    center = tuple((d - 1) / 2 for d in dims)
    try:
        spec = PhantomSpec(
            dims=dims,
            lesions=(Lesion(center, radius, args.lesion_enhancement),),
            field_strength=args.field,
            noise=args.noise,
            sigma=args.sigma,
            seed=seed,
            dose=doses[0] if doses else 0.33,
        )
        manifest = generate_suite(args.count, spec, args.out, dose_set=doses)
    except ValueError as exc:
        raise UsageError(f"phantom: {exc}") from None
    except OSError as exc:
        raise DataError(f"out: cannot write dataset: {exc}") from None
    sys.stdout.write(_dump({"manifest": str(manifest), "count": args.count}))


def _fit_np_config(args, seed: int) -> NPLossConfig:
    try:
        return NPLossConfig(n=args.n, solver=_solver_cfg(args), offset_mode=args.offset_mode, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_fit(args, seed: int, threads: int) -> None:
    clean, _ = demo_phantom(args.dims)
    try:
        cfg = FitConfig(
            loss=args.loss,
            np_config=_fit_np_config(args, seed),
            realizations=args.realizations,
            iterations=args.iterations,
            init=args.init,
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    r, trace = fit_residual(clean, args.sigma, cfg, threads=threads)
    bg = clean == 0
    payload = {
        "sigma": args.sigma,
        "bg_std": float(np.std((r.data.astype(np.float64) - clean)[bg])),
        "final_objective": trace[-1],
        "trace": trace,
        "provenance": _provenance("fit", {**cfg.to_dict(), "sigma": args.sigma, "dims": list(args.dims)},
                                  seed, threads),
    }
    if args.out:
        out = Path(args.out)
        save_volume(r, out / "residual.vol")
        atomic_write_bytes(out / "fit.json", _dump(payload).encode("utf-8"))
    summary = {k: v for k, v in payload.items() if k != "trace"}
    sys.stdout.write(_dump(summary))


def cmd_compare(args, seed: int, threads: int) -> None:
    clean, mask = demo_phantom(args.dims)
    npc = _fit_np_config(args, seed)
    try:
        cfgs = [replace(c, np_config=npc) for c in default_compare_configs(seed, args.iterations, args.realizations)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = compare_losses(clean, args.sigma, cfgs, mask, seed=seed, threads=threads)
    payload = report.to_dict()
    payload["provenance"] = _provenance("compare", {**report.config, "dims": list(args.dims)}, seed, threads)
    csv_text = report.to_csv()
    if args.out:
        out = Path(args.out)
        atomic_write_bytes(out / "compare.json", _dump(payload).encode("utf-8"))
        atomic_write_bytes(out / "compare.csv", csv_text.encode("utf-8"))
    sys.stdout.write(csv_text)


COMMANDS = {
    "ot": cmd_ot,
    "nploss": cmd_nploss,
    "mask": cmd_mask,
    "metrics": cmd_metrics,
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "compare": cmd_compare,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        seed = _resolve_seed(args)
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        COMMANDS[args.command](args, seed, threads)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (VolumeFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> int:
    return run(sys.argv[1:])
