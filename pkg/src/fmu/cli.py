"""``fmu`` command line. Exit codes: 0 ok, 1 usage, 2 input/output, 3 numeric."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, sensing
from . import ndtensor as nt
from .flowmatch import SamplerConfig
from .metrics import EvalReport, psnr, ssim
from .ndtensor import Rng
from .synthdata import generate, make_split
from .training import TrainConfig, ablation, config_hash, make_mask, make_system
from .unfolding import PRIOR_FLOW, PRIOR_NONE, FMUNetwork, reconstruct

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fmu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", type=Path, default=d(None), help="INI config file")
    p.add_argument("--seed", type=int, default=d(None), help="overrides [train] seed")
    p.add_argument("--out", type=Path, default=d(Path("fmu-out")), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmu", description="Flow-matching-prior unfolding for snapshot spectral imaging.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    p = cmd("synth-data", "write synthetic scenes as cube files")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, nargs=3, metavar=("W", "H", "L"), default=(32, 32, 8))

    p = cmd("simulate", "simulate a measurement of a cube")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--mode", choices=(sensing.CASSI, sensing.FILTER), default=None)
    p.add_argument("--shift", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = cmd("train", "run one training phase")
    p.add_argument("--phase", type=int, choices=(1, 2), default=1)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--phase1", type=Path, default=None, help="phase-1 checkpoint for phase 2 (default OUT/phase1.fmu)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")

    p = cmd("reconstruct", "reconstruct a cube from a measurement")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--measurement", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None, help="defaults to the mask stored in the checkpoint")
    p.add_argument("--name", default="reconstruction", help="output file stem, e.g. the ground-truth scene name")

    p = cmd("evaluate", "score reconstructions against ground truth")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--region", type=int, nargs=4, metavar=("X0", "Y0", "X1", "Y1"), default=None)
    p.add_argument("--region-name", default="center")

    cmd("gradcheck", "run the 64-bit gradient suite")

    p = cmd("bench", "train FMU and the prior-free baseline, then print the PSNR table")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    return parser


def _config(args) -> TrainConfig:
    cfg = io.load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _as_cube(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 3 else a[:, :, None]


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg, out = _config(args), _out(args)
    w, h, b = args.size
    d = cfg.data
    specs, _ = make_split(args.count, 0, cfg.seed, width=w, height=h, bands=b, rank=min(d.rank, b), blobs=d.blobs, smoothness=d.smoothness)
    for i, spec in enumerate(specs):
        io.save_cube(out / f"scene_{i:03d}.hsc", generate(spec))
    print(f"wrote {len(specs)} scenes to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    cube = io.load_cube(args.cube).astype(np.float64)
    s = cfg.sensing
    s = replace(s, mode=args.mode or s.mode, shift=s.shift if args.shift is None else args.shift, noise_sigma=s.noise_sigma if args.noise is None else args.noise)
    w, h, b = cube.shape
    cfg = replace(cfg, sensing=s, model=replace(cfg.model, width=w, height=h, bands=b))
    mask = make_mask(cfg, cfg.seed)
    system = make_system(cfg, mask)
    y = sensing.forward(system, cube, Rng(cfg.seed, ("simulate",)))
    out = _out(args)
    io.save_cube(out / "measurement.hsc", _as_cube(y))
    io.save_cube(out / "mask.hsc", _as_cube(mask))
    print(f"{s.mode} measurement {y.shape} written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train_phase1, train_phase2

    cfg = replace(_config(args), phase=args.phase)
    out = _out(args)
    resume = io.load_ckpt(args.resume) if args.resume else None
    if args.phase == 1:
        ckpt = train_phase1(cfg, resume=resume, max_steps=args.max_steps)
    else:
        p1 = io.load_ckpt(args.phase1 or out / "phase1.fmu")
        ckpt = train_phase2(cfg, p1, resume=resume, max_steps=args.max_steps)
    path = out / f"phase{args.phase}.fmu"
    io.save_ckpt(path, ckpt)
    last = f"{ckpt.losses[-1]:.6g}" if ckpt.losses else "n/a"
    print(f"phase {args.phase}: step {ckpt.step}/{cfg.total_steps}, last loss {last}, checkpoint {path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ckpt = io.load_ckpt(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    seed = cfg.seed if args.seed is None else args.seed
    mask = io.load_cube(args.mask).astype(np.float64) if args.mask else ckpt.mask
    if mask is None:
        raise io.FormatError("bad_header", "no --mask given and the checkpoint stores none")
    if cfg.sensing.mode == sensing.CASSI and mask.ndim == 3:
        mask = mask[:, :, 0]
    system = make_system(cfg, mask)
    y = io.load_cube(args.measurement)[:, :, 0].astype(nt.default_dtype())
    prior = PRIOR_NONE if cfg.unfolding.prior == PRIOR_NONE else PRIOR_FLOW
    net = FMUNetwork(cfg.model, replace(cfg.unfolding, prior=prior))
    xhat = reconstruct(net, ckpt.params, system, y, SamplerConfig(cfg.eval_sampler_steps), Rng(seed, ("reconstruct",)))[0]
    out = _out(args)
    dest = out / f"{args.name}.hsc"
    io.save_cube(dest, xhat)
    print(f"reconstruction {xhat.shape} written to {dest}")
    return EXIT_OK


def write_pgm(path: Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM; values are clipped to [0, 1] first. Rows follow the first axis."""
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    rows, cols = px.shape
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + px.tobytes())


def _region(shape, region):
    if region is None:
        w, h = shape[:2]
        return w // 4, h // 4, w - w // 4, h - h // 4
    x0, y0, x1, y1 = region
    if not (0 <= x0 < x1 <= shape[0] and 0 <= y0 < y1 <= shape[1]):
        raise UsageError(f"region {region} outside the {shape[0]}x{shape[1]} frame")
    return x0, y0, x1, y1


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    # every prediction needs a ground truth of the same name; extra truths are ignored
    pred_files = sorted(args.pred_dir.glob("*.hsc"))
    if not pred_files:
        raise FileNotFoundError(f"no .hsc predictions in {args.pred_dir}")
    missing = [p.name for p in pred_files if not (args.gt_dir / p.name).exists()]
    if missing:
        raise FileNotFoundError(f"no ground truth in {args.gt_dir} for {', '.join(missing)}")
    out = _out(args)
    previews = out / "previews"
    previews.mkdir(exist_ok=True)
    names, psnrs, ssims, table = [], [], [], []
    for pred_path in pred_files:
        gt_path = args.gt_dir / pred_path.name
        gt = io.load_cube(gt_path).astype(np.float64)
        pred = io.load_cube(pred_path).astype(np.float64)
        if gt.shape != pred.shape:
            raise io.FormatError("shape_mismatch", f"{gt_path.name}: prediction {pred.shape} vs truth {gt.shape}")
        names.append(gt_path.stem)
        psnrs.append(psnr(pred, gt))
        ssims.append(ssim(pred, gt))
        for k in range(gt.shape[2]):
            write_pgm(previews / f"{gt_path.stem}_pred_b{k:02d}.pgm", pred[:, :, k])
            write_pgm(previews / f"{gt_path.stem}_gt_b{k:02d}.pgm", gt[:, :, k])
        x0, y0, x1, y1 = _region(gt.shape, args.region)
        g_curve = gt[x0:x1, y0:y1].mean(axis=(0, 1))
        p_curve = pred[x0:x1, y0:y1].mean(axis=(0, 1))
        table += [f"{gt_path.stem}\t{k}\t{g:.6f}\t{p:.6f}" for k, (g, p) in enumerate(zip(g_curve, p_curve))]
    seed = cfg.seed
    report = EvalReport(names, psnrs, ssims, config_hash(cfg), seed)
    (out / "report.json").write_text(report.to_text())
    header = f"# region {args.region_name} x[{x0}:{x1}] y[{y0}:{y1}], mean intensity per band\nscene\tband\tgt\tpred\n"
    (out / "spectra.txt").write_text(header + "\n".join(table) + "\n")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, gradient_suite

    results = gradient_suite(0 if args.seed is None else args.seed)
    for name, err in results.items():
        print(f"{name:32s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return EXIT_OK if worst <= TOLERANCE else EXIT_NUMERIC


def _fmt(v: float) -> str:
    return "identical" if np.isinf(v) else f"{v:.2f}"


def cmd_bench(args) -> int:
    cfg = _config(args)
    seeds = args.seeds or [cfg.seed]
    rows, body = [], []
    for seed in seeds:
        res = ablation(replace(cfg, seed=seed))
        body.append({
            "seed": seed,
            "flow_psnr": [round(v, 6) for v in res.flow_psnr],
            "base_psnr": [round(v, 6) for v in res.base_psnr],
            "flow_ssim": [round(v, 6) for v in res.flow_ssim],
            "base_ssim": [round(v, 6) for v in res.base_ssim],
            "gain_db": round(res.gain_db, 6),
        })
        for i, (f, b) in enumerate(zip(res.flow_psnr, res.base_psnr)):
            rows.append(f"{seed:>5d}  {i:>5d}  {_fmt(f):>9s}  {_fmt(b):>9s}")
        rows.append(f"{seed:>5d}  {'median':>5s}  {np.median(res.flow_psnr):9.2f}  {np.median(res.base_psnr):9.2f}  gain {res.gain_db:+.2f} dB")
    report = {"config_hash": config_hash(cfg), "seeds": seeds, "results": body}
    out = _out(args)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(" seed  scene   FMU[dB]  base[dB]")
    print("\n".join(rows))
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except io.ConfigError as exc:
        print(f"fmu: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, io.FormatError, nt.ShapeError) as exc:
        print(f"fmu: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"fmu: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fmu: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
