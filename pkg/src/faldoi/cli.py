"""Command-line interface: ``faldoi estimate | evaluate | synth | viz``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from .energy import EnergyConfig
from .flowio import MatchSet, read_flo, read_matches, save_flow_png, write_flo, write_matches
from .imgproc import ImageFormatError, load_image, save_png
from .metrics import compute_metrics
from .pipeline import NoSeedsError, PipelineConfig, final_energy, run_faldoi, run_iterated_faldoi

log = logging.getLogger("faldoi")


def _apply_threads():
    n = os.environ.get("FALDOI_THREADS")
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _fail(msg: str, code: int = 1) -> int:
    print(f"faldoi: error: {msg}", file=sys.stderr)
    return code


def _add_estimate(sub):
    p = sub.add_parser("estimate", help="compute a dense flow from two frames and seed matches")
    p.add_argument("frame_a")
    p.add_argument("frame_b")
    p.add_argument("matches", help="forward match file (x1 y1 x2 y2 per line)")
    p.add_argument("output", help="output .flo path")
    p.add_argument("--backward-matches", help="backward match file, required by --mode iterated")
    p.add_argument("--mode", choices=("basic", "iterated"), default="basic")
    p.add_argument("--energy", choices=("tvl1", "nltv-csad", "tv-csad"), default="tvl1")
    p.add_argument("--png", help="also write a color-coded PNG")
    p.add_argument("--event-log", help="write one line per fixing event")
    d = EnergyConfig()
    p.add_argument("--beta", type=float, help="regularization weight (default depends on the data term)")
    p.add_argument("--theta", type=float, default=d.theta)
    p.add_argument("--lam", type=float, default=d.lam)
    p.add_argument("--csad-window", type=int, default=d.csad_window)
    p.add_argument("--nltv-window", type=int, default=d.nltv_window)
    p.add_argument("--sigma-c", type=float, default=d.sigma_c)
    p.add_argument("--sigma-s", type=float, default=d.sigma_s)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--inner-tol", type=float, default=d.inner_tol)
    p.add_argument("--max-inner-iters", type=int, default=d.max_inner_iters)
    c = PipelineConfig()
    p.add_argument("--patch-size", type=int, default=c.patch_size)
    p.add_argument("--max-it", type=int, default=c.max_it)
    p.add_argument("--epsilon-fb", type=float, default=c.epsilon_fb)
    p.add_argument("--saliency-threshold", type=float, default=c.saliency_threshold)
    p.add_argument("--saliency-window", type=int, default=c.saliency_window)
    p.add_argument("--global-warps", type=int, default=c.global_warps)
    p.add_argument("--no-saliency", action="store_true", help="keep seeds in flat areas")
    p.set_defaults(func=cmd_estimate)


def _print_config(cfg: PipelineConfig):
    e = dataclasses.asdict(cfg.energy)
    print("energy: " + " ".join(f"{k}={v}" for k, v in e.items()))
    rest = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name != "energy"}
    print("pipeline: " + " ".join(f"{k}={v}" for k, v in rest.items()))


def cmd_estimate(args) -> int:
    needed = [args.frame_a, args.frame_b, args.matches]
    if args.mode == "iterated":
        if not args.backward_matches:
            return _fail("--mode iterated needs --backward-matches")
        needed.append(args.backward_matches)
    for path in needed:
        if not os.path.isfile(path):
            return _fail(f"missing input {path!r}")
    try:
        energy = EnergyConfig.from_name(
            args.energy, beta=args.beta, theta=args.theta, lam=args.lam, csad_window=args.csad_window,
            nltv_window=args.nltv_window, sigma_c=args.sigma_c, sigma_s=args.sigma_s, tau=args.tau,
            sigma=args.sigma, inner_tol=args.inner_tol, max_inner_iters=args.max_inner_iters)
        cfg = PipelineConfig(energy=energy, patch_size=args.patch_size, max_it=args.max_it,
                             epsilon_fb=args.epsilon_fb, saliency_threshold=args.saliency_threshold,
                             saliency_window=args.saliency_window, global_warps=args.global_warps,
                             use_saliency=not args.no_saliency)
        A = load_image(args.frame_a)
        B = load_image(args.frame_b)
        if A.shape[:2] != B.shape[:2]:
            return _fail("frames differ in size")
        mF = read_matches(args.matches, A.shape[:2], B.shape[:2])
        mB = read_matches(args.backward_matches, B.shape[:2], A.shape[:2]) if args.mode == "iterated" else None
    except (ValueError, ImageFormatError) as exc:
        return _fail(str(exc))
    _print_config(cfg)
    print(f"matches: forward={len(mF)} (dropped {mF.dropped})"
          + (f" backward={len(mB)} (dropped {mB.dropped})" if mB is not None else ""))
    events: list = []
    t0 = time.perf_counter()
    try:
        if args.mode == "basic":
            flow = run_faldoi(A, B, mF, cfg, events)
        else:
            flow = run_iterated_faldoi(A, B, mF, mB, cfg, events)
    except NoSeedsError as exc:
        return _fail(str(exc))
    wall = time.perf_counter() - t0
    write_flo(flow, args.output)
    if args.png:
        save_flow_png(flow, args.png)
    if args.event_log:
        with open(args.event_log, "w") as fh:
            for ev in events:
                fh.write(" ".join(str(v) for v in ev[:-1]) + f" {ev[-1]:.10g}\n")
    print(f"final_energy={final_energy(energy, A, B, flow):.6f}")
    print(f"wall_time={wall:.2f}s")
    return 0


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="endpoint-error metrics against a ground-truth flow")
    p.add_argument("flow")
    p.add_argument("gt")
    p.add_argument("--occlusion", help="occlusion mask image (white = occluded)")
    p.add_argument("--invalid", help="invalid-pixel mask image (white = excluded)")
    p.add_argument("--csv", help="append one row to this CSV file")
    p.add_argument("--label", help="label stored in the CSV row")
    p.set_defaults(func=cmd_evaluate)


def cmd_evaluate(args) -> int:
    try:
        flow = read_flo(args.flow)
        gt = read_flo(args.gt)
        occ = load_image(args.occlusion) > 0.5 if args.occlusion else None
        inv = load_image(args.invalid) > 0.5 if args.invalid else None
        if occ is not None and occ.ndim == 3:
            occ = occ.any(axis=2)
        if inv is not None and inv.ndim == 3:
            inv = inv.any(axis=2)
        m = compute_metrics(flow, gt, occ, inv)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    print(m.as_line())
    if args.csv:
        m.append_csv(args.csv, args.label)
    return 0


def _add_synth(sub):
    p = sub.add_parser("synth", help="render a synthetic pair from a key=value scene file")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)


def cmd_synth(args) -> int:
    from .synthetic import backward_matches, generate_synthetic, inject_outliers, parse_spec, region_seeds

    try:
        with open(args.spec) as fh:
            spec, opts = parse_spec(fh.read())
        pair = generate_synthetic(spec, opts["seed"])
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    os.makedirs(args.out_dir, exist_ok=True)
    shape = (spec.height, spec.width)
    seeds = region_seeds(pair)
    fwd = inject_outliers(seeds, opts["outliers"], shape, shape, opts["seed"] + 1)
    save_png(pair.A, os.path.join(args.out_dir, "A.png"))
    save_png(pair.B, os.path.join(args.out_dir, "B.png"))
    write_flo(pair.gt, os.path.join(args.out_dir, "gt.flo"))
    save_png(pair.occlusion.astype(np.float64), os.path.join(args.out_dir, "occlusion.png"))
    write_matches(fwd, os.path.join(args.out_dir, "seeds.txt"))
    if opts["backward"]:
        bwd = inject_outliers(backward_matches(seeds), opts["outliers"], shape, shape, opts["seed"] + 2)
        write_matches(bwd, os.path.join(args.out_dir, "seeds_backward.txt"))
    print(f"wrote {args.out_dir}: {len(seeds)} region seeds, {opts['outliers']} outliers")
    return 0


def _add_viz(sub):
    p = sub.add_parser("viz", help="color-code a .flo file")
    p.add_argument("flow")
    p.add_argument("output")
    p.add_argument("--max-radius", type=float)
    p.set_defaults(func=cmd_viz)


def cmd_viz(args) -> int:
    if not os.path.isfile(args.flow):
        return _fail(f"missing input {args.flow!r}")
    try:
        save_flow_png(read_flo(args.flow), args.output, args.max_radius)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faldoi", description="Large displacement optical flow from sparse seeds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_estimate(sub)
    _add_evaluate(sub)
    _add_synth(sub)
    _add_viz(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_threads()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
