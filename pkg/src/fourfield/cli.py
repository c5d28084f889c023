"""Command line: gen-data, train, render, verify, report.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

RANGE_FLAGS = ("--yaw", "--pitch", "--times")


class UsageError(Exception):
    pass


def _limit_threads() -> None:
    """Cap BLAS threads before numpy loads; one thread keeps reductions reproducible."""
    value = os.environ.get("FOURFIELD_THREADS", "1")
    if not value.isdigit() or int(value) < 1:
        raise UsageError(f"FOURFIELD_THREADS must be a positive integer, got {value!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = value


def parse_range(text: str) -> list[float]:
    """``a:b:n`` -> n evenly spaced values from a to b; a bare number is a single value."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return [float(parts[0])]
        if len(parts) != 3:
            raise ValueError
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b:n or a number, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("range count must be at least 1")
    if n == 1:
        return [a]
    return [a + (b - a) * i / (n - 1) for i in range(n)]


def _glue_negative_ranges(argv: list[str]) -> list[str]:
    # "--yaw -0.3:0.3:5" would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        if argv[i] in RANGE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") \
                and argv[i + 1][1:2].replace(".", "").isdigit():
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fourfield", description="Desk-scale 4D video field GAN.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a procedural video corpus")
    g.add_argument("--kind", required=True, choices=("blink", "bounce", "orbit"))
    g.add_argument("--clips", type=int, default=64)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--res", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the adversarial training loop")
    t.add_argument("--config", help="key=value config file (defaults otherwise)")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--corpus", help="video corpus; a blink corpus is generated under --out if omitted")
    t.add_argument("--image-corpus", help="corpus whose frames feed static image steps")
    t.add_argument("--joint-ratio", type=float, help="fraction of image steps when --image-corpus is set")
    t.add_argument("--pretrain-static", type=int, default=0, metavar="N",
                   help="image-only steps before video training (needs --image-corpus)")
    t.add_argument("--out", default="run")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablate", action="append", default=[], help="named ablation, repeatable")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--quiet", action="store_true", help="no metric lines on stdout")

    r = sub.add_parser("render", help="render a camera x time grid from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--yaw", type=parse_range, default=[0.0])
    r.add_argument("--pitch", type=parse_range, default=[0.0])
    r.add_argument("--times", type=parse_range, default=[0.0])
    r.add_argument("--seed-latent", type=int, help="one fixed (z, m) for the whole grid")
    r.add_argument("--seed", type=int, default=0, help="seed for fresh per-cell latents")
    r.add_argument("--res", type=int, help="output resolution (default: training resolution)")
    r.add_argument("--static", action="store_true", help="zero the motion vector")
    r.add_argument("--depth", action="store_true", help="also write PGM depth maps")
    r.add_argument("--figure", action="store_true", help="also write a PNG contact sheet")
    r.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run the invariant battery")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--self-test-negative", action="store_true",
                   help="corrupt one oracle; the battery must then fail")
    v.add_argument("--figure", help="write a PNG summary of the checks here")

    rep = sub.add_parser("report", help="figures and summary lines for a training run")
    rep.add_argument("--run", required=True, help="training output directory")
    rep.add_argument("--corpus", help="corpus for the brightness comparison")
    rep.add_argument("--samples", type=int, default=256)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--out", help="figure directory (default: <run>/figures)")
    return p


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .data import generate_corpus
    corpus = generate_corpus(args.kind, args.clips, args.frames, args.res, args.res, args.seed, args.out)
    print(f"corpus\t{corpus.root}\tkind={corpus.kind}\tclips={corpus.clips}\tframes={corpus.frames}"
          f"\tres={corpus.height}")
    return 0


def _load_config(args):
    from .config import TrainConfig, apply_ablation
    from pathlib import Path
    if args.config:
        cfg = TrainConfig.from_text(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(*item.split("=", 1))
    for name in args.ablate:
        apply_ablation(cfg, name)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.checkpoint_every is not None:
        cfg.train.checkpoint_every = args.checkpoint_every
    if args.joint_ratio is not None:
        cfg.train.joint_ratio = args.joint_ratio
    return cfg.validate()


def cmd_train(args) -> int:
    from pathlib import Path

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import Corpus, generate_corpus
    from .training import StepMetrics, from_checkpoint, init_state, is_image_step, image_step, \
        to_checkpoint, train_step

    if args.steps < 0:
        raise UsageError("--steps must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if args.config or args.set or args.ablate or args.seed is not None:
            raise UsageError("--resume takes its configuration from the checkpoint")
        state = from_checkpoint(load_checkpoint(args.resume))
        if args.checkpoint_every is not None:
            state.cfg.train.checkpoint_every = args.checkpoint_every
        if args.joint_ratio is not None:
            state.cfg.train.joint_ratio = args.joint_ratio
        cfg = state.cfg
    else:
        cfg = _load_config(args)
        state = init_state(cfg)
    (out / "config.txt").write_text(cfg.to_text())

    if args.corpus:
        corpus = Corpus.load(args.corpus)
    else:
        root = out / "corpus"
        if (root / "manifest.txt").exists():
            corpus = Corpus.load(root)
        else:
            print(f"no --corpus given; generating a blink corpus in {root}", file=sys.stderr)
            corpus = generate_corpus("blink", 64, cfg.render.frames, cfg.render.resolution,
                                     cfg.render.resolution, cfg.train.seed, root)
    image_corpus = Corpus.load(args.image_corpus) if args.image_corpus else None
    if args.pretrain_static and image_corpus is None:
        raise UsageError("--pretrain-static needs --image-corpus")
    if (corpus.height, corpus.width) != (cfg.render.resolution,) * 2:
        raise UsageError(f"corpus is {corpus.height}x{corpus.width}, config renders "
                         f"{cfg.render.resolution}x{cfg.render.resolution}")

    metrics_path = out / "metrics.tsv"
    fresh = not (args.resume and metrics_path.exists())
    log = metrics_path.open("w" if fresh else "a")
    if fresh:
        log.write(StepMetrics.header() + "\n")
    if not args.quiet:
        print(StepMetrics.header(), flush=True)
    every = cfg.train.checkpoint_every

    def save():
        ckpt = to_checkpoint(state)
        save_checkpoint(out / f"ckpt_{state.step:06d}.4dgn", ckpt)
        save_checkpoint(out / "last.4dgn", ckpt)

    try:
        for i in range(args.pretrain_static + args.steps):
            if i < args.pretrain_static:
                m = image_step(state, image_corpus)
            elif image_corpus is not None and is_image_step(state.step, cfg.train.joint_ratio):
                m = image_step(state, image_corpus)
            else:
                m = train_step(state, corpus)
            line = m.to_line()
            log.write(line + "\n")
            log.flush()
            if not args.quiet:
                print(line, flush=True)
            if every > 0 and state.step % every == 0:
                save()
    finally:
        log.close()
    save()
    return 0


def cmd_render(args) -> int:
    from pathlib import Path

    import numpy as np

    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .generator import Generator
    from .imageio import quantize, write_pgm, write_ppm
    from .latents import sample_unit_sphere
    from .render import pose_from_angles
    from .training import from_checkpoint

    for name in ("times",):
        if any(not 0 <= t <= 1 for t in getattr(args, name)):
            raise UsageError("--times values must lie in [0, 1]")
    state = from_checkpoint(load_checkpoint(args.ckpt))
    gen: Generator = state.gen
    cfg = gen.cfg
    if args.res is not None:
        if args.res < 1 or (cfg.render.upsample == "up2x" and args.res % 2):
            raise UsageError("--res must be positive (and even for the up2x head)")
        cfg.render.resolution = args.res
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.dims
    fixed = None
    if args.seed_latent is not None:
        lrng = np.random.default_rng(args.seed_latent)
        fixed = (sample_unit_sphere(d.z_dim, lrng), sample_unit_sphere(d.m_dim, lrng))
    fresh_rng = np.random.default_rng(args.seed)
    near, far = cfg.render.near, cfg.render.far
    multi_pitch = len(args.pitch) > 1
    grid = []
    written = 0
    for k, pitch in enumerate(args.pitch):
        for i, yaw in enumerate(args.yaw):
            pose = pose_from_angles(pitch, yaw, cfg.render.fov_deg)
            row = []
            for j, t in enumerate(args.times):
                z, m = fixed if fixed is not None else (sample_unit_sphere(d.z_dim, fresh_rng),
                                                        sample_unit_sphere(d.m_dim, fresh_rng))
                with T.no_grad():
                    res = gen.render([pose], [t], z[None], m[None], static=args.static)
                rgb = res.rgb.data[0]
                stem = (f"p{k}_" if multi_pitch else "") + f"yaw{i}_t{j}"
                write_ppm(out / f"r_{stem}.ppm", quantize(rgb))
                if args.depth:
                    depth = (res.depth[0] - near) / (far - near)
                    write_pgm(out / f"d_{stem}.pgm", quantize(depth))
                row.append(rgb)
                written += 1
            grid.append(row)
    print(f"render\t{out}\tframes={written}\tdepth={'yes' if args.depth else 'no'}")
    if args.figure:
        from .plots import frame_grid
        rows = [f"yaw {y:+.2f}" for y in args.yaw] * len(args.pitch)
        path = frame_grid(np.array(grid), out / "grid.png", rows, [f"t={t:.2f}" for t in args.times])
        print(f"figure\t{path}")
    return 0


def cmd_verify(args) -> int:
    from .verify import format_table, run_battery
    checks = run_battery(args.seed, negative=args.self_test_negative)
    print(format_table(checks))
    failed = [c.name for c in checks if not c.passed]
    print(f"summary\tpassed={len(checks) - len(failed)}\tfailed={len(failed)}")
    if args.figure:
        from .plots import check_table
        print(f"figure\t{check_table(checks, args.figure)}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    from pathlib import Path

    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import Corpus, corpus_stats, frame_brightness
    from .plots import brightness_histogram, loss_curves
    from .training import StepMetrics, d_time_accuracy, from_checkpoint, generated_brightness

    run = Path(args.run)
    metrics_path = run / "metrics.tsv"
    if not metrics_path.exists():
        raise UsageError(f"{run} has no metrics.tsv")
    lines = metrics_path.read_text().splitlines()
    metrics = [StepMetrics.from_line(l) for l in lines[1:] if l.strip()]
    if not metrics:
        raise UsageError(f"{metrics_path} has no records")
    fig_dir = Path(args.out) if args.out else run / "figures"
    print(f"figure\t{loss_curves(metrics, fig_dir / 'losses.png')}")

    tail = metrics[-min(50, len(metrics)):]
    acc = [m.acc_time for m in tail if m.acc_time is not None]
    print("metric\tvalue")
    print(f"steps\t{metrics[-1].step}")
    if acc:
        print(f"acc_time_last{len(tail)}\t{np.mean(acc):.4f}")
    for name in ("loss_d", "loss_g", "path_reg"):
        print(f"{name}_last{len(tail)}\t{np.mean([getattr(m, name) for m in tail]):.6f}")

    ckpt_path = run / "last.4dgn"
    if args.corpus and ckpt_path.exists():
        state = from_checkpoint(load_checkpoint(ckpt_path))
        corpus = Corpus.load(args.corpus)
        stats = corpus_stats(corpus)
        gen_b = generated_brightness(state, args.samples, args.seed)
        real_b = frame_brightness(corpus.frames_float().reshape((-1,) + corpus.frames_float().shape[2:]))
        print(f"brightness_mean\t{gen_b.mean():.6f}\tcorpus={stats.brightness_mean:.6f}")
        print(f"brightness_std\t{gen_b.std():.6f}\tcorpus={stats.brightness_std:.6f}")
        print(f"heldout_acc_time\t{d_time_accuracy(state, corpus, seed=args.seed):.4f}")
        print(f"figure\t{brightness_histogram(gen_b, real_b, fig_dir / 'brightness.png')}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "render": cmd_render,
            "verify": cmd_verify, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = _glue_negative_ranges(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _limit_threads()
        from .checkpoint import CheckpointError
        from .config import ConfigError
        from .data import CorpusError
        from .training import TrainingError
    except UsageError as exc:
        print(f"fourfield: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fourfield {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, CorpusError, TrainingError, OSError, ValueError) as exc:
        print(f"fourfield {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
