"""Command-line entry point: ``qprl {encode,train,eval,ablate,plot,selftest}``."""

from __future__ import annotations

import argparse
import logging
import secrets
import shlex
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import artifacts as art
from .config import ConfigError, RunConfig, load_config
from .io import StreamError, StreamSpec, load_stream, parse_dims, write_pgm_sequence

log = logging.getLogger("qprl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3, 4

# shared config overrides: flag dest -> (config section, field)
OVERRIDES = {
    "target_bitrate": ("env", "target_bitrate"),
    "fps": ("env", "fps"),
    "lam": ("env", "lam"),
    "delta_max": ("env", "delta_max"),
    "coarsen": ("env", "coarsen"),
    "gop": ("env", "gop"),
    "task": ("env", "task"),
    "gamma": ("train", "gamma"),
}
# overrides each subcommand actually consumes
RELEVANT = {
    "encode": {"target_bitrate", "fps", "delta_max", "coarsen", "gop", "task"},
    "train": {"fps", "lam", "delta_max", "coarsen", "gop", "task", "gamma"},
    "eval": {"fps", "delta_max", "coarsen", "gop", "task"},
    "ablate": {"fps", "lam", "delta_max", "coarsen", "gop", "task", "gamma"},
    "plot": set(),
    "selftest": set(),
}
FLAG_NAMES = {"lam": "--lambda"}


class UsageError(Exception):
    pass


def _flag(dest: str) -> str:
    return FLAG_NAMES.get(dest, "--" + dest.replace("_", "-"))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--out", help="output directory (manifest.txt, checkpoints/, curves/, plots/, logs/)")
    p.add_argument("--seed", type=int, help="run seed; generated and recorded when omitted")
    p.add_argument("--target-bitrate", dest="target_bitrate", type=float)
    p.add_argument("--fps", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--delta-max", dest="delta_max", type=int)
    p.add_argument("--coarsen", type=int)
    p.add_argument("--gop", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--task", choices=("roi", "detect"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qprl", description="Task-aware delta-QP rate control on a toy block codec.")
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="encode one stream with one arm at one target bit-rate")
    _common(enc)
    src = enc.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="PGM directory or raw Y-only file")
    src.add_argument("--synthetic", choices=("roi_world", "car_world"), help="generate a synthetic scene")
    enc.add_argument("--dims", help="WIDTHxHEIGHT, for raw input or synthetic scenes")
    enc.add_argument("--frames", type=int, default=300, help="synthetic scene length")
    enc.add_argument("--scene-seed", type=int, default=0)
    enc.add_argument("--max-frames", type=int)
    enc.add_argument("--saliency", help="saliency PGM directory or raw file aligned with the input")
    enc.add_argument("--templates", help="template-bank PGM directory (detect task)")
    enc.add_argument("--checkpoint", help="agent checkpoint; omitted means the zero-action baseline")

    tr = sub.add_parser("train", help="train an agent on the synthetic benchmark")
    _common(tr)
    tr.add_argument("--frames", type=int, help="total training frames")
    tr.add_argument("--checkpoint-every", type=int, help="iterations between periodic checkpoints")

    ev = sub.add_parser("eval", help="RD curves and BD-rates of checkpoints against the baseline")
    _common(ev)
    ev.add_argument("--checkpoint", action="append", required=True, metavar="[NAME=]PATH")
    ev.add_argument("--streams", type=int, help="number of held-out streams to use")
    ev.add_argument("--kl", action="store_true", help="also compare QP-map / saliency KL (roi task)")

    ab = sub.add_parser("ablate", help="train and compare ablation arms or action resolutions")
    _common(ab)
    ab.add_argument("--study", choices=("arms", "resolution"), default="arms")
    ab.add_argument("--suite", default="full,no_reward_info,gamma_zero")
    ab.add_argument("--factors", default="1,2,4")
    ab.add_argument("--frames", type=int, help="training frames per arm")
    ab.add_argument("--streams", type=int, help="number of held-out streams to use")

    pl = sub.add_parser("plot", help="render SVG plots from the CSVs of an output directory")
    _common(pl)

    st = sub.add_parser("selftest", help="run the invariant suites")
    _common(st)
    st.add_argument("--quick", action="store_true", help="skip the training reproducibility check")
    return parser


# -- configuration -----------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        from .presets import desk_config

        cfg = desk_config(getattr(args, "task", None) or "roi")
    relevant = RELEVANT[args.command]
    env_kw, train_kw = {}, {}
    for dest, (section, name) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest not in relevant:
            log.warning("%s has no effect on '%s'; ignored", _flag(dest), args.command)
            continue
        (env_kw if section == "env" else train_kw)[name] = value
    try:
        cfg = replace(cfg, env=cfg.env.replace(**env_kw), train=replace(cfg.train, **train_kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    elif cfg.seed is None and args.command in ("train", "ablate", "encode"):
        cfg = cfg.with_seed(secrets.randbelow(2**31))
        log.info("no seed given; using %d", cfg.seed)
    return cfg


def _layout(args, required: bool = True) -> Optional[art.OutputLayout]:
    if not args.out:
        if required:
            raise UsageError(f"'{args.command}' needs --out")
        return None
    return art.OutputLayout(Path(args.out)).create()


def _manifest(layout, args, cfg: RunConfig, argv, planned=()) -> art.RunManifest:
    m = art.RunManifest(layout.manifest, "qprl " + shlex.join(argv), -1 if cfg.seed is None else cfg.seed, cfg.to_text())
    return m.write([Path(p).relative_to(layout.root) if Path(p).is_absolute() else p for p in planned])


def _benchmark(cfg: RunConfig, n_test: Optional[int] = None):
    from .benchmark import Benchmark

    b = cfg.bench
    test = tuple(b.test_seeds)[: n_test] if n_test else tuple(b.test_seeds)
    return Benchmark(
        task=cfg.env.task,
        train_seeds=tuple(b.train_seeds),
        test_seeds=test,
        n_frames=b.n_frames,
        dims=tuple(b.dims),
        targets=tuple(b.targets),
        env=cfg.env,
    )


# -- subcommands -------------------------------------------------------------------


def cmd_encode(args, cfg: RunConfig, argv) -> int:
    from .checkpoint import load_checkpoint
    from .env import RateControlEnv
    from .evaluation import net_policy, zero_policy
    from .metrics import psnr

    layout = _layout(args)
    if args.synthetic:
        dims = parse_dims(args.dims) if args.dims else (128, 128)
        spec = StreamSpec("synthetic", generator=args.synthetic, seed=args.scene_seed, n_frames=args.frames, dims=dims, fps=cfg.env.fps)
        stream = load_stream(spec)
        if args.synthetic == "car_world" and cfg.env.task != "detect":
            cfg = replace(cfg, env=cfg.env.replace(task="detect"))
    else:
        path = Path(args.input)
        kind = "pgm" if path.is_dir() else "raw"
        if kind == "raw" and not args.dims:
            raise UsageError("raw input needs --dims WIDTHxHEIGHT")
        dims = parse_dims(args.dims) if args.dims else None
        stream = load_stream(
            StreamSpec(kind, path=str(path), dims=dims, fps=cfg.env.fps, saliency=args.saliency, templates=args.templates, max_frames=args.max_frames)
        )
        if cfg.env.task == "roi" and stream.saliency is None:
            stream.saliency = np.ones((len(stream), *stream.shape))
            log.warning("no saliency given; using a uniform map")
    policy = None
    arm = "baseline"
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        policy, arm = net_policy(ck.net), "agent"
        if ck.net.spec.mb_shape != tuple(s // 16 for s in stream.shape):
            raise StreamError(f"checkpoint expects {ck.net.spec.mb_shape} macroblocks, stream has {stream.shape}")
        if ck.env_config is not None and ck.env_config.coarsen != cfg.env.coarsen:
            log.warning("using the checkpoint's coarsen=%d", ck.env_config.coarsen)
            cfg = replace(cfg, env=cfg.env.replace(coarsen=ck.env_config.coarsen))
    recon_dir = layout.root / "recon"
    qp_csv = layout.logs / "qp_maps.csv"
    stats_csv = layout.logs / "encode_stats.csv"
    man = _manifest(layout, args, cfg, argv, [recon_dir, qp_csv, stats_csv])
    frames_out, rows = [], []
    env = RateControlEnv(stream, cfg.env)
    act = (policy or zero_policy)(env)
    state = env.reset()
    qp_maps = []
    while True:
        res = env.step(act(state))
        info = res.info
        enc = info["encoded"]
        frames_out.append(enc.reconstruction.samples)
        qp_maps.append(info["qp_map"])
        rows.append(
            {
                "frame": info["frame_index"],
                "type": enc.frame_type,
                "bits": info["frame_bits"],
                "frame_qp": info["frame_qp"],
                "mean_qp": float(np.mean(info["qp_map"])),
                "psnr": psnr(stream.frames[info["frame_index"]], enc.reconstruction),
                "task_score": info["task_score"],
                "bitrate_error": info["bitrate_error"],
            }
        )
        state = res.next_state
        if res.done:
            break
    write_pgm_sequence(recon_dir, frames_out)
    man.record(recon_dir)
    man.record(art.write_csv(qp_csv, art.qp_map_rows(qp_maps), art.QP_MAP_COLUMNS))
    man.record(art.write_csv(stats_csv, rows, tuple(rows[0])))
    rate = env.cumulative_bits * cfg.env.fps / len(stream)
    print(f"{arm}: {len(stream)} frames, {rate / 1000:.1f} kbps (target {cfg.env.target_bitrate / 1000:.1f}), mean PSNR {np.mean([r['psnr'] for r in rows]):.2f} dB")
    man.close()
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, argv) -> int:
    from .benchmark import make_env_factory
    from .checkpoint import save_checkpoint
    from .plots import plot_training
    from .rl.train import METRIC_COLUMNS, train

    layout = _layout(args)
    tcfg = cfg.train
    if args.frames is not None:
        tcfg = replace(tcfg, total_frames=args.frames)
    if args.checkpoint_every is not None:
        tcfg = replace(tcfg, checkpoint_every=args.checkpoint_every)
    cfg = replace(cfg, train=tcfg)
    bench = _benchmark(cfg)
    final = layout.checkpoints / "final.ckpt"
    metrics_csv = layout.logs / "train_metrics.csv"
    man = _manifest(layout, args, cfg, argv, [final, metrics_csv, layout.plots / "training.svg"])
    factory = make_env_factory(bench.train_streams(), bench.env, bench.targets, tcfg.seed)
    rows: list[dict] = []

    def on_iter(row):
        rows.append(row)
        art.write_csv(metrics_csv, rows, METRIC_COLUMNS)

    def on_ckpt(net, it):
        man.record(save_checkpoint(layout.checkpoints / f"iter_{it:05d}.ckpt", net, tcfg, bench.env, {"iteration": it}))

    t0 = time.time()
    net, _ = train(factory, tcfg, on_checkpoint=on_ckpt, on_iteration=on_iter)
    man.record(save_checkpoint(final, net, tcfg, bench.env, {"frames": tcfg.total_frames}))
    man.record(art.write_csv(metrics_csv, rows, METRIC_COLUMNS))
    if rows:
        man.record(plot_training(rows, layout.plots / "training.svg"))
    print(f"trained {tcfg.total_frames} frames in {time.time() - t0:.0f}s -> {final}")
    man.close()
    return EXIT_OK


def _named_checkpoints(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for i, item in enumerate(items):
        name, _, path = item.rpartition("=")
        name = name or ("agent" if len(items) == 1 else f"agent{i}")
        if name in out or name == "baseline":
            raise UsageError(f"duplicate or reserved checkpoint name {name!r}")
        out[name] = path
    return out


def _write_reports(layout, man, baseline, reports, metrics) -> list[dict]:
    from .plots import plot_bd_bars, plot_rd

    rd = art.rd_rows(baseline)
    for rep in reports.values():
        rd += art.rd_rows(rep.curves)
    man.record(art.write_csv(layout.curves / "rd_curves.csv", rd, art.RD_COLUMNS))
    summary, per_stream = [], []
    for arm, rep in reports.items():
        for m in metrics:
            mean, se = rep.summary(m)
            summary.append({"arm": arm, "metric": m, "bd_rate_mean": mean, "bd_rate_se": se, "n_streams": len(rep.bd[m])})
            per_stream += [{"arm": arm, "metric": m, "stream": s, "bd_rate": v} for s, v in zip(rep.curves, rep.bd[m])]
    man.record(art.write_csv(layout.curves / "bd_summary.csv", summary, art.BD_COLUMNS))
    man.record(art.write_csv(layout.curves / "bd_streams.csv", per_stream, art.BD_STREAM_COLUMNS))
    for p in plot_rd(rd, layout.plots):
        man.record(p)
    man.record(plot_bd_bars(summary, layout.plots / "bd_summary.svg"))
    for r in summary:
        print(f"{r['arm']:>16s} {r['metric']:>10s} BD-rate {r['bd_rate_mean']:+7.2f}% +/- {r['bd_rate_se']:.2f}")
    return summary


def cmd_eval(args, cfg: RunConfig, argv) -> int:
    from .benchmark import qp_kl_comparison
    from .checkpoint import load_checkpoint
    from .evaluation import compare_arms

    layout = _layout(args)
    paths = _named_checkpoints(args.checkpoint)
    nets = {}
    for name, path in paths.items():
        ck = load_checkpoint(path)
        nets[name] = ck.net
        if ck.env_config is not None and ck.env_config.coarsen != cfg.env.coarsen:
            cfg = replace(cfg, env=cfg.env.replace(coarsen=ck.env_config.coarsen))
    bench = _benchmark(cfg, args.streams)
    man = _manifest(layout, args, cfg, argv, [layout.curves / "rd_curves.csv", layout.curves / "bd_summary.csv"])
    baseline, reports = compare_arms(bench.test_streams(), bench.targets, bench.env, nets, bench.metrics)
    _write_reports(layout, man, baseline, reports, bench.metrics)
    if args.kl:
        if cfg.env.task != "roi":
            log.warning("--kl needs saliency maps; only the roi task has them")
        else:
            target = float(np.median(bench.targets))
            rows = []
            for name, net in nets.items():
                kl = qp_kl_comparison(bench.test_streams(), bench.env, net, target)
                rows.append({"arm": name, "target": target, "kl_agent": kl["agent"], "kl_baseline": kl["baseline"]})
                print(f"{name}: QP-map KL agent {kl['agent']:.4f} vs baseline {kl['baseline']:.4f}")
            man.record(art.write_csv(layout.curves / "qp_kl.csv", rows, ("arm", "target", "kl_agent", "kl_baseline")))
    man.close()
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, argv) -> int:
    from .benchmark import run_ablation, run_resolution_study
    from .checkpoint import save_checkpoint
    from .plots import plot_resolution
    from .rl.train import METRIC_COLUMNS

    layout = _layout(args)
    if args.frames is not None:
        cfg = replace(cfg, train=replace(cfg.train, total_frames=args.frames))
    bench = _benchmark(cfg, args.streams)
    if args.study == "arms":
        suite = tuple(s.strip() for s in args.suite.split(",") if s.strip())
        man = _manifest(layout, args, cfg, argv, [layout.checkpoints / f"{a}.ckpt" for a in suite])
        res = run_ablation(bench, cfg.train, suite)
        for arm in suite:
            man.record(save_checkpoint(layout.checkpoints / f"{arm}.ckpt", res.nets[arm], cfg.train, bench.env, {"arm": arm}))
            man.record(art.write_csv(layout.logs / f"{arm}_metrics.csv", res.metrics.get(arm, []), METRIC_COLUMNS))
        _write_reports(layout, man, res.baseline, res.reports, bench.metrics)
    else:
        factors = tuple(int(f) for f in args.factors.split(","))
        man = _manifest(layout, args, cfg, argv, [layout.curves / "resolution_bd.csv", layout.plots / "resolution.svg"])
        res = run_resolution_study(bench, cfg.train, factors)
        for f in factors:
            env = bench.env.replace(coarsen=f)
            man.record(save_checkpoint(layout.checkpoints / f"coarsen_{f}.ckpt", res.nets[f], cfg.train, env, {"coarsen": f}))
            man.record(art.write_csv(layout.logs / f"coarsen_{f}_metrics.csv", res.metrics.get(f, []), METRIC_COLUMNS))
        man.record(art.write_csv(layout.curves / "resolution_bd.csv", res.rows, ("coarsen", "metric", "bd_rate_mean", "bd_rate_se")))
        man.record(plot_resolution(res.rows, layout.plots / "resolution.svg"))
        for r in res.rows:
            print(f"f={r['coarsen']}: {r['metric']} BD-rate {r['bd_rate_mean']:+.2f}% +/- {r['bd_rate_se']:.2f}")
        print(f"best factor {res.best_factor} ({res.optimum_kind} optimum)")
    man.close()
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig, argv) -> int:
    from .plots import plot_bd_bars, plot_rd, plot_resolution, plot_training

    if not args.out:
        raise UsageError("'plot' needs --out pointing at an existing output directory")
    root = Path(args.out)
    if not root.is_dir():
        raise StreamError(f"{root}: no such output directory")
    layout = art.OutputLayout(root).create()
    made = []
    if (layout.curves / "rd_curves.csv").exists():
        made += plot_rd(art.read_csv(layout.curves / "rd_curves.csv"), layout.plots)
    if (layout.curves / "bd_summary.csv").exists():
        made.append(plot_bd_bars(art.read_csv(layout.curves / "bd_summary.csv"), layout.plots / "bd_summary.svg"))
    if (layout.curves / "resolution_bd.csv").exists():
        made.append(plot_resolution(art.read_csv(layout.curves / "resolution_bd.csv"), layout.plots / "resolution.svg"))
    for p in sorted(layout.logs.glob("*metrics.csv")):
        rows = art.read_csv(p)
        if rows:
            made.append(plot_training(rows, layout.plots / (p.stem + ".svg")))
    if not made:
        raise StreamError(f"{root}: no CSV tables to plot")
    for p in made:
        print(p)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig, argv) -> int:
    from .selftest import run_all

    results = run_all(quick=args.quick)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


COMMANDS = {
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, argv)
    except (ConfigError, UsageError) as exc:
        print(f"qprl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileExistsError as exc:
        print(f"qprl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StreamError, ValueError, OSError) as exc:
        print(f"qprl {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, FloatingPointError) as exc:
        print(f"qprl {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
