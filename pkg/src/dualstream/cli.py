"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ABLATIONS, ConfigError, RunConfig, load_config, parse_overrides, from_raw

log = logging.getLogger("dualstream")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> RunConfig:
    overrides = args.set or []
    if args.config:
        return load_config(args.config, overrides)
    return from_raw(parse_overrides(overrides))


def _log_dir(args) -> Path:
    from .trainer import default_log_dir

    return Path(args.log_dir) if args.log_dir else default_log_dir()


def cmd_train(args) -> int:
    from .trainer import Trainer

    config = _config(args)
    out = _log_dir(args)
    if args.resume:
        trainer = Trainer.load_state(args.resume, out)
    else:
        trainer = Trainer(config, out)
    path, train_log = trainer.train(evaluate=not args.no_eval)
    if args.save_state:
        trainer.save_state(args.save_state)
    print(f"policy checkpoint: {path}")
    if train_log.evals:
        print(f"final eval reward: {train_log.evals[-1]['episode_reward']:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    report = evaluate(args.checkpoint, args.scenario, args.episodes, args.seeds)
    if args.out:
        csv_path, txt_path = report.write(args.out)
        print(f"wrote {csv_path} and {txt_path}")
    print(report.text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation, summarize

    base = _config(args)
    out = _log_dir(args)
    results = run_ablation(base, out, args.tags or ABLATIONS, args.seeds, evaluate=not args.no_eval,
                           progress=print)
    summary = summarize(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(summary.text())
    print(summary.text(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evaluation import plot

    for path in plot(args.logs, args.out, args.total_frames):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_attention_viz(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import load_policy, model_policy
    from .model import frames_to_tensor
    from .worldsim import DrivingWorld

    model, agent, config = load_policy(args.checkpoint)
    if not (model.cfg.use_motion and model.cfg.use_interaction):
        raise RuntimeError("checkpoint has no interaction module (ablation without interaction)")
    env = DrivingWorld(config.env)
    policy = model_policy(model, agent)
    obs = env.reset(args.env_seed)
    for _ in range(args.warmup):
        if env.state.done:
            break
        obs = env.step(policy(obs))[0]
    with torch.no_grad():
        x = model(frames_to_tensor(obs.frames[None]), training=False).X[0].numpy()
    side = model.semantic.spatial
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # each row of X is one query position's attention over the feature grid
    fig, axes = plt.subplots(side, side + 1, figsize=(1.2 * (side + 1), 1.2 * side), squeeze=False)
    for r in range(side):
        axes[r, 0].imshow(obs.latest if r == 0 else np.ones_like(obs.latest))
        for c in range(side):
            axes[r, c + 1].imshow(x[r * side + c].reshape(side, side), cmap="viridis")
    for ax in axes.ravel():
        ax.axis("off")
    grid = out / "attention_grid.png"
    fig.savefig(grid, dpi=80, bbox_inches="tight")
    plt.close(fig)

    fig, (a0, a1) = plt.subplots(1, 2, figsize=(6, 3))
    a0.imshow(obs.latest)
    a0.set_title("frame")
    a1.imshow(x.mean(0).reshape(side, side), cmap="viridis")
    a1.set_title("mean attention")
    for ax in (a0, a1):
        ax.axis("off")
    mean_path = out / "attention_mean.png"
    fig.savefig(mean_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    np.save(out / "attention.npy", x)
    print(f"wrote {grid} and {mean_path}")
    return EXIT_OK


def cmd_oracle_serve(args) -> int:
    from .oracle import OracleServer

    server = OracleServer(args.host, args.port)
    print(f"oracle service listening on {server.url}", flush=True)
    server.start()
    try:
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualstream", description="Dual-stream pixel SAC on a toy driving world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--log-dir", help="output directory (default: $DUALSTREAM_LOG_DIR or ./runs)")
        sp.add_argument("--no-eval", action="store_true", help="skip periodic evaluation")

    sp = sub.add_parser("train", help="train one agent")
    config_args(sp)
    sp.add_argument("--resume", help="training-state archive to continue from")
    sp.add_argument("--save-state", help="write the full training state here when done")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="roll out a saved policy")
    sp.add_argument("checkpoint")
    sp.add_argument("--scenario", choices=("JW", "HB", "HW"))
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--out", help="directory for the episode CSV and text report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train M1-M4 and full on shared seeds")
    config_args(sp)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--tags", nargs="+", choices=ABLATIONS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="reward, loss and delta curves from training logs")
    sp.add_argument("logs", nargs="+", help="training log directories")
    sp.add_argument("--out", required=True)
    sp.add_argument("--total-frames", type=int)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("attention-viz", help="interaction-map heatmaps for one frame")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--env-seed", type=int, default=0)
    sp.add_argument("--warmup", type=int, default=10, help="policy steps before the visualised frame")
    sp.set_defaults(func=cmd_attention_viz)

    sp = sub.add_parser("oracle-serve", help="run the stub oracle service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8765)
    sp.add_argument("--duration", type=float, default=0, help="seconds to serve; 0 serves until interrupted")
    sp.set_defaults(func=cmd_oracle_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
