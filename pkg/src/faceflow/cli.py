"""Command line entry point.

Subcommands:

    run        replay a conversation scenario into a motion trace
    train      fit the micro model on the built-in synthetic tone task
    eval       score a generated trace against a reference trace
    bench      measure sampling and rendering throughput
    gradcheck  compare autograd against finite differences

Exit codes: 0 on success, 2 for configuration or scenario errors, 3 for
numeric failures (non-finite values, failed gradient verification).  The
default output directory comes from FACEFLOW_OUTPUT_DIR, falling back to
the working directory.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import engine as eng
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .metrics import compute_report, format_report
from .microtask import MicroTask, micro_model_config
from .model import ModelConfig
from .motion import make_blendshape_model, read_trace
from .renderer import PerceptualStub, SyntheticRenderer, read_images
from .scenario import load_scenario
from .training import (
    FaceFlowModel,
    TrainingConfig,
    finite_difference_check,
    forward_batch,
    load_training_config,
    make_optimizer,
    parameter_family,
    perturb_zero_parameters,
    train_step,
    write_loss_csv,
)


def _add_output_dir(p: argparse.ArgumentParser):
    p.add_argument("--output-dir", default=None,
                   help="where to write results (default: $FACEFLOW_OUTPUT_DIR or cwd)")


def _resolve_output_dir(args) -> str:
    out = args.output_dir if args.output_dir is not None else eng.default_output_dir()
    os.makedirs(out, exist_ok=True)
    return out


def _add_model_config(p: argparse.ArgumentParser):
    group = p.add_mutually_exclusive_group()
    group.add_argument("--model-config", default=None,
                       help="JSON file of architecture overrides")
    group.add_argument("--micro", action="store_true",
                       help="use the small trainable configuration")


def _resolve_model_config(args) -> ModelConfig:
    if args.micro:
        return micro_model_config()
    if args.model_config is not None:
        return eng.load_model_config(args.model_config)
    return ModelConfig()


def _engine_config(args) -> eng.EngineConfig:
    rot = args.magnitude if args.magnitude_rot is None else args.magnitude_rot
    trans = args.magnitude if args.magnitude_trans is None else args.magnitude_trans
    return eng.EngineConfig(
        model=_resolve_model_config(args),
        checkpoint=args.checkpoint,
        steps=args.steps,
        magnitude_rot=rot,
        magnitude_trans=trans,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    if args.checkpoint is None and not args.random_init:
        raise ConfigError("run needs --checkpoint, or --random-init to proceed untrained")
    config = _engine_config(args)
    scenario = load_scenario(args.scenario)
    model = eng.build_model(config)
    result = eng.run_scenario(scenario, model, config,
                              producer_threads=args.producer_threads)
    out = _resolve_output_dir(args)
    trace_path, log_path = eng.write_outputs(result, out)
    print(f"windows: {len(result.window_log)}")
    print(f"frames: {result.frames}")
    print(f"trace: {trace_path}")
    print(f"window log: {log_path}")
    if args.plot:
        from .plots import save_motion_overview

        fig = save_motion_overview(os.path.join(out, "motion_overview.png"),
                                   result.coeffs, result.states)
        print(f"figure: {fig}")
    return 0


def cmd_train(args) -> int:
    if args.config is not None:
        config = load_training_config(args.config)
    else:
        config = TrainingConfig(stage=args.stage, steps=args.steps,
                                warmup_steps=args.warmup, lr=args.lr,
                                batch_size=args.batch_size, seed=args.seed)
    torch.set_num_threads(1)
    task = MicroTask(seed=args.task_seed, conversations=args.conversations,
                     windows_per_conversation=args.windows_per_conversation)
    model = FaceFlowModel(micro_model_config(), seed=config.seed)
    if args.init_checkpoint is not None:
        load_checkpoint(model, args.init_checkpoint)
    perceptual = PerceptualStub() if config.stage == 2 else None
    renderer = model.renderer if config.stage == 2 else None
    optimizer = make_optimizer(model, config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(config.steps):
        batch = task.batch(rng, config.batch_size, target_renderer=renderer)
        row = train_step(model, batch, optimizer, config.stage, step, config.lr,
                         config.warmup_steps, config.weights, perceptual)
        history.append(row)
        if args.log_every and step % args.log_every == 0:
            print(f"step {step}: loss {row['total']:.6f}")

    out = _resolve_output_dir(args)
    ckpt_path = args.out or os.path.join(out, "model.ffck")
    save_checkpoint(model, ckpt_path)
    csv_path = os.path.join(out, "loss.csv")
    write_loss_csv(csv_path, history)
    from .plots import save_loss_curve

    fig = save_loss_curve(os.path.join(out, "loss.png"), history)
    first, last = history[0]["total"], history[-1]["total"]
    print(f"steps: {config.steps}")
    print(f"loss: {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"loss csv: {csv_path}")
    print(f"figure: {fig}")
    return 0


def _load_images(path, coeffs, renderer: SyntheticRenderer):
    if path is not None:
        return read_images(path)
    return renderer.render_numpy(coeffs)


def cmd_eval(args) -> int:
    pred, _pred_states = read_trace(args.trace)
    gt, _gt_states = read_trace(args.reference)
    if pred.shape[0] != gt.shape[0]:
        raise ConfigError(
            f"trace lengths differ: {pred.shape[0]} vs {gt.shape[0]} frames")
    blend = make_blendshape_model(args.blendshape_seed)
    renderer = SyntheticRenderer(blend)
    pred_images = _load_images(args.pred_images, pred, renderer)
    gt_images = _load_images(args.gt_images, gt, renderer)
    report = compute_report(pred, gt, blend, pred_images, gt_images,
                            k=args.clusters, seed=args.seed)
    text = format_report(report)
    out = _resolve_output_dir(args)
    report_path = os.path.join(out, "report.txt")
    with open(report_path, "w") as f:
        f.write(text)
    from .plots import save_metric_bars, save_mouth_comparison

    bars = save_metric_bars(os.path.join(out, "metrics.png"), report)
    mouth = save_mouth_comparison(os.path.join(out, "mouth_opening.png"),
                                  pred, gt, blend)
    print(text, end="")
    print(f"report: {report_path}")
    print(f"figures: {bars}, {mouth}")
    return 0


def cmd_bench(args) -> int:
    config = _engine_config(args)
    for _ in range(args.repeat):
        report = eng.run_bench(config, windows=args.windows)
        print(eng.format_bench(report), end="")
    return 0


def cmd_gradcheck(args) -> int:
    torch.set_num_threads(1)
    task = MicroTask(seed=11, conversations=2, windows_per_conversation=4)
    model = FaceFlowModel(micro_model_config(), seed=args.seed)
    gen = torch.Generator().manual_seed(args.seed + 5)
    perturb_zero_parameters(model, generator=gen)
    rng = np.random.default_rng(args.seed)
    renderer = model.renderer if args.stage == 2 else None
    perceptual = PerceptualStub() if args.stage == 2 else None
    batch = task.batch(rng, 2, target_renderer=renderer)

    def loss_fn():
        total, _ = forward_batch(model, batch, args.stage, perceptual=perceptual)
        return total

    report = finite_difference_check(loss_fn, model, per_param=args.per_param,
                                     h=args.step, threshold=args.threshold,
                                     seed=args.seed)
    by_family = {}
    for entry in report.entries:
        family = parameter_family(entry.name)
        by_family[family] = max(by_family.get(family, 0.0), entry.rel_err)
    for family in sorted(by_family):
        print(f"{family}: max rel err {by_family[family]:.3e}")
    print(f"checked {len(report.entries)} values, max rel err {report.max_rel_err:.3e}, "
          f"threshold {report.threshold:.1e}")
    if not report.passed:
        raise NumericError(f"gradient check failed: {report.max_rel_err:.3e}")
    print("gradcheck passed")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceflow",
        description="Streaming speech-to-facial-motion engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay a scenario into a motion trace")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--checkpoint", default=None, help="trained weights (.ffck)")
    p.add_argument("--random-init", action="store_true",
                   help="run with freshly initialized weights")
    _add_model_config(p)
    p.add_argument("--steps", type=int, default=4, help="Euler sampling steps")
    p.add_argument("--magnitude", type=float, default=0.3,
                   help="motion-magnitude guidance for both dials")
    p.add_argument("--magnitude-rot", type=float, default=None)
    p.add_argument("--magnitude-trans", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--producer-threads", type=int, default=0,
                   help="ingest on this many worker threads (0 = inline)")
    p.add_argument("--plot", action="store_true", help="also write motion_overview.png")
    _add_output_dir(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train the micro model on the synthetic task")
    p.add_argument("--config", default=None,
                   help="training config JSON; overrides the flags below")
    p.add_argument("--stage", type=int, default=1, choices=(1, 2))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-seed", type=int, default=11)
    p.add_argument("--conversations", type=int, default=24)
    p.add_argument("--windows-per-conversation", type=int, default=8)
    p.add_argument("--init-checkpoint", default=None,
                   help="start from these weights (stage 2 follows stage 1)")
    p.add_argument("--out", default=None, help="checkpoint path (default: model.ffck)")
    p.add_argument("--log-every", type=int, default=200)
    _add_output_dir(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trace against a reference")
    p.add_argument("--trace", required=True, help="generated trace CSV")
    p.add_argument("--reference", required=True, help="ground-truth trace CSV")
    p.add_argument("--pred-images", default=None,
                   help="rendered frames (.ffim); rendered from the trace if absent")
    p.add_argument("--gt-images", default=None)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blendshape-seed", type=int, default=7)
    _add_output_dir(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure sampling throughput")
    p.add_argument("--checkpoint", default=None)
    _add_model_config(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--windows", type=int, default=3)
    p.add_argument("--magnitude", type=float, default=0.3)
    p.add_argument("--magnitude-rot", type=float, default=None)
    p.add_argument("--magnitude-trans", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--stage", type=int, default=1, choices=(1, 2))
    p.add_argument("--per-param", type=int, default=2)
    p.add_argument("--step", type=float, default=3e-5,
                   help="central-difference step size")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
