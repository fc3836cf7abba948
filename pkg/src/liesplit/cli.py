"""``liesplit`` command-line entry points."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch

from . import analysis, io
from .datagen import KINDS, Geometry, gen_dataset
from .flowfield import DivergenceError, TransformParams
from .losses import LossWeights, reconstruct_sequence
from .trainer import PROFILES, TrainConfig, as_frames, evaluate, init_phase, main_phase, new_state

logger = logging.getLogger("liesplit")

EXIT_USAGE = 2
EXIT_DIVERGED = 3

# train flags that map one-to-one onto TrainConfig fields
_TRAIN_FLAGS = {
    "init_steps": "init_steps", "steps": "main_steps", "k": "K", "batch": "batch_size",
    "lr": "lr", "weights": "weights", "seed": "seed", "trans_stride": "trans_stride",
    "precision": "precision", "checkpoint_interval": "checkpoint_interval",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _weights(text: str) -> LossWeights:
    try:
        return LossWeights.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pair(text: str):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers") from None
    return (x, y)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="liesplit",
        description="Generate moving-shape datasets, train the two-transform model, and analyse it.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic sequence dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--n", required=True, type=int)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--size", type=int, default=64, help="image side in pixels (objects scale along)")

    t = sub.add_parser("train", help="run the initialization and main training phases")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--profile", choices=sorted(PROFILES), default="paper")
    t.add_argument("--init-steps", type=int)
    t.add_argument("--steps", type=int, help="main-phase steps")
    t.add_argument("--k", type=float, help="Euler steps per unit integration time")
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weights", type=_weights, help="alpha,beta,gamma,delta,epsilon,zeta")
    t.add_argument("--seed", type=int)
    t.add_argument("--trans-stride", type=int)
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="write the analysis report for a checkpoint")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--limit", type=int, help="evaluate only the first N sequences")

    v = sub.add_parser("viz", help="render flow fields and a reconstruction strip")
    v.add_argument("--ckpt", required=True, type=Path)
    v.add_argument("--lambda-g", required=True, type=float)
    v.add_argument("--lambda-v", required=True, type=float)
    v.add_argument("--c-g", type=_pair, default=(0.0, 0.0))
    v.add_argument("--c-v", type=_pair, default=(0.0, 0.0))
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--data", type=Path, help="dataset for the strip (defaults to the training data)")
    v.add_argument("--index", type=int, default=0, help="sequence shown in the strip")
    v.add_argument("--resolution", type=int, default=64)
    return p


def _load_data(path: Path):
    try:
        return io.load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"missing data: {exc}", EXIT_USAGE) from None


def _load_ckpt(path: Path):
    if not path.exists():
        raise CliError(f"no checkpoint at {path}", EXIT_USAGE)
    try:
        return io.load_checkpoint(path)
    except io.FormatError as exc:
        raise CliError(str(exc)) from None


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError("--n must be positive", EXIT_USAGE)
    geom = Geometry() if args.size == 64 else Geometry.scaled(args.size)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        seqs, meta = gen_dataset(args.n, args.kind, args.seed, geom)
        io.save_dataset(args.out, seqs, meta)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {args.n} {args.kind} sequences to {args.out}")
    return 0


def _train_config(args, base: TrainConfig, n_sequences: int, size: int) -> TrainConfig:
    overrides = {}
    for flag, name in _TRAIN_FLAGS.items():
        val = getattr(args, flag)
        if val is not None:
            overrides[name] = val
    return replace(base, dataset_size=n_sequences, image_size=size, **overrides)


def cmd_train(args) -> int:
    seqs, manifest = _load_data(args.data)
    size = manifest["height"]
    if args.resume is not None:
        state, base, _ = _load_ckpt(args.resume)
        if base.image_size != size:
            raise CliError(f"checkpoint was trained on {base.image_size}px images, data is {size}px")
        config = _train_config(args, base, len(seqs), size)
        if config.precision != base.precision:
            raise CliError("--precision cannot change on resume")
        mode = "a"
    else:
        config = _train_config(args, PROFILES[args.profile], len(seqs), size)
        state = new_state(config)
        mode = "w"
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "metrics.jsonl"
    if mode == "w":
        log_path.write_text("")
    extra = {"data": str(args.data.resolve())}

    def log(rec):
        io.append_jsonl(log_path, rec)

    def checkpoint(s, name=None):
        io.save_checkpoint(args.out / (name or f"step_{s.step:07d}.ckpt"), s, config, extra)

    frames = as_frames(seqs, config.dtype)
    try:
        if state.main_steps_done == 0 and (state.init_steps_done < config.init_steps or args.resume is None):
            rep = init_phase(state, frames, config, log=log)
            log({"phase": "init_summary", "step": state.step, "heldout_init_loss": rep.final_loss,
                 "converged": rep.converged})
            checkpoint(state, "init.ckpt")
        main_phase(state, frames, config, log=log, checkpoint=checkpoint)
    except DivergenceError as exc:
        checkpoint(state, "diverged.ckpt")
        raise CliError(f"training aborted by the {exc}", EXIT_DIVERGED) from None
    checkpoint(state, "final.ckpt")
    print(f"finished at step {state.step}; checkpoint {args.out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    state, config, header = _load_ckpt(args.ckpt)
    seqs, manifest = _load_data(args.data)
    if manifest["height"] != config.image_size:
        raise CliError(f"checkpoint expects {config.image_size}px images, data is {manifest['height']}px")
    if args.limit is not None:
        seqs = seqs[:args.limit]
    metrics = evaluate(state, as_frames(seqs, config.dtype), config)
    losses = dict(metrics.mean, init_loss=metrics.init_loss)
    dataset = {"kind": manifest["kind"], "n": len(seqs), "frames": manifest["frames"],
               "generator": manifest["generator"]}
    rep = analysis.report(state.ode_g, state.ode_v, losses, dataset=dataset)
    rep["checkpoint"] = {"step": header["step"], "init_steps_done": header["init_steps_done"],
                         "main_steps_done": header["main_steps_done"]}
    rep["config"] = config.to_dict()
    io.save_report(args.report, rep)
    print(rep["table"])
    return 0


def cmd_viz(args) -> int:
    state, config, header = _load_ckpt(args.ckpt)
    args.out.mkdir(parents=True, exist_ok=True)
    fields = [("g", state.ode_g, 2.0, (0.0, 0.0), "flow_g_lambda2.png"),
              ("v", state.ode_v, 2.0, (0.0, 0.0), "flow_v_lambda2.png"),
              ("g", state.ode_g, args.lambda_g, args.c_g, "flow_g.png"),
              ("v", state.ode_v, args.lambda_v, args.c_v, "flow_v.png")]
    for _, ode, lam, c, name in fields:
        img = analysis.render_flow_field(ode, TransformParams.of(lam, c), config.K, args.resolution)
        io.save_png(args.out / name, img)
    data = args.data or header.get("extra", {}).get("data")
    if data is None or not (Path(data) / io.MANIFEST_NAME).exists():
        print("no dataset available; reconstruction strip skipped", file=sys.stderr)
        return 0
    seqs, _ = _load_data(Path(data))
    if not 0 <= args.index < len(seqs):
        raise CliError(f"--index {args.index} out of range for {len(seqs)} sequences", EXIT_USAGE)
    frames = as_frames(seqs[args.index:args.index + 1], config.dtype)
    with torch.no_grad():
        enc = state.encoder(frames)
        pred = reconstruct_sequence(frames[:, 0], enc, state.ode_g, state.ode_v, frames.shape[1], config.K)
    given = frames[0, :, 0]
    recon = torch.cat([given[:1], pred[0, :, 0]], dim=0)
    io.save_png(args.out / "reconstruction_strip.png", analysis.reconstruction_strip(given, recon))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"liesplit {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, io.FormatError) as exc:
        print(f"liesplit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
