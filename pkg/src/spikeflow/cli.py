"""``spikeflow`` command-line interface.

Exit status: 0 on success, 1 on usage or contract errors (bad flags, bad
config keys, digest mismatches, shape problems), 2 on I/O and file-format
errors. Machine-readable results go to files; stdout carries a short summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .ann import VARIANTS, NetworkConfig
from .checkpoint import config_from_records, load_checkpoint, read_records
from .data import load_dataset, make_translation_dataset
from .errors import CheckpointError, ContractError, DataError, FormatError, NumericError
from .evaluation import ENERGY_RATIO, count_ops, evaluate, expected_config
from .events import (
    encode_spike_input,
    load_texture,
    parse_event_file,
    ramp_texture,
    save_sample,
    smooth_texture,
    synthesize_events,
)
from .trainer import load_config, train


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikeflow", description="Hybrid spiking/analog optical flow from event streams.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="synthesize events, an image pair and ground-truth flow")
    s.add_argument("--texture", default="smooth", help="PGM texture path or one of: smooth, ramp (default: smooth)")
    s.add_argument("--size", type=int, default=64, help="procedural texture size in pixels (default: 64)")
    s.add_argument("--flow-u", type=float, default=0.0, help="horizontal displacement in pixels (default: 0)")
    s.add_argument("--flow-v", type=float, default=0.0, help="vertical displacement in pixels (default: 0)")
    s.add_argument("--theta", type=float, default=0.15, help="log-intensity contrast threshold (default: 0.15)")
    s.add_argument("--steps", type=int, default=20, help="sub-steps simulated across the window (default: 20)")
    s.add_argument("--window-us", type=int, default=50_000, help="window length in microseconds (default: 50000)")
    s.add_argument("--random-flows", type=int, default=0, metavar="COUNT",
                   help="write COUNT samples with random textures and flows instead of one")
    s.add_argument("--max-flow", type=float, default=3.0, help="flow magnitude bound for --random-flows (default: 3)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    s.add_argument("--out-dir", required=True, help="output directory")

    e = sub.add_parser("encode", help="bin an event file into binary spike frames")
    e.add_argument("--events", required=True, help="event file (.aer)")
    e.add_argument("--n-frames", type=int, default=5, help="frames per half window (default: 5)")
    e.add_argument("--t-start", type=int, help="window start in microseconds (default: first event)")
    e.add_argument("--t-end", type=int, help="window end in microseconds (default: last event)")
    e.add_argument("--out", help="write the [N,4,H,W] frames to this .npy file")

    t = sub.add_parser("train", help="self-supervised training")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--data-dir", required=True, help="sample directory or directory of samples")
    t.add_argument("--out-dir", required=True, help="checkpoint and loss-curve directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--seed", type=int, help="override the config seed")

    for name, help_text in (("eval", "masked AEE, loss and activity of a checkpoint"),
                            ("energy", "synaptic-operation and energy report")):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--checkpoint", required=name == "eval", help="checkpoint file (.sfn)")
        c.add_argument("--data-dir", required=name == "eval", help="sample directory or directory of samples")
        c.add_argument("--dt-mode", choices=("dt1", "dt4"), help="expected dt mode (default: the checkpoint's)")
        c.add_argument("--n-frames", type=int, help="expected frames per half window")
        c.add_argument("--threshold", type=float, help="expected firing threshold")
        c.add_argument("--out-dir", help="directory for report files")
        c.add_argument("--energy-ratio", type=float, default=ENERGY_RATIO,
                       help=f"MAC/AC energy ratio (default: {ENERGY_RATIO})")
        if name == "energy":
            c.add_argument("--activity", type=float,
                           help="firing rate used for every population instead of measuring it")
            c.add_argument("--height", type=int, default=256, help="input height without data (default: 256)")
            c.add_argument("--width", type=int, default=256, help="input width without data (default: 256)")
            c.add_argument("--base-width", type=int, default=64, help="channel base without checkpoint (default: 64)")
            c.add_argument("--variant", choices=VARIANTS, default="standard",
                           help="hybrid variant without checkpoint (default: standard)")

    i = sub.add_parser("inspect-checkpoint", help="print the configuration and tensors of a checkpoint")
    i.add_argument("--checkpoint", required=True, help="checkpoint file (.sfn)")
    return p


def cmd_synth(args) -> None:
    window = (0, args.window_us)
    if args.random_flows:
        make_translation_dataset(args.random_flows, args.size, args.max_flow, args.theta, seed=args.seed,
                                 timesteps=args.steps, window=window, out_dir=args.out_dir)
        print(f"wrote {args.random_flows} samples to {args.out_dir}")
        return
    if args.texture == "smooth":
        tex = smooth_texture(args.size, np.random.default_rng(args.seed))
    elif args.texture == "ramp":
        tex = ramp_texture(args.size)
    else:
        tex = load_texture(args.texture)
    stream, pair, gt = synthesize_events(tex, (args.flow_u, args.flow_v), window, args.theta, args.steps)
    save_sample(args.out_dir, stream, pair, gt)
    print(f"wrote {len(stream)} events to {args.out_dir}")


def cmd_encode(args) -> None:
    stream = parse_event_file(args.events)
    if len(stream) == 0 and (args.t_start is None or args.t_end is None):
        raise ContractError("event file is empty; pass --t-start and --t-end")
    t0 = int(stream.t[0]) if args.t_start is None else args.t_start
    t1 = int(stream.t[-1]) if args.t_end is None else args.t_end
    seq = encode_spike_input(stream, (t0, t1), args.n_frames)
    print("frame former_on former_off latter_on latter_off")
    for n, frame in enumerate(seq.frames):
        print(n, *(int(c) for c in frame.sum(axis=(1, 2))))
    if args.out:
        np.save(args.out, seq.frames)


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = load_dataset(args.data_dir, cfg.n_frames)
    result = train(dataset, cfg, out_dir=args.out_dir, resume=args.resume)
    print(f"iterations {len(result.curve)} initial loss {result.initial_loss:.6g} final loss {result.final_loss:.6g}")
    print(f"checkpoint {result.checkpoint_path}")


def cmd_eval(args) -> None:
    report = evaluate(args.checkpoint, args.data_dir, args.dt_mode, args.n_frames, args.threshold,
                      out_dir=args.out_dir, energy_ratio=args.energy_ratio)
    for row in report.samples:
        print(f"{row.name} aee {row.aee:.3f} pixels {row.masked_pixels} loss {row.loss:.6g}")
    print(f"mean aee {report.mean_aee:.3f} mean loss {report.mean_loss:.6g}")
    _print_ops(report.ops)


def cmd_energy(args) -> None:
    if args.checkpoint is not None and args.data_dir is not None and args.activity is None:
        ops = evaluate(args.checkpoint, args.data_dir, args.dt_mode, args.n_frames, args.threshold,
                       energy_ratio=args.energy_ratio).ops
    else:
        if args.activity is None:
            raise ContractError("energy needs --activity, or --checkpoint with --data-dir to measure it")
        if args.checkpoint is not None:
            _, records = read_records(args.checkpoint)
            cfg = expected_config(config_from_records(records), args.dt_mode, args.n_frames, args.threshold)
            load_checkpoint(args.checkpoint, expected=cfg)
        else:
            cfg = NetworkConfig.for_dt(args.dt_mode or "dt1", base_width=args.base_width,
                                       hybrid_variant=args.variant, n_frames=args.n_frames,
                                       threshold=args.threshold)
        ops = count_ops(cfg, args.activity, cfg.n_frames, args.height, args.width, args.energy_ratio)
    _print_ops(ops)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "energy.json"), "w", encoding="utf-8") as fh:
            json.dump(ops.summary(), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")


def _print_ops(ops) -> None:
    benefit = "inf" if ops.infinite_benefit else f"{ops.encoder_energy_benefit:.4g}"
    print(f"encoder ann ops {ops.ann_ops} snn ops {float(ops.snn_ops):.6g} "
          f"normalized {float(ops.normalized_ops_percent):.4g}%")
    print(f"encoder energy benefit {benefit}x overall reduction {float(ops.overall_energy_reduction_percent):.4g}% "
          f"(encoder share {float(ops.encoder_share_percent):.4g}%, ratio {ops.energy_ratio})")


def cmd_inspect(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    print("config")
    for line in ck.config.canonical().splitlines():
        print(f"  {line}")
    total = 0
    print("parameters")
    for name in sorted(ck.params):
        shape = ck.params[name].shape
        total += int(np.prod(shape))
        print(f"  {name} {'x'.join(map(str, shape))}")
    print(f"total parameters {total}")
    scalars = {k: float(v) for k, v in ck.extras.items() if np.ndim(v) == 0}
    for name in sorted(scalars):
        print(f"{name} {scalars[name]:.10g}")


COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "energy": cmd_energy,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except (FormatError, DataError, OSError) as exc:
        print(f"spikeflow: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericError, CheckpointError) as exc:
        if not isinstance(exc, UsageError):
            print(f"spikeflow: error: {exc}", file=sys.stderr)
        else:
            print(exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
