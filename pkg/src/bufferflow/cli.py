"""Command line front end.

Subcommands cover the full loop: train a model on the toy world, distill
it, generate a dump, serve a live stream, evaluate a dump, and run the
scheme ablation. Schemes are given as "K,N,c,s", schedules as
"frame:class" pairs joined by commas, gamma as "linear" or "power:k".

Environment: BUFFERFLOW_BIND overrides the default --bind address,
BUFFERFLOW_LOG sets the log level name.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger("bufferflow")


def _parse_schedule(text: str):
    entries = []
    for part in text.split(","):
        frame, _, cls = part.partition(":")
        entries.append((int(frame), int(cls)))
    return entries


def _parse_bind(text: str):
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _load_velocity(args):
    """Pick the velocity source: a checkpoint or the ground-truth oracle."""
    from .model import VelocityAdapter, load_checkpoint
    from .toyworld import SpriteWorldOracle

    if getattr(args, "oracle", None):
        if args.oracle != "sprite":
            raise SystemExit(f"unknown oracle {args.oracle!r}")
        return SpriteWorldOracle(getattr(args, "class_id", 1), seed=args.seed)
    if not getattr(args, "checkpoint", None):
        raise SystemExit("need --checkpoint or --oracle sprite")
    model, _ = load_checkpoint(args.checkpoint)
    return VelocityAdapter(model)


def cmd_train(args) -> int:
    from .model import ModelConfig, build_model
    from .partition import parse_gamma, parse_scheme
    from .trainer import TrainConfig, sprite_dataset, train

    schemes = [parse_scheme(s) for s in args.schemes.split(";")]
    buffer_size = schemes[0].buffer_size
    mcfg = ModelConfig(
        frames=buffer_size, dim=args.dim, layers=args.layers,
        window=(buffer_size, 4, 4),
    )
    model = build_model(mcfg, seed=args.seed)
    cfg = TrainConfig(
        steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, log_every=args.log_every,
    )
    result = train(
        model, sprite_dataset(buffer_size), schemes, cfg,
        gamma=parse_gamma(args.gamma),
        metrics_path=args.metrics, checkpoint_path=args.out,
    )
    print(
        f"trained {result.steps} steps: loss {result.initial_loss:.4f} "
        f"-> {result.final_loss:.4f}, saved {args.out}"
    )
    return 0


def cmd_distill(args) -> int:
    from .distiller import DistillConfig, distill_model, nfe_ratio
    from .model import load_checkpoint, save_checkpoint
    from .partition import parse_scheme

    teacher, _ = load_checkpoint(args.checkpoint)
    scheme = parse_scheme(args.scheme)
    cfg = DistillConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        lr=args.lr, cfg_w=args.cfg, rounds_per_cond=args.rounds, seed=args.seed,
    )
    conds = list(range(1, 9)) if args.classes is None else [
        int(c) for c in args.classes.split(",")
    ]
    student, result = distill_model(teacher, scheme, conds, cfg)
    save_checkpoint(student, args.out, {"distilled_from": str(args.checkpoint)})
    ratio = nfe_ratio(scheme, args.cfg)
    print(
        f"distilled {result.iterations} iterations: loss {result.initial_loss:.5f} "
        f"-> {result.final_loss:.5f}, forwards per chunk x{ratio}, saved {args.out}"
    )
    return 0


def cmd_generate(args) -> int:
    from .partition import parse_gamma, parse_scheme
    from .streamer import run_stream, write_stream_dump

    scheme = parse_scheme(args.scheme)
    schedule = (
        _parse_schedule(args.schedule) if args.schedule else int(args.class_id)
    )
    velocity_fn = _load_velocity(args)
    frames = run_stream(
        velocity_fn, scheme, schedule, args.frames,
        cfg_w=args.cfg, seed=args.seed, gamma=parse_gamma(args.gamma),
    )
    manifest = write_stream_dump(
        frames, args.out,
        {"scheme": args.scheme, "seed": args.seed, "cfg": args.cfg,
         "schedule": args.schedule or f"0:{args.class_id}"},
    )
    print(json.dumps(manifest))
    return 0


def cmd_stream(args) -> int:
    from .partition import parse_scheme
    from .service import StreamServer

    host, port = _parse_bind(args.bind)
    scheme = parse_scheme(args.scheme)
    server = StreamServer(
        _load_velocity(args), scheme,
        host=host, port=port, initial_class=args.class_id,
        cfg_w=args.cfg, seed=args.seed, autostart=args.autostart,
        max_frames=args.frames,
        frame_interval=(1.0 / args.fps if args.fps else 0.0),
    ).start()
    print(f"serving on {server.address[0]}:{server.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_eval(args) -> int:
    from .evalkit import evaluate_stream, reference_stats
    from .streamer import read_stream_dump
    from .toyworld import generate_clip

    frames, indices, manifest = read_stream_dump(args.input)
    schedule_text = args.schedule or manifest.get("schedule") or "0:1"
    schedule = _parse_schedule(schedule_text)
    reference = None
    if args.reference_class:
        clip, _ = generate_clip(args.reference_class, args.seed, len(frames))
        reference = reference_stats(clip)
    metrics = evaluate_stream(
        frames, schedule, args.chunk,
        reference=reference, start_index=int(indices[0]),
    )
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .evalkit import ablation_run, format_table, reference_stats
    from .partition import parse_scheme
    from .streamer import run_stream
    from .toyworld import generate_clip

    velocity_fn = _load_velocity(args)
    schedule = int(args.class_id)
    variants = []
    for text in args.schemes.split(";"):
        scheme = parse_scheme(text)
        frames = np.stack(
            list(run_stream(velocity_fn, scheme, schedule, args.frames,
                            cfg_w=args.cfg, seed=args.seed))
        )
        variants.append((text, frames, scheme.c))
    clip, _ = generate_clip(args.class_id, args.seed, args.frames)
    rows = ablation_run(variants, schedule, reference_stats(clip), out_path=args.out)
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bufferflow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpointed=True):
        p.add_argument("--seed", type=int, default=0)
        if checkpointed:
            p.add_argument("--checkpoint", help="model checkpoint path")
            p.add_argument("--oracle", choices=["sprite"],
                           help="use the ground-truth world instead of a model")
            p.add_argument("--cfg", type=float, default=1.0,
                           help="guidance weight")

    p = sub.add_parser("train", help="train on the toy world")
    p.add_argument("--out", required=True)
    p.add_argument("--schemes", default="0,1,16,16;0,16,1,1;0,8,2,2",
                   help="semicolon-separated K,N,c,s mixture")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dim", type=int, default=96)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--gamma", default="linear")
    p.add_argument("--metrics", help="JSONL metrics path")
    p.add_argument("--log-every", type=int, default=10)
    common(p, checkpointed=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="fold micro steps into a student")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default="0,8,2,16")
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rounds", type=int, default=8)
    p.add_argument("--classes", help="comma-separated class ids")
    common(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("generate", help="write a stream dump")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default="0,8,2,2")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--schedule", help='e.g. "0:1,32:5"')
    p.add_argument("--gamma", default="linear")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("stream", help="serve a live stream over TCP")
    p.add_argument("--bind", default=os.environ.get("BUFFERFLOW_BIND", "127.0.0.1:5317"))
    p.add_argument("--scheme", default="0,8,2,2")
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--frames", type=int, help="stop after this many frames")
    p.add_argument("--fps", type=float, help="pace output; default unpaced")
    p.add_argument("--autostart", action="store_true",
                   help="begin generating before any start record")
    common(p)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("eval", help="metrics for a stream dump")
    p.add_argument("--input", required=True)
    p.add_argument("--chunk", type=int, required=True)
    p.add_argument("--schedule", help='e.g. "0:1,128:2"')
    p.add_argument("--reference-class", type=int,
                   help="ground-truth class for closeness scores")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="compare schemes side by side")
    p.add_argument("--schemes", default="0,1,16,16;0,16,1,1;0,8,2,2")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--out", help="JSONL rows path")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("BUFFERFLOW_LOG", "WARNING").upper(),
                      logging.WARNING),
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
