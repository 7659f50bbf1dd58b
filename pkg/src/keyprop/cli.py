"""Command line: ``python -m keyprop <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid usage or validation failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import archive

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keyprop", description="Keyframe-guided inpainting toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--keyframes", type=int, default=2)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--op", default=None, help="comma separated subset of ops")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="key=value file with model and training settings")
    t.add_argument("--ckpt", default=None, help="resume from this checkpoint")

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--keyframes", type=int, default=None)

    i = sub.add_parser("infer", help="inpaint one sample")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True, help="sample archive")
    i.add_argument("--out", required=True)
    i.add_argument("--keyframes", type=_int_list, default=None, help="keyframe indices to use, in order")

    v = sub.add_parser("propagate", help="complete a synthetic video")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", default=None, help="video directory; synthesised from --seed when absent")
    v.add_argument("--out", required=True)
    v.add_argument("--chunk", type=int, default=20)
    v.add_argument("--offsets", type=_int_list, default=[10, 20, 40])
    v.add_argument("--prealign", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--num", type=int, default=60)
    v.add_argument("--size", type=int, default=64)

    b = sub.add_parser("bench", help="timing table")
    b.add_argument("--op", default=None)
    b.add_argument("--size", type=int, default=64, help="extent for the fft speed check")
    return p


# ---------------------------------------------------------------------------
# subcommands


def _gen_data(a):
    from .synthdata import write_dataset

    if a.num < 1 or a.size < 4 or a.keyframes < 0:
        raise UsageError("--num must be >= 1, --size >= 4 and --keyframes >= 0")
    write_dataset(a.out, a.num, seed=a.seed, size=a.size, keyframes=a.keyframes)
    print(f"wrote {a.num} samples to {a.out}")
    return EXIT_OK


def _gradcheck(a):
    from .harness.gradchecks import CASES, run_all

    names = a.op.split(",") if a.op else list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; available: {', '.join(CASES)}")
    ok = True
    for name, err, passed, secs in run_all(names, a.seed, a.tol):
        print(f"{'PASS' if passed else 'FAIL'} {name:<20} rel_err={err:.3e} time={secs:.2f}s")
        ok &= passed
    return EXIT_OK if ok else EXIT_INVALID


def _load_config(path):
    from .harness.train import TrainConfig
    from .model import ModelConfig
    from .model.config import model_config_from, read_config_file

    if path is None:
        return ModelConfig().validate(), {}
    values = read_config_file(path)
    known = {f for f in ModelConfig.__dataclass_fields__} | {f for f in TrainConfig.__dataclass_fields__}
    extra = sorted(set(values) - known)
    if extra:
        raise UsageError(f"unknown config keys {extra}")
    return model_config_from(values), {k: v for k, v in values.items() if k in TrainConfig.__dataclass_fields__}


def _train(a):
    from .harness.data import stack_samples
    from .harness.train import TrainConfig, train
    from .model import checkpoint_load
    from .synthdata import read_dataset

    model_cfg, tvals = _load_config(a.config)
    for k in ("steps", "lr", "seed"):
        if getattr(a, k) is not None:
            tvals[k] = getattr(a, k)
    tcfg = TrainConfig(**tvals).validate()
    data = stack_samples(read_dataset(a.data))
    resume = checkpoint_load(a.ckpt, expect=model_cfg) if a.ckpt else None
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    res = train(model_cfg, tcfg, data, out_dir=a.out, resume=resume)
    print(f"final checkpoint {os.path.join(a.out, 'final.kpt')} step={res.checkpoint.step}")
    return EXIT_OK


def _eval(a):
    from .harness.data import stack_samples
    from .harness.train import evaluate
    from .model import checkpoint_load
    from .synthdata import read_dataset

    ckpt = checkpoint_load(a.ckpt)
    data = stack_samples(read_dataset(a.data))
    if a.keyframes is not None and not 0 <= a.keyframes <= data.num_keyframes:
        raise UsageError(f"--keyframes must lie in [0, {data.num_keyframes}]")
    report = evaluate(ckpt, data, a.keyframes)
    print(report.table())
    print(report.key_values())
    return EXIT_OK


def _infer(a):
    from .harness.data import stack_samples
    from .harness.train import predict
    from .model import checkpoint_load
    from .synthdata import FrameSample, write_ppm

    ckpt = checkpoint_load(a.ckpt)
    sample = FrameSample.from_entries(archive.load(a.data))
    order = a.keyframes if a.keyframes is not None else list(range(sample.num_keyframes))
    if any(k < 0 or k >= sample.num_keyframes for k in order) or len(set(order)) != len(order):
        raise UsageError(f"--keyframes must be distinct indices below {sample.num_keyframes}")
    data = stack_samples([sample])
    data.keys, data.flows, data.fb = (x[:, order] for x in (data.keys, data.flows, data.fb))
    pred = predict(ckpt.config, ckpt.tensors(requires_grad=False), data)[0]
    os.makedirs(a.out, exist_ok=True)
    archive.save(os.path.join(a.out, "prediction.kpt"), {"rgb": pred.astype(np.float32)})
    write_ppm(os.path.join(a.out, "prediction.ppm"), pred)
    print(f"wrote {os.path.join(a.out, 'prediction.kpt')}")
    return EXIT_OK


def _propagate(a):
    from .harness.video import load_video, make_video, propagate_video, save_video, video_hole_l1
    from .model import checkpoint_load
    from .synthdata import write_ppm

    if a.chunk < 1 or any(o < 1 for o in a.offsets):
        raise UsageError("--chunk and every offset must be positive")
    ckpt = checkpoint_load(a.ckpt)
    video = load_video(a.data) if a.data else make_video(a.seed, a.num, a.size)
    res = propagate_video(ckpt, video, chunk=a.chunk, offsets=a.offsets, use_prealign=a.prealign)
    os.makedirs(a.out, exist_ok=True)
    if not a.data:
        save_video(video, a.out)
    archive.save(os.path.join(a.out, "completed.kpt"), {"frames": res.frames.astype(np.float32)})
    for t in res.keyframes:
        write_ppm(os.path.join(a.out, f"keyframe_{t:04d}.ppm"), res.frames[t])
    print(f"keyframes={','.join(map(str, res.keyframes))}")
    print(f"inferences={res.inferences}")
    print(f"hole_l1={video_hole_l1(res, video):.6g}")
    return EXIT_OK


def _bench(a):
    from .harness.bench import BENCH_OPS, check_fft_speedup, bench, format_rows

    ops = a.op.split(",") if a.op else list(BENCH_OPS)
    unknown = [o for o in ops if o not in BENCH_OPS]
    if unknown:
        raise UsageError(f"unknown bench op(s) {unknown}; available: {', '.join(BENCH_OPS)}")
    print(format_rows(bench(ops)))
    ratio = check_fft_speedup(a.size)
    print(f"fft2_speedup_{a.size}x{a.size}={ratio:.1f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _gen_data,
    "gradcheck": _gradcheck,
    "train": _train,
    "eval": _eval,
    "infer": _infer,
    "propagate": _propagate,
    "bench": _bench,
}


def main(argv=None) -> int:
    from .model import CheckpointError, ConfigError
    from .synthdata import DatasetError
    from .harness.video import VideoError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as err:  # --help
        return EXIT_OK if not err.code else EXIT_INVALID
    except (ConfigError, CheckpointError, DatasetError, VideoError, archive.ArchiveError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - reported, never swallowed silently
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
