"""Command-line interface: ``aidkit {train,interpolate,evaluate,optimize-beta,compare,render,replay}``.

Every command writes a ``manifest.json`` holding the resolved arguments, the
seeds, the checkpoint's content hash and the output paths. Manifests contain
nothing time-dependent, so identical flags give byte-identical manifests;
wall-clock durations go to a ``timing.json`` sidecar next to them.

Exit codes: 0 success, 2 usage error, 1 runtime error. Errors are reported on
one line of stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imageio, metrics
from .errors import AidError, ArchiveError
from .model import (
    CLASS_NAMES,
    ModelConfig,
    batch_loss,
    held_out_batch,
    init_weights,
    load_weights,
    make_dataset,
    save_weights,
    train,
)
from .numerics import SeededRng
from .pipeline import (
    Denoiser,
    InterpolationConfig,
    MethodSpec,
    compare_methods,
    interpolate,
    tune_beta_prior,
)
from .scheduler import NoiseSchedule, Sampler
from .selection import BetaPrior, BoConfig, beta_schedule

MODE_NAMES = {
    "text": "text_embed_baseline",
    "denoise": "denoise_baseline",
    "aid-i": "aid_inner",
    "aid-o": "aid_outer",
}
MANIFEST = "manifest.json"
TIMING = "timing.json"
SEQUENCE_ARRAY = "sequence.npy"


class UsageError(Exception):
    """Bad flag combination discovered after parsing."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# -- small helpers -------------------------------------------------------------


def content_hash(blob: bytes) -> str:
    """Git blob hash (sha1 over ``"blob <len>\\0" + data``)."""
    return hashlib.sha1(b"blob %d\x00" % len(blob) + blob).hexdigest()


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_manifest(path: Path, command: str, args: argparse.Namespace, outputs, **extra) -> None:
    manifest = {"command": command, "config": _resolved(args), "outputs": [str(p) for p in outputs]}
    manifest.update(extra)
    write_atomic(path, dump_json(manifest))


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}


def write_timing(path: Path, started: float) -> None:
    write_atomic(path, dump_json({"wall_clock_seconds": round(time.perf_counter() - started, 3)}))


def parse_class(text: str) -> int:
    if text in CLASS_NAMES:
        return CLASS_NAMES.index(text)
    try:
        idx = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown class {text!r}; choose from {', '.join(CLASS_NAMES)}")
    if not 0 <= idx < len(CLASS_NAMES):
        raise argparse.ArgumentTypeError(f"class id {idx} outside [0, {len(CLASS_NAMES)})")
    return idx


def parse_guidance(text: str) -> list[int]:
    return [parse_class(part) for part in text.split("+")]


def open_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    return load_weights(path), content_hash(blob)


def make_sampler(weights) -> Sampler:
    return Sampler(schedule=NoiseSchedule(weights.config.train_steps))


def make_distance(name: str, weights=None):
    if name == "pixel":
        return metrics.PixelL2()
    if weights is None:
        raise UsageError("--distance encoder needs --checkpoint")
    return metrics.EncoderL2(weights)


def make_features(name: str, weights=None):
    if name == "downsample":
        return metrics.DownsampleFeatures()
    if weights is None:
        raise UsageError("--features encoder needs --checkpoint")
    return metrics.EncoderFeatures(weights)


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    cfg = ModelConfig(d=args.width, hidden=args.hidden)
    data = make_dataset(args.n_per_class, seed=args.data_seed)
    sched = NoiseSchedule(cfg.train_steps)
    held = held_out_batch(args.seed, cfg)
    initial = batch_loss(init_weights(cfg, SeededRng(args.seed)), *held, sched)

    def report(step, loss):
        if args.log_every and (step + 1) % args.log_every == 0:
            print(f"step {step + 1} loss {loss:.6f}", flush=True)

    w = train(data, steps=args.steps, lr=args.lr, seed=args.seed, cfg=cfg, callback=report)
    final = batch_loss(w, *held, sched)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(w, out)
    print(f"held-out loss: initial {initial:.6f} final {final:.6f}")
    write_manifest(
        out.with_name(out.name + ".manifest.json"), "train", args, [out],
        seeds={"init_and_batches": args.seed, "dataset": args.data_seed},
        checkpoint_hash=content_hash(out.read_bytes()),
        held_out_loss={"initial": initial, "final": final},
    )
    write_timing(out.with_name(out.name + ".timing.json"), started)
    return 0


# -- interpolate -------------------------------------------------------------------


def _interp_config(args, model: Denoiser) -> InterpolationConfig:
    mode = MODE_NAMES[args.mode]
    if args.guidance is not None and mode not in ("aid_inner", "aid_outer"):
        raise UsageError(f"--guidance is only valid with --mode aid-i or aid-o, not {args.mode}")
    if args.warmup is not None and mode not in ("aid_inner", "aid_outer"):
        raise UsageError(f"--warmup is only valid with --mode aid-i or aid-o, not {args.mode}")
    if args.m < 2:
        raise UsageError("--m must be at least 2")
    guidance = None
    if args.guidance is not None:
        labels = args.guidance
        guidance = model.condition(labels[0]) if len(labels) == 1 else model.mixed_condition(labels)
    return InterpolationConfig(
        m=args.m,
        mode=mode,
        fused=args.fused,
        schedule=beta_schedule(args.m, BetaPrior(args.alpha, args.beta)),
        guidance=guidance,
        warmup_steps=args.warmup,
        seeds=(args.seed_a, args.seed_b),
        applies_to=args.applies_to,
        denoise_orientation=args.orientation,
    )


def write_archive(out: Path, seq, extra: dict, args, ckpt_hash: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, img in enumerate(seq.images):
        path = out / f"frame_{i:02d}.pgm"
        write_atomic(path, imageio.encode_pgm(imageio.to_bytes(img)))
        frames.append(path)
    strip = out / "strip.pgm"
    write_atomic(strip, imageio.encode_pgm(imageio.render_grid([seq.images])))
    buf = io.BytesIO()
    np.save(buf, np.stack(seq.images))
    write_atomic(out / SEQUENCE_ARRAY, buf.getvalue())
    outputs = [p.name for p in frames] + [strip.name, SEQUENCE_ARRAY]
    write_manifest(
        out / MANIFEST, "interpolate", args, outputs,
        seeds={"source_a": args.seed_a, "source_b": args.seed_b},
        checkpoint_hash=ckpt_hash,
        sequence={"m": len(seq), "coefficients": list(seq.coefficients.t_values),
                  "method": seq.method, "resolved": seq.config, "provenance": seq.provenance},
        **extra,
    )
    return frames


def cmd_interpolate(args) -> int:
    started = time.perf_counter()
    weights, ckpt_hash = open_checkpoint(args.checkpoint)
    model = Denoiser(weights)
    cfg = _interp_config(args, model)
    seq = interpolate(cfg, model.condition(args.class_a), model.condition(args.class_b),
                      model, make_sampler(weights))
    out = Path(args.out)
    write_archive(out, seq, {}, args, ckpt_hash)
    write_timing(out / TIMING, started)
    print(f"wrote {len(seq)} images to {out}")
    return 0


# -- evaluate --------------------------------------------------------------------


def read_archive(path) -> np.ndarray:
    """Load an interpolation archive written by ``interpolate`` as (m, 16, 16)."""
    path = Path(path)
    man_path = path / MANIFEST
    if not man_path.is_file():
        raise ArchiveError(f"{path} has no {MANIFEST}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
        m = int(manifest["sequence"]["m"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{man_path}: malformed manifest ({exc})") from None
    arr_path = path / SEQUENCE_ARRAY
    if arr_path.is_file():
        try:
            images = np.load(arr_path, allow_pickle=False)
        except ValueError as exc:
            raise ArchiveError(f"{arr_path}: {exc}") from None
    else:
        images = np.stack([imageio.read_pgm(path / f"frame_{i:02d}.pgm") for i in range(m)])
    if images.shape != (m, 16, 16) or images.dtype != np.float64:
        raise ArchiveError(f"{path}: expected {m} float64 16x16 images, got {images.shape} {images.dtype}")
    if not np.all(np.isfinite(images)):
        raise ArchiveError(f"{path}: non-finite pixel values")
    return images


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    weights, ckpt_hash = (None, None)
    if args.checkpoint:
        weights, ckpt_hash = open_checkpoint(args.checkpoint)
    distance = make_distance(args.distance, weights)
    features = make_features(args.features, weights)
    seqs = [list(read_archive(a)) for a in args.archives]
    report = metrics.evaluate(seqs, distance, features)
    if not 0.0 <= report.smoothness <= 1.0 or report.consistency < 0:
        raise ArchiveError("metrics out of range")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "report.json", report.to_json().encode("utf-8"))
    write_atomic(out / "report.csv", report.to_csv().encode("utf-8"))
    write_manifest(out / MANIFEST, "evaluate", args, ["report.json", "report.csv"],
                   seeds={}, checkpoint_hash=ckpt_hash)
    write_timing(out / TIMING, started)
    fid = "n/a" if report.fidelity is None else f"{report.fidelity:.6f}"
    print(f"consistency {report.consistency:.6f} smoothness {report.smoothness:.6f} fidelity {fid}")
    return 0


# -- optimize-beta ---------------------------------------------------------------


def _bo_config(args, steps: int) -> BoConfig:
    return BoConfig(search_range=tuple(args.range), iterations=args.iterations,
                    objective=args.objective, seed=args.bo_seed, steps=steps)


def cmd_optimize_beta(args) -> int:
    started = time.perf_counter()
    if args.mode not in ("aid-i", "aid-o"):
        raise UsageError("optimize-beta supports --mode aid-i or aid-o")
    weights, ckpt_hash = open_checkpoint(args.checkpoint)
    model = Denoiser(weights)
    sampler = make_sampler(weights)
    cfg = InterpolationConfig(m=args.m, mode=MODE_NAMES[args.mode], fused=args.fused,
                              seeds=(args.seed_a, args.seed_b))
    result = tune_beta_prior(cfg, model.condition(args.class_a), model.condition(args.class_b),
                             model, sampler, make_distance(args.distance, weights),
                             _bo_config(args, sampler.steps))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "trace.csv", result.trace_csv().encode("utf-8"))
    best = {"alpha": result.alpha, "beta": result.beta, "objective": result.best_value,
            "coefficients": list(beta_schedule(args.m, BetaPrior(result.alpha, result.beta)).t_values)}
    write_atomic(out / "best.json", dump_json(best))
    write_manifest(out / MANIFEST, "optimize-beta", args, ["trace.csv", "best.json"],
                   seeds={"source_a": args.seed_a, "source_b": args.seed_b, "bo": args.bo_seed},
                   checkpoint_hash=ckpt_hash)
    write_timing(out / TIMING, started)
    print(f"alpha {result.alpha:.6f} beta {result.beta:.6f} {args.objective} {result.best_value:.6f}")
    return 0


# -- compare -----------------------------------------------------------------------

COMPARE_FIELDS = ("method", "pairs", "consistency", "smoothness", "fidelity")
PAIR_FIELDS = ("pair", "class_a", "class_b", "seed_a", "seed_b", "method", "consistency",
               "smoothness", "alpha", "beta")


def draw_pairs(master_seed: int, n: int, n_classes: int = len(CLASS_NAMES)):
    """``n`` (class_a, class_b, seed_a, seed_b) tuples with distinct classes."""
    rng = SeededRng(master_seed)
    pairs = []
    for _ in range(n):
        a = int(rng.integers(n_classes, 1)[0])
        b = (a + 1 + int(rng.integers(n_classes - 1, 1)[0])) % n_classes
        sa, sb = (int(s) for s in rng.integers(2**31 - 1, 2))
        pairs.append((a, b, sa, sb))
    return pairs


def _csv(fields, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue().encode("utf-8")


def cmd_compare(args) -> int:
    started = time.perf_counter()
    if args.pairs < 1:
        raise UsageError("--pairs must be at least 1")
    weights, ckpt_hash = open_checkpoint(args.checkpoint)
    model = Denoiser(weights)
    sampler = make_sampler(weights)
    distance = make_distance(args.distance, weights)
    features = make_features(args.features, weights)
    bo = _bo_config(args, sampler.steps)
    specs = (
        MethodSpec("text_embed_baseline"),
        MethodSpec("denoise_baseline"),
        MethodSpec("aid_inner", fused=args.fused, tune_beta=args.tune_beta),
        MethodSpec("aid_outer", fused=args.fused, tune_beta=args.tune_beta),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_method = {s.method: [] for s in specs}
    pair_rows, outputs = [], []
    pairs = draw_pairs(args.seed, args.pairs)
    for idx, (a, b, sa, sb) in enumerate(pairs):
        results = compare_methods((a, b), (sa, sb), model, sampler, specs, m=args.m,
                                  distance=distance, bo=bo)
        rows = []
        for method, seq, report, tuned in results:
            by_method[method].append(seq.images)
            rows.append(seq.images)
            pair_rows.append({
                "pair": idx, "class_a": CLASS_NAMES[a], "class_b": CLASS_NAMES[b],
                "seed_a": sa, "seed_b": sb, "method": method,
                "consistency": report.consistency, "smoothness": report.smoothness,
                "alpha": "" if tuned is None else tuned.alpha,
                "beta": "" if tuned is None else tuned.beta,
            })
        grid = out / f"grid_{idx:03d}.pgm"
        write_atomic(grid, imageio.encode_pgm(imageio.render_grid(rows)))
        outputs.append(grid.name)
        if args.verbose:
            print(f"pair {idx + 1}/{len(pairs)}: {CLASS_NAMES[a]} -> {CLASS_NAMES[b]}", flush=True)

    table = []
    for spec in specs:
        report = metrics.evaluate(by_method[spec.method], distance, features)
        if not 0.0 <= report.smoothness <= 1.0 or report.consistency < 0:
            raise AidError(f"invalid report for {spec.method}")
        table.append({"method": spec.method, "pairs": len(pairs), "consistency": report.consistency,
                      "smoothness": report.smoothness,
                      "fidelity": "" if report.fidelity is None else report.fidelity})
    write_atomic(out / "compare.csv", _csv(COMPARE_FIELDS, table))
    write_atomic(out / "pairs.csv", _csv(PAIR_FIELDS, pair_rows))
    outputs = ["compare.csv", "pairs.csv"] + outputs
    write_manifest(out / MANIFEST, "compare", args, outputs,
                   seeds={"master": args.seed,
                          "pairs": [{"class_a": a, "class_b": b, "seed_a": sa, "seed_b": sb}
                                    for a, b, sa, sb in pairs]},
                   checkpoint_hash=ckpt_hash)
    write_timing(out / TIMING, started)
    for row in table:
        fid = "n/a" if row["fidelity"] == "" else f"{row['fidelity']:.6f}"
        print(f"{row['method']:<20} consistency {row['consistency']:.6f} "
              f"smoothness {row['smoothness']:.6f} fidelity {fid}")
    return 0


# -- render / replay ---------------------------------------------------------------


def cmd_render(args) -> int:
    rows = [list(read_archive(a)) for a in args.archives]
    grid = imageio.render_grid(rows, sep=args.sep)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(out, imageio.encode_pgm(grid))
    print(f"wrote {grid.shape[1]}x{grid.shape[0]} grid to {out}")
    return 0


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest with its resolved arguments."""
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, config = manifest["command"], manifest["config"]
    except (OSError, ValueError, KeyError) as exc:
        raise ArchiveError(f"cannot read manifest {args.manifest}: {exc}") from None
    parser = build_parser()
    try:
        ns = parser.parse_args([command] + _required_args(parser, command, config))
    except KeyError as exc:
        raise ArchiveError(f"{args.manifest}: config lacks {exc}") from None
    for key, value in config.items():
        setattr(ns, key, value)
    if args.out is not None:
        ns.out = args.out
    if hasattr(ns, "range"):
        ns.range = list(ns.range)
    return ns.func(ns)


def _required_args(parser, command: str, config: dict) -> list[str]:
    """Placeholder argv satisfying the subcommand's required arguments."""
    sub = next(a for a in parser._subparsers._group_actions if a.dest == "command").choices[command]
    argv = []
    for action in sub._actions:
        if not action.option_strings and action.dest != "help":
            argv += [str(v) for v in config[action.dest]]
        elif action.required:
            argv += [action.option_strings[0], str(config[action.dest])]
    return argv


# -- parser --------------------------------------------------------------------------


def _add_pair_flags(p):
    p.add_argument("--class-a", type=parse_class, default=0, help="first class name or id")
    p.add_argument("--class-b", type=parse_class, default=2, help="second class name or id")
    p.add_argument("--seed-a", type=int, default=0)
    p.add_argument("--seed-b", type=int, default=1)


def _add_bo_flags(p, iterations=15):
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--objective", choices=("smoothness", "consistency"), default="smoothness")
    p.add_argument("--range", type=float, nargs=2, default=[1.0, 30.0], metavar=("LOW", "HIGH"))
    p.add_argument("--bo-seed", type=int, default=0)


def build_parser() -> Parser:
    parser = Parser(prog="aidkit", description="Attention-interpolated diffusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="aidkit.aidw")
    p.add_argument("--width", type=int, default=ModelConfig.d)
    p.add_argument("--hidden", type=int, default=ModelConfig.hidden)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0, help="print the batch loss every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpolate", help="generate one interpolation sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=tuple(MODE_NAMES), default="aid-o")
    p.add_argument("--fused", action="store_true", help="concatenate the branch's own self K/V")
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--guidance", type=parse_guidance, default=None,
                   help="guidance class, or two classes joined with '+'")
    p.add_argument("--warmup", type=int, default=None, help="interpolating steps before plain generation")
    p.add_argument("--applies-to", choices=("both", "self_attention", "cross_attention"), default="both")
    p.add_argument("--orientation", choices=("first", "aligned"), default="first",
                   help="prompt switch direction for --mode denoise")
    _add_pair_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="score interpolation archives")
    p.add_argument("archives", nargs="+")
    p.add_argument("--distance", choices=("pixel", "encoder"), default="pixel")
    p.add_argument("--features", choices=("encoder", "downsample"), default="downsample")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize-beta", help="tune the Beta prior by Bayesian optimisation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("aid-i", "aid-o"), default="aid-o")
    p.add_argument("--fused", action="store_true")
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--distance", choices=("pixel", "encoder"), default="pixel")
    _add_pair_flags(p)
    _add_bo_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_beta)

    p = sub.add_parser("compare", help="run all four methods over random class pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="master seed for pairs and source noises")
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--distance", choices=("pixel", "encoder"), default="pixel")
    p.add_argument("--features", choices=("encoder", "downsample"), default="encoder")
    p.add_argument("--no-fused", dest="fused", action="store_false")
    p.add_argument("--no-tune-beta", dest="tune_beta", action="store_false")
    _add_bo_flags(p)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="tile archives into one grid, one row each")
    p.add_argument("archives", nargs="+")
    p.add_argument("--sep", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="override the recorded output path")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aidkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AidError, OSError) as exc:
        print(f"aidkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
