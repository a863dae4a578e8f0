"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Options resolve
as command-line flags, then ``--config`` file (``key = value`` lines),
then built-in defaults.  Logs go to stderr; results go to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    BlobConfig,
    DatasetError,
    ImageDataset,
    disjoint_split,
    file_digest,
    glyph_digits,
    load_cifar_batch,
    load_idx,
    synth_dataset,
    write_idx,
)
from .dsl import DEFAULT_D_MODEL, DSLError, initial_transformer_spec, parse, render
from .harness import ClassifierTask, EvalConfig, encode_pairs, evaluate_classifier, evaluate_selfprog
from .metrics import emit_metrics
from .refine import FAMILIES, generate_dataset, read_dataset, write_dataset
from .refiners import LearnedRefiner, serve_mock
from .search import (
    SWEEP_EPISODES,
    LoopConfig,
    SweepRow,
    read_logs,
    run_classifier_search,
    run_selfprog,
    run_sweep,
    train_learned_refiner,
    write_logs,
)

log = logging.getLogger("selfprog")

MANIFEST = "manifest.json"
# options that never influence results and are left out of manifests
_VOLATILE = {"config", "log_level", "workers", "func", "command", "out"}
_SHAPE_KEYS = {"input_shape", "blob_shape"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config file handling

def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config_file(known.config)
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, text in values.items():
            action = actions[key]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[key] = text.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(text) if action.type else text
            # a config value satisfies a required flag
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# manifests

def _jsonable(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(ns).items()) if k not in _VOLATILE}


def write_manifest(path, ns: argparse.Namespace, seeds: dict, backend: Optional[dict], digests: dict) -> None:
    manifest = {
        "artifact_version": __version__,
        "command": ns.command,
        "config": _jsonable(ns),
        "seeds": seeds,
        "backend": backend,
        "dataset_digests": digests,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _digest_inputs(paths: dict) -> dict:
    return {name: file_digest(p) for name, p in sorted(paths.items()) if p}


# --------------------------------------------------------------------------
# datasets

def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("shape must be H,W,C with positive entries")
    return parts


def _int_list(text: str, minimum: int = 1) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or min(values) < minimum:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers >= {minimum}")
    return values


def _seed_list(text: str) -> list[int]:
    return _int_list(text, minimum=0)


def _sweep_spec(text: str) -> list[int]:
    key, _, values = text.partition("=")
    if key.strip() != "candidates" or not values:
        raise argparse.ArgumentTypeError("sweep must look like candidates=2,4,8,16")
    return _int_list(values)


def load_image_dataset(args) -> tuple[ImageDataset, dict]:
    kind = args.dataset
    if kind in ("mnist", "emnist", "idx"):
        images, labels = args.images, args.labels
        if args.data_dir and not images:
            images, labels = _find_idx(Path(args.data_dir))
        if not images or not labels:
            raise UsageError(f"--dataset {kind} needs --images and --labels (or --data-dir)")
        class_count = 62 if kind == "emnist" else None
        return load_idx(images, labels, class_count), _digest_inputs({"images": images, "labels": labels})
    if kind == "cifar":
        if not args.cifar_batch:
            raise UsageError("--dataset cifar needs --cifar-batch")
        return load_cifar_batch(args.cifar_batch), _digest_inputs({"cifar_batch": args.cifar_batch})
    total = args.train_size + args.eval_size
    if kind == "glyphs":
        imgs, labels = glyph_digits(total, args.data_seed)
        ds = ImageDataset((imgs[..., None] / np.float32(255.0)).astype(np.float32), labels.astype(np.int64), 10, f"glyphs:seed={args.data_seed}")
        return ds, {"glyphs": f"seed={args.data_seed}:count={total}"}
    if kind == "blobs":
        config = BlobConfig(classes=args.blob_classes, samples=total, noise=args.blob_noise, shape=args.blob_shape)
        return synth_dataset(config, args.data_seed), {"blobs": f"seed={args.data_seed}:{config}"}
    raise UsageError(f"unknown dataset {kind!r}")


def _find_idx(root: Path) -> tuple[Optional[str], Optional[str]]:
    for stem in ("train", "t10k", "emnist-byclass-train"):
        for suffix in ("", ".gz"):
            img = root / f"{stem}-images-idx3-ubyte{suffix}"
            lbl = root / f"{stem}-labels-idx1-ubyte{suffix}"
            if img.exists() and lbl.exists():
                return str(img), str(lbl)
    return None, None


def build_task(args) -> tuple[ClassifierTask, dict]:
    ds, digests = load_image_dataset(args)
    train_idx, eval_idx = disjoint_split(len(ds), args.train_size, args.eval_size, args.split_seed)
    return ClassifierTask.from_dataset(ds, train_idx, eval_idx), digests


def load_pairs(args, family: str, **context):
    """Refinement pairs from ``--dataset`` or generated in memory."""
    if args.pairs_file:
        pairs = read_dataset(args.pairs_file, args.pair_count)
        return pairs, _digest_inputs({"pairs": args.pairs_file})
    pairs = list(generate_dataset(family, args.pair_count, args.pair_seed, **context))
    return pairs, {"pairs": f"generated:{family}:seed={args.pair_seed}:count={args.pair_count}"}


# --------------------------------------------------------------------------
# commands

def cmd_gen_dataset(args) -> int:
    context = {"d_model": args.d_model}
    if args.family == "cnn":
        context = {"input_shape": args.input_shape, "num_classes": args.num_classes}
    n = write_dataset(generate_dataset(args.family, args.count, args.seed, **context), args.out)
    write_manifest(f"{args.out}.{MANIFEST}", args, {"seed": args.seed}, None, {})
    log.info("wrote %d pairs to %s", n, args.out)
    return 0


def cmd_gen_images(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "glyphs":
        images, labels = glyph_digits(args.count, args.seed)
    else:
        ds = synth_dataset(BlobConfig(args.blob_classes, args.count, args.blob_noise, args.blob_shape), args.seed)
        if ds.input_shape[2] != 1:
            raise UsageError("IDX output needs single-channel images")
        images = np.rint(ds.images[..., 0] * 255).astype(np.uint8)
        labels = ds.labels.astype(np.uint8)
    write_idx(images, labels, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    write_manifest(out / MANIFEST, args, {"seed": args.seed}, None, {})
    log.info("wrote %d images to %s", len(labels), out)
    return 0


def cmd_train_refiner(args) -> int:
    if args.family == "cnn":
        context = {"input_shape": args.input_shape, "num_classes": args.num_classes}
    else:
        context = {"d_model": args.d_model}
    pairs, digests = load_pairs(args, args.family, **context)
    spec = parse(Path(args.spec).read_text(encoding="utf-8"), d_model=args.d_model) if args.spec else initial_transformer_spec(args.d_model)
    tokens = encode_pairs(pairs, max_len=args.max_len, **context)
    refiner, losses = train_learned_refiner(
        spec, tokens, epochs=args.epochs, seed=args.seed, max_len=args.max_len, **context,
    )
    refiner.save(args.out)
    with open(f"{args.out}.losses.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        f.writelines(f"{i},{v!r}\n" for i, v in enumerate(losses))
    write_manifest(f"{args.out}.{MANIFEST}", args, {"seed": args.seed}, refiner.descriptor(), digests)
    log.info("trained refiner on %d pairs, loss %.4f -> %.4f", len(tokens), losses[0], losses[-1])
    return 0


def _eval_config(args, track: str) -> EvalConfig:
    return EvalConfig(
        track=track,
        subset_size=args.subset_size,
        epochs=args.eval_epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        time_limit=args.time_limit,
        max_len=args.max_len,
        d_model=args.d_model,
    )


def _loop_config(args, track: str) -> LoopConfig:
    return LoopConfig(
        track=track,
        n_candidates=args.candidates,
        n_episodes=args.episodes,
        refiner=args.refiner,
        refiner_url=args.refiner_url or "",
        refiner_timeout=args.refiner_timeout,
        refiner_epochs=args.refiner_epochs,
        refiner_pairs=args.refiner_pairs,
        temperature=args.temperature,
        top_k=args.top_k,
        seed=args.seed,
        resample_eval=args.resample_eval,
        workers=args.workers,
        eval=_eval_config(args, track),
    )


def _finish_run(args, out: Path, result, seeds: dict, backend: dict, digests: dict) -> None:
    write_logs(result.logs, out / "episodes.jsonl")
    (out / "final_spec.txt").write_text(render(result.final_spec), encoding="utf-8")
    with open(out / "timings.jsonl", "w", encoding="utf-8") as f:
        for t in result.timings:
            f.write(json.dumps(t, sort_keys=True) + "\n")
    if result.logs:
        emit_metrics(result.logs, out, plots=not args.no_plots)
    write_manifest(out / MANIFEST, args, seeds, backend, digests)


def _backend_descriptor(args) -> dict:
    d = {"backend": args.refiner, "temperature": args.temperature, "top_k": args.top_k}
    if args.refiner == "external":
        d["url"] = args.refiner_url
    return d


def cmd_self_program(args) -> int:
    config = _loop_config(args, "selfprog")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    context = {"d_model": args.d_model}
    pairs, digests = load_pairs(args, "transformer", **context)
    if len(pairs) < args.subset_size:
        raise UsageError(f"need at least {args.subset_size} refinement pairs, have {len(pairs)}")
    tokens = encode_pairs(pairs, max_len=args.max_len, **context)
    result = run_selfprog(config, tokens)
    _finish_run(args, out, result, {"seed": args.seed, "pair_seed": args.pair_seed}, _backend_descriptor(args), digests)
    log.info("final spec: %s", render(result.final_spec).replace("\n", " | "))
    return 0


def _classifier_refiner(args, task: ClassifierTask, digests: dict):
    """(pairs, pretrained refiner) for the learned backend, else (None, None)."""
    if args.refiner != "learned":
        return None, None
    context = {"input_shape": task.input_shape, "num_classes": task.num_classes}
    if args.refiner_checkpoint:
        refiner = LearnedRefiner.from_checkpoint(args.refiner_checkpoint, args.temperature, args.top_k)
        if refiner.parse_context != context:
            raise UsageError(f"checkpoint was trained for {refiner.parse_context}, task needs {context}")
        digests.update(_digest_inputs({"refiner_checkpoint": args.refiner_checkpoint}))
        return None, refiner
    pairs, pair_digests = load_pairs(args, "cnn", **context)
    digests.update(pair_digests)
    return encode_pairs(pairs, max_len=args.max_len, **context), None


def cmd_program_classifier(args) -> int:
    config = _loop_config(args, "classifier")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task, digests = build_task(args)
    seeds = {"seed": args.seed, "split_seed": args.split_seed, "data_seed": args.data_seed}
    refiner_pairs, refiner = _classifier_refiner(args, task, digests)
    if args.sweep:
        rows = run_sweep(config, task, args.sweep, args.sweep_episodes, args.sweep_seeds or [args.seed], refiner_pairs, refiner)
        with open(out / "sweep.jsonl", "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r.__dict__, sort_keys=True) + "\n")
        emit_metrics([], out, sweep=rows, plots=not args.no_plots)
        write_manifest(out / MANIFEST, args, seeds, _backend_descriptor(args), digests)
        return 0
    result = run_classifier_search(config, task, refiner_pairs, refiner=refiner)
    _finish_run(args, out, result, seeds, _backend_descriptor(args), digests)
    return 0


def cmd_eval_spec(args) -> int:
    text = sys.stdin.read() if args.spec == "-" else Path(args.spec).read_text(encoding="utf-8")
    if args.track == "selfprog":
        pairs, digests = load_pairs(args, "transformer", d_model=args.d_model)
        tokens = encode_pairs(pairs, max_len=args.max_len, d_model=args.d_model)
        report = evaluate_selfprog(text, tokens, _eval_config(args, "selfprog"))
    else:
        task, digests = build_task(args)
        report = evaluate_classifier(text, task, _eval_config(args, "classifier"))
    Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(f"{args.out}.{MANIFEST}", args, {"seed": args.seed}, None, digests)
    log.info("parse=%s build=%s train=%s loss=%s accuracy=%s", report.parse_status, report.build_status,
             report.train_status, report.fewshot_loss, report.accuracy)
    return 0


def cmd_emit_metrics(args) -> int:
    logs = read_logs(args.logs) if args.logs else []
    sweep = None
    if args.sweep_rows:
        with open(args.sweep_rows, encoding="utf-8") as f:
            sweep = [SweepRow(**json.loads(line)) for line in f if line.strip()]
    if not logs and not sweep:
        raise UsageError("emit-metrics needs --logs with at least one episode or --sweep-rows")
    paths = emit_metrics(logs, args.out, sweep=sweep, plots=not args.no_plots)
    log.info("wrote %d files to %s", len(paths), args.out)
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    if manifest.get("command") not in COMMANDS or manifest["command"] in ("replay", "mock-refiner"):
        raise UsageError(f"manifest command {manifest.get('command')!r} cannot be replayed")
    config = {k: tuple(v) if k in _SHAPE_KEYS and v is not None else v for k, v in manifest["config"].items()}
    ns = argparse.Namespace(**config)
    ns.command = manifest["command"]
    ns.out = args.out
    ns.workers = args.workers
    ns.log_level = args.log_level
    ns.config = None
    return COMMANDS[ns.command](ns)


def cmd_mock_refiner(args) -> int:
    context = {"d_model": args.d_model}
    server = serve_mock(args.host, args.port, **context)
    host, port = server.server_address[:2]
    log.info("mock refiner listening on http://%s:%d/", host, port)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "gen-images": cmd_gen_images,
    "train-refiner": cmd_train_refiner,
    "self-program": cmd_self_program,
    "program-classifier": cmd_program_classifier,
    "eval-spec": cmd_eval_spec,
    "emit-metrics": cmd_emit_metrics,
    "replay": cmd_replay,
    "mock-refiner": cmd_mock_refiner,
}


# --------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying option defaults")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _model_context(p, d_model=True, image=False) -> None:
    if d_model:
        p.add_argument("--d-model", type=int, default=DEFAULT_D_MODEL, help="transformer width (default %(default)s)")
    if image:
        p.add_argument("--input-shape", type=_parse_shape, default=(28, 28, 1), help="H,W,C (default 28,28,1)")
        p.add_argument("--num-classes", type=int, default=10, help="(default %(default)s)")


def _pairs_opts(p, count=50000) -> None:
    p.add_argument("--pairs-file", help="refinement pairs (JSON lines); generated in memory when omitted")
    p.add_argument("--pair-count", type=int, default=count, help="pairs to generate or read (default %(default)s)")
    p.add_argument("--pair-seed", type=int, default=7, help="seed for generated pairs (default %(default)s)")


def _eval_opts(p, track: str) -> None:
    p.add_argument("--seed", type=int, default=0, help="run seed (default %(default)s)")
    p.add_argument("--subset-size", type=int, default=1024, help="few-shot pairs per candidate (default %(default)s)")
    p.add_argument("--eval-epochs", type=int, default=None, help="candidate training epochs (default 1 self-program, 2 classifier)")
    p.add_argument("--batch-size", type=int, default=32, help="(default %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default %(default)s)")
    p.add_argument("--time-limit", type=float, default=120.0, help="seconds per candidate evaluation (default %(default)s)")
    p.add_argument("--max-len", type=int, default=24, help="token budget per sequence (default %(default)s)")


def _image_opts(p) -> None:
    p.add_argument("--dataset", default="glyphs", choices=("mnist", "emnist", "idx", "cifar", "glyphs", "blobs"),
                   help="image source (default %(default)s)")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--data-dir", help="directory holding *-images-idx3-ubyte / *-labels-idx1-ubyte")
    p.add_argument("--cifar-batch", help="CIFAR-10 binary batch file")
    p.add_argument("--train-size", type=int, default=4096, help="(default %(default)s)")
    p.add_argument("--eval-size", type=int, default=1024, help="(default %(default)s)")
    p.add_argument("--split-seed", type=int, default=0, help="(default %(default)s)")
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthetic images (default %(default)s)")
    p.add_argument("--blob-classes", type=int, default=10)
    p.add_argument("--blob-noise", type=float, default=0.5)
    p.add_argument("--blob-shape", type=_parse_shape, default=(8, 8, 1))


def _loop_opts(p, episodes: int) -> None:
    p.add_argument("--episodes", type=int, default=episodes, help="(default %(default)s)")
    p.add_argument("--candidates", type=int, default=8, help="candidates per episode (default %(default)s)")
    p.add_argument("--refiner", default="oracle", choices=("oracle", "learned", "external"), help="(default %(default)s)")
    p.add_argument("--refiner-url", help="endpoint for --refiner external")
    p.add_argument("--refiner-timeout", type=float, default=30.0)
    p.add_argument("--refiner-epochs", type=int, default=1, help="refiner training epochs per episode (default %(default)s)")
    p.add_argument("--refiner-pairs", type=int, default=None, help="limit refiner training to the first N pairs")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=16)
    p.add_argument("--resample-eval", action="store_true", help="draw a fresh evaluation subset each episode")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel candidate evaluations")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="selfprog", description="Self-reprogramming architecture search.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, help_text):
        p = subs.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        _common(p)
        subparsers[name] = p
        return p

    p = add("gen-dataset", "write a random refinement dataset")
    p.add_argument("--family", choices=FAMILIES, default="transformer")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _model_context(p, image=True)

    p = add("gen-images", "write synthetic MNIST-format IDX files")
    p.add_argument("--kind", choices=("glyphs", "blobs"), default="glyphs")
    p.add_argument("--count", type=int, default=5120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blob-classes", type=int, default=10)
    p.add_argument("--blob-noise", type=float, default=0.5)
    p.add_argument("--blob-shape", type=_parse_shape, default=(8, 8, 1))
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-refiner", "train a learned refiner and save a checkpoint")
    p.add_argument("--family", choices=FAMILIES, default="transformer")
    p.add_argument("--spec", help="refiner architecture spec file (default: initial transformer)")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--out", required=True, help="checkpoint path")
    _pairs_opts(p)
    _model_context(p, image=True)

    p = add("self-program", "run the self-programming loop")
    _pairs_opts(p)
    _model_context(p)
    _eval_opts(p, "selfprog")
    _loop_opts(p, episodes=10)

    p = add("program-classifier", "evolve a CNN classifier")
    _pairs_opts(p)
    _model_context(p)
    _eval_opts(p, "classifier")
    _image_opts(p)
    _loop_opts(p, episodes=5)
    p.add_argument("--refiner-checkpoint", help="trained refiner from train-refiner --family cnn (skips training)")
    p.add_argument("--sweep", type=_sweep_spec, help="candidates=2,4,8,16 runs the candidates x episodes grid")
    p.add_argument("--sweep-episodes", type=_int_list, default=list(SWEEP_EPISODES))
    p.add_argument("--sweep-seeds", type=_seed_list, default=None)

    p = add("eval-spec", "score one spec file")
    p.add_argument("--track", choices=("selfprog", "classifier"), default="selfprog")
    p.add_argument("--spec", required=True, help="spec file, or - for stdin")
    p.add_argument("--out", required=True, help="report JSON path")
    _pairs_opts(p, count=1024)
    _model_context(p)
    _eval_opts(p, "selfprog")
    _image_opts(p)

    p = add("emit-metrics", "render CSV tables and figures from an episode log")
    p.add_argument("--logs", help="episodes.jsonl")
    p.add_argument("--sweep-rows", help="sweep.jsonl")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)

    p = add("replay", "re-run a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = add("mock-refiner", "serve oracle refinements over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    _model_context(p)

    return parser, subparsers


def _validate(args) -> None:
    if getattr(args, "refiner", None) == "external" and not args.refiner_url:
        raise UsageError("--refiner external needs --refiner-url")
    for name in ("episodes", "count", "pair_count", "train_size", "eval_size"):
        value = getattr(args, name, None)
        if value is not None and value < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be non-negative")
    if getattr(args, "candidates", 1) < 1:
        raise UsageError("--candidates must be at least 1")
    if getattr(args, "count", 1) == 0 and args.command == "gen-dataset":
        raise UsageError("--count must be at least 1")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        command = next((a for a in argv if a in subparsers), None)
        if command is None:
            args = parser.parse_args(argv)
        else:
            args = _apply_config(parser, subparsers[command], argv)
        _validate(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"selfprog: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"selfprog: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, DatasetError, DSLError, ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
