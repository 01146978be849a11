"""Command-line entry point: ``oneclip {invert,adapt,adapt-text,generate}``.

Exit codes: 0 ok, 2 usage, 3 backend failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import torch

from .core_types import (
    BackendError,
    LatentCode,
    NonFiniteError,
    OneClipError,
    RandomSource,
)
from .embedding import make_embedder
from .generator import (
    build_discriminator,
    build_generator,
    load_source,
    sample_w,
)
from .inference import (
    MixingPolicy,
    assemble_grid,
    edit_and_generate,
    generate,
    load_png,
    read_latents,
    save_png,
    write_latents,
)
from .latent_search import SearchConfig, invert_image, invert_text
from .losses import ADV_MODES, CON_METRICS, LossWeights
from .perceptual import make_perceptual
from .presets import LAMBDA_CON, LAMBDA_PATCH, LAMBDA_REG, LEARNING_RATE, PRESETS, TEXT_SOURCE, get_preset
from .trainer import AdaptationConfig, Trainer, load_checkpoint

log = logging.getLogger("oneclip")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(OneClipError):
    pass


# -- argument parsing -------------------------------------------------------


def _schedule(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"schedule must look like N_RAND:N_REF, got {text!r}") from None
    return a, b


def _seeds(text: str) -> list[int]:
    """``0..8`` (inclusive) or ``1,4,7``."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like RxC, got {text!r}") from None
    return r, c


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value file; command-line flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embedder", choices=["fake", "clip"], default="fake")
    p.add_argument("--embedder-path", help="CLIP weights directory or model id")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_backends(p):
    p.add_argument("--perceptual", choices=["toy", "lpips"], default="toy")


def _add_search(p):
    p.add_argument("--lambda-reg", type=float, default=LAMBDA_REG)
    p.add_argument("--search-steps", type=int, default=500)
    p.add_argument("--search-step-size", type=float, default=0.02)
    p.add_argument("--mean-samples", type=int, default=10_000)


def _add_training(p, default_schedule=True):
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--source-ckpt", required=True, help="source checkpoint, or toy[:SEED] for a random toy generator")
    p.add_argument("--run-name", default="adapt")
    p.add_argument("--run-root", default="run")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, default=LEARNING_RATE)
    p.add_argument("--lambda-con", type=float, default=LAMBDA_CON)
    p.add_argument("--lambda-patch", type=float, default=LAMBDA_PATCH)
    p.add_argument("--patch-negatives", type=int)
    p.add_argument("--con-metric", choices=CON_METRICS, default="sq")
    p.add_argument(
        "--preset-field", action="append", default=[], metavar="KEY=VALUE",
        help="override one preset field, e.g. patch_size=32 or patch_layers=3,4 (repeatable)",
    )
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.add_argument("--resume", action="store_true", help="continue from run/<name>/state.ckpt")
    if default_schedule:
        p.add_argument("--schedule", type=_schedule, default=(3, 1), help="N_RAND:N_REF per cycle")
        p.add_argument("--adv-mode", choices=ADV_MODES, default="literal")
        p.add_argument("--r1-gamma", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oneclip", description="One-shot generator adaptation in CLIP space.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="search the reference latent for a target image")
    _add_common(p)
    _add_backends(p)
    _add_search(p)
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target-image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("adapt", help="adapt a generator to one target image")
    _add_common(p)
    _add_backends(p)
    _add_search(p)
    _add_training(p)
    p.add_argument("--target-image", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("adapt-text", help="adapt a generator to a text prompt")
    _add_common(p)
    _add_search(p)
    _add_training(p, default_schedule=False)
    p.add_argument("--target-text", required=True)
    p.add_argument("--source-text", default=TEXT_SOURCE)
    p.set_defaults(func=cmd_adapt_text)

    p = sub.add_parser("generate", help="render images from an adapted run")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="run directory containing state.ckpt")
    src.add_argument("--ckpt", help="state or source checkpoint file")
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--latent-file")
    p.add_argument("--edit-offset", help="latent file added to every code before rendering")
    p.add_argument("--mixing", choices=["auto", "none", "mean", "ref"], default="auto")
    p.add_argument("--mix-k", type=int)
    p.add_argument("--grid", type=_grid)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:  # argparse exposes no public lookup
        return action.choices[command]
    raise KeyError(command)


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith(("#", ";", "[")):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def apply_config_defaults(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._AppendAction):
            defaults[key] = raw.split()
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        value = action.type(raw) if action.type else raw
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        try:
            sub = _subparser(parser, known.command)
        except KeyError:
            sub = None
        if sub is not None:
            apply_config_defaults(sub, read_config_file(known.config))
    return parser.parse_args(argv)


# -- helpers ----------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_source(spec: str):
    """A checkpoint path, or ``toy[:SEED]`` for a freshly initialised toy-preset generator."""
    if spec == "toy" or spec.startswith("toy:"):
        try:
            seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        except ValueError:
            raise UsageError(f"bad toy source {spec!r}") from None
        preset = get_preset("toy")
        return build_generator(preset, seed), build_discriminator(preset, seed)
    return load_source(spec)


def _embedder(args):
    return make_embedder(args.embedder, args.embedder_path, seed=args.seed)


def _write_snapshot(path: Path, flat: dict):
    with open(path, "w") as f:
        for key in sorted(flat):
            f.write(f"{key} = {flat[key]!r}\n")


def _write_history(path: Path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss_name", "value"])
        for i, name, value in history:
            writer.writerow([i, name, repr(float(value))])


def _write_trace(path: Path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "objective"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])


@contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{run_dir} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


class Manifest:
    """``manifest.json`` (deterministic) plus ``timings.json`` (wall clock)."""

    def __init__(self, run_dir: Path, name: str, config: dict, inputs: dict):
        self.run_dir = run_dir
        self.data = {
            "run_name": name,
            "status": "started",
            "config": {k: v if isinstance(v, (int, float, str, type(None))) else list(v) for k, v in config.items()},
            "inputs": inputs,
            "artifacts": {},
        }
        self.timings: dict[str, float] = {}
        self._write()

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 3)
            (self.run_dir / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")

    def artifact(self, key, path: Path):
        self.data["artifacts"][key] = path.name

    def finish(self, status="finished"):
        self.data["status"] = status
        self._write()

    def _write(self):
        (self.run_dir / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def override_preset(preset, items):
    """Apply ``KEY=VALUE`` overrides to a preset, converting by field type."""
    fields = {f.name: getattr(preset, f.name) for f in dataclasses.fields(preset)}
    changes = {}
    for pair in items:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or key not in fields or key == "name":
            raise UsageError(f"bad preset override {pair!r}")
        current = fields[key]
        try:
            if isinstance(current, tuple):
                changes[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            else:
                changes[key] = type(current)(raw.strip())
        except ValueError:
            raise UsageError(f"bad value in preset override {pair!r}") from None
    return dataclasses.replace(preset, **changes) if changes else preset


def _training_config(args, preset, text: bool) -> AdaptationConfig:
    return AdaptationConfig(
        preset=preset,
        weights=LossWeights(args.lambda_con, args.lambda_patch),
        lambda_reg=args.lambda_reg,
        learning_rate=args.lr,
        total_iterations=args.iterations,
        batch_size=args.batch_size,
        schedule=(1, 0) if text else args.schedule,
        seed=args.seed,
        embedder=args.embedder,
        embedder_path=args.embedder_path,
        perceptual="toy" if text else args.perceptual,
        con_metric=args.con_metric,
        adv_mode="literal" if text else args.adv_mode,
        r1_gamma=0.0 if text else args.r1_gamma,
        patch_negatives=args.patch_negatives,
        search_steps=args.search_steps,
        search_step_size=args.search_step_size,
        mean_samples=args.mean_samples,
        source_text=getattr(args, "source_text", TEXT_SOURCE),
    )


# -- commands ---------------------------------------------------------------


def cmd_invert(args) -> int:
    G_s, _ = _load_source(args.source_ckpt)
    embedder = _embedder(args)
    perceptual = make_perceptual(args.perceptual, args.seed)
    I_trg = load_png(args.target_image, G_s.output_resolution)
    cfg = SearchConfig(
        lambda_reg=args.lambda_reg,
        steps=args.search_steps,
        step_size=args.search_step_size,
        mean_samples=args.mean_samples,
    )
    result = invert_image(G_s, embedder, perceptual, I_trg, cfg, RandomSource(args.seed, 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_latents(out / "w_ref.latent", result.latent)
    save_png(result.image, out / "i_ref.png")
    _write_trace(out / "trace.csv", result.trace)
    log.info("objective %.6f -> %.6f", result.trace[0], result.trace[-1])
    return EXIT_OK


def _run_training(args, text: bool) -> int:
    preset = get_preset(args.preset)
    run_dir = Path(args.run_root) / args.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "state.ckpt"
    G_s, D_s = _load_source(args.source_ckpt)
    if G_s.output_resolution != preset.resolution:
        raise UsageError(f"source renders {G_s.output_resolution}px but preset {preset.name} expects {preset.resolution}px")
    embedder = _embedder(args)
    I_trg = None if text else load_png(args.target_image, G_s.output_resolution)

    with run_lock(run_dir):
        if args.resume:
            if not ckpt.exists():
                raise UsageError(f"--resume given but {ckpt} does not exist")
            state = load_checkpoint(ckpt)
            cfg = state.adaptation_config
            if args.iterations:
                cfg = dataclasses.replace(cfg, total_iterations=args.iterations)
                state.config = cfg.to_flat()
            perceptual = None if text else make_perceptual(cfg.perceptual, cfg.seed)
            trainer = Trainer.from_state(G_s, state, I_trg, embedder, perceptual)
        else:
            cfg = _training_config(args, override_preset(preset, args.preset_field), text)
            trainer = None
        inputs = {"source": args.source_ckpt if args.source_ckpt.startswith("toy") else _sha256(args.source_ckpt)}
        if text:
            inputs["target_text"] = hashlib.sha256(args.target_text.encode()).hexdigest()
        else:
            inputs["target_image"] = _sha256(args.target_image)
        _write_snapshot(run_dir / "config.snapshot", cfg.to_flat())
        manifest = Manifest(run_dir, args.run_name, cfg.to_flat(), inputs)
        manifest.artifact("config", run_dir / "config.snapshot")

        if trainer is None:
            with manifest.phase("search"):
                rng = RandomSource(cfg.seed, 1)
                if text:
                    search = invert_text(G_s, embedder, args.target_text, cfg.search, rng)
                else:
                    perceptual = make_perceptual(cfg.perceptual, cfg.seed)
                    search = invert_image(G_s, embedder, perceptual, I_trg, cfg.search, rng)
            write_latents(run_dir / "w_ref.latent", search.latent)
            save_png(search.image, run_dir / "i_ref.png")
            _write_trace(run_dir / "trace.csv", search.trace)
            if text:
                trainer = Trainer(G_s, cfg, search.latent, embedder=embedder, mode="text", target_text=args.target_text)
            else:
                trainer = Trainer(G_s, cfg, search.latent, I_trg, embedder, perceptual, D_s)
        manifest.artifact("w_ref", run_dir / "w_ref.latent")
        manifest.artifact("i_ref", run_dir / "i_ref.png")

        try:
            with manifest.phase("train"):
                state = trainer.run(checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every)
        except NonFiniteError:
            _write_history(run_dir / "history.csv", trainer.history)
            manifest.finish("non-finite")
            raise
        manifest.artifact("state", ckpt)
        _write_history(run_dir / "history.csv", state.history)
        manifest.artifact("history", run_dir / "history.csv")
        manifest.finish()
    log.info("finished %d iterations in %s", state.iteration, run_dir)
    return EXIT_OK


def cmd_adapt(args) -> int:
    return _run_training(args, text=False)


def cmd_adapt_text(args) -> int:
    return _run_training(args, text=True)


def cmd_generate(args) -> int:
    state = None
    if args.run:
        state = load_checkpoint(Path(args.run) / "state.ckpt")
    else:
        try:
            state = load_checkpoint(args.ckpt)
        except OneClipError:
            state = None
    if state is not None:
        gen = state.build_generator()
        cfg = state.adaptation_config
        w_ref = LatentCode.w(state.w_ref)
        default_mode = "ref" if state.mode == "text" else "mean"
        default_k = cfg.preset.text_mix_k if state.mode == "text" else cfg.preset.mix_k
    else:
        gen, _ = load_source(args.ckpt)
        w_ref, default_mode, default_k = None, "none", 0
    gen.eval()

    mode = default_mode if args.mixing == "auto" else args.mixing
    k = args.mix_k if args.mix_k is not None else default_k
    policy = MixingPolicy({"none": "none", "mean": "mean_replace", "ref": "ref_replace"}[mode], k if mode != "none" else 0)

    if args.latent_file:
        codes = read_latents(args.latent_file)
    elif args.seeds:
        with torch.no_grad():
            codes = LatentCode.w(torch.cat([sample_w(gen, RandomSource(s, 0x5EED), 1).data for s in args.seeds]))
    elif args.edit_offset and w_ref is not None:
        codes = w_ref.as_batch()
    else:
        raise UsageError("give --seeds, --latent-file or --edit-offset (with a run)")
    dtype = next(gen.parameters()).dtype
    codes = LatentCode(codes.kind, codes.data.to(dtype))
    mix_kwargs = {"w_ref": w_ref, "rng": RandomSource(args.seed, 0x3E)}
    if args.edit_offset:
        offset = read_latents(args.edit_offset)
        offset = LatentCode(offset.kind, offset.data.to(dtype))
        images = edit_and_generate(gen, codes, offset, policy, **mix_kwargs)
    else:
        images = generate(gen, codes, policy, **mix_kwargs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_png(img, out / f"img_{i:04d}.png")
    if args.grid:
        rows, cols = args.grid
        save_png(assemble_grid(images, rows, cols), out / "grid.png")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"oneclip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"oneclip: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except NonFiniteError as exc:
        print(f"oneclip: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OneClipError, FileNotFoundError, argparse.ArgumentTypeError) as exc:
        print(f"oneclip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
