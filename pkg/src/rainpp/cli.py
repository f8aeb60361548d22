"""Command-line entry point: ``rainpp <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad config, missing or malformed
input), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._binary import atomic_write
from .errors import ConfigError, FormatError
from .grid import (DEFAULT_THRESHOLDS, GRID_VERSION, NormStats, compute_stats, load_grid,
                   normalize, store_grid, synthesize)
from .imaging import class_map_grey, reconstruct_demo, write_pgm
from .labeling import (LABEL_VERSION, ThresholdSet, classify, hard_field, label_proportions,
                       smooth_field, store_labels)
from .model import TINY_MODEL, ModelConfig
from .runtime import execution
from .training import (CKPT_VERSION, PRESETS, PhaseConfig, finetune, load_checkpoint,
                       predict_classes, pretrain, store_checkpoint)
from .verification import evaluate_predictions

log = logging.getLogger("rainpp")

MANIFEST_VERSION = 1
MODEL_BASES = {"tiny": TINY_MODEL, "default": ModelConfig()}


class UsageError(ConfigError):
    """Raised for invalid invocations; maps to exit code 1."""


# -- config resolution ---------------------------------------------------
def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        nxt = d.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise UsageError(f"cannot set {dotted!r}: {k!r} is not a section")
        d = nxt
    d[keys[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Read a JSON config (or a previous run manifest) and apply ``key=value`` overrides.

    Unqualified keys go to the ``phase`` section; ``model.x`` and ``model.patch.x``
    address the model.
    """
    cfg: dict = {}
    if path is not None:
        p = _existing(path)
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if isinstance(cfg, dict) and "manifest_version" in cfg:
            cfg = cfg.get("config", {})
        if not isinstance(cfg, dict):
            raise UsageError(f"{p}: config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if "." not in key and key not in ("preset", "model", "deterministic", "stats"):
            key = f"phase.{key}"
        _set_path(cfg, key, _parse_value(raw))
    return cfg


def _coerce(template, values: dict, what: str) -> dict:
    """Cast override values to the field types of a dataclass instance."""
    out = {}
    for key, value in values.items():
        if key not in template.__dataclass_fields__:
            raise UsageError(f"unknown {what} key {key!r}")
        default = getattr(template, key)
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError
                out[key] = value
            elif isinstance(default, int):
                if isinstance(value, bool) or float(value) != int(value):
                    raise TypeError
                out[key] = int(value)
            elif isinstance(default, float):
                if isinstance(value, bool):
                    raise TypeError
                out[key] = float(value)
            elif isinstance(default, tuple):
                if isinstance(value, str):
                    value = [_parse_value(v) for v in value.split(",")]
                out[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            else:
                out[key] = value
        except (TypeError, ValueError):
            raise UsageError(f"{what} key {key!r}: cannot use value {value!r}") from None
    return out


def resolve_phase(cfg: dict, default_preset: str) -> PhaseConfig:
    preset = cfg.get("preset", default_preset)
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    phase = replace(base, **_coerce(base, cfg.get("phase", {}), "phase"))
    phase.validate()
    return phase


def resolve_model(cfg: dict, n_channels: int) -> ModelConfig:
    section = dict(cfg.get("model", {}) or {})
    if isinstance(cfg.get("model"), str):
        section = {"base": cfg["model"]}
    base_name = section.pop("base", "tiny")
    if base_name not in MODEL_BASES:
        raise UsageError(f"unknown model base {base_name!r}; choose from {sorted(MODEL_BASES)}")
    base = MODEL_BASES[base_name]
    patch_over = section.pop("patch", {})
    patch = replace(base.patch, **_coerce(base.patch, patch_over, "model.patch"))
    fields = _coerce(base, section, "model")
    fields["in_channels"] = n_channels
    return replace(base, patch=patch, **fields)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- run bookkeeping -----------------------------------------------------
def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def run_lock(target: Path):
    """One run per output location: an exclusive lock file next to the outputs."""
    lock = target / ".rainpp.lock" if target.is_dir() else target.with_name(target.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{target} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def write_manifest(path: Path, command: str, config: dict, seed, inputs: dict, outputs: dict) -> dict:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "rainpp": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "formats": {"grid": GRID_VERSION, "labels": LABEL_VERSION, "checkpoint": CKPT_VERSION},
        },
        "inputs": {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in outputs.items()},
    }
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def _out_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"output directory {p} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _out_file(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"no such directory: {p.parent}")
    return p


def _thresholds(raw: str | None) -> ThresholdSet:
    if raw is None:
        return ThresholdSet(DEFAULT_THRESHOLDS)
    try:
        return ThresholdSet.parse(raw)
    except ValueError as exc:
        raise UsageError(f"--thresholds: {exc}") from None


def _floats(raw: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {raw!r}") from None


def _normalized(dataset, stats: NormStats | None):
    stats = stats or compute_stats(dataset)
    return normalize(dataset, stats), stats


# -- subcommands ---------------------------------------------------------
def cmd_synthesize(args) -> int:
    out = _out_file(args.out)
    props = _floats(args.proportions, "--proportions")
    cfg = {"samples": args.samples, "channels": args.channels, "height": args.height,
           "width": args.width, "proportions": list(props), "seed": args.seed}
    ds = synthesize(args.samples, args.channels, args.height, args.width, props, args.seed)
    with run_lock(out):
        store_grid(ds, out)
        write_manifest(out.with_name(out.name + ".manifest.json"), "synthesize", cfg, args.seed,
                       {}, {"grid": out})
    print(f"wrote {len(ds)} samples {ds.dims} to {out}")
    return 0


def cmd_stats(args) -> int:
    src = _existing(args.data)
    out = _out_file(args.out)
    ds = load_grid(src)
    stats = compute_stats(ds)
    with run_lock(out):
        stats.save(out)
        write_manifest(out.with_name(out.name + ".manifest.json"), "stats", {}, None,
                       {"data": src}, {"stats": out})
    for name, m, s in zip(stats.names, stats.mean, stats.std):
        print(f"{name:>8s}  mean {m: .6g}  std {s:.6g}")
    return 0


def _train_setup(args, default_preset: str):
    src = _existing(args.data)
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg.setdefault("phase", {})["seed"] = args.seed
    phase = resolve_phase(cfg, default_preset)
    stats_path = args.stats or cfg.get("stats")
    stats = NormStats.load(_existing(stats_path)) if stats_path else None
    deterministic = cfg.get("deterministic", True)
    if not isinstance(deterministic, bool):
        raise UsageError(f"deterministic must be true or false, got {deterministic!r}")
    ds = load_grid(src)
    inputs = {"data": src}
    if stats_path:
        inputs["stats"] = Path(stats_path)
    return src, cfg, phase, stats, deterministic, ds, inputs


def _history_summary(history: dict) -> str:
    loss = history.get("loss", [])
    if not loss:
        return "no iterations"
    k = max(1, min(20, len(loss) // 5))
    return f"loss {np.mean(loss[:k]):.4f} -> {np.mean(loss[-k:]):.4f} over {len(loss)} iterations"


def cmd_pretrain(args) -> int:
    src, cfg, phase, stats, deterministic, ds, inputs = _train_setup(args, "tiny-pretrain")
    model = resolve_model(cfg, ds.dims[0])
    model.validate(*ds.dims[1:])
    out = _out_dir(args.out_dir)
    with run_lock(out), execution(deterministic):
        norm_ds, stats = _normalized(ds, stats)
        ckpt = pretrain(phase, norm_ds, model)
        ckpt.norm_stats = stats.to_dict()
        path = out / "pretrain.nwpp"
        store_checkpoint(ckpt, path)
        full = {**cfg, "preset": cfg.get("preset", "tiny-pretrain"), "phase": phase.to_dict(),
                "model": model.to_dict(), "deterministic": deterministic}
        write_manifest(out / "manifest.json", "pretrain", full, phase.seed, inputs, {"checkpoint": path})
    print(f"pretrain: {_history_summary(ckpt.history)}; wrote {path}")
    return 0


def cmd_finetune(args) -> int:
    src, cfg, phase, stats, deterministic, ds, inputs = _train_setup(args, "tiny-finetune")
    pre = None
    if args.no_pretrain:
        if args.ckpt:
            raise UsageError("--ckpt and --no-pretrain are mutually exclusive")
        model = resolve_model(cfg, ds.dims[0])
        model = replace(model, n_classes=ThresholdSet(phase.thresholds).n_classes)
    else:
        if not args.ckpt:
            raise UsageError("finetune needs --ckpt or --no-pretrain")
        ck_path = _existing(args.ckpt)
        pre = load_checkpoint(ck_path)
        inputs["checkpoint"] = ck_path
        model = pre.model
        if stats is None and pre.norm_stats:
            stats = NormStats.from_dict(pre.norm_stats)
    model.validate(*ds.dims[1:])
    if ds.dims[0] != model.in_channels:
        raise UsageError(f"{src} has {ds.dims[0]} channels, model expects {model.in_channels}")
    out = _out_dir(args.out_dir)
    with run_lock(out), execution(deterministic):
        norm_ds, stats = _normalized(ds, stats)
        ckpt = finetune(phase, norm_ds, pre, model if pre is None else None)
        ckpt.norm_stats = stats.to_dict()
        path = out / "finetune.nwpp"
        store_checkpoint(ckpt, path)
        full = {**cfg, "preset": cfg.get("preset", "tiny-finetune"), "phase": phase.to_dict(),
                "model": model.to_dict(), "deterministic": deterministic,
                "pretrained": pre is not None}
        write_manifest(out / "manifest.json", "finetune", full, phase.seed, inputs, {"checkpoint": path})
    print(f"finetune: {_history_summary(ckpt.history)}; wrote {path}")
    return 0


def _checkpoint_and_data(args):
    ck_path = _existing(args.ckpt)
    src = _existing(args.data)
    ckpt = load_checkpoint(ck_path)
    ds = load_grid(src)
    if ds.dims[0] != ckpt.model.in_channels:
        raise UsageError(f"{src} has {ds.dims[0]} channels, checkpoint expects {ckpt.model.in_channels}")
    ckpt.model.validate(*ds.dims[1:])
    if ckpt.norm_stats:
        ds = normalize(ds, NormStats.from_dict(ckpt.norm_stats))
    return ck_path, src, ckpt, ds


def cmd_evaluate(args) -> int:
    ck_path, src, ckpt, ds = _checkpoint_and_data(args)
    gamma = _thresholds(args.thresholds) if args.thresholds else ThresholdSet(ckpt.phase.thresholds)
    if gamma.n_classes != ckpt.model.n_classes:
        raise UsageError(f"{gamma.n_classes} classes from thresholds, checkpoint has {ckpt.model.n_classes}")
    out = _out_dir(args.out_dir)
    with run_lock(out), execution(True):
        pred = predict_classes(ckpt.store, ckpt.model, ds.variables)
        table = evaluate_predictions(pred, ds.qpe, gamma)
        csv_path, txt_path = out / "metrics.csv", out / "metrics.txt"
        atomic_write(csv_path, table.to_csv().encode())
        atomic_write(txt_path, table.to_text().encode())
        outputs = {"metrics_csv": csv_path, "metrics_txt": txt_path}
        if args.pgm:
            truth = classify(ds.qpe, gamma)
            for i in range(len(ds)):
                for tag, arr in (("truth", truth[i]), ("pred", pred[i])):
                    p = out / f"sample{i:04d}_{tag}.pgm"
                    write_pgm(p, class_map_grey(arr, gamma.n_classes))
        cfg = {"thresholds": list(gamma.values)}
        write_manifest(out / "manifest.json", "evaluate", cfg, None,
                       {"checkpoint": ck_path, "data": src}, outputs)
    print(table.to_text(), end="")
    return 0


def cmd_label(args) -> int:
    src = _existing(args.input)
    out = _out_file(args.out)
    gamma = _thresholds(args.thresholds)
    ds = load_grid(src)
    labels = (smooth_field if args.smooth else hard_field)(ds.qpe, gamma)
    with run_lock(out):
        store_labels(labels.astype(np.float32), out)
        cfg = {"thresholds": list(gamma.values), "smooth": bool(args.smooth)}
        write_manifest(out.with_name(out.name + ".manifest.json"), "label", cfg, None,
                       {"data": src}, {"labels": out})
    print(f"wrote {labels.shape} {'continuous' if args.smooth else 'one-hot'} labels to {out}")
    return 0


def cmd_reconstruct_demo(args) -> int:
    ck_path, src, ckpt, ds = _checkpoint_and_data(args)
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"--sample {args.sample} outside 0..{len(ds) - 1}")
    if not 0.0 <= args.mask_ratio <= 1.0:
        raise UsageError(f"--mask-ratio {args.mask_ratio} outside [0, 1]")
    out = _out_dir(args.out_dir)
    with run_lock(out), execution(True):
        report = reconstruct_demo(ckpt, ds.variables, ds.names, args.sample, args.mask_ratio,
                                  out, seed=args.seed)
        cfg = {"sample": args.sample, "mask_ratio": args.mask_ratio}
        write_manifest(out / "manifest.json", "reconstruct-demo", cfg, args.seed,
                       {"checkpoint": ck_path, "data": src}, {"report": out / "report.json"})
    mae = "n/a" if report.masked_mae is None else f"{report.masked_mae:.4f}"
    print(f"wrote {len(report.files)} images; masked-pixel MAE {mae}, overall MAE {report.overall_mae:.4f}")
    return 0


def cmd_proportions(args) -> int:
    src = _existing(args.data)
    gamma = _thresholds(args.thresholds)
    ds = load_grid(src)
    props = label_proportions(ds, gamma, smoothed=args.smooth)
    edges = ["0"] + [f"{t:g}" for t in gamma.values] + ["100"]
    for j, p in enumerate(props):
        print(f"class {j} [{edges[j]}, {edges[j + 1]}): {p:.6f}")
    return 0


# -- parser --------------------------------------------------------------
def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="grid file (.nwpg)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON config or a previous run manifest")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. iterations=50 or model.decoder_channels=32")
    p.add_argument("--stats", help="normalization sidecar (computed from --data if omitted)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rainpp", description="Precipitation post-processing toolkit")
    parser.add_argument("--version", action="version", version=f"rainpp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a synthetic grid dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--proportions", default="0.90,0.0925,0.0075")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("stats", help="write per-channel normalization statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the segmentation head on a frozen encoder")
    _add_train_flags(p)
    p.add_argument("--ckpt", help="pre-training checkpoint")
    p.add_argument("--no-pretrain", action="store_true", help="start from a random encoder")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="contingency metrics of a fine-tuned checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--pgm", action="store_true", help="also write truth/prediction class maps")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("label", help="write one-hot or continuous label planes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--thresholds", default="0.1,10")
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("reconstruct-demo", help="PGM panels of a masked reconstruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct_demo)

    p = sub.add_parser("proportions", help="class proportions of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", default="0.1,10")
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_proportions)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"rainpp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"rainpp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        log.debug("runtime failure", exc_info=True)
        print(f"rainpp {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
