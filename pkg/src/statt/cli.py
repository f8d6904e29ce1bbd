"""Command-line entry point.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``eval``,
``noise-sweep``, ``attn`` (attention profile dump), ``gradcheck``, and
``replay``.  Every command that writes artifacts also writes a
``RunManifest`` JSON next to them with the fully resolved configuration,
seeds, paths, and timestamps; ``replay`` re-executes a manifest and
byte-reproduces the artifacts in a fixed environment.

Exit codes: 0 success, 1 check failure, 2 config/contract error,
3 IO/data-format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .autograd import Tensor, grad_check
from .checkpoint import _write_atomic, load_checkpoint, save_checkpoint
from .data import (
    SPLIT_NAMES,
    SceneDataset,
    build_dataset,
    default_scene_config,
    load_dataset,
    save_dataset,
    scene_config_from_dict,
    scene_config_to_dict,
)
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    NumericalError,
    ShapeError,
)
from .model import (
    ModelConfig,
    cross_entropy_loss,
    default_model_config,
    forward_batch,
    gradcheck_model_config,
    init_params,
    model_config_from_dict,
    model_config_to_dict,
    param_count,
)
from .svg import attention_chart_from_csv, sweep_chart_from_csv
from .train import (
    attention_profile,
    attention_to_csv,
    default_train_config,
    evaluate,
    history_to_csv,
    metrics_to_json,
    noise_sweep,
    sweep_to_csv,
    train,
    train_config_from_dict,
    train_config_to_dict,
)

GRADCHECK_THRESHOLD = 1e-4
_GRADCHECK_PARAM_GUARD = 10 ** 6

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list[str]
    version: str
    started: str
    finished: str
    seeds: dict
    inputs: dict
    outputs: list[str]
    resolved: dict
    timing: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _write_text(path: str, text: str) -> None:
    _write_atomic(path, text.encode())


def _manifest_path(out: str) -> str:
    """Manifest location: inside dir outputs, alongside file outputs.

    Named run_manifest.json because dataset directories already use
    manifest.json for their own schema.
    """
    if os.path.isdir(out):
        return os.path.join(out, "run_manifest.json")
    return out + ".run_manifest.json"


def _finish_manifest(manifest: RunManifest, out: str) -> None:
    manifest.finished = _now()
    _write_text(_manifest_path(out), manifest.to_json())


def _load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def _overlay(base: dict, override: dict, what: str) -> dict:
    unknown = set(override) - set(base)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")
    merged = dict(base)
    merged.update(override)
    return merged


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _resolve_scene(config_path: str | None, seed: int | None,
                   overrides: dict | None = None):
    base = scene_config_to_dict(default_scene_config())
    if config_path is not None:
        base = _overlay(base, _load_config_file(config_path), "scene")
    if overrides:
        base = _overlay(base, overrides, "scene")
    if seed is not None:
        base["seed"] = seed
    return scene_config_from_dict(base)


def _resolve_model(dataset: SceneDataset | None, config_path: str | None,
                   overrides: dict | None = None) -> ModelConfig:
    if dataset is None:
        base_cfg = default_model_config()
    else:
        base_cfg = default_model_config(
            time_steps=dataset.x.shape[0],
            in_channels=dataset.x.shape[1],
            num_classes=dataset.num_classes,
        )
    base = model_config_to_dict(base_cfg)
    if config_path is not None:
        base = _overlay(base, _load_config_file(config_path), "model")
    if overrides:
        base = _overlay(base, overrides, "model")
    return model_config_from_dict(base)


def _resolve_train(config_path: str | None, overrides: dict | None = None,
                   mode: str | None = None):
    base = train_config_to_dict(default_train_config())
    if config_path is not None:
        base = _overlay(base, _load_config_file(config_path), "train")
    if overrides:
        base = _overlay(base, overrides, "train")
    if mode is not None:
        base["mode"] = mode
    return train_config_from_dict(base)


def _check_compat(config: ModelConfig, dataset: SceneDataset) -> None:
    """Checkpoint/model geometry must match the dataset dims."""
    t, c = dataset.x.shape[0], dataset.x.shape[1]
    if config.time_steps != t:
        raise ConfigError(
            f"model expects {config.time_steps} time steps but dataset has {t} "
            f"(lstm_fw.forget.weight_x and every per-step input disagree)"
        )
    if config.in_channels != c:
        raise ConfigError(
            f"model expects {config.in_channels} input channels but dataset "
            f"has {c} (encoder.block0.conv1.weight is shaped for "
            f"{config.in_channels})"
        )
    if config.num_classes != dataset.num_classes:
        raise ConfigError(
            f"model predicts {config.num_classes} classes but dataset has "
            f"{dataset.num_classes} (classifier.weight is shaped for "
            f"{config.num_classes})"
        )


def _require_out_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = _now()
    scene = _resolve_scene(args.config, args.seed)
    if not 0.0 <= args.noise_fraction <= 0.5:
        raise ConfigError(
            f"--noise-fraction must be in [0, 0.5], got {args.noise_fraction}"
        )
    dataset = build_dataset(
        scene,
        noise_fraction=args.noise_fraction,
        clean=not args.no_clean,
        apply_normalization=not args.no_normalize,
    )
    _require_out_dir(args.out)
    save_dataset(args.out, dataset)
    manifest = RunManifest(
        command="gen", argv=list(sys.argv[1:]), version=__version__,
        started=started, finished="",
        seeds={"scene": scene.seed},
        inputs={},
        outputs=["manifest.json", "splits.json", "X.bin", "Y.bin"],
        resolved={
            "scene": scene_config_to_dict(scene),
            "noise_fraction": args.noise_fraction,
            "clean": not args.no_clean,
            "normalize": not args.no_normalize,
        },
        timing={},
    )
    _finish_manifest(manifest, args.out)
    print(f"dataset written to {args.out} "
          f"(noisy steps: {dataset.manifest['noisy_steps']})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    dataset = load_dataset(args.data)
    model_cfg = _resolve_model(dataset, args.model)
    _check_compat(model_cfg, dataset)
    train_cfg = _resolve_train(args.train, mode=args.mode)

    params = init_params(model_cfg, train_cfg.seed)
    result = train(params, dataset, model_cfg, train_cfg)
    metrics = evaluate(result.params, dataset, "test", result.config)

    _require_out_dir(args.out)
    save_checkpoint(os.path.join(args.out, "checkpoint"), result.params,
                    result.config)
    _write_text(os.path.join(args.out, "history.csv"),
                history_to_csv(result.history))
    _write_text(os.path.join(args.out, "metrics.json"), metrics_to_json(metrics))
    manifest = RunManifest(
        command="train", argv=list(sys.argv[1:]), version=__version__,
        started=started, finished="",
        seeds={"train": train_cfg.seed},
        inputs={"data": os.path.abspath(args.data)},
        outputs=["checkpoint", "history.csv", "metrics.json"],
        resolved={
            "model": model_config_to_dict(result.config),
            "train": train_config_to_dict(train_cfg),
        },
        timing={
            "epoch_seconds": result.epoch_seconds,
            "test_seconds": metrics.timing.get("test_seconds"),
        },
    )
    _finish_manifest(manifest, args.out)
    print(f"trained {result.epochs_run} epochs; best epoch {result.best_epoch} "
          f"(val mean F1 {result.best_val_f1:.4f})")
    print(f"test mean F1 {metrics.mean_f1:.4f}; outputs in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    dataset = load_dataset(args.data)
    params, config = load_checkpoint(args.ckpt)
    _check_compat(config, dataset)
    metrics = evaluate(params, dataset, args.split, config)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    _write_text(args.out, metrics_to_json(metrics))
    manifest = RunManifest(
        command="eval", argv=list(sys.argv[1:]), version=__version__,
        started=started, finished="",
        seeds={},
        inputs={"data": os.path.abspath(args.data),
                "ckpt": os.path.abspath(args.ckpt)},
        outputs=[os.path.basename(args.out)],
        resolved={"split": args.split,
                  "model": model_config_to_dict(config)},
        timing={"test_seconds": metrics.timing.get("test_seconds")},
    )
    _finish_manifest(manifest, args.out)
    print(f"{args.split} mean F1 {metrics.mean_f1:.4f}; metrics in {args.out}")
    return EXIT_OK


def _parse_fractions(text: str) -> list[float]:
    items = [p for p in (s.strip() for s in text.split(",")) if p]
    if not items:
        raise ConfigError("--fractions must list at least one value")
    try:
        return [float(p) for p in items]
    except ValueError as e:
        raise ConfigError(f"--fractions: {e}") from None


def cmd_noise_sweep(args) -> int:
    started = _now()
    bundle = _load_config_file(args.config) if args.config else {}
    unknown = set(bundle) - {"scene", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown bundle keys: {sorted(unknown)} "
                          f"(expected scene/model/train)")
    scene = _resolve_scene(None, args.seed, bundle.get("scene"))
    model_cfg = _resolve_model(None, None, {
        "time_steps": scene.time_steps,
        "in_channels": scene.channels,
        "num_classes": scene.num_classes,
        **(bundle.get("model") or {}),
    })
    train_cfg = _resolve_train(None, bundle.get("train"))
    fractions = _parse_fractions(args.fractions)

    t0 = time.perf_counter()
    result = noise_sweep(model_cfg, train_cfg, scene, fractions)
    sweep_seconds = time.perf_counter() - t0
    csv_text = sweep_to_csv(result)
    svg_text = sweep_chart_from_csv(csv_text)
    _require_out_dir(args.out)
    _write_text(os.path.join(args.out, "sweep.csv"), csv_text)
    _write_text(os.path.join(args.out, "sweep.svg"), svg_text)
    manifest = RunManifest(
        command="noise-sweep", argv=list(sys.argv[1:]), version=__version__,
        started=started, finished="",
        seeds={"scene": scene.seed, "train": train_cfg.seed},
        inputs={},
        outputs=["sweep.csv", "sweep.svg"],
        resolved={
            "scene": scene_config_to_dict(scene),
            "model": model_config_to_dict(model_cfg),
            "train": train_config_to_dict(train_cfg),
            "fractions": fractions,
        },
        timing={"sweep_seconds": sweep_seconds},
    )
    _finish_manifest(manifest, args.out)
    for row in result.rows:
        print(f"fraction {row['fraction']:g} {row['mode']}: "
              f"mean F1 {row['mean_f1']:.4f}")
    print(f"sweep outputs in {args.out}")
    return EXIT_OK


def cmd_attn(args) -> int:
    started = _now()
    dataset = load_dataset(args.data)
    params, config = load_checkpoint(args.ckpt)
    _check_compat(config, dataset)
    profile = attention_profile(params, dataset, args.split, config)
    if args.cls not in (None, "all"):
        known = dataset.class_names
        if args.cls not in known:
            raise ConfigError(
                f"unknown class {args.cls!r}; known classes: {', '.join(known)}"
            )
        if args.cls not in profile.per_class:
            raise ConfigError(
                f"class {args.cls!r} has no majority patches in split "
                f"{args.split!r}"
            )
        profile = dataclasses.replace(
            profile,
            per_class={args.cls: profile.per_class[args.cls]},
            class_patch_count={args.cls: profile.class_patch_count[args.cls]},
        )
    csv_text = attention_to_csv(profile)
    svg_text = attention_chart_from_csv(csv_text)
    _require_out_dir(args.out)
    _write_text(os.path.join(args.out, "attention.csv"), csv_text)
    _write_text(os.path.join(args.out, "attention.svg"), svg_text)
    manifest = RunManifest(
        command="attn", argv=list(sys.argv[1:]), version=__version__,
        started=started, finished="",
        seeds={},
        inputs={"data": os.path.abspath(args.data),
                "ckpt": os.path.abspath(args.ckpt)},
        outputs=["attention.csv", "attention.svg"],
        resolved={"split": args.split, "class": args.cls or "all",
                  "model": model_config_to_dict(config)},
        timing={},
    )
    _finish_manifest(manifest, args.out)
    print(f"attention profile over {profile.patch_count} patches in {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = _now()
    base = model_config_to_dict(gradcheck_model_config())
    if args.model is not None:
        base = _overlay(base, _load_config_file(args.model), "model")
    config = model_config_from_dict(base)
    n_params = param_count(config)
    if n_params > _GRADCHECK_PARAM_GUARD and not args.force:
        raise ConfigError(
            f"config has {n_params} parameters (> {_GRADCHECK_PARAM_GUARD}); "
            f"finite differences at this size are slow — pass --force to "
            f"run anyway"
        )

    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(1, config.time_steps, config.in_channels,
                         config.in_size, config.in_size))
    labels = rng.integers(
        0, config.num_classes,
        size=(1, config.out_size, config.out_size)).astype(np.uint8)
    params = init_params(config, args.seed).astype(np.float64)

    def f(p):
        parts = forward_batch(Tensor(x), p, config)
        return cross_entropy_loss(parts.probs, labels)

    t0 = time.perf_counter()
    report = grad_check(f, params, eps=args.eps, samples=args.samples,
                        seed=args.seed)
    seconds = time.perf_counter() - t0

    print(f"max relative error: {report.max_relative_error:.3e} "
          f"(threshold {GRADCHECK_THRESHOLD:g})")
    print(f"samples: {report.samples}  boundary-crossing probes excluded: "
          f"{report.crossed}")
    groups = report.by_group()
    counts = report.samples_by_group()
    for group in sorted(groups):
        print(f"  {group:<12} max {groups[group]:.3e}  "
              f"over {counts.get(group, 0)} samples")
    if report.skipped_tensors:
        print(f"  (no clean probe found for: "
              f"{', '.join(sorted(report.skipped_tensors))})")
    ok = report.max_relative_error < GRADCHECK_THRESHOLD

    if args.out:
        _require_out_dir(args.out)
        payload = {
            "max_relative_error": report.max_relative_error,
            "threshold": GRADCHECK_THRESHOLD,
            "samples": report.samples,
            "crossed": report.crossed,
            "groups": {k: groups[k] for k in sorted(groups)},
            "passed": ok,
        }
        _write_text(os.path.join(args.out, "gradcheck.json"),
                    json.dumps(payload, indent=2, sort_keys=True) + "\n")
        manifest = RunManifest(
            command="gradcheck", argv=list(sys.argv[1:]), version=__version__,
            started=started, finished="",
            seeds={"seed": args.seed},
            inputs={},
            outputs=["gradcheck.json"],
            resolved={"model": model_config_to_dict(config),
                      "eps": args.eps, "samples": args.samples},
            timing={"seconds": seconds},
        )
        _finish_manifest(manifest, args.out)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_replay(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{args.manifest}: not valid JSON ({e})") from None
    for key in ("command", "resolved"):
        if key not in manifest:
            raise DataFormatError(f"{args.manifest}: missing {key!r}")
    command = manifest["command"]
    resolved = manifest["resolved"]
    inputs = manifest.get("inputs", {})

    def _tmp_config(obj, name):
        path = os.path.join(args.out, f"replay_{name}.json")
        _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return path

    _require_out_dir(args.out)
    if command == "gen":
        ns = argparse.Namespace(
            config=_tmp_config(resolved["scene"], "scene"), seed=None,
            noise_fraction=resolved["noise_fraction"],
            no_clean=not resolved["clean"],
            no_normalize=not resolved["normalize"], out=args.out)
        return cmd_gen(ns)
    if command == "train":
        ns = argparse.Namespace(
            data=inputs["data"], model=_tmp_config(resolved["model"], "model"),
            train=_tmp_config(resolved["train"], "train"), mode=None,
            out=args.out)
        return cmd_train(ns)
    if command == "eval":
        ns = argparse.Namespace(
            data=inputs["data"], ckpt=inputs["ckpt"], split=resolved["split"],
            out=os.path.join(args.out, "metrics.json"))
        return cmd_eval(ns)
    if command == "noise-sweep":
        bundle = {"scene": resolved["scene"], "model": resolved["model"],
                  "train": resolved["train"]}
        ns = argparse.Namespace(
            config=_tmp_config(bundle, "bundle"), seed=None,
            fractions=",".join(repr(f) for f in resolved["fractions"]),
            out=args.out)
        return cmd_noise_sweep(ns)
    if command == "attn":
        cls = resolved.get("class", "all")
        ns = argparse.Namespace(
            data=inputs["data"], ckpt=inputs["ckpt"], split=resolved["split"],
            cls=cls, out=args.out)
        return cmd_attn(ns)
    if command == "gradcheck":
        ns = argparse.Namespace(
            model=_tmp_config(resolved["model"], "model"),
            seed=manifest["seeds"]["seed"], samples=resolved["samples"],
            eps=resolved["eps"], force=True, out=args.out)
        return cmd_gradcheck(ns)
    raise DataFormatError(f"{args.manifest}: unknown command {command!r}")


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statt",
        description="Spatio-temporal segmentation experiments on synthetic "
                    "crop-phenology scenes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--config", help="scene config JSON (defaults filled in)")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--noise-fraction", type=float, default=0.0,
                   help="fraction of time steps to corrupt (default 0)")
    p.add_argument("--no-clean", action="store_true",
                   help="skip label erosion / small-component removal")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip per-channel train-split normalization")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", help="model config JSON (partial; defaults "
                                   "inferred from the dataset)")
    p.add_argument("--train", help="train config JSON (partial)")
    p.add_argument("--mode", choices=["attention", "mean"],
                   help="override temporal aggregation mode")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=list(SPLIT_NAMES), default="test")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep",
                       help="train attention and mean modes per noise fraction")
    p.add_argument("--config", help="bundle JSON with scene/model/train keys")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--fractions", default="0,0.25,0.5",
                   help="comma-separated noise fractions")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("attn", help="dump the attention profile of a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=list(SPLIT_NAMES), default="test")
    p.add_argument("--class", dest="cls", default="all",
                   help="class name for a single per-class column, or 'all'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model gradient")
    p.add_argument("--model", help="model config JSON (partial; defaults to "
                                   "the tiny check config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=120,
                   help="number of sampled parameters (default 120)")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--force", action="store_true",
                   help="allow configs with more than 10^6 parameters")
    p.add_argument("--out", help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest", help="path to a manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
