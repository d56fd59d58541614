"""Command-line entry point: config files, subcommands, and run manifests.

Every run draws all randomness from --seed; nothing reads an implicit
entropy source. Successful runs end with an atomically written
manifest.json naming the artifacts that were produced.
"""

from __future__ import annotations

import argparse
import datetime
import difflib
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

try:  # stdlib from 3.11
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from . import __version__
from .attack_engine import ATTACKS, AttackConfig
from .ham import HamParams
from .harness import (
    ABLATION_PARAMS,
    ExperimentSpec,
    SOURCE_ID,
    TARGET_IDS,
    ablation_sweep,
    build_model_suite,
    craft_adversarial,
    export_images,
    generate_dataset,
    module_ablation,
    run_experiment,
)
from .hfm import HfmParams
from .models import ARCHITECTURES, Dataset, load_model, save_model, train
from .serial import load_dataset, save_dataset

__all__ = ["ConfigError", "main", "parse_config"]


class ConfigError(ValueError):
    """A config file failed to parse or validate."""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "attack": ("eps", "steps", "alpha", "mu", "copies"),
    "ham": ("sigma", "rho"),
    "hfm": ("beta", "levels", "kernel"),
    "experiment": ("sources", "targets", "attacks", "asr_convention"),
}


def _load_structured(path) -> dict:
    text = open(path, "rb").read()
    suffix = os.path.splitext(str(path))[1].lower()
    if suffix == ".json":
        try:
            return json.loads(text.decode("utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    if suffix == ".toml":
        try:
            return tomli.loads(text.decode("utf-8"))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    # unknown suffix: accept either syntax
    try:
        return json.loads(text.decode("utf-8"))
    except json.JSONDecodeError:
        try:
            return tomli.loads(text.decode("utf-8"))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON or TOML ({e})") from e


def _reject_unknown(mapping: dict, allowed, context: str) -> None:
    for key in mapping:
        if key not in allowed:
            hint = difflib.get_close_matches(key, list(allowed), n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown config key {context}{key!r}{suffix}")


def _number(section: dict, key: str, context: str):
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}{key} must be a number, got {value!r}")
    return float(value)


def _integer(section: dict, key: str, context: str) -> int:
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{context}{key} must be an integer, got {value!r}")
    return value


def _string_tuple(section: dict, key: str, context: str) -> tuple:
    value = section[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{context}{key} must be a list of strings, got {value!r}")
    return tuple(value)


def parse_config(path) -> ExperimentSpec:
    """Read a JSON or TOML config into a validated experiment spec.

    An empty config yields the full-default spec; unknown keys are hard
    errors with a nearest-key suggestion.
    """
    raw = _load_structured(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    _reject_unknown(raw, _CONFIG_KEYS, "")
    for name in _CONFIG_KEYS:
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a table/object")
        _reject_unknown(section, _CONFIG_KEYS[name], f"{name}.")

    ham_raw, hfm_raw = raw.get("ham", {}), raw.get("hfm", {})
    ham = HamParams(
        sigma=_number(ham_raw, "sigma", "ham.") if "sigma" in ham_raw else HamParams.sigma,
        rho=_number(ham_raw, "rho", "ham.") if "rho" in ham_raw else HamParams.rho,
    )
    hfm = HfmParams(
        levels=_integer(hfm_raw, "levels", "hfm.") if "levels" in hfm_raw else HfmParams.levels,
        beta=_number(hfm_raw, "beta", "hfm.") if "beta" in hfm_raw else HfmParams.beta,
        kernel_size=_integer(hfm_raw, "kernel", "hfm.") if "kernel" in hfm_raw else HfmParams.kernel_size,
    )
    atk = raw.get("attack", {})
    config = AttackConfig(
        eps=_number(atk, "eps", "attack.") if "eps" in atk else AttackConfig.eps,
        steps=_integer(atk, "steps", "attack.") if "steps" in atk else AttackConfig.steps,
        alpha=_number(atk, "alpha", "attack.") if "alpha" in atk else None,
        mu=_number(atk, "mu", "attack.") if "mu" in atk else AttackConfig.mu,
        copies=_integer(atk, "copies", "attack.") if "copies" in atk else AttackConfig.copies,
        ham=ham,
        hfm=hfm,
    )
    exp = raw.get("experiment", {})
    spec = ExperimentSpec(
        sources=_string_tuple(exp, "sources", "experiment.") if "sources" in exp else (SOURCE_ID,),
        targets=_string_tuple(exp, "targets", "experiment.") if "targets" in exp else TARGET_IDS,
        attacks=_string_tuple(exp, "attacks", "experiment.") if "attacks" in exp else ("mi_fgsm", "fsa"),
        config=config,
        asr_convention=exp.get("asr_convention", "all_images"),
    )
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return spec


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _write_manifest(out_dir, command: str, args, spec, artifacts, started: float) -> str:
    for name in artifacts:
        if not os.path.exists(os.path.join(out_dir, name)):
            raise RuntimeError(f"manifest names a missing artifact: {name}")
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config_path": args.config,
        "seed": args.seed,
        "threads": args.threads,
        "spec": asdict(spec) if spec is not None else None,
        "started_unix": started,
        "finished_unix": time.time(),
        "started": datetime.datetime.fromtimestamp(started, datetime.timezone.utc).isoformat(),
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": list(artifacts),
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _resolve_spec(args) -> ExperimentSpec:
    spec = parse_config(args.config) if args.config else ExperimentSpec()
    return replace(spec, config=replace(spec.config, master_seed=args.seed))


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_suite(models_dir, ids) -> dict:
    missing = [m for m in ids if not os.path.exists(os.path.join(models_dir, f"{m}.fsam"))]
    if missing:
        raise FileNotFoundError(f"missing model files in {models_dir}: {', '.join(sorted(missing))}")
    return {m: load_model(os.path.join(models_dir, f"{m}.fsam")) for m in ids}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    out = _out_dir(args)
    data = generate_dataset(
        seed=args.seed,
        num_classes=args.num_classes,
        per_class=args.per_class,
        h=args.height,
        w=args.width,
    )
    save_dataset(data, os.path.join(out, "dataset.fsad"))
    _write_manifest(out, "gen-data", args, None, ["dataset.fsad"], args.started)
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args)
    data = load_dataset(args.data)
    artifacts = []
    if args.arch:
        model = train(
            data,
            args.arch,
            seed=args.seed,
            epochs=args.epochs,
            learning_rate=args.lr,
            adversarial_eps=args.adv_eps,
        )
        name = f"{args.arch}.fsam"
        save_model(model, os.path.join(out, name))
        artifacts.append(name)
        meta = model.training_meta
        print(
            f"{args.arch}: train_acc={meta['final_train_accuracy']:.3f} "
            f"eval_acc={meta['final_eval_accuracy']:.3f}"
        )
    else:
        suite = build_model_suite(
            data, seed_a=args.seed, seed_b=args.seed + 1000, epochs=args.epochs, learning_rate=args.lr
        )
        for name, model in suite.items():
            save_model(model, os.path.join(out, f"{name}.fsam"))
            artifacts.append(f"{name}.fsam")
            meta = model.training_meta
            print(
                f"{name}: train_acc={meta['final_train_accuracy']:.3f} "
                f"eval_acc={meta['final_eval_accuracy']:.3f}"
            )
    _write_manifest(out, "train", args, None, artifacts, args.started)
    return 0


def _cmd_attack(args) -> int:
    out = _out_dir(args)
    spec = _resolve_spec(args)
    data = load_dataset(args.data)
    model = load_model(args.model)
    images, labels = data.eval_set()
    if args.limit is not None:
        images, labels = images[: args.limit], labels[: args.limit]
    advs = craft_adversarial(model, args.attack, images, labels, spec.config, threads=args.threads)
    adv_data = Dataset(advs, labels, np.full(len(labels), "eval", dtype="<U5"), data.num_classes)
    save_dataset(adv_data, os.path.join(out, "adversarial.fsad"))
    _write_manifest(out, "attack", args, spec, ["adversarial.fsad"], args.started)
    return 0


def _cmd_experiment(args) -> int:
    out = _out_dir(args)
    spec = _resolve_spec(args)
    models = _load_suite(args.models, set(spec.sources) | set(spec.targets))
    data = load_dataset(args.data)
    report = run_experiment(spec, models, data, out_dir=out, threads=args.threads, limit=args.limit)
    artifacts = ["report.csv", "report.md"]
    artifacts += [f"per_image_{s}_{a}.csv" for s in spec.sources for a in spec.attacks]
    _write_manifest(out, "experiment", args, spec, artifacts, args.started)
    print(f"{len(report.rows)} report rows in {report.wall_clock_s:.1f}s")
    return 0


def _cmd_ablate(args) -> int:
    out = _out_dir(args)
    spec = replace(_resolve_spec(args), attacks=(args.attack,))
    models = _load_suite(args.models, set(spec.sources) | set(spec.targets))
    data = load_dataset(args.data)
    values = _parse_values(args.param, args.values)
    ablation_sweep(spec, args.param, values, models, data, out_dir=out, threads=args.threads, limit=args.limit)
    _write_manifest(out, "ablate", args, spec, [f"ablation_{args.param}.csv"], args.started)
    return 0


def _cmd_module_ablate(args) -> int:
    out = _out_dir(args)
    spec = _resolve_spec(args)
    models = _load_suite(args.models, set(spec.sources) | set(spec.targets))
    data = load_dataset(args.data)
    module_ablation(spec, models, data, out_dir=out, threads=args.threads, limit=args.limit)
    artifacts = ["report.csv", "report.md"]
    artifacts += [f"per_image_{spec.sources[0]}_{arm}.csv" for arm in ("mi_fgsm", "ham", "hfm", "fsa")]
    _write_manifest(out, "module-ablate", args, spec, artifacts, args.started)
    return 0


def _cmd_export_images(args) -> int:
    out = _out_dir(args)
    clean = load_dataset(args.data)
    adv = load_dataset(args.adv)
    clean_images, _ = clean.eval_set()
    adv_images = adv.images
    k = min(args.count, len(clean_images), len(adv_images))
    if k == 0:
        raise ValueError("no images to export")
    export_images(clean_images[:k], adv_images[:k], os.path.join(out, "panels.ppm"))
    _write_manifest(out, "export-images", args, None, ["panels.ppm"], args.started)
    return 0


def _cmd_import_data(args) -> int:
    out = _out_dir(args)
    images = np.load(args.images)
    labels = np.load(args.labels)
    if images.ndim != 4:
        raise ValueError(f"images array must be (N, H, W, C), got shape {images.shape}")
    labels = labels.astype(np.int64)
    num_classes = args.num_classes or int(labels.max()) + 1
    # stratified split: first 80% of each class's occurrences train
    split = np.full(len(labels), "eval", dtype="<U5")
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        split[idx[: round(0.8 * len(idx))]] = "train"
    data = Dataset(images.astype(np.float32).astype(np.float64), labels, split, num_classes)
    data.validate()
    save_dataset(data, os.path.join(out, "dataset.fsad"))
    _write_manifest(out, "import-data", args, None, ["dataset.fsad"], args.started)
    return 0


def _parse_values(param: str, text: str) -> list:
    kind = int if param in ("N", "n", "kernel") else float
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--values for {param} must be comma-separated {kind.__name__}s") from e


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # global flags are legal both before and after the subcommand; the
    # subparser copies default to SUPPRESS so they never clobber a value
    # given before the subcommand
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--seed", type=int, default=default(0), help="master seed for all randomness")
    parser.add_argument("--threads", type=int, default=default(1), help="worker threads for crafting")
    parser.add_argument("--out", default=default(None), help="output directory (default: current)")
    parser.add_argument("--config", default=default(None), help="JSON or TOML config file")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common_flags(common, suppress=True)

    parser = argparse.ArgumentParser(prog="fsalab", description=__doc__)
    _add_common_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"fsalab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train victim models")
    p.add_argument("--data", required=True, help="dataset file (.fsad)")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default=None,
                   help="train a single architecture instead of the full suite")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--adv-eps", type=float, default=None,
                   help="FGSM adversarial-training budget (single-arch mode)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", parents=[common], help="craft adversarial images from one source")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="source model file (.fsam)")
    p.add_argument("--attack", choices=ATTACKS, default="fsa")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("experiment", parents=[common], help="run the source-by-target matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="directory of .fsam model files")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("ablate", parents=[common], help="sweep one parameter")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--param", required=True, choices=ABLATION_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--attack", choices=ATTACKS, default="fsa")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("module-ablate", parents=[common], help="baseline/single-module/full arms")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_module_ablate)

    p = sub.add_parser("export-images", parents=[common], help="write clean/adv/difference panels")
    p.add_argument("--data", required=True, help="clean dataset (.fsad)")
    p.add_argument("--adv", required=True, help="adversarial dataset (.fsad)")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=_cmd_export_images)

    p = sub.add_parser("import-data", parents=[common], help="ingest raw .npy tensors as a dataset")
    p.add_argument("--images", required=True, help=".npy array, (N, H, W, C) floats in [0, 1]")
    p.add_argument("--labels", required=True, help=".npy integer array, (N,)")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=_cmd_import_data)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    args.started = time.time()
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
