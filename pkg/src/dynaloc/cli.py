"""Command-line interface.

    dynaloc gen-env      --seed S --clusters N --label t1 --out t1.json
    dynaloc gen-env      --base t1.json --remove random --seed S --label t2 --out t2.json
    dynaloc gen-dataset  --env t1.json --n 5000 --test 1000 --labels yes --seed S --out ds.adcm
    dynaloc train        --method gr --source ds.adcm --target dt.adcm --out model/
    dynaloc eval         --model model/ --test test.adcm --out report.csv
    dynaloc similarity   --model model/ --env-a t1.json --env-b t2.json --out sigma.csv

Tunables resolve as: built-in defaults < ``--desk`` preset < ``--config``
JSON file < explicit flags.  Every command writes the resolved values next
to its output as ``*.config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from math import comb
from pathlib import Path

import numpy as np

from . import __version__
from . import da_pipeline as dp
from . import eval_metrics as em
from .channel_sim import Environment, derive_environment, generate_environment
from .dataset_io import read_dataset, write_dataset

log = logging.getLogger("dynaloc")

# Built-in defaults, then the desk-scale preset layered on top.
DEFAULTS = {
    "train": {"lr": 1e-4, "epochs": 1000, "batch": 200, "lambda": 1.0, "seed": 0, "filters": 32,
              "aux_fraction": 0.5},
    "gen-dataset": {"n": 100000, "test": 10000, "seed": 0},
    "gen-env": {"seed": 0, "clusters": 20},
    "similarity": {"samples": 5000, "seed": 0},
}
DESK = {
    "train": {"lr": 1e-2, "epochs": 150, "batch": 100, "filters": 4, "aux_fraction": 0.25},
    "gen-dataset": {"n": 5000, "test": 1000},
}

EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED, EXIT_LABELS, EXIT_INTERNAL = 2, 3, 4, 5, 1


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category, self.code = category, code


# ---------------------------------------------------------------------------
# config resolution


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if args.desk:
        cfg.update(DESK.get(command, {}))
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read {args.config}: {exc}", EXIT_INPUT) from exc
        cfg.update(overrides.get(command, {}))
    for key, value in vars(args).items():
        if value is not None and key not in ("func", "config", "desk", "verbose"):
            cfg[key] = value
    cfg["command"] = command
    cfg["desk"] = bool(args.desk)
    return cfg


def write_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def config_path(out) -> Path:
    out = Path(out)
    return out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise CliError("usage", "missing required option(s): " + ", ".join("--" + k for k in missing),
                       EXIT_USAGE)


# ---------------------------------------------------------------------------
# gen-env


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError("usage", f"--remove expects comma-separated ids, got {text!r}", EXIT_USAGE) from exc


def _parse_drift(text: str) -> dict[int, tuple[float, float]]:
    # "id:dx:dy,id:dx:dy"
    out = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        try:
            cid, dx, dy = item.split(":")
            out[int(cid)] = (float(dx), float(dy))
        except ValueError as exc:
            raise CliError("usage", f"bad --drift entry {item!r}, expected id:dx:dy", EXIT_USAGE) from exc
    return out


def exclusion_path(base) -> Path:
    base = Path(base)
    return base.with_name(base.name + ".removed.json")


def load_exclusions(base) -> list[list[int]]:
    p = exclusion_path(base)
    return json.loads(p.read_text()) if p.exists() else []


def pick_triplet(ids, used, rng: np.random.Generator, size: int = 3) -> list[int]:
    """Random ``size``-subset of ``ids`` not already in ``used``."""
    used = {tuple(sorted(t)) for t in used}
    ids = sorted(ids)
    if len(used) >= comb(len(ids), size):
        raise CliError("exhausted", "every cluster subset has already been removed once", EXIT_INPUT)
    while True:
        pick = tuple(sorted(int(i) for i in rng.choice(ids, size=size, replace=False)))
        if pick not in used:
            return list(pick)


def cmd_gen_env(cfg: dict) -> None:
    _require(cfg, "out")
    if cfg.get("base"):
        base = Environment.load(cfg["base"])
        used = load_exclusions(cfg["base"])
        choice = cfg.get("remove", "")
        if choice == "random":
            rng = np.random.default_rng(cfg["seed"])
            remove = pick_triplet(base.cluster_ids, used, rng, cfg.get("remove_count", 3))
        else:
            remove = _parse_ids(choice)
            if remove and sorted(remove) in [sorted(t) for t in used]:
                raise CliError("repeated-triplet", f"clusters {sorted(remove)} were already removed "
                               f"from {cfg['base']}", EXIT_INPUT)
        drift = _parse_drift(cfg.get("drift") or "")
        label = cfg.get("label") or base.time_label + "'"
        env = derive_environment(base, label, remove=remove, drift=drift)
        if remove:
            exclusion_path(cfg["base"]).write_text(json.dumps(used + [sorted(remove)]) + "\n")
        cfg["removed"] = sorted(remove)
    else:
        if cfg.get("remove") or cfg.get("drift"):
            raise CliError("usage", "--remove/--drift need --base", EXIT_USAGE)
        env = generate_environment(cfg["seed"], cfg["clusters"], time_label=cfg.get("label") or "t0")
        # a fresh environment has no removal history
        exclusion_path(cfg["out"]).unlink(missing_ok=True)
    env.save(cfg["out"])
    write_config(cfg, config_path(cfg["out"]))
    log.info("wrote %s (%d clusters)", cfg["out"], len(env.clusters))


# ---------------------------------------------------------------------------
# gen-dataset


def test_path(out) -> Path:
    out = Path(out)
    return out.with_name(f"{out.stem}.test{out.suffix}")


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def cmd_gen_dataset(cfg: dict) -> None:
    _require(cfg, "env", "out")
    env = Environment.load(cfg["env"])
    labels = cfg.get("labels", "yes")
    if labels not in ("yes", "no"):
        raise CliError("usage", "--labels must be yes or no", EXIT_USAGE)
    scale = None
    if cfg.get("scale_from"):
        scale = read_dataset(cfg["scale_from"]).scale
    train = dp.synthesize_dataset(env, cfg["n"], _sub_seed(cfg["seed"], 0), scale)
    scale = train.scale
    write_dataset(cfg["out"], train if labels == "yes" else train.without_labels())
    if cfg["test"]:
        test = dp.synthesize_dataset(env, cfg["test"], _sub_seed(cfg["seed"], 1), scale)
        write_dataset(test_path(cfg["out"]), test)
    cfg["scale"] = scale
    write_config(cfg, config_path(cfg["out"]))


# ---------------------------------------------------------------------------
# train / eval / similarity


def cmd_train(cfg: dict) -> None:
    _require(cfg, "method", "source", "out")
    method = cfg["method"]
    source = read_dataset(cfg["source"])
    if not isinstance(source, dp.LabeledDataset):
        raise CliError("labels", f"{cfg['source']} has no locations; the source must be labeled", EXIT_LABELS)
    target = None
    if method != "baseline":
        _require(cfg, "target")
        target = read_dataset(cfg["target"])
        if isinstance(target, dp.LabeledDataset):
            raise CliError("labels", f"{cfg['target']} carries locations; generate it with --labels no",
                           EXIT_LABELS)
    L, K = source.dims
    arch = dp.Architecture.for_dims(L, K, n_filters=cfg["filters"])
    tc = dp.TrainConfig(method=method, lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                        lam=cfg["lambda"], seed=cfg["seed"], aux_fraction=cfg["aux_fraction"])
    model = dp.train(method, source, target, tc, arch)
    model.save(cfg["out"])
    write_config(cfg, Path(cfg["out"]) / "config.json")


def cmd_eval(cfg: dict) -> None:
    _require(cfg, "model", "test", "out")
    model = dp.TrainedModel.load(cfg["model"])
    test = read_dataset(cfg["test"])
    if not isinstance(test, dp.LabeledDataset):
        raise CliError("labels", f"{cfg['test']} has no locations to evaluate against", EXIT_LABELS)
    report = em.localization_errors(model, test)
    out = Path(cfg["out"])
    em.export_report(report, out)
    em.export_percentiles(report, out.with_name(out.stem + ".percentiles.csv"))
    cfg["p80"] = report.percentile(em.HEADLINE_PERCENTILE)
    write_config(cfg, config_path(out))
    print(f"p80 {cfg['p80']:.4f} m  ({len(report)} samples)")


def cmd_similarity(cfg: dict) -> None:
    _require(cfg, "model", "env_a", "env_b", "out")
    model = dp.TrainedModel.load(cfg["model"])
    a, b = Environment.load(cfg["env_a"]), Environment.load(cfg["env_b"])
    est = em.similarity(model, a, b, cfg["samples"], cfg["seed"], grid=bool(cfg.get("grid")))
    em.export_report(est, cfg["out"])
    cfg["sigma"] = est.value
    write_config(cfg, config_path(cfg["out"]))
    print(f"sigma({a.time_label},{b.time_label}) {est.value:.4f} m  ({est.n_samples} samples)")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynaloc")
    p.add_argument("--desk", action="store_true", help="desk-scale defaults")
    p.add_argument("--config", help="JSON file with per-command overrides")
    p.add_argument("-v", "--verbose", action="store_true")
    # the same options after the subcommand; SUPPRESS keeps them from
    # overwriting values given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--desk", action="store_true")
    common.add_argument("--config")
    common.add_argument("-v", "--verbose", action="store_true")

    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-env", parents=[common], help="generate or mutate an environment")
    s.add_argument("--seed", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--base", help="environment to mutate")
    s.add_argument("--remove", help='comma-separated cluster ids, "" or "random"')
    s.add_argument("--remove-count", type=int, help="subset size for --remove random (3)")
    s.add_argument("--drift", help="id:dx:dy,... offsets in meters")
    s.add_argument("--label", help="time label of the new environment")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_env)

    s = sub.add_parser("gen-dataset", parents=[common], help="synthesize fingerprint datasets")
    s.add_argument("--env")
    s.add_argument("--n", type=int)
    s.add_argument("--test", type=int, help="size of the labeled test set (0 for none)")
    s.add_argument("--labels", choices=("yes", "no"))
    s.add_argument("--seed", type=int)
    s.add_argument("--scale-from", help="reuse the normalization scale of this dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train", parents=[common], help="train a location estimator")
    s.add_argument("--method", choices=dp.METHODS)
    s.add_argument("--source")
    s.add_argument("--target")
    s.add_argument("--lambda", type=float, dest="lambda")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--filters", type=int, help="conv filters per layer")
    s.add_argument("--aux-fraction", type=float, dest="aux_fraction",
                   help="per-domain size of the ae/gr auxiliary batch as a fraction of --batch")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="localization error report")
    s.add_argument("--model")
    s.add_argument("--test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("similarity", parents=[common], help="environment similarity estimate")
    s.add_argument("--model")
    s.add_argument("--env-a", dest="env_a")
    s.add_argument("--env-b", dest="env_b")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--grid", action="store_true", default=None, help="lattice sweep instead of random draws")
    s.add_argument("--out")
    s.set_defaults(func=cmd_similarity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(resolve(args.command, args))
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except dp.TrainingDiverged as exc:
        print(f"error[diverged]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TypeError as exc:
        if "unlabeled" in str(exc) or "labeled" in str(exc):
            print(f"error[labels]: {exc}", file=sys.stderr)
            return EXIT_LABELS
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
