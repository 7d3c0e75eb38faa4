"""End-to-end desk protocol driven through the CLI.

t1 is a fresh 20-cluster environment; t2 and t3 each drop a different random
triplet of its clusters.  Per seed, baseline / ae / gr are trained on
labeled t1 data (ae and gr also see unlabeled t2 fingerprints), every model
is evaluated on the t1, t2 and t3 test sets, and the baseline provides the
two similarity estimates.

    python -m dynaloc.protocol --out runs/desk --seeds 0,1,2
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cli import main as cli
from .da_pipeline import METHODS

log = logging.getLogger(__name__)

ENVS = ("t1", "t2", "t3")


class StepFailed(RuntimeError):
    pass


def _run(argv: list[str]) -> None:
    log.info("dynaloc %s", " ".join(argv))
    code = cli(argv)
    if code:
        raise StepFailed(f"step failed with exit code {code}: dynaloc {' '.join(argv)}")


def _p80(config_json: Path) -> float:
    return float(json.loads(config_json.read_text())["p80"])


def run_protocol(out, seeds=(0, 1, 2), *, env_seed: int = 7, data_seed: int = 11,
                 methods=METHODS, n: int | None = None, n_test: int | None = None,
                 epochs: int | None = None, samples: int = 5000, desk: bool = True,
                 extra: list[str] | None = None) -> dict:
    """Runs everything under ``out`` and returns the summary (also written as JSON/CSV).

    Wall-clock time goes to ``timing.json`` only.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    g = ["--desk"] if desk else []
    g += extra or []
    t0 = time.perf_counter()

    envs = {e: out / f"{e}.json" for e in ENVS}
    _run(g + ["gen-env", "--seed", str(env_seed), "--clusters", "20", "--label", "t1",
              "--out", str(envs["t1"])])
    for k, e in enumerate(("t2", "t3"), start=1):
        _run(g + ["gen-env", "--base", str(envs["t1"]), "--remove", "random", "--seed", str(env_seed + k),
                  "--label", e, "--out", str(envs[e])])

    size = []
    if n is not None:
        size += ["--n", str(n)]
    if n_test is not None:
        size += ["--test", str(n_test)]
    data = {e: out / f"{e}.adcm" for e in ENVS}
    _run(g + ["gen-dataset", "--env", str(envs["t1"]), "--labels", "yes", "--seed", str(data_seed),
              "--out", str(data["t1"])] + size)
    for k, e in enumerate(("t2", "t3"), start=1):
        _run(g + ["gen-dataset", "--env", str(envs[e]), "--labels", "no", "--seed", str(data_seed + k),
                  "--scale-from", str(data["t1"]), "--out", str(data[e])] + size)
    tests = {e: data[e].with_name(f"{e}.test.adcm") for e in ENVS}

    rows, sims = [], []
    train_extra = ["--epochs", str(epochs)] if epochs is not None else []
    for seed in seeds:
        for method in methods:
            mdir = out / f"{method}_s{seed}"
            argv = g + ["train", "--method", method, "--source", str(data["t1"]), "--seed", str(seed),
                        "--out", str(mdir)] + train_extra
            if method != "baseline":
                argv += ["--target", str(data["t2"])]
            ts = time.perf_counter()
            _run(argv)
            log.info("%s seed %d trained in %.0f s", method, seed, time.perf_counter() - ts)
            for e in ENVS:
                rep = out / f"eval_{method}_s{seed}_{e}.csv"
                _run(g + ["eval", "--model", str(mdir), "--test", str(tests[e]), "--out", str(rep)])
                rows.append({"seed": seed, "method": method, "test": e,
                             "p80": _p80(rep.with_name(rep.name + ".config.json"))})
        base = out / f"baseline_s{seed}"
        if base.exists():
            for e in ("t2", "t3"):
                sig = out / f"sigma_s{seed}_t1_{e}.csv"
                _run(g + ["similarity", "--model", str(base), "--env-a", str(envs["t1"]), "--env-b",
                          str(envs[e]), "--samples", str(samples), "--seed", str(seed), "--out", str(sig)])
                sims.append({"seed": seed, "pair": f"t1-{e}",
                             "sigma": float(json.loads(sig.with_name(sig.name + ".config.json")
                                                       .read_text())["sigma"])})

    summary = {"p80": rows, "similarity": sims, "median_p80": median_table(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    # kept apart so that everything else is reproducible bit for bit
    summary["runtime_s"] = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps({"runtime_s": summary["runtime_s"]}) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["seed", "method", "test", "p80"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return summary


def median_table(rows) -> dict[str, dict[str, float]]:
    """{method: {test env: median p80 over seeds}}."""
    table: dict[str, dict[str, list]] = {}
    for r in rows:
        table.setdefault(r["method"], {}).setdefault(r["test"], []).append(r["p80"])
    return {m: {e: float(np.median(v)) for e, v in by.items()} for m, by in table.items()}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="run the desk protocol through the CLI")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--n", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--full-scale", action="store_true", help="use the full-size defaults instead of --desk")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        s = run_protocol(args.out, [int(x) for x in args.seeds.split(",")], methods=args.methods.split(","),
                         n=args.n, n_test=args.test, epochs=args.epochs, samples=args.samples,
                         desk=not args.full_scale)
    except StepFailed as exc:
        print(exc, file=sys.stderr)
        return 1
    for method, by in s["median_p80"].items():
        print(method, "  ".join(f"{e} {v:.3f}" for e, v in sorted(by.items())))
    print(f"runtime {s['runtime_s']:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
