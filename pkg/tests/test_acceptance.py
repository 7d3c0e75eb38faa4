"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The desk protocol (criteria 5 and 6) trains 9 models and takes about half an
hour on one core.
"""

import ast
import inspect
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from dynaloc import autodiff as ad
from dynaloc import channel_sim as cs
from dynaloc import cli
from dynaloc import da_pipeline as dp
from dynaloc import eval_metrics as em
from dynaloc import fingerprint as fp
from dynaloc import nn_blocks as nb
from dynaloc.autodiff import Tensor
from dynaloc.protocol import run_protocol
from gradcases import PRIMITIVES, consts, point
from test_nn_blocks import brute_force_attention

SMALL = dp.Architecture(nb.ExtractorConfig(n_filters=4, sa=nb.SAConfig(n_heads=2, model_dim=6), output_dim=8),
                        nb.EstimatorConfig(in_dim=8, widths=(6, 4, 2)))
POINTS = 20
TOL = 1e-4


# ---------------------------------------------------------------------------
# 1. numerical core


def _central(f, x: np.ndarray, i: int, step: float = 1e-5, kink_tol: float = 1e-2):
    """Central difference of ``f`` along ``x.flat[i]``; None when the one-sided slopes disagree (a relu kink)."""
    flat = x.reshape(-1)
    orig = flat[i]
    f0 = f()
    flat[i] = orig + step
    fp_ = f()
    flat[i] = orig - step
    fm = f()
    flat[i] = orig
    central = (fp_ - fm) / (2 * step)
    if abs((fp_ - f0) - (f0 - fm)) / step > kink_tol * max(1.0, abs(central)):
        return None
    return central


def _composite_errors(method, rng):
    """Tape gradients of one composed loss against central differences at one random point.

    With the GRL in place the extractor receives the gradient of
    ``loc - lam * cls`` while every other component receives the gradient
    of ``loc + cls``; each is compared with the matching finite difference.
    """
    lam = 0.7
    net = dp.Network.initialize(method, SMALL, int(rng.integers(1 << 30)))
    for p in net.parameters():
        if p.ndim == 1:
            p.values = rng.uniform(0.05, 0.1, size=p.shape)  # keeps relus off their kinks
    xs, ps = rng.normal(size=(3, 2, 16, 32)) / 32, rng.uniform(-1, 1, size=(3, 2))
    xt = rng.normal(size=(2, 2, 16, 32)) / 32

    def losses():
        if method == "baseline":
            return dp.loss_baseline(net, xs, ps)
        if method == "ae":
            return dp.loss_ae(net, xs, ps, xt)
        return dp.loss_gr(net, xs, ps, xt, lam)

    with ad.Tape() as tape:
        total = losses().total
    tape.backward(total)
    errs = []
    for role, comp in net.components().items():
        for name in sorted(comp)[:2]:
            p = comp[name]
            i = int(rng.integers(p.values.size))
            analytic = p.grad.reshape(-1)[i]
            if method == "gr" and role == "delta":
                def f():
                    ls = losses()
                    return float(ls.localization.values) - lam * float(ls.auxiliary.values)
            else:
                def f():
                    return float(losses().total.values)
            # conv0 biases shift many relus at once; a 1e-5 step can straddle one
            numeric = _central(f, p.values, i, step=1e-6)
            if numeric is None:
                continue
            errs.append(abs(analytic - numeric) / max(1.0, abs(analytic)))
    for p in net.parameters():
        p.grad = None
    return errs or [0.0]


def test_criterion_1_gradient_checks(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, shape) in PRIMITIVES.items():
        rng = np.random.default_rng(len(name))
        c = consts(rng)
        worst[name] = max(ad.grad_check(lambda t: fn(t, c), point(rng, shape, away_from_zero=name == "relu"))
                          for _ in range(POINTS))
    # through a reversal layer the tape gradient is -lam times the plain derivative
    grl = ad.GrlConfig(0.5)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    errs = []
    for _ in range(POINTS):
        x = Tensor(point(rng, (3, 4)), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum(ad.grl_forward(x * x, grl) * w)
        tape.backward(y)
        i = int(rng.integers(12))
        numeric = _central(lambda: float(np.sum(x.values * x.values * w)), x.values, i)
        errs.append(abs(x.grad.reshape(-1)[i] + grl.lam * numeric) / max(1.0, abs(x.grad.reshape(-1)[i])))
    worst["grl_composed"] = max(errs)
    rng = np.random.default_rng(2)
    for method in dp.METHODS:
        worst[f"loss_{method}"] = max(max(_composite_errors(method, rng)) for _ in range(POINTS))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < TOL}
    ok = not bad and elapsed < 60
    verdict(1, "gradient checks", ok,
            f"{len(worst)} functions x {POINTS} points, worst {max(worst.values()):.1e}, {elapsed:.0f} s")
    assert not bad, bad
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. transforms


def test_criterion_2_transform_exactness(verdict):
    F, V = fp.unitary_dft(32), fp.shifted_dft(16)
    e_f = np.linalg.norm(F @ F.conj().T - np.eye(32))
    e_v = np.linalg.norm(V @ V.conj().T - np.eye(16))
    rng = np.random.default_rng(3)
    env = cs.generate_environment(7, 20)
    H = np.concatenate([cs.synthesize_channels(env, cs.sample_positions(env.area, 10, 4)),
                        rng.normal(size=(10, 16, 32)) + 1j * rng.normal(size=(10, 16, 32))])
    A = fp.adcm(H)
    norms = np.linalg.norm(H, axis=(1, 2))
    e_rt = np.max(np.linalg.norm(fp.inverse_adcm(A) - H, axis=(1, 2)) / norms)
    e_en = np.max(np.abs(np.linalg.norm(A, axis=(1, 2)) - norms) / norms)
    ok = max(e_f, e_v, e_rt, e_en) < 1e-10
    verdict(2, "transform exactness", ok, f"F {e_f:.1e}, V {e_v:.1e}, round trip {e_rt:.1e}, energy {e_en:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. gradient reversal


def test_criterion_3_grl_exactness(verdict, small_data, tiny_arch):
    rng = np.random.default_rng(5)
    forward_ok = backward_ok = True
    for lam in (0.0, 0.3, 1.0, 7.5):
        x = Tensor(rng.normal(size=(4, 6)) * 10.0 ** rng.integers(-5, 5, size=(4, 6)), requires_grad=True)
        g = rng.normal(size=(4, 6))
        with ad.Tape() as tape:
            y = ad.grl_forward(x, ad.GrlConfig(lam))
        forward_ok &= y.values.tobytes() == x.values.tobytes()
        tape.backward(y, g)
        backward_ok &= np.array_equal(x.grad, -lam * g)

    cfg = dict(lr=1e-2, epochs=3, batch_size=60, seed=11)
    base = dp.train("baseline", small_data[0], None, dp.TrainConfig("baseline", **cfg), tiny_arch)
    gr = dp.train("gr", small_data[0], small_data[1], dp.TrainConfig("gr", lam=0.0, **cfg), tiny_arch)
    same_loss = [h["localization"] for h in gr.history] == [h["localization"] for h in base.history]
    same_params = all(gr.net.extractor[k].values.tobytes() == p.values.tobytes() for k, p in base.net.extractor.items())
    same_params &= all(gr.net.estimator[k].values.tobytes() == p.values.tobytes() for k, p in base.net.estimator.items())
    ok = forward_ok and backward_ok and same_loss and same_params
    verdict(3, "gradient reversal", ok, f"forward identity {forward_ok}, backward -lam*g {backward_ok}, "
            f"lam=0 trajectory {same_loss and same_params}")
    assert ok


# ---------------------------------------------------------------------------
# 4. attention


def test_criterion_4_attention_oracle(verdict):
    cfg = nb.SAConfig(n_heads=12, model_dim=36)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(12):
        X = rng.normal(size=(int(rng.integers(1, 10)), 36))
        p = {f"sa.{k}": Tensor(rng.normal(scale=0.5, size=(36, 36))) for k in ("wq", "wk", "wv", "wo")}
        p["sa.bo"] = Tensor(rng.normal(size=36))
        got = nb.self_attention(Tensor(X), p, cfg).values
        want = brute_force_attention(X, *(p[f"sa.{k}"].values for k in ("wq", "wk", "wv", "wo", "bo")), 12)
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok = worst < 1e-10
    verdict(4, "attention oracle", ok, f"12 heads, 12 inputs, max abs diff {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6. desk protocol


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    summary = run_protocol(out, seeds=(0, 1, 2))
    return out, summary


def test_criterion_5_protocol_ordering(verdict, desk_run):
    out, s = desk_run
    med = s["median_p80"]
    b1, b2 = med["baseline"]["t1"], med["baseline"]["t2"]
    ae2, gr2 = med["ae"]["t2"], med["gr"]["t2"]
    envs = [set(cs.Environment.load(out / f"{e}.json").cluster_ids) for e in ("t1", "t2", "t3")]
    shared = min(len(a & b) for i, a in enumerate(envs) for b in envs[i + 1:])
    drop = 1 - b1 / b2
    gain = 1 - min(ae2, gr2) / b2
    runtime = s["runtime_s"]
    a_ok, b_ok, t_ok = drop >= 0.20, gain >= 0.10, runtime < 1800
    ok = a_ok and b_ok and t_ok and shared >= 14
    verdict(5, "protocol ordering", ok,
            f"median p80 baseline t1 {b1:.2f} m, t2 {b2:.2f} m ({drop:.0%} better at t1); "
            f"ae t2 {ae2:.2f} m, gr t2 {gr2:.2f} m (best {gain:.0%} better); "
            f"shared clusters >= {shared}; {runtime / 60:.1f} min")
    assert shared >= 14
    assert a_ok, f"baseline degradation only {drop:.1%}"
    assert b_ok, f"adaptation gain only {gain:.1%}"
    assert t_ok, f"runtime {runtime:.0f} s"


def test_criterion_6_similarity(verdict, desk_run):
    out, s = desk_run
    model = dp.TrainedModel.load(out / "baseline_s0")
    t1, t2 = (cs.Environment.load(out / f"{e}.json") for e in ("t1", "t2"))
    same = em.similarity(model, t1, t1, n_samples=5000, seed=0)
    full = em.similarity(model, t1, t2, n_samples=5000, seed=0)
    prefix = em.similarity(model, t1, t2, n_samples=1000, seed=0)
    rm = full.running_max()
    monotone = bool(np.all(np.diff(rm) >= 0)) and prefix.value <= full.value and \
        np.array_equal(prefix.gaps, full.gaps[:1000])
    reported = [r["sigma"] for r in s["similarity"] if r["seed"] == 0 and r["pair"] == "t1-t2"]
    ok = same.value == 0.0 and monotone and full.value > 0 and reported == [full.value]
    verdict(6, "similarity metric", ok, f"sigma(t1,t1) {same.value}, sigma(t1,t2) {full.value:.3f} m "
            f"at 5000 samples ({prefix.value:.3f} m at 1000)")
    assert ok


# ---------------------------------------------------------------------------
# 7. label hygiene

TRAINING_PATH = [dp.train, dp.loss_ae, dp.loss_gr, dp.loss_baseline, dp._check_target, cli.cmd_train]


def _location_reads(fn):
    tree = ast.parse(inspect.getsource(fn))
    return [ast.unparse(node.value) for node in ast.walk(tree)
            if isinstance(node, ast.Attribute) and node.attr == "locations"]


class SpyTarget(dp.UnlabeledDataset):
    """Unlabeled data that remembers every attribute the trainer touches."""

    def __getattribute__(self, name):
        if not name.startswith("__"):
            object.__getattribute__(self, "touched").add(name)
        return object.__getattribute__(self, name)


def test_criterion_7_label_hygiene(verdict, small_data, tiny_arch, tmp_path):
    # static: the only location reads on the training path are of the source set
    reads = {fn.__name__: _location_reads(fn) for fn in TRAINING_PATH}
    static_ok = all(v == "source" for r in reads.values() for v in r) and any(reads.values())

    # dynamic: train every method against a spy target
    d_t = small_data[1]
    touched = set()
    for method in ("ae", "gr"):
        spy = SpyTarget(d_t.fingerprints, d_t.scale, d_t.domain, dict(d_t.provenance))
        object.__setattr__(spy, "touched", set())
        dp.train(method, small_data[0], spy, dp.TrainConfig(method, lr=1e-2, epochs=1, batch_size=100), tiny_arch)
        touched |= spy.touched
    dynamic_ok = "locations" not in touched and not hasattr(d_t, "locations")

    # labeled target data is refused by the library and the CLI
    with pytest.raises(TypeError):
        dp.train("gr", small_data[0], small_data[3], dp.TrainConfig("gr", epochs=1), tiny_arch)
    from dynaloc.dataset_io import write_dataset
    write_dataset(tmp_path / "s.adcm", small_data[0])
    write_dataset(tmp_path / "t.adcm", small_data[3])
    code = cli.main(["train", "--method", "ae", "--source", str(tmp_path / "s.adcm"), "--target",
                     str(tmp_path / "t.adcm"), "--epochs", "0", "--out", str(tmp_path / "m")])
    refuse_ok = code == cli.EXIT_LABELS
    ok = static_ok and dynamic_ok and refuse_ok
    verdict(7, "label hygiene", ok, f"static reads {sorted({v for r in reads.values() for v in r})}, "
            f"target attributes used {sorted(touched - {'touched'})}, labeled target exit code {code}")
    assert ok


# ---------------------------------------------------------------------------
# 8. reproducibility


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_8_reproducibility(verdict, tmp_path):
    # the whole CLI pipeline at reduced size, run twice into the same path
    work = tmp_path / "run"
    kw = dict(seeds=(0, 1), n=200, n_test=50, epochs=2, samples=200)
    run_protocol(work, **kw)
    first = _tree(work)
    shutil.move(work, tmp_path / "first")
    run_protocol(work, **kw)
    second = _tree(work)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    checkpoints = sum(k.endswith("params.addl") for k in first)
    reports = sum(k.endswith(".csv") for k in first)
    ok = not differing and checkpoints == 6 and reports > 0
    verdict(8, "reproducibility", ok, f"{len(first)} files compared ({checkpoints} checkpoints, "
            f"{reports} CSV reports), {len(differing)} differ")
    assert ok, differing
