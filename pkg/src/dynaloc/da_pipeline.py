"""Datasets, training objectives and the minibatch SGD loop.

Three methods share one extractor/estimator architecture:

* ``baseline``: localization loss on labeled source data only.
* ``ae``: plus reconstruction of source and target fingerprints through a
  decoder attached to the extractor.
* ``gr``: plus a domain classifier behind a gradient reversal layer.

Target-domain data enters training only as :class:`UnlabeledDataset`, which
has no location field at all.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn_blocks as nb
from .autodiff import Tensor
from .channel_sim import Area, Environment, sample_positions, synthesize_channels
from .fingerprint import adcm, mean_frobenius_norm, to_real_tensor

log = logging.getLogger(__name__)

METHODS = ("baseline", "ae", "gr")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value}) in epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# datasets


@dataclass
class UnlabeledDataset:
    """Fingerprints only (the D-bar sets)."""

    fingerprints: np.ndarray  # complex (N, L, K)
    scale: float
    domain: int = 1
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.fingerprints)

    @property
    def dims(self) -> tuple[int, int]:
        return self.fingerprints.shape[1:]

    def real_tensors(self, scale: float | None = None) -> np.ndarray:
        return to_real_tensor(self.fingerprints, scale or self.scale).values


@dataclass
class LabeledDataset(UnlabeledDataset):
    """Fingerprint-location pairs."""

    locations: np.ndarray = None  # (N, 2) meters
    domain: int = 0

    def __post_init__(self):
        if self.locations is None or len(self.locations) != len(self.fingerprints):
            raise ValueError("labeled dataset needs one location per fingerprint")

    def without_labels(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.fingerprints, self.scale, self.domain, dict(self.provenance))


def synthesize_dataset(env: Environment, n: int, seed: int, scale: float | None = None,
                       domain: int = 0) -> LabeledDataset:
    positions = sample_positions(env.area, n, seed)
    fps = adcm(synthesize_channels(env, positions))
    scale = scale if scale is not None else mean_frobenius_norm(fps)
    area = {"center": list(env.area.center), "width": env.area.width, "height": env.area.height}
    return LabeledDataset(fps, scale, domain,
                          {"time_label": env.time_label, "seed": seed, "area": area},
                          locations=positions)


def build_datasets(env_s: Environment, env_t: Environment, n_s: int, n_t: int, n_test: int,
                   seed: int):
    """Returns (D_S, D-bar_T, test_S, test_T), all normalized by the D_S scale."""
    for name, n in (("n_s", n_s), ("n_t", n_t), ("n_test", n_test)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1")
    s_train, t_train, s_test, t_test = np.random.SeedSequence(seed).generate_state(4)
    d_s = synthesize_dataset(env_s, n_s, int(s_train))
    scale = d_s.scale
    d_t = synthesize_dataset(env_t, n_t, int(t_train), scale, domain=1).without_labels()
    test_s = synthesize_dataset(env_s, n_test, int(s_test), scale)
    test_t = synthesize_dataset(env_t, n_test, int(t_test), scale, domain=1)
    return d_s, d_t, test_s, test_t


@dataclass(frozen=True)
class AreaMapping:
    """Affine map between meters and [-1, 1]^2 over the localization area."""

    center: tuple[float, float]
    half_size: tuple[float, float]

    @classmethod
    def from_area(cls, area: Area) -> "AreaMapping":
        return cls(tuple(area.center), (area.width / 2, area.height / 2))

    def normalize(self, p) -> np.ndarray:
        return (np.asarray(p) - np.asarray(self.center)) / np.asarray(self.half_size)

    def to_meters(self, q) -> np.ndarray:
        return np.asarray(q) * np.asarray(self.half_size) + np.asarray(self.center)


# ---------------------------------------------------------------------------
# model


@dataclass
class Architecture:
    extractor: nb.ExtractorConfig = field(default_factory=nb.ExtractorConfig)
    estimator: nb.EstimatorConfig = field(default_factory=nb.EstimatorConfig)

    def to_dict(self):
        return {"extractor": asdict(self.extractor), "estimator": asdict(self.estimator)}

    @classmethod
    def from_dict(cls, d):
        ex = dict(d["extractor"])
        ex["sa"] = nb.SAConfig(**ex["sa"])
        return cls(nb.ExtractorConfig(**ex), nb.EstimatorConfig(**d["estimator"]))

    @classmethod
    def for_dims(cls, L: int, K: int, **extractor_overrides) -> "Architecture":
        ex = nb.ExtractorConfig(in_height=L, in_width=K, **extractor_overrides)
        return cls(ex, nb.EstimatorConfig(in_dim=ex.output_dim))


# parameter roles per method, in the order (extractor, estimator, auxiliary)
ROLE_NAMES = {
    "baseline": ("extractor", "estimator", None),
    "ae": ("alpha", "gamma", "beta"),
    "gr": ("delta", "zeta", "epsilon"),
}


@dataclass
class Network:
    method: str
    arch: Architecture
    extractor: dict[str, Tensor]
    estimator: dict[str, Tensor]
    decoder: dict[str, Tensor] | None = None
    classifier: dict[str, Tensor] | None = None

    @classmethod
    def initialize(cls, method: str, arch: Architecture, seed: int) -> "Network":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        net = cls(method, arch, nb.init_extractor(arch.extractor, seed),
                  nb.init_mlp(arch.estimator, seed, "estimator"))
        if method == "ae":
            net.decoder = nb.init_decoder(arch.extractor, seed)
        elif method == "gr":
            net.classifier = nb.init_mlp(arch.estimator, seed, "classifier")
        return net

    def features(self, x) -> Tensor:
        return nb.extractor_forward(x, self.extractor, self.arch.extractor)

    def locate(self, z: Tensor) -> Tensor:
        return nb.estimator_forward(z, self.estimator, self.arch.estimator)

    def components(self) -> dict[str, dict[str, Tensor]]:
        ext, est, aux = ROLE_NAMES[self.method]
        out = {ext: self.extractor, est: self.estimator}
        if aux is not None:
            out[aux] = self.decoder if self.method == "ae" else self.classifier
        return out

    def parameters(self) -> list[Tensor]:
        return [p for comp in self.components().values() for p in comp.values()]

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"{role}.{name}": p for role, comp in self.components().items()
                for name, p in comp.items()}


# ---------------------------------------------------------------------------
# objectives


@dataclass
class Losses:
    total: Tensor
    localization: Tensor
    auxiliary: Tensor | None = None


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def localization_loss(pred: Tensor, target) -> Tensor:
    """Mean unsquared Euclidean distance between rows."""
    return ad.mean(ad.l2_norm(pred - _tensor(target)))


def loss_baseline(net: Network, xs, ps) -> Losses:
    if ps is None:
        raise ValueError("baseline loss needs labeled samples")
    loc = localization_loss(net.locate(net.features(xs)), ps)
    return Losses(loc, loc)


def loss_ae(net: Network, xs, ps, xt, n_source: int | None = None) -> Losses:
    """Localization on (xs, ps) plus reconstruction on a source+target batch.

    The reconstruction batch is the first ``n_source`` source samples
    (default ``len(xt)``) followed by all of ``xt``; source features are
    shared with the localization term.
    """
    if ps is None:
        raise ValueError("localization term needs labeled source samples")
    xs, xt = _tensor(xs), _tensor(xt)
    m = len(xt.values) if n_source is None else n_source
    zs, zt = net.features(xs), net.features(xt)
    loc = localization_loss(net.locate(zs), ps)
    z = ad.concat([zs[:m], zt], axis=0)
    x = np.concatenate([xs.values[:m], xt.values], axis=0)
    recon = nb.decoder_forward(z, net.decoder, net.arch.extractor)
    n = x.shape[0]
    rec = ad.mean(ad.l2_norm((recon - Tensor(x)).reshape(n, -1)))
    return Losses(loc + rec, loc, rec)


def loss_gr(net: Network, xs, ps, xt, lam: float, n_source: int | None = None,
            reverse: bool = True) -> Losses:
    """Localization on (xs, ps) plus domain cross-entropy behind a gradient reversal layer.

    The domain batch is the first ``n_source`` source samples (label 0)
    followed by all of ``xt`` (label 1).  ``reverse=False`` drops the GRL,
    which is only useful for checking its effect.
    """
    if ps is None:
        raise ValueError("localization term needs labeled source samples")
    xs, xt = _tensor(xs), _tensor(xt)
    m = len(xt.values) if n_source is None else n_source
    zs, zt = net.features(xs), net.features(xt)
    loc = localization_loss(net.locate(zs), ps)
    z = ad.concat([zs[:m], zt], axis=0)
    if reverse:
        z = ad.grl_forward(z, ad.GrlConfig(lam))
    d = np.concatenate([np.zeros(m), np.ones(len(xt.values))])
    prob = nb.classifier_forward(z, net.classifier, net.arch.estimator)
    cls = ad.mean(ad.bce(prob, d))
    return Losses(loc + cls, loc, cls)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    method: str = "baseline"
    lr: float = 1e-4
    epochs: int = 1000
    batch_size: int = 200
    lam: float = 1.0
    seed: int = 0
    aux_fraction: float = 0.5  # per-domain share of the auxiliary batch, relative to the source batch

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.aux_fraction <= 1:
            raise ValueError("aux_fraction must be in (0, 1]")


@dataclass
class TrainedModel:
    method: str
    arch: Architecture
    config: TrainConfig
    net: Network
    scale: float
    mapping: AreaMapping
    history: list[dict] = field(default_factory=list)

    # -- persistence: params.addl + model.json ------------------------------

    def header(self) -> dict:
        return {
            "method": self.method,
            "architecture": self.arch.to_dict(),
            "train_config": asdict(self.config),
            "scale": self.scale,
            "area_mapping": {"center": list(self.mapping.center),
                             "half_size": list(self.mapping.half_size)},
            "roles": {role: sorted(comp) for role, comp in self.net.components().items()},
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_tensors(directory / "params.addl", self.net.named_tensors())
        (directory / "model.json").write_text(json.dumps(self.header(), indent=2) + "\n")
        with open(directory / "history.csv", "w") as fh:
            fh.write("epoch,total,localization,auxiliary\n")
            for h in self.history:
                fh.write(f"{h['epoch']},{h['total']!r},{h['localization']!r},{h['auxiliary']!r}\n")

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        directory = Path(directory)
        head = json.loads((directory / "model.json").read_text())
        arrays = ad.load_tensors(directory / "params.addl")
        arch = Architecture.from_dict(head["architecture"])
        cfg = TrainConfig(**head["train_config"])
        net = Network.initialize(head["method"], arch, cfg.seed)
        ext, est, aux = ROLE_NAMES[head["method"]]
        comps = {ext: net.extractor, est: net.estimator}
        if aux is not None:
            comps[aux] = net.decoder if head["method"] == "ae" else net.classifier
        for role, comp in comps.items():
            for name, p in comp.items():
                key = f"{role}.{name}"
                if key in arrays:
                    p.values = arrays[key].copy()
                elif role not in (ext, est):
                    # decoder / classifier are optional at inference time
                    continue
                else:
                    raise ValueError(f"checkpoint lacks tensor {key}")
        m = head["area_mapping"]
        history = []
        hist_path = directory / "history.csv"
        if hist_path.exists():
            rows = hist_path.read_text().splitlines()[1:]
            for row in rows:
                e, t, l, a = row.split(",")
                history.append({"epoch": int(e), "total": float(t), "localization": float(l),
                                "auxiliary": float(a)})
        return cls(head["method"], arch, cfg, net, float(head["scale"]),
                   AreaMapping(tuple(m["center"]), tuple(m["half_size"])), history)


def _check_target(target):
    if target is None:
        raise ValueError("this method needs unlabeled target fingerprints")
    if isinstance(target, LabeledDataset):
        raise TypeError("target data must be unlabeled; call .without_labels() first")


def train(method: str, source: LabeledDataset, target: UnlabeledDataset | None,
          cfg: TrainConfig, arch: Architecture | None = None) -> TrainedModel:
    """Minibatch SGD on the objective of ``method``.

    Each step uses one shuffled source batch for localization; ``ae`` and
    ``gr`` add a balanced auxiliary batch: the first ``aux_fraction`` of the
    source batch plus as many random target fingerprints.  Initialization, shuffling
    and target sampling use separate seeded streams, so ``gr`` with
    ``lam=0`` follows the baseline trajectory exactly.
    """
    if cfg.method != method:
        cfg = replace(cfg, method=method)
    if not isinstance(source, LabeledDataset):
        raise TypeError("source data must be labeled")
    L, K = source.dims
    arch = arch or Architecture.for_dims(L, K)
    if (arch.extractor.in_height, arch.extractor.in_width) != (L, K):
        raise ValueError(f"architecture expects {arch.extractor.in_height}x{arch.extractor.in_width} "
                         f"fingerprints, data is {L}x{K}")
    if method != "baseline":
        _check_target(target)
        if target.dims != (L, K):
            raise ValueError("source and target fingerprint dimensions differ")

    mapping = AreaMapping(*_mapping_from_provenance(source))
    scale = source.scale
    xs_all = source.real_tensors(scale)
    ps_all = mapping.normalize(source.locations)
    xt_all = target.real_tensors(scale) if method != "baseline" else None

    net = Network.initialize(method, arch, cfg.seed)
    params = net.parameters()
    shuffle_rng = nb.component_rng(cfg.seed, "shuffle")
    target_rng = nb.component_rng(cfg.seed, "target")
    n = len(source)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xs, ps = xs_all[idx], ps_all[idx]
            with ad.Tape() as tape:
                if method == "baseline":
                    losses = loss_baseline(net, xs, ps)
                else:
                    m = max(1, round(len(idx) * cfg.aux_fraction))
                    xt = xt_all[target_rng.choice(len(xt_all), size=m, replace=len(xt_all) < m)]
                    if method == "ae":
                        losses = loss_ae(net, xs, ps, xt, n_source=m)
                    else:
                        losses = loss_gr(net, xs, ps, xt, cfg.lam, n_source=m)
            total = float(losses.total.values)
            if not math.isfinite(total):
                raise TrainingDiverged(epoch, total)
            tape.backward(losses.total)
            ad.sgd_step(params, cfg.lr)
            aux = float(losses.auxiliary.values) if losses.auxiliary is not None else 0.0
            sums += (total, float(losses.localization.values), aux)
            steps += 1
        mean = sums / steps
        history.append({"epoch": epoch, "total": float(mean[0]), "localization": float(mean[1]),
                        "auxiliary": float(mean[2])})
        log.info("%s epoch %d: total %.5f loc %.5f aux %.5f", method, epoch, *mean)
    return TrainedModel(method, arch, cfg, net, scale, mapping, history)


def _mapping_from_provenance(source: LabeledDataset):
    area = source.provenance.get("area")
    if area is None:
        area = Area()
    elif isinstance(area, dict):
        area = Area(center=tuple(area["center"]), width=area["width"], height=area["height"])
    m = AreaMapping.from_area(area)
    return m.center, m.half_size


def predict(model: TrainedModel, fingerprints, chunk: int = 500) -> np.ndarray:
    """Locations in meters for complex fingerprints (L, K) or (N, L, K).

    Only the extractor and estimator are used.
    """
    H = np.asarray(getattr(fingerprints, "entries", fingerprints))
    single = H.ndim == 2
    H = H[None] if single else H
    ex = model.arch.extractor
    if H.shape[1:] != (ex.in_height, ex.in_width):
        raise ValueError(f"model expects {ex.in_height}x{ex.in_width} fingerprints, got {H.shape[1:]}")
    out = np.empty((len(H), 2))
    for s in range(0, len(H), chunk):
        x = to_real_tensor(H[s : s + chunk], model.scale).values
        out[s : s + chunk] = model.net.locate(model.net.features(Tensor(x))).values
    out = model.mapping.to_meters(out)
    return out[0] if single else out
