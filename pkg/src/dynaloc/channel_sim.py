"""Deterministic two-bounce geometric channel model for indoor NLoS links.

Each scattering cluster is a (first-bounce, last-bounce) scatterer pair; a
signal travels UE -> FBS -> LBS -> BS.  A cluster is expanded into a few
sub-paths whose scatterer offsets and phases come from the cluster's own
seed, so the same environment always yields the same channel at a given UE
position and nearby positions yield nearby channels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array at the base station plus the OFDM numerology."""

    n_antennas: int = 16
    antenna_spacing: float = 0.5  # wavelengths
    carrier_frequency: float = 3.6e9
    bandwidth: float = 20e6
    n_subcarriers: int = 32
    bs_position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_antennas < 1 or self.n_subcarriers < 1:
            raise ValueError("array needs at least one antenna and one subcarrier")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth / self.n_subcarriers

    @property
    def max_delay(self) -> float:
        """Unambiguous delay window K / bandwidth, in seconds."""
        return self.n_subcarriers / self.bandwidth


@dataclass(frozen=True)
class Area:
    """Axis-aligned rectangle given by its center and side lengths (meters)."""

    center: tuple[float, float] = (0.0, 60.0)
    width: float = 40.0
    height: float = 40.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"area must have positive width and height, got {self.width}x{self.height}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.center[0] - self.width / 2, self.center[1] - self.height / 2])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.center[0] + self.width / 2, self.center[1] + self.height / 2])

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=1)


@dataclass(frozen=True)
class Cluster:
    fbs_position: tuple[float, float]
    lbs_position: tuple[float, float]
    power_scale: float
    phase_seed: int
    n_subpaths: int = 4
    subpath_spread: float = 0.5
    cluster_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fbs_position", tuple(float(v) for v in self.fbs_position))
        object.__setattr__(self, "lbs_position", tuple(float(v) for v in self.lbs_position))
        if not np.all(np.isfinite(self.fbs_position + self.lbs_position)):
            raise ValueError(f"cluster {self.cluster_id}: non-finite scatterer position")
        if not self.power_scale > 0:
            raise ValueError(f"cluster {self.cluster_id}: power_scale must be > 0")
        if self.n_subpaths < 1 or self.subpath_spread < 0:
            raise ValueError(f"cluster {self.cluster_id}: bad sub-path settings")

    def subpaths(self):
        """Sub-path FBS positions, LBS positions and phases, all drawn from ``phase_seed``."""
        rng = np.random.default_rng(self.phase_seed)
        d_fbs = rng.standard_normal((self.n_subpaths, 2)) * self.subpath_spread
        d_lbs = rng.standard_normal((self.n_subpaths, 2)) * self.subpath_spread
        phases = rng.uniform(0.0, 2 * np.pi, self.n_subpaths)
        return np.asarray(self.fbs_position) + d_fbs, np.asarray(self.lbs_position) + d_lbs, phases


@dataclass(frozen=True)
class Environment:
    clusters: tuple[Cluster, ...]
    array: ArrayConfig = field(default_factory=ArrayConfig)
    area: Area = field(default_factory=Area)
    time_label: str = "t0"
    rng_seed: int = 0
    path_loss_exponent: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise ValueError("an environment needs at least one cluster")
        ids = [c.cluster_id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate cluster ids: {ids}")

    @property
    def cluster_ids(self) -> list[int]:
        return [c.cluster_id for c in self.clusters]

    def cluster(self, cluster_id: int) -> Cluster:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise KeyError(cluster_id)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "time_label": self.time_label,
            "rng_seed": self.rng_seed,
            "path_loss_exponent": self.path_loss_exponent,
            "array": {
                "n_antennas": self.array.n_antennas,
                "antenna_spacing": self.array.antenna_spacing,
                "carrier_frequency": self.array.carrier_frequency,
                "bandwidth": self.array.bandwidth,
                "n_subcarriers": self.array.n_subcarriers,
                "bs_position": list(self.array.bs_position),
            },
            "area": {"center": list(self.area.center), "width": self.area.width,
                     "height": self.area.height},
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "fbs_position": list(c.fbs_position),
                    "lbs_position": list(c.lbs_position),
                    "power_scale": c.power_scale,
                    "phase_seed": c.phase_seed,
                    "n_subpaths": c.n_subpaths,
                    "subpath_spread": c.subpath_spread,
                }
                for c in self.clusters
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Environment":
        a = d["array"]
        array = ArrayConfig(
            n_antennas=int(a["n_antennas"]), antenna_spacing=float(a["antenna_spacing"]),
            carrier_frequency=float(a["carrier_frequency"]), bandwidth=float(a["bandwidth"]),
            n_subcarriers=int(a["n_subcarriers"]), bs_position=tuple(a["bs_position"]))
        area = Area(center=tuple(d["area"]["center"]), width=float(d["area"]["width"]),
                    height=float(d["area"]["height"]))
        clusters = [
            Cluster(fbs_position=tuple(c["fbs_position"]), lbs_position=tuple(c["lbs_position"]),
                    power_scale=float(c["power_scale"]), phase_seed=int(c["phase_seed"]),
                    n_subpaths=int(c["n_subpaths"]), subpath_spread=float(c["subpath_spread"]),
                    cluster_id=int(c["cluster_id"]))
            for c in d["clusters"]
        ]
        return cls(clusters=tuple(clusters), array=array, area=area, time_label=str(d["time_label"]),
                   rng_seed=int(d["rng_seed"]), path_loss_exponent=float(d["path_loss_exponent"]))

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips exactly
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class ChannelMatrix:
    entries: np.ndarray  # complex, (L, K)
    position: tuple[float, float]


def scatterer_box(area: Area, array: ArrayConfig, margin: float = 10.0):
    """Bounding box of the area and the BS, grown by ``margin`` on every side."""
    bs = np.asarray(array.bs_position)
    lo = np.minimum(area.lower, bs) - margin
    hi = np.maximum(area.upper, bs) + margin
    return lo, hi


def _draw_clusters(rng: np.random.Generator, n: int, lo, hi, first_id: int,
                   n_subpaths: int, subpath_spread: float) -> list[Cluster]:
    fbs = rng.uniform(lo, hi, size=(n, 2))
    lbs = rng.uniform(lo, hi, size=(n, 2))
    power = 10.0 ** rng.uniform(-1.0, 0.0, size=n)  # log-uniform in [0.1, 1]
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [
        Cluster(fbs_position=tuple(fbs[i]), lbs_position=tuple(lbs[i]), power_scale=float(power[i]),
                phase_seed=int(seeds[i]), n_subpaths=n_subpaths, subpath_spread=subpath_spread,
                cluster_id=first_id + i)
        for i in range(n)
    ]


def generate_environment(seed: int, n_clusters: int = 20, array: ArrayConfig | None = None,
                         area: Area | None = None, *, n_subpaths: int = 4,
                         subpath_spread: float = 0.5, path_loss_exponent: float = 2.0,
                         margin: float = 10.0, time_label: str = "t0") -> Environment:
    """Draw ``n_clusters`` scatterer pairs uniformly around the area and the BS."""
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    array = array or ArrayConfig()
    area = area or Area()
    rng = np.random.default_rng(seed)
    lo, hi = scatterer_box(area, array, margin)
    clusters = _draw_clusters(rng, n_clusters, lo, hi, 0, n_subpaths, subpath_spread)
    return Environment(clusters=tuple(clusters), array=array, area=area, time_label=time_label,
                       rng_seed=seed, path_loss_exponent=path_loss_exponent)


def derive_environment(env: Environment, time_label: str, *, remove: Iterable[int] = (),
                       drift: Mapping[int, Sequence[float]] | None = None, add: int = 0,
                       seed: int | None = None, margin: float = 10.0) -> Environment:
    """New environment after cluster death (``remove``), drift and birth (``add``).

    Clusters that are not mutated are carried over unchanged, including their
    phase seeds, so their contribution to the channel is identical.
    """
    remove = list(remove)
    known = set(env.cluster_ids)
    unknown = [i for i in remove if i not in known]
    if unknown:
        raise ValueError(f"unknown cluster ids: {unknown}")
    drift = dict(drift or {})
    unknown = [i for i in drift if i not in known]
    if unknown:
        raise ValueError(f"unknown cluster ids in drift: {unknown}")
    clusters = []
    for c in env.clusters:
        if c.cluster_id in remove:
            continue
        if c.cluster_id in drift:
            off = np.asarray(drift[c.cluster_id], dtype=float)
            if off.shape != (2,) or not np.all(np.isfinite(off)):
                raise ValueError(f"bad drift offset for cluster {c.cluster_id}: {drift[c.cluster_id]}")
            c = replace(c, fbs_position=tuple(np.asarray(c.fbs_position) + off),
                        lbs_position=tuple(np.asarray(c.lbs_position) + off))
        clusters.append(c)
    if add:
        if seed is None:
            raise ValueError("adding clusters needs a seed")
        lo, hi = scatterer_box(env.area, env.array, margin)
        template = env.clusters[0]
        clusters += _draw_clusters(np.random.default_rng(seed), add, lo, hi, max(known) + 1,
                                   template.n_subpaths, template.subpath_spread)
    if not clusters:
        raise ValueError("mutation would remove every cluster")
    return replace(env, clusters=tuple(clusters), time_label=time_label)


def _path_table(env: Environment):
    """Per-sub-path constants that do not depend on the UE position."""
    bs = np.asarray(env.array.bs_position)
    fbs, lbs, phase, power, owner = [], [], [], [], []
    for c in env.clusters:
        f, l, ph = c.subpaths()
        fbs.append(f)
        lbs.append(l)
        phase.append(ph)
        power.append(np.full(c.n_subpaths, c.power_scale / c.n_subpaths))
        owner.append(np.full(c.n_subpaths, c.cluster_id))
    fbs, lbs = np.concatenate(fbs), np.concatenate(lbs)
    to_bs = lbs - bs
    tail = np.linalg.norm(fbs - lbs, axis=1) + np.linalg.norm(to_bs, axis=1)
    # ULA along x with broadside +y: sin(theta) = dx / distance
    sin_aoa = to_bs[:, 0] / np.maximum(np.linalg.norm(to_bs, axis=1), 1e-12)
    return fbs, tail, sin_aoa, np.concatenate(phase), np.concatenate(power), np.concatenate(owner)


def steering_vector(n_antennas: int, sin_theta, spacing: float = 0.5) -> np.ndarray:
    """ULA response exp(-j 2 pi spacing l sin(theta)), shape (L,) or (L, n_angles)."""
    l = np.arange(n_antennas)
    return np.exp(-2j * np.pi * spacing * np.multiply.outer(l, sin_theta))


def delay_response(n_subcarriers: int, subcarrier_spacing: float, delay) -> np.ndarray:
    """Frequency response exp(-j 2 pi k df tau) of a pure delay, shape (K,) or (..., K)."""
    k = np.arange(n_subcarriers)
    return np.exp(-2j * np.pi * subcarrier_spacing * np.multiply.outer(delay, k))


def synthesize_channels(env: Environment, positions, chunk: int = 512) -> np.ndarray:
    """Space-frequency channels (N, L, K) for N UE positions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    inside = env.area.contains(positions)
    if not np.all(inside):
        log.warning("%d of %d positions lie outside the area", int((~inside).sum()), len(positions))
    arr = env.array
    fbs, tail, sin_aoa, phase, power, owner = _path_table(env)
    steer = steering_vector(arr.n_antennas, sin_aoa, arr.antenna_spacing)  # (L, P)
    out = np.empty((len(positions), arr.n_antennas, arr.n_subcarriers), dtype=complex)
    for s in range(0, len(positions), chunk):
        pos = positions[s : s + chunk]
        length = np.linalg.norm(pos[:, None, :] - fbs[None], axis=2) + tail  # (n, P)
        delay = length / SPEED_OF_LIGHT
        bad = delay >= arr.max_delay
        if np.any(bad):
            cid = int(owner[np.argwhere(bad)[0, 1]])
            raise ValueError(
                f"cluster {cid}: path delay {delay[bad].max():.3e} s exceeds the "
                f"OFDM delay window {arr.max_delay:.3e} s")
        gain = np.sqrt(power * length ** (-env.path_loss_exponent)) * np.exp(1j * phase)
        tones = delay_response(arr.n_subcarriers, arr.subcarrier_spacing, delay)  # (n, P, K)
        out[s : s + chunk] = (steer[None] * gain[:, None, :]) @ tones
    return out


def synthesize_channel(env: Environment, position) -> ChannelMatrix:
    p = np.asarray(position, dtype=float).reshape(2)
    return ChannelMatrix(entries=synthesize_channels(env, p[None])[0], position=(p[0], p[1]))


def sample_positions(area: Area, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. uniform positions in ``area``; a longer draw extends a shorter one."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return area.lower + rng.uniform(size=(n, 2)) * (area.upper - area.lower)


def grid_positions(area: Area, n_per_side: int) -> np.ndarray:
    """Uniform lattice with ``n_per_side`` points along each axis, row-major."""
    xs = np.linspace(area.lower[0], area.upper[0], n_per_side)
    ys = np.linspace(area.lower[1], area.upper[1], n_per_side)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def add_noise(channels: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Complex AWGN at ``snr_db`` relative to the mean per-entry channel power."""
    power = np.mean(np.abs(channels) ** 2)
    sigma = math.sqrt(power / 10 ** (snr_db / 10) / 2)
    noise = rng.standard_normal(channels.shape) + 1j * rng.standard_normal(channels.shape)
    return channels + sigma * noise
