"""Binary dataset files.

Layout, little-endian throughout::

    magic      4s   b"ADCM"
    version    u32
    L, K       u32, u32
    N          u64
    labeled    u8   1 when every record carries a location
    scale      f64  normalization divisor of the source training set
    N records: 2*L*K f64 (re, im interleaved per entry, row-major)
               [+ 2 f64 (x, y) meters when labeled]

Provenance (time label, seed, area, domain) goes in a JSON sidecar next to
the file so that the binary payload stays fixed-size.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .da_pipeline import LabeledDataset, UnlabeledDataset

MAGIC = b"ADCM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQBd")
HEADER_SIZE = _HEADER.size  # 33


def record_size(L: int, K: int, labeled: bool) -> int:
    return 8 * (2 * L * K + (2 if labeled else 0))


def file_size(L: int, K: int, n: int, labeled: bool) -> int:
    return HEADER_SIZE + n * record_size(L, K, labeled)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_dataset(ds: UnlabeledDataset) -> bytes:
    fps = np.asarray(ds.fingerprints, dtype=np.complex128)
    n, L, K = fps.shape
    labeled = isinstance(ds, LabeledDataset)
    body = fps.view(np.float64).reshape(n, 2 * L * K)  # complex128 is (re, im) pairs
    if labeled:
        body = np.concatenate([body, np.asarray(ds.locations, np.float64).reshape(n, 2)], axis=1)
    head = _HEADER.pack(MAGIC, VERSION, L, K, n, int(labeled), float(ds.scale))
    return head + body.astype("<f8", copy=False).tobytes()


def decode_dataset(data: bytes, provenance: dict | None = None) -> UnlabeledDataset:
    if len(data) < HEADER_SIZE:
        raise ValueError("dataset file truncated: no header")
    magic, version, L, K, n, labeled, scale = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    if labeled not in (0, 1):
        raise ValueError(f"bad labeled flag {labeled}")
    expected = file_size(L, K, n, bool(labeled))
    if len(data) != expected:
        raise ValueError(f"dataset size {len(data)} does not match header ({expected} bytes)")
    width = record_size(L, K, bool(labeled)) // 8
    body = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE).reshape(n, width)
    fps = np.ascontiguousarray(body[:, : 2 * L * K]).view(np.complex128).reshape(n, L, K)
    prov = dict(provenance or {})
    domain = int(prov.pop("domain", 0 if labeled else 1))
    if labeled:
        return LabeledDataset(fps, scale, domain, prov, locations=body[:, 2 * L * K :].copy())
    return UnlabeledDataset(fps, scale, domain, prov)


def write_dataset(path, ds: UnlabeledDataset) -> None:
    path = Path(path)
    path.write_bytes(encode_dataset(ds))
    meta = {"domain": ds.domain, **ds.provenance}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> UnlabeledDataset:
    path = Path(path)
    side = sidecar_path(path)
    prov = json.loads(side.read_text()) if side.exists() else None
    return decode_dataset(path.read_bytes(), prov)
