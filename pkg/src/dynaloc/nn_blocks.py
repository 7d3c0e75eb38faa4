"""Network blocks: attention-augmented conv extractor, decoder, estimator, classifier.

Parameters live in plain ``{name: Tensor}`` dicts grouped by role.  All
forward functions accept a batch axis in front.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SAConfig:
    n_heads: int = 12
    model_dim: int = 36

    def __post_init__(self):
        if self.n_heads < 1 or self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} must be a multiple of n_heads {self.n_heads}")

    @property
    def key_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass(frozen=True)
class ExtractorConfig:
    in_channels: int = 2
    in_height: int = 16  # L
    in_width: int = 32  # K
    n_layers: int = 3
    n_filters: int = 32
    kernel: int = 6
    stride: int = 2
    padding: int = 2
    sa: SAConfig = field(default_factory=SAConfig)
    output_dim: int = 128

    def __post_init__(self):
        if isinstance(self.sa, dict):
            object.__setattr__(self, "sa", SAConfig(**self.sa))
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        h, w = self.conv_output_hw()
        if h < 1 or w < 1:
            raise ValueError(f"conv stack collapses {self.in_height}x{self.in_width} to {h}x{w}")

    def spatial_sizes(self) -> list[tuple[int, int]]:
        sizes = [(self.in_height, self.in_width)]
        for _ in range(self.n_layers):
            h, w = sizes[-1]
            sizes.append(((h + 2 * self.padding - self.kernel) // self.stride + 1,
                          (w + 2 * self.padding - self.kernel) // self.stride + 1))
        return sizes

    def conv_output_hw(self) -> tuple[int, int]:
        return self.spatial_sizes()[-1]

    @property
    def input_size(self) -> int:
        return self.in_channels * self.in_height * self.in_width

    @property
    def n_tokens(self) -> int:
        h, w = self.conv_output_hw()
        return h * w

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EstimatorConfig:
    in_dim: int = 128
    widths: tuple[int, ...] = (128, 64, 2)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.widths[-1] != 2:
            raise ValueError("the last layer must have width 2")


RELU_GAIN = 6.0  # He-uniform for layers followed by relu
LINEAR_GAIN = 1.0  # output layers
DECODER_GAIN = 1.5  # keeps reconstruction gradients into the extractor comparable to localization ones


def _uniform(rng, shape, fan_in, gain=RELU_GAIN):
    bound = math.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(values, name):
    return Tensor(values, requires_grad=True, name=name)


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Independent, seeded stream per network component."""
    return np.random.default_rng([seed, zlib.crc32(component.encode())])


def _linear(rng, name, n_in, n_out, gain=RELU_GAIN):
    return {f"{name}.weight": _param(_uniform(rng, (n_in, n_out), n_in, gain), f"{name}.weight"),
            f"{name}.bias": _param(np.zeros(n_out), f"{name}.bias")}


def init_attention(rng, cfg: SAConfig, prefix: str = "sa") -> dict[str, Tensor]:
    d = cfg.model_dim
    params = {f"{prefix}.{k}": _param(_uniform(rng, (d, d), d), f"{prefix}.{k}")
              for k in ("wq", "wk", "wv", "wo")}
    params[f"{prefix}.bo"] = _param(np.zeros(d), f"{prefix}.bo")
    return params


def init_extractor(cfg: ExtractorConfig, seed: int) -> dict[str, Tensor]:
    rng = component_rng(seed, "extractor")
    params = {}
    c_in = cfg.in_channels
    for i in range(cfg.n_layers):
        fan = c_in * cfg.kernel ** 2
        # inputs have unit norm per sample, so entries are ~1/sqrt(size) rather than ~1
        gain = RELU_GAIN * (cfg.input_size if i == 0 else 1)
        params[f"conv{i}.weight"] = _param(_uniform(rng, (cfg.n_filters, c_in, cfg.kernel, cfg.kernel), fan, gain),
                                           f"conv{i}.weight")
        params[f"conv{i}.bias"] = _param(np.zeros(cfg.n_filters), f"conv{i}.bias")
        c_in = cfg.n_filters
    params.update(_linear(rng, "embed", cfg.n_filters, cfg.sa.model_dim))
    params.update(init_attention(rng, cfg.sa))
    params.update(_linear(rng, "fc", cfg.n_tokens * cfg.sa.model_dim, cfg.output_dim))
    return params


def init_decoder(cfg: ExtractorConfig, seed: int) -> dict[str, Tensor]:
    rng = component_rng(seed, "decoder")
    h, w = cfg.conv_output_hw()
    params = _linear(rng, "fc", cfg.output_dim, cfg.n_filters * h * w, DECODER_GAIN)
    for i in range(cfg.n_layers):
        c_out = cfg.in_channels if i == cfg.n_layers - 1 else cfg.n_filters
        fan = max(1, cfg.n_filters * cfg.kernel ** 2 // cfg.stride ** 2)
        gain = DECODER_GAIN / 4 if i == cfg.n_layers - 1 else DECODER_GAIN
        params[f"deconv{i}.weight"] = _param(
            _uniform(rng, (cfg.n_filters, c_out, cfg.kernel, cfg.kernel), fan, gain), f"deconv{i}.weight")
    return params


def init_mlp(cfg: EstimatorConfig, seed: int, component: str = "estimator") -> dict[str, Tensor]:
    rng = component_rng(seed, component)
    params = {}
    n_in = cfg.in_dim
    for i, width in enumerate(cfg.widths):
        gain = LINEAR_GAIN if i == len(cfg.widths) - 1 else RELU_GAIN
        params.update(_linear(rng, f"fc{i}", n_in, width, gain))
        n_in = width
    return params


# ---------------------------------------------------------------------------


def self_attention(X: Tensor, params: dict[str, Tensor], cfg: SAConfig, *, prefix: str = "sa",
                   project: bool = True, return_scores: bool = False):
    """Multi-head scaled dot-product self-attention over the rows of ``X``.

    ``X`` is (n, d) or (batch, n, d).  Head i uses columns
    ``i*c:(i+1)*c`` of the query/key/value projections.  With ``project``
    the concatenated heads go through the output projection.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    b, n, d = X.shape
    if d != cfg.model_dim:
        raise ValueError(f"attention input width {d} != model_dim {cfg.model_dim}")
    h, c = cfg.n_heads, cfg.key_dim

    def heads(w):
        return (X @ params[f"{prefix}.{w}"]).reshape(b, n, h, c).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c)), axis=-1)
    z = (scores @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    if project:
        z = z @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    if squeeze:
        z = z.reshape(n, d)
        scores = scores.reshape(h, n, n)
    return (z, scores) if return_scores else z


def _as_batch(x, cfg: ExtractorConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(getattr(x, "values", x))
    expected = (cfg.in_channels, cfg.in_height, cfg.in_width)
    if x.shape[-3:] != expected or x.ndim not in (3, 4):
        raise ValueError(f"extractor expects (..., {expected}), got {x.shape}")
    return x.reshape(1, *x.shape) if x.ndim == 3 else x


def extractor_forward(x, params: dict[str, Tensor], cfg: ExtractorConfig) -> Tensor:
    """(N, 2, L, K) fingerprints -> (N, B) features.

    Conv stack, then attention over the flattened spatial grid (residual,
    after a per-position embedding to ``sa.model_dim``), then a relu FC layer.
    """
    h = _as_batch(x, cfg)
    for i in range(cfg.n_layers):
        h = ad.relu(ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                              stride=cfg.stride, padding=cfg.padding))
    n, f, hh, ww = h.shape
    tokens = h.transpose(0, 2, 3, 1).reshape(n, hh * ww, f)
    e = tokens @ params["embed.weight"] + params["embed.bias"]
    e = e + self_attention(e, params, cfg.sa)
    flat = e.reshape(n, hh * ww * cfg.sa.model_dim)
    return ad.relu(flat @ params["fc.weight"] + params["fc.bias"])


def decoder_forward(z: Tensor, params: dict[str, Tensor], cfg: ExtractorConfig) -> Tensor:
    """(N, B) features -> (N, 2, L, K) reconstruction, mirroring the extractor."""
    if z.ndim != 2 or z.shape[1] != cfg.output_dim:
        raise ValueError(f"decoder expects (N, {cfg.output_dim}), got {z.shape}")
    h, w = cfg.conv_output_hw()
    x = ad.relu(z @ params["fc.weight"] + params["fc.bias"]).reshape(z.shape[0], cfg.n_filters, h, w)
    for i in range(cfg.n_layers):
        x = ad.transposed_conv2d(x, params[f"deconv{i}.weight"], None,
                                 stride=cfg.stride, padding=cfg.padding)
        if i < cfg.n_layers - 1:
            x = ad.relu(x)
    expected = (cfg.in_channels, cfg.in_height, cfg.in_width)
    if x.shape[1:] != expected:
        raise ValueError(f"decoder produced {x.shape[1:]}, expected {expected}; "
                         "the conv stack must halve the input exactly")
    return x


def mlp_forward(z: Tensor, params: dict[str, Tensor], n_layers: int) -> Tensor:
    for i in range(n_layers):
        w = params[f"fc{i}.weight"]
        if z.shape[-1] != w.shape[0]:
            raise ValueError(f"layer fc{i} expects width {w.shape[0]}, got {z.shape[-1]}")
        z = z @ w + params[f"fc{i}.bias"]
        if i < n_layers - 1:
            z = ad.relu(z)
    return z


def estimator_forward(z: Tensor, params: dict[str, Tensor], cfg: EstimatorConfig | None = None) -> Tensor:
    """(N, B) features -> (N, 2) location in normalized coordinates."""
    n_layers = len(cfg.widths) if cfg else sum(k.endswith(".weight") for k in params)
    return mlp_forward(z, params, n_layers)


def classifier_forward(z: Tensor, params: dict[str, Tensor], cfg: EstimatorConfig | None = None) -> Tensor:
    """(N, B) features -> (N,) probability that the sample is from the target domain."""
    logits = estimator_forward(z, params, cfg)
    return ad.softmax(logits, axis=-1)[:, 1]


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(p.values.size for p in params.values())
