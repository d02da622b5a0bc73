"""Model assembly, parameter bookkeeping and checkpoint files."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attnnorm import (DEFAULT_EPS, ComponentTriple, attn_norm_spatial, attn_norm_temporal,
                       extrapolate, extrapolate_spatial_zero)
from .fusion import FusionParams, concat_components, polynomial_regression
from .numcore import Tensor
from .selection import (SeasonalParams, ShortTermParams, build_long_term_maps,
                        build_seasonal_extrapolation, build_seasonal_inference,
                        build_short_term_extrapolation, build_short_term_inference,
                        build_spatial_inference, cycle_counts)

CHECKPOINT_FORMAT = "sscnn-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_series: int
    t_in: int = 168
    t_out: int = 96
    channels: int = 8
    layers: int = 2
    cycle: int = 24
    delta: int = 16
    kernel: int = 2
    eps: float = DEFAULT_EPS
    spatial: bool = False

    def __post_init__(self):
        for name in ("n_series", "t_in", "t_out", "channels", "layers", "cycle", "delta", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.t_in % self.cycle:
            raise ConfigError(f"t_in={self.t_in} is not a multiple of cycle={self.cycle}")
        if self.delta > self.t_in:
            raise ConfigError(f"delta={self.delta} exceeds t_in={self.t_in}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    @property
    def tau_in(self) -> int:
        return self.t_in // self.cycle

    @property
    def tau_out(self) -> int:
        return cycle_counts(self.t_in, self.t_out, self.cycle)[1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerParams:
    seasonal: SeasonalParams
    short_term: ShortTermParams
    fuse_in: FusionParams
    fuse_out: FusionParams


@dataclass
class ModelParams:
    embed_w: Tensor  # (d,)
    embed_b: Tensor  # (d,)
    layers: list[LayerParams]
    head_w: Tensor  # (t_out, d)
    head_b: Tensor  # (t_out,)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in checkpoint order."""
        out = [("embed.weight", self.embed_w), ("embed.bias", self.embed_b)]
        for i, layer in enumerate(self.layers):
            pre = f"layers.{i}"
            out += [(f"{pre}.seasonal.w_in", layer.seasonal.w_in),
                    (f"{pre}.seasonal.w_out", layer.seasonal.w_out),
                    (f"{pre}.short_term.w_in", layer.short_term.w_in),
                    (f"{pre}.short_term.w_out", layer.short_term.w_out)]
            for branch in ("fuse_in", "fuse_out"):
                out += [(f"{pre}.{branch}.{n}", t) for n, t in getattr(layer, branch).tensors()]
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def with_tensors(self, tensors) -> "ModelParams":
        """Same structure, with leaves taken from ``tensors`` in :meth:`tensors` order."""
        tensors = list(tensors)
        if len(tensors) != len(self.tensors()):
            raise ValueError(f"expected {len(self.tensors())} tensors, got {len(tensors)}")
        it = iter(tensors)
        embed_w, embed_b = next(it), next(it)
        layers = []
        for layer in self.layers:
            seasonal = SeasonalParams(next(it), next(it), layer.seasonal.cycle)
            short_term = ShortTermParams(next(it), next(it), layer.short_term.delta)
            fuse_in = FusionParams(*(next(it) for _ in range(6)))
            fuse_out = FusionParams(*(next(it) for _ in range(6)))
            layers.append(LayerParams(seasonal, short_term, fuse_in, fuse_out))
        return ModelParams(embed_w, embed_b, layers, next(it), next(it))

    def copy(self) -> "ModelParams":
        clone = copy.deepcopy(self)
        for t in clone.tensors():
            t.grad = None
        return clone


def _param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def zeros_params(cfg: ModelConfig) -> ModelParams:
    d = cfg.channels
    layers = [LayerParams(
        seasonal=SeasonalParams(_param((cfg.tau_in, cfg.tau_in)), _param((cfg.tau_out, cfg.tau_in)),
                                cfg.cycle),
        short_term=ShortTermParams(_param((cfg.delta,)), _param((cfg.delta, cfg.delta)), cfg.delta),
        fuse_in=FusionParams.zeros(d, cfg.kernel),
        fuse_out=FusionParams.zeros(d, cfg.kernel),
    ) for _ in range(cfg.layers)]
    return ModelParams(_param((d,)), _param((d,)), layers, _param((cfg.t_out, d)),
                       _param((cfg.t_out,)))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Random initialisation; map logits start at zero (uniform maps)."""
    rng = np.random.default_rng(seed)
    d = cfg.channels
    params = zeros_params(cfg)
    params.embed_w.value[...] = rng.normal(0.0, 1.0, d)
    for layer in params.layers:
        layer.fuse_in = FusionParams.init(d, cfg.kernel, rng)
        layer.fuse_out = FusionParams.init(d, cfg.kernel, rng)
    params.head_w.value[...] = rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.t_out, d))
    return params


def count_parameters(cfg: ModelConfig) -> int:
    d, k = cfg.channels, cfg.kernel
    per_layer = (cfg.tau_in ** 2 + cfg.tau_out * cfg.tau_in
                 + cfg.delta + cfg.delta ** 2
                 + 2 * FusionParams.count(d, k))
    return 2 * d + cfg.layers * per_layer + d * cfg.t_out + cfg.t_out


def embed(window, w, b) -> Tensor:
    """Lift ``(..., N, T)`` raw values to ``(..., N, T, d)`` with a shared affine map."""
    x = nc.as_tensor(window)
    x = nc.reshape(x, x.shape + (1,))
    return x * w + b


def _zero_triple(like: Tensor, t_out: int) -> ComponentTriple:
    zero = Tensor(np.zeros(like.shape))
    mu_hat, r_hat = extrapolate_spatial_zero(t_out, like.shape)
    return ComponentTriple(zero, Tensor(np.ones(like.shape)), zero, mu_hat, r_hat)


def forward(window, cfg: ModelConfig, params: ModelParams):
    """Run the two-branch network on ``window`` of shape ``(B, N, t_in)`` or ``(N, t_in)``.

    Returns ``(forecast, diagnostics)``: the forecast tensor has shape
    ``(B, N, t_out)`` (batch axis dropped for unbatched input) and
    ``diagnostics`` holds one dict of :class:`ComponentTriple` per layer.
    """
    x = np.asarray(window.value if isinstance(window, Tensor) else window, dtype=np.float64)
    unbatched = x.ndim == 2
    if unbatched:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.n_series, cfg.t_in):
        raise ValueError(f"window shape {x.shape} does not match (B, {cfg.n_series}, {cfg.t_in})")
    lt_in, lt_out = build_long_term_maps(cfg.t_in, cfg.t_out)

    h = embed(x, params.embed_w, params.embed_b)
    diagnostics = []
    h_hat_sum = None
    for layer in params.layers:
        lt = extrapolate(attn_norm_temporal(h, lt_in, cfg.eps), lt_out)
        se = attn_norm_temporal(lt.residual, build_seasonal_inference(layer.seasonal, cfg.t_in), cfg.eps)
        extrapolate(se, build_seasonal_extrapolation(layer.seasonal, cfg.t_in, cfg.t_out))
        st = attn_norm_temporal(se.residual, build_short_term_inference(layer.short_term, cfg.t_in),
                                cfg.eps)
        extrapolate(st, build_short_term_extrapolation(layer.short_term, cfg.t_in, cfg.t_out))
        if cfg.spatial:
            si = attn_norm_spatial(st.residual, build_spatial_inference(st.residual), cfg.eps)
            si.mu_hat, si.residual_hat = extrapolate_spatial_zero(cfg.t_out, st.residual.shape)
        else:
            si = _zero_triple(st.residual, cfg.t_out)
        triples = [lt, se, st, si]
        diagnostics.append(dict(zip(("long_term", "seasonal", "short_term", "spatial"), triples)))
        h_hat = polynomial_regression(concat_components(triples, forecast=True), layer.fuse_out)
        h = polynomial_regression(concat_components(triples), layer.fuse_in)
        h_hat_sum = h_hat if h_hat_sum is None else h_hat_sum + h_hat

    forecast = nc.tsum(h_hat_sum * params.head_w, axis=-1) + params.head_b
    if unbatched:
        forecast = nc.reshape(forecast, forecast.shape[1:])
    return forecast, diagnostics


def predict(window, cfg: ModelConfig, params: ModelParams) -> np.ndarray:
    return forward(window, cfg, params)[0].value


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, extra: dict | None = None) -> None:
    """Write a JSON checkpoint: config plus flat parameter arrays in
    :meth:`ModelParams.named_parameters` order.  Floats are written with
    ``repr`` precision so loading reproduces every bit."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "parameters": [{"name": n, "shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
                       for n, t in params.named_parameters()],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an sscnn checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig(**doc["config"])
    params = zeros_params(cfg)
    named = params.named_parameters()
    stored = doc["parameters"]
    if [n for n, _ in named] != [p["name"] for p in stored]:
        raise ValueError("checkpoint parameter layout does not match its config")
    for (name, tensor), entry in zip(named, stored):
        values = np.array(entry["values"], dtype=np.float64)
        if list(tensor.shape) != entry["shape"] or values.size != tensor.value.size:
            raise ValueError(f"parameter {name} has shape {entry['shape']}, expected {tensor.shape}")
        tensor.value[...] = values.reshape(tensor.shape)
    return cfg, params, doc.get("extra", {})
