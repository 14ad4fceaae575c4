"""Full projector: spatial branch, patch branch, and token assembly.

The spatial branch runs pyramid -> conv group -> optional detail fusion ->
spatial MLP and yields one embedding row per pyramid scale. The patch branch
maps every patch feature row through its own MLP. Visual tokens are the
spatial rows followed by the patch rows; language tokens are appended by the
caller. Both MLPs are two layers with a GELU between them.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import spatial, fusion
from . import tensor as T
from .tensor import Parameter, Tensor, TensorError
from .rng import StreamRng

_DTYPES = {"f32": np.float32, "f64": np.float64}


class StageError(RuntimeError):
    """Failure inside one named stage of the projector forward pass."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ProjectorConfig:
    variant: str = "cropping"
    grid: int = 24
    enc_dim: int = 1024
    spatial_dim: int = 512
    llm_dim: int = 4096
    crop_stride: int = 2
    big_kernel: int = 16
    dfi_enabled: bool = True
    conv_bias: bool = True
    conv_activation: str = "none"
    dfi_bias: bool = True
    dfi_ln_placement: str = "pre"
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.variant not in spatial.VARIANTS:
            raise TensorError(f"unknown variant {self.variant!r}")
        for field in ("grid", "enc_dim", "spatial_dim", "llm_dim",
                      "crop_stride", "big_kernel"):
            if getattr(self, field) < 1:
                raise TensorError(f"{field} must be positive")
        if self.big_kernel > self.grid:
            raise TensorError(
                f"big kernel {self.big_kernel} exceeds grid {self.grid}"
            )
        if (self.grid - self.big_kernel) % 2:
            raise TensorError(
                f"grid {self.grid} minus big kernel {self.big_kernel} must be "
                "even; odd remainders would require padding"
            )
        if self.dtype not in _DTYPES:
            raise TensorError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.dfi_ln_placement not in fusion.LN_PLACEMENTS:
            raise TensorError(
                f"unknown dfi_ln_placement {self.dfi_ln_placement!r}"
            )
        if self.conv_activation not in ("none", "gelu"):
            raise TensorError(
                f"unknown conv_activation {self.conv_activation!r}"
            )

    @classmethod
    def desk(cls, **overrides):
        """Small dimensions for fast tests and gradient checks."""
        base = dict(grid=8, enc_dim=8, spatial_dim=8, llm_dim=16,
                    big_kernel=4, dtype="f64")
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **overrides):
        return replace(self, **overrides)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def scale_sizes(self):
        return spatial.scale_schedule(self.grid, self.crop_stride)

    @property
    def num_scales(self):
        return len(self.scale_sizes)

    @property
    def big_side(self):
        return (self.grid - self.big_kernel) // 2 + 1

    @property
    def num_patch_tokens(self):
        return self.grid * self.grid

    @property
    def num_visual_tokens(self):
        return self.num_scales + self.num_patch_tokens

    @property
    def mlp_spatial_in(self):
        return 2 * self.spatial_dim if self.dfi_enabled else self.spatial_dim


def token_counts(cfg):
    """Token accounting for a config."""
    return {
        "scale_sizes": cfg.scale_sizes,
        "spatial": cfg.num_scales,
        "patch": cfg.num_patch_tokens,
        "visual": cfg.num_visual_tokens,
        "big_map": cfg.big_side ** 2 if cfg.dfi_enabled else 0,
    }


# ---------------------------------------------------------------------------
# parameters


def _uniform_param(rng, name, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(name, shape, -bound, bound, dtype=dtype),
                     name=name)


def _const_param(name, shape, value, dtype):
    return Parameter(np.full(shape, value, dtype=dtype), name=name)


def init_params(cfg):
    """All trainable parameters for a config, keyed by name.

    Each parameter draws from its own named stream, so extending the model
    never reshuffles the values of parameters that already existed.
    """
    rng = StreamRng(cfg.seed)
    dt = cfg.np_dtype
    c, cp, d = cfg.enc_dim, cfg.spatial_dim, cfg.llm_dim
    params = {}

    def uni(name, shape, fan_in):
        params[name] = _uniform_param(rng, name, shape, fan_in, dt)

    for s in cfg.scale_sizes:
        fan = s * s * c
        uni(f"conv.scale{s}.weight", (s, s, c, cp), fan)
        if cfg.conv_bias:
            uni(f"conv.scale{s}.bias", (cp,), fan)
    if cfg.dfi_enabled:
        k = cfg.big_kernel
        fan = k * k * c
        uni("conv.big.weight", (k, k, c, cp), fan)
        if cfg.conv_bias:
            uni("conv.big.bias", (cp,), fan)
        for part in ("wq", "wk", "wv"):
            uni(f"dfi.{part}.weight", (cp, cp), cp)
            if cfg.dfi_bias:
                uni(f"dfi.{part}.bias", (cp,), cp)
        for ln in ("ln_q", "ln_kv"):
            params[f"dfi.{ln}.gamma"] = _const_param(f"dfi.{ln}.gamma", (cp,), 1.0, dt)
            params[f"dfi.{ln}.beta"] = _const_param(f"dfi.{ln}.beta", (cp,), 0.0, dt)

    s_in = cfg.mlp_spatial_in
    uni("mlp_s.fc1.weight", (s_in, d), s_in)
    uni("mlp_s.fc1.bias", (d,), s_in)
    uni("mlp_s.fc2.weight", (d, d), d)
    uni("mlp_s.fc2.bias", (d,), d)
    uni("mlp_p.fc1.weight", (c, d), c)
    uni("mlp_p.fc1.bias", (d,), c)
    uni("mlp_p.fc2.weight", (d, d), d)
    uni("mlp_p.fc2.bias", (d,), d)
    return params


def build_conv_group(cfg, params):
    kernels = [params[f"conv.scale{s}.weight"] for s in cfg.scale_sizes]
    biases = [params.get(f"conv.scale{s}.bias") for s in cfg.scale_sizes]
    return spatial.ConvGroup(
        kernels=kernels,
        biases=biases,
        big_kernel=params.get("conv.big.weight"),
        big_bias=params.get("conv.big.bias"),
        big_stride=2,
        activation=cfg.conv_activation,
    )


def build_fusion_weights(cfg, params):
    def bias(part):
        return params.get(f"dfi.{part}.bias")

    return fusion.FusionWeights(
        wq=params["dfi.wq.weight"], bq=bias("wq"),
        wk=params["dfi.wk.weight"], bk=bias("wk"),
        wv=params["dfi.wv.weight"], bv=bias("wv"),
        ln_q_gamma=params["dfi.ln_q.gamma"], ln_q_beta=params["dfi.ln_q.beta"],
        ln_kv_gamma=params["dfi.ln_kv.gamma"], ln_kv_beta=params["dfi.ln_kv.beta"],
        ln_placement=cfg.dfi_ln_placement,
    )


# ---------------------------------------------------------------------------
# forward


def mlp_forward(x, w1, b1, w2, b2):
    """Two-layer MLP: linear -> GELU -> linear."""
    return T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2)


def project_spatial(zvs, params):
    """Spatial-branch MLP mapping fused tokens into the language space."""
    return mlp_forward(zvs, params["mlp_s.fc1.weight"], params["mlp_s.fc1.bias"],
                       params["mlp_s.fc2.weight"], params["mlp_s.fc2.bias"])


def project_patch(zp_flat, params):
    """Patch-branch MLP mapping raw patch features into the language space."""
    return mlp_forward(zp_flat, params["mlp_p.fc1.weight"], params["mlp_p.fc1.bias"],
                       params["mlp_p.fc2.weight"], params["mlp_p.fc2.bias"])


@dataclass
class ProjectorOutput:
    spatial_tokens: Tensor          # (n, llm_dim)
    patch_tokens: Tensor            # (G*G, llm_dim)
    fusion: fusion.FusionResult     # None when detail fusion is disabled
    extracted: spatial.SpatialTokenSet


class _StageTimer:
    def __init__(self, timings, stage):
        self.timings = timings
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, exc_type, exc, tb):
        if self.timings is not None:
            dt = time.perf_counter() - self.t0
            self.timings[self.stage] = self.timings.get(self.stage, 0.0) + dt
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.stage, exc) from exc


def projector_forward(cfg, zp, params, timings=None):
    """Run both branches over a patch grid.

    zp is the (G, G, C) patch grid. Returns spatial and patch token
    embeddings plus the fusion result (attention weights) when detail
    fusion is enabled. Pass a dict as `timings` to accumulate per-stage
    wall time in seconds. Errors are re-raised with the failing stage name.
    """
    spatial.validate_patch_grid(zp)
    if zp.shape != (cfg.grid, cfg.grid, cfg.enc_dim):
        raise StageError(
            "input",
            TensorError(
                f"patch grid shape {tuple(zp.shape)} does not match config "
                f"({cfg.grid}, {cfg.grid}, {cfg.enc_dim})"
            ),
        )

    with _StageTimer(timings, "pyramid"):
        pyramid = spatial.build_pyramid(zp, cfg.variant, cfg.crop_stride)

    with _StageTimer(timings, "conv_small"):
        group = build_conv_group(cfg, params)
        small = spatial.extract_spatial_tokens(pyramid, group)

    big, big_side, fused = None, 0, None
    if cfg.dfi_enabled:
        with _StageTimer(timings, "conv_big"):
            big, big_side = spatial.extract_big_map(zp, group)
        with _StageTimer(timings, "fusion"):
            fused = fusion.fuse_detail(small, big, build_fusion_weights(cfg, params))
        spatial_in = fused.fused
    else:
        spatial_in = small

    with _StageTimer(timings, "mlp_spatial"):
        h_vs = project_spatial(spatial_in, params)

    with _StageTimer(timings, "mlp_patch"):
        zp_flat = T.reshape(zp, (cfg.grid * cfg.grid, cfg.enc_dim))
        h_vp = project_patch(zp_flat, params)

    return ProjectorOutput(
        spatial_tokens=h_vs,
        patch_tokens=h_vp,
        fusion=fused,
        extracted=spatial.SpatialTokenSet(small=small, big=big, big_side=big_side),
    )


SPATIAL_STAGES = ("pyramid", "conv_small", "conv_big", "fusion", "mlp_spatial")
PATCH_STAGES = ("mlp_patch",)


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class TokenSequence:
    """Visual tokens followed by language tokens, in fixed order."""

    tokens: Tensor
    spatial_len: int
    patch_len: int
    language_len: int

    @property
    def total_len(self):
        return self.spatial_len + self.patch_len + self.language_len

    @property
    def visual_len(self):
        return self.spatial_len + self.patch_len


def assemble_sequence(h_vs, h_vp, h_q=None):
    """Concatenate spatial, patch and language tokens, in that order.

    h_q may be None or have zero rows; all parts must share the embedding
    width.
    """
    parts = [h_vs, h_vp]
    lang_len = 0
    if h_q is not None:
        if h_q.ndim != 2 or h_q.shape[1] != h_vs.shape[1]:
            raise TensorError(
                f"language tokens of shape {tuple(h_q.shape)} do not match "
                f"embedding width {h_vs.shape[1]}"
            )
        lang_len = h_q.shape[0]
        if lang_len:
            parts.append(h_q)
    if h_vs.shape[1] != h_vp.shape[1]:
        raise TensorError(
            f"embedding width mismatch: {h_vs.shape[1]} vs {h_vp.shape[1]}"
        )
    seq = T.concat(parts, axis=0)
    return TokenSequence(
        tokens=seq,
        spatial_len=h_vs.shape[0],
        patch_len=h_vp.shape[0],
        language_len=lang_len,
    )
