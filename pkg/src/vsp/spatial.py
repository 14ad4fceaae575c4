"""Multi-scale spatial token extraction.

A square patch-feature grid is expanded into a pyramid of square scales,
either by progressive center cropping (detail first: ordered from the
central region outward) or by adaptive average pooling (ordered from
coarse/abstract to the full-resolution grid). A group of full-cover
convolution kernels, one per scale, turns each scale into a single token;
a smaller strided kernel over the full grid yields the fine-grained "big"
map used for detail fusion.
"""

from dataclasses import dataclass, field

from . import tensor as T
from .tensor import Tensor, TensorError

VARIANTS = ("cropping", "pooling")


def validate_patch_grid(zp):
    if zp.ndim != 3 or zp.shape[0] != zp.shape[1]:
        raise TensorError(
            f"patch grid must be square GxGxC, got shape {tuple(zp.shape)}"
        )


def scale_schedule(grid, crop_stride):
    """Ascending square sizes grid - 2*crop_stride*j, for j = 0, 1, ...

    Every size stays positive; the largest is always the grid itself. The
    margin removed at each step is even, so crops stay centered.
    """
    grid = int(grid)
    crop_stride = int(crop_stride)
    if grid < 1:
        raise TensorError("grid must be positive")
    if crop_stride < 1:
        raise TensorError("crop stride must be positive")
    sizes = []
    s = grid
    while s > 0:
        sizes.append(s)
        s -= 2 * crop_stride
    return tuple(reversed(sizes))


@dataclass
class ScalePyramid:
    """Ordered list of square scales, smallest first."""

    variant: str
    sizes: tuple
    scales: list = field(repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TensorError(f"unknown pyramid variant {self.variant!r}")


def build_crop_pyramid(zp, crop_stride):
    """Pyramid of center crops, ordered central region first."""
    validate_patch_grid(zp)
    sizes = scale_schedule(zp.shape[0], crop_stride)
    scales = [T.center_crop(zp, s) for s in sizes]
    return ScalePyramid("cropping", sizes, scales)


def build_pool_pyramid(zp, crop_stride):
    """Pyramid of adaptive average pools, coarsest first.

    Shares the cropping size schedule so downstream kernel shapes do not
    depend on the variant; the final scale equals the input exactly.
    """
    validate_patch_grid(zp)
    sizes = scale_schedule(zp.shape[0], crop_stride)
    scales = [T.adaptive_avg_pool2d(zp, s) for s in sizes]
    return ScalePyramid("pooling", sizes, scales)


def build_pyramid(zp, variant, crop_stride):
    if variant == "cropping":
        return build_crop_pyramid(zp, crop_stride)
    if variant == "pooling":
        return build_pool_pyramid(zp, crop_stride)
    raise TensorError(f"unknown pyramid variant {variant!r}")


@dataclass
class ConvGroup:
    """One full-cover kernel per scale plus the strided big-map kernel.

    kernels[j] has shape (s_j, s_j, C, C') and covers scale j completely,
    so each scale contributes exactly one token. The big kernel slides over
    the full grid with stride 2.
    """

    kernels: list
    biases: list
    big_kernel: Tensor = None
    big_bias: Tensor = None
    big_stride: int = 2
    activation: str = "none"

    @property
    def sizes(self):
        return tuple(k.shape[0] for k in self.kernels)

    def __post_init__(self):
        if len(self.biases) != len(self.kernels):
            raise TensorError("conv group: one bias slot per kernel required")
        if self.activation not in ("none", "gelu"):
            raise TensorError(f"unknown conv activation {self.activation!r}")


def _activate(x, kind):
    return T.gelu(x) if kind == "gelu" else x


def extract_spatial_tokens(pyramid, group):
    """One token per scale via full-cover convolution; rows in pyramid order."""
    if group.sizes != tuple(pyramid.sizes):
        raise TensorError(
            f"kernel sizes {group.sizes} do not match pyramid sizes "
            f"{tuple(pyramid.sizes)}"
        )
    rows = []
    for scale, size, kernel, bias in zip(
        pyramid.scales, pyramid.sizes, group.kernels, group.biases
    ):
        tok = T.conv2d_valid(scale, kernel, bias, stride=size)
        rows.append(T.reshape(tok, (1, kernel.shape[3])))
    return _activate(T.concat(rows, axis=0), group.activation)


def extract_big_map(zp, group):
    """Strided conv over the full grid, flattened row-major.

    Returns (tokens, side) where tokens has shape (side*side, C') and
    side = (G - k_big) / stride + 1. G - k_big must be even so the kernel
    tiles the grid without padding.
    """
    validate_patch_grid(zp)
    if group.big_kernel is None:
        raise TensorError("conv group has no big kernel")
    g = zp.shape[0]
    k = group.big_kernel.shape[0]
    if (g - k) % group.big_stride:
        raise TensorError(
            f"big kernel {k} with stride {group.big_stride} does not tile "
            f"grid {g}; only even remainders avoid padding"
        )
    fmap = T.conv2d_valid(zp, group.big_kernel, group.big_bias,
                          stride=group.big_stride)
    side = fmap.shape[0]
    flat = T.reshape(fmap, (side * side, fmap.shape[2]))
    return _activate(flat, group.activation), side


def sliding_window_tokens(zp, window, stride, kernel, bias=None):
    """Equal-size window tokens, top-to-bottom then left-to-right.

    Ablation alternative to the pyramid: every window of the given size is
    reduced to one token by a full-cover kernel shared across windows.
    """
    validate_patch_grid(zp)
    g = zp.shape[0]
    window = int(window)
    stride = int(stride)
    if window < 1 or window > g:
        raise TensorError(f"window {window} invalid for grid {g}")
    if stride < 1 or (g - window) % stride:
        raise TensorError(
            f"stride {stride} does not tile grid {g} with window {window}"
        )
    if kernel.shape[0] != window:
        raise TensorError(
            f"kernel size {kernel.shape[0]} must equal window {window}"
        )
    fmap = T.conv2d_valid(zp, kernel, bias, stride=stride)
    side = fmap.shape[0]
    return T.reshape(fmap, (side * side, fmap.shape[2]))


@dataclass
class SpatialTokenSet:
    """Per-scale tokens plus the flattened big map."""

    small: Tensor   # (n_scales, C')
    big: Tensor     # (big_side**2, C') or None when fusion is disabled
    big_side: int
