"""Vision encoder with paired spatial-window and channel-group attention.

An image is cut into P non-overlapping patches, each flattened row-major
and projected to C channels with a positional encoding added.  Encoder
blocks then run two complementary attention branches over the same
input: window attention mixes nearby patches (token axis, cost linear in
P for fixed window size) and group attention mixes channels within a
group (channel axis, also linear in P).  The branch outputs are
concatenated to width 2C, projected back to C, and wrapped in the usual
post-norm residual + feed-forward structure.  A conventional global
multi-head attention branch exists for ablations and as the quadratic
baseline the windowed design avoids.

The encoder output keeps the final block's pre-projection concatenation
(P x 2C) as the feature map handed to the decoder, and the per-block
attention weight stacks from which patch saliency heatmaps are read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flops
from .autograd import (
    Tensor,
    add,
    add_bias,
    concat,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_axis,
    softmax,
    take_rows,
    transpose,
)
from .errors import ConfigError, ContractError, ShapeError
from .init import ones_init, uniform_init, zeros_init

MODES = ("dual", "global", "spatial", "channel")
WINDOW_LAYOUTS = ("1d", "2d")
POS_ENCODINGS = ("sinusoidal", "learned")


@dataclass(frozen=True)
class EncoderConfig:
    """Static shape of the encoder; validated on construction.

    image_size : side of the square input image in pixels
    patch_size : side of a square patch; must divide image_size
    image_channels : samples per pixel (1 grayscale, 3 color)
    dim : channel width C of patch embeddings
    heads : head count of the global-attention branch; divides dim
    window_patches : patches per spatial window; divides the patch count
    groups : channel groups; divides dim
    depth : number of encoder blocks (0 = embeddings only)
    mode : which branches a block runs ("dual" pairs spatial + channel;
        the single-branch modes duplicate their output to fill the
        2C concat width so every mode shares the block shape)
    window_layout : "1d" contiguous runs of patch indices, or "2d"
        square tiles of the patch grid (window_patches must then be a
        perfect square whose side divides the grid side)
    """

    image_size: int
    patch_size: int
    image_channels: int = 3
    dim: int = 32
    heads: int = 2
    window_patches: int = 4
    groups: int = 4
    depth: int = 1
    mode: str = "dual"
    window_layout: str = "1d"
    pos_encoding: str = "sinusoidal"
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError(f"image_size and patch_size must be positive, got {self.image_size}, {self.patch_size}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be positive and even, got {self.dim}")
        if self.heads <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} does not divide dim {self.dim}")
        if self.groups <= 0 or self.dim % self.groups != 0:
            raise ConfigError(f"groups {self.groups} does not divide dim {self.dim}")
        if self.window_patches <= 0 or self.patches % self.window_patches != 0:
            raise ConfigError(f"window_patches {self.window_patches} does not divide patch count {self.patches}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window_layout not in WINDOW_LAYOUTS:
            raise ConfigError(f"window_layout must be one of {WINDOW_LAYOUTS}, got {self.window_layout!r}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(f"pos_encoding must be one of {POS_ENCODINGS}, got {self.pos_encoding!r}")
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.window_layout == "2d":
            side = math.isqrt(self.window_patches)
            if side * side != self.window_patches:
                raise ConfigError(f"2d windows need a square window_patches, got {self.window_patches}")
            if self.grid % side != 0:
                raise ConfigError(f"2d window side {side} does not divide grid side {self.grid}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patches(self) -> int:
        return self.grid * self.grid

    @property
    def windows(self) -> int:
        return self.patches // self.window_patches

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def group_dim(self) -> int:
        return self.dim // self.groups

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def feature_width(self) -> int:
        """Width of the encoder output rows: 2C past any block, C otherwise."""
        return 2 * self.dim if self.depth >= 1 else self.dim


@dataclass(frozen=True)
class KernelShape:
    """Just enough geometry to run the attention kernels standalone.

    Benchmarks sweep patch counts that no square image grid produces
    (e.g. 128), so this stands in for EncoderConfig where the kernels
    only need patch/window/group arithmetic.  1-d windows only.
    """

    patches: int
    dim: int
    window_patches: int = 4
    groups: int = 4
    window_layout: str = "1d"

    def __post_init__(self):
        if self.window_layout != "1d":
            raise ConfigError("KernelShape supports only 1d windows")
        if self.patches < 1 or self.patches % self.window_patches != 0:
            raise ConfigError(
                f"window_patches {self.window_patches} must divide patches {self.patches}"
            )
        if self.dim < 1 or self.dim % self.groups != 0:
            raise ConfigError(f"groups {self.groups} must divide dim {self.dim}")

    @property
    def windows(self) -> int:
        return self.patches // self.window_patches

    @property
    def group_dim(self) -> int:
        return self.dim // self.groups


@dataclass
class PatchGrid:
    """Patch-level view of one image: raw pixels, positions, embeddings."""

    patches: Tensor  # P x patch_len, flattened row-major pixels
    positions: Tensor  # P x C
    embeddings: Tensor  # P x C, projection + positions

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass
class EncoderOutput:
    """Feature map plus the attention weights of every block."""

    features: Tensor  # P x 2C for depth >= 1, else the P x C embeddings
    hidden: Tensor  # final block output, P x C
    spatial_weights: list  # per block: (N_w, P_w, P_w) array or None
    channel_weights: list  # per block: (N_g, C_g, C_g) array or None
    global_weights: list  # per block: (N_h, P, P) array or None
    cfg: EncoderConfig = field(repr=False, default=None)


def normalize_image(image: Tensor, mean, std) -> Tensor:
    """Standardize each channel: (pixel - mean[c]) / std[c].

    mean and std are per-channel sequences; a non-positive std marks a
    degenerate channel and is rejected.
    """
    if image.data.ndim != 3:
        raise ShapeError(f"normalize_image: expected H x W x channels, got {image.shape}")
    ch = image.shape[2]
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if mean.shape != (ch,) or std.shape != (ch,):
        raise ShapeError(f"normalize_image: need {ch} mean/std values, got {mean.shape} and {std.shape}")
    bad = np.nonzero(std <= 0)[0]
    if bad.size:
        raise ContractError(f"normalize_image: channel {int(bad[0])} has non-positive std {std[bad[0]]}")
    return Tensor((image.data - mean[None, None, :]) / std[None, None, :])


def sinusoidal_positions(count: int, dim: int) -> Tensor:
    """Fixed sin/cos positional table over patch index, shape count x dim."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal positions need an even dim, got {dim}")
    pos = np.arange(count, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * idx / dim)
    table = np.zeros((count, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table)


def split_patches(image: Tensor, cfg: EncoderConfig) -> np.ndarray:
    """Cut H x W x ch pixels into P rows of row-major flattened patches."""
    h, w, ch = image.shape
    if (h, w, ch) != (cfg.image_size, cfg.image_size, cfg.image_channels):
        raise ShapeError(
            f"image shape {image.shape} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.image_channels})"
        )
    g, ps = cfg.grid, cfg.patch_size
    tiles = image.data.reshape(g, ps, g, ps, ch).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(cfg.patches, cfg.patch_len)


def embed_patches(image: Tensor, cfg: EncoderConfig, w_proj: Tensor, positions: Tensor) -> PatchGrid:
    """Flatten patches row-major, project linearly to C, add positions.

    The projection carries no bias so a zero image with zero positions
    embeds to exactly zero.
    """
    patches = Tensor(split_patches(image, cfg))
    if w_proj.shape != (cfg.patch_len, cfg.dim):
        raise ShapeError(f"patch projection must be {(cfg.patch_len, cfg.dim)}, got {w_proj.shape}")
    if positions.shape != (cfg.patches, cfg.dim):
        raise ShapeError(f"positions must be {(cfg.patches, cfg.dim)}, got {positions.shape}")
    embeddings = add(matmul(patches, w_proj), positions)
    return PatchGrid(patches=patches, positions=positions, embeddings=embeddings)


def window_patch_indices(cfg: "EncoderConfig | KernelShape") -> list[list[int]]:
    """Partition of patch indices into attention windows.

    "1d" windows are contiguous runs in row-major patch order; "2d"
    windows are square tiles of the patch grid.
    """
    if cfg.window_layout == "1d":
        pw = cfg.window_patches
        return [list(range(w * pw, (w + 1) * pw)) for w in range(cfg.windows)]
    side = math.isqrt(cfg.window_patches)
    g = cfg.grid
    out = []
    for br in range(g // side):
        for bc in range(g // side):
            out.append([(br * side + r) * g + (bc * side + c) for r in range(side) for c in range(side)])
    return out


def global_attention(x: Tensor, head_weights: list[tuple[Tensor, Tensor, Tensor]]):
    """Full multi-head self-attention over all P patches.

    Heads slice the channel axis: head i sees columns [i*C_h, (i+1)*C_h)
    and applies its own C_h x C_h query/key/value maps.  Scores are
    scaled by 1/sqrt(C_h); head outputs concatenate back to width C.
    Returns (output P x C, weights stacked N_h x P x P).
    """
    p, c = x.shape
    n_h = len(head_weights)
    if n_h == 0 or c % n_h != 0:
        raise ShapeError(f"global_attention: {n_h} heads do not divide width {c}")
    c_h = c // n_h
    outs, weights = [], []
    with flops.scope("global"):
        for i, (wq, wk, wv) in enumerate(head_weights):
            if wq.shape != (c_h, c_h):
                raise ShapeError(f"global_attention: head weights must be {(c_h, c_h)}, got {wq.shape}")
            xi = slice_axis(x, 1, i * c_h, (i + 1) * c_h) if n_h > 1 else x
            q = matmul(xi, wq)
            k = matmul(xi, wk)
            v = matmul(xi, wv)
            with flops.scope("core"):
                scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(c_h))
                attn = softmax(scores, axis=1)
                outs.append(matmul(attn, v))
            weights.append(attn.data)
    out = concat(outs, axis=1) if n_h > 1 else outs[0]
    return out, np.stack(weights)


def spatial_window_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, cfg: "EncoderConfig | KernelShape"):
    """Single-head attention restricted to disjoint patch windows.

    All windows share one set of C x C projections; scores inside a
    window are scaled by 1/sqrt(C).  Patches never attend outside their
    window, which caps the score matrices at P_w x P_w and keeps the
    cost linear in P.  Returns (output P x C in original patch order,
    weights N_w x P_w x P_w in window order).
    """
    p, c = x.shape
    if wq.shape != (c, c) or wk.shape != (c, c) or wv.shape != (c, c):
        raise ShapeError(f"spatial_window_attention: projections must be {(c, c)}, got {wq.shape}")
    if p != cfg.patches:
        raise ShapeError(f"spatial_window_attention: expected {cfg.patches} rows, got {p}")
    index_sets = window_patch_indices(cfg)
    outs, weights = [], []
    with flops.scope("spatial_window"):
        for idx in index_sets:
            contiguous = idx == list(range(idx[0], idx[0] + len(idx)))
            xw = slice_axis(x, 0, idx[0], idx[0] + len(idx)) if contiguous else take_rows(x, idx)
            q = matmul(xw, wq)
            k = matmul(xw, wk)
            v = matmul(xw, wv)
            with flops.scope("core"):
                scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(c))
                attn = softmax(scores, axis=1)
                outs.append(matmul(attn, v))
            weights.append(attn.data)
    stacked = concat(outs, axis=0) if len(outs) > 1 else outs[0]
    order = [i for idx in index_sets for i in idx]
    if order != list(range(p)):
        inverse = np.empty(p, dtype=np.intp)
        inverse[np.asarray(order)] = np.arange(p)
        stacked = take_rows(stacked, inverse)
    return stacked, np.stack(weights)


def channel_group_attention(x: Tensor, group_weights: list[tuple[Tensor, Tensor, Tensor]], cfg: "EncoderConfig | KernelShape"):
    """Attention transposed onto the channel axis, one group at a time.

    Group g sees its C_g columns, projects them with its own C_g x C_g
    maps, and forms channel-to-channel scores Q^T K / sqrt(P), so the
    attention matrix is C_g x C_g regardless of patch count.  Values
    aggregate as (A V^T)^T, returning P x C_g per group; groups
    concatenate back to width C.  Returns (output P x C, weights
    N_g x C_g x C_g).
    """
    p, c = x.shape
    if len(group_weights) != cfg.groups:
        raise ShapeError(f"channel_group_attention: expected {cfg.groups} groups, got {len(group_weights)}")
    c_g = cfg.group_dim
    outs, weights = [], []
    with flops.scope("channel_group"):
        for g, (wq, wk, wv) in enumerate(group_weights):
            if wq.shape != (c_g, c_g):
                raise ShapeError(f"channel_group_attention: group weights must be {(c_g, c_g)}, got {wq.shape}")
            xg = slice_axis(x, 1, g * c_g, (g + 1) * c_g) if cfg.groups > 1 else x
            q = matmul(xg, wq)
            k = matmul(xg, wk)
            v = matmul(xg, wv)
            with flops.scope("core"):
                scores = scale(matmul(transpose(q), k), 1.0 / math.sqrt(p))
                attn = softmax(scores, axis=1)
                outs.append(transpose(matmul(attn, transpose(v))))
            weights.append(attn.data)
    out = concat(outs, axis=1) if cfg.groups > 1 else outs[0]
    return out, np.stack(weights)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> dict[str, Tensor]:
    """Fresh trainable parameters for the configured encoder."""
    c, c_h, c_g = cfg.dim, cfg.head_dim, cfg.group_dim
    params: dict[str, Tensor] = {}
    params[f"{prefix}.patch.w"] = uniform_init(rng, (cfg.patch_len, c))
    if cfg.pos_encoding == "learned":
        params[f"{prefix}.pos"] = uniform_init(rng, (cfg.patches, c), fan_in=c)
    hidden = c * cfg.ffn_expansion
    for i in range(cfg.depth):
        b = f"{prefix}.b{i}"
        if cfg.mode in ("dual", "spatial"):
            for name in ("wq", "wk", "wv"):
                params[f"{b}.spatial.{name}"] = uniform_init(rng, (c, c))
        if cfg.mode in ("dual", "channel"):
            for g in range(cfg.groups):
                for name in ("wq", "wk", "wv"):
                    params[f"{b}.channel.g{g}.{name}"] = uniform_init(rng, (c_g, c_g))
        if cfg.mode == "global":
            for h in range(cfg.heads):
                for name in ("wq", "wk", "wv"):
                    params[f"{b}.global.h{h}.{name}"] = uniform_init(rng, (c_h, c_h))
        params[f"{b}.proj.w"] = uniform_init(rng, (2 * c, c))
        params[f"{b}.proj.b"] = zeros_init(c)
        params[f"{b}.ln1.g"] = ones_init(c)
        params[f"{b}.ln1.b"] = zeros_init(c)
        params[f"{b}.ffn.w1"] = uniform_init(rng, (c, hidden))
        params[f"{b}.ffn.b1"] = zeros_init(hidden)
        params[f"{b}.ffn.w2"] = uniform_init(rng, (hidden, c))
        params[f"{b}.ffn.b2"] = zeros_init(c)
        params[f"{b}.ln2.g"] = ones_init(c)
        params[f"{b}.ln2.b"] = zeros_init(c)
    return params


def _block_heads(params: dict, base: str, count: int) -> list[tuple[Tensor, Tensor, Tensor]]:
    return [
        (params[f"{base}{i}.wq"], params[f"{base}{i}.wk"], params[f"{base}{i}.wv"])
        for i in range(count)
    ]


def encoder_block(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: EncoderConfig):
    """One encoder block: branches, concat, project, residual norms.

    Returns (block output P x C, pre-projection concat P x 2C, and the
    spatial / channel / global weight stacks, None for absent branches).
    """
    sw = cw = gw = None
    if cfg.mode in ("dual", "spatial"):
        spatial_out, sw = spatial_window_attention(
            x, params[f"{prefix}.spatial.wq"], params[f"{prefix}.spatial.wk"], params[f"{prefix}.spatial.wv"], cfg
        )
    if cfg.mode in ("dual", "channel"):
        channel_out, cw = channel_group_attention(x, _block_heads(params, f"{prefix}.channel.g", cfg.groups), cfg)
    if cfg.mode == "global":
        global_out, gw = global_attention(x, _block_heads(params, f"{prefix}.global.h", cfg.heads))

    if cfg.mode == "dual":
        branches = concat([spatial_out, channel_out], axis=1)
    elif cfg.mode == "spatial":
        branches = concat([spatial_out, spatial_out], axis=1)
    elif cfg.mode == "channel":
        branches = concat([channel_out, channel_out], axis=1)
    else:
        branches = concat([global_out, global_out], axis=1)

    with flops.scope("block_proj"):
        projected = add_bias(matmul(branches, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])
    y = layer_norm(add(x, projected), params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    with flops.scope("ffn"):
        inner = gelu(add_bias(matmul(y, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
        ffn_out = add_bias(matmul(inner, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    out = layer_norm(add(y, ffn_out), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return out, branches, sw, cw, gw


def encode(image: Tensor, cfg: EncoderConfig, params: dict[str, Tensor], prefix: str = "enc") -> EncoderOutput:
    """Full encoder pass: normalize, embed patches, run depth blocks.

    Per-channel normalization stats live in the params dict under
    ``norm.mean`` / ``norm.std`` so checkpoints carry them; identity
    stats are assumed when absent.
    """
    mean_t = params.get("norm.mean")
    std_t = params.get("norm.std")
    if mean_t is not None and std_t is not None:
        image = normalize_image(image, mean_t.data, std_t.data)
    if cfg.pos_encoding == "learned":
        positions = params[f"{prefix}.pos"]
    else:
        positions = sinusoidal_positions(cfg.patches, cfg.dim)
    grid = embed_patches(image, cfg, params[f"{prefix}.patch.w"], positions)
    x = grid.embeddings
    spatial_w, channel_w, global_w = [], [], []
    branches = None
    for i in range(cfg.depth):
        x, branches, sw, cw, gw = encoder_block(x, params, f"{prefix}.b{i}", cfg)
        spatial_w.append(sw)
        channel_w.append(cw)
        global_w.append(gw)
    features = branches if cfg.depth >= 1 else grid.embeddings
    return EncoderOutput(
        features=features,
        hidden=x,
        spatial_weights=spatial_w,
        channel_weights=channel_w,
        global_weights=global_w,
        cfg=cfg,
    )


def patch_saliency(output: EncoderOutput, block: int = -1) -> np.ndarray:
    """Attention received per patch: column sums of one block's window weights.

    Every query row of the window attention is a distribution over the
    window's patches, so the raw saliency over all P patches sums to P.
    """
    if not output.spatial_weights:
        raise ContractError("patch_saliency: encoder has no blocks")
    weights = output.spatial_weights[block]
    if weights is None:
        raise ContractError(f"patch_saliency: block {block} has no spatial branch (mode {output.cfg.mode!r})")
    cfg = output.cfg
    saliency = np.zeros(cfg.patches)
    for w, idx in enumerate(window_patch_indices(cfg)):
        saliency[np.asarray(idx)] += weights[w].sum(axis=0)
    return saliency


def heatmap(output: EncoderOutput, block: int = -1) -> np.ndarray:
    """Min-max normalized saliency as a grid x grid map in [0, 1].

    A constant saliency map normalizes to all zeros.
    """
    saliency = patch_saliency(output, block)
    lo, hi = saliency.min(), saliency.max()
    if hi > lo:
        saliency = (saliency - lo) / (hi - lo)
    else:
        saliency = np.zeros_like(saliency)
    g = output.cfg.grid
    return saliency.reshape(g, g)


def heatmap_to_gray(hm: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] heatmap to 8-bit grayscale via round(255 * v)."""
    if hm.min() < 0 or hm.max() > 1:
        raise ContractError(f"heatmap values must lie in [0, 1], got [{hm.min()}, {hm.max()}]")
    return np.rint(hm * 255.0).astype(np.uint8)
