"""The dual-head completion model: hierarchical windowed-attention encoder,
polar cross-attention fusion, an RGB outpainting head and a class-logit
segmentation head, plus weight (de)serialization and a small AdamW loop.

Layout: a (H, W, 3) fisheye frame (zeroed beyond the FoV) is patch-embedded
and run through four stages of transformer blocks with 2x patch merging
between stages. The deepest map is fused across branches by polar cross
attention; the segmentation branch feeds a pyramid-pooling + FPN decoder, the
completion branch a top-down decoder whose full-resolution RGB output is
overwritten by the input inside the FoV ("copy mode"), so only the blind
area is ever hallucinated.

Weight files: little-endian, magic "FDW1", u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw f32 data, sorted
by name. The name set is a pure function of the config (see
``expected_shapes``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, SwinBlockParams, WindowGrid, linear,
                        swin_block)
from .geometry import CircularMask
from .polar import DIRECTIONS, PcaDirectionParams, PcaParams, generate_polar_masks
from .polar import pca_forward

MAGIC = b"FDW1"
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class WeightMismatchError(ValueError):
    """Weight map does not match the config's expected parameter set."""

    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(
            f"weights do not match config: missing {self.missing or 'none'}, "
            f"extra {self.extra or 'none'}")


class WeightFormatError(ValueError):
    """Malformed weight file; ``offset`` points at the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of everything; four stages with doubling widths.

    ``height``/``width`` must be divisible by patch * 8 (three 2x merges
    after the patch embed), and every stage grid must be divisible by its
    effective window min(window, grid side).
    """

    height: int = 64
    width: int = 64
    patch: int = 4
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    window: int = 4
    num_classes: int = 6
    n_mask: int = 4
    pca_direction: str = "Bi"
    ignore_index: int = 255
    seed: int = 0

    def __post_init__(self):
        unit = self.patch * 8
        if self.height % unit or self.width % unit:
            raise ValueError(
                f"input {self.height}x{self.width} must be divisible by "
                f"patch*8={unit}")
        if not (len(self.widths) == len(self.depths) == len(self.heads) == 4):
            raise ValueError("widths/depths/heads must all have four stages")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ValueError(f"stage widths must double, got {self.widths}")
        for c, h in zip(self.widths, self.heads):
            if c % h:
                raise ValueError(f"{h} heads do not divide width {c}")
        if self.pca_direction not in DIRECTIONS:
            raise ValueError(
                f"pca_direction must be one of {DIRECTIONS}, got "
                f"{self.pca_direction!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        gh, gw = self.stage_grid(3)
        if self.n_mask > gh * gw:
            raise ValueError(
                f"n_mask={self.n_mask} exceeds the deepest grid's "
                f"{gh * gw} tokens")
        for i in range(4):
            gh, gw = self.stage_grid(i)
            n = self.stage_window(i)
            if gh % n or gw % n:
                raise ValueError(
                    f"stage {i + 1} grid {gh}x{gw} not divisible by its "
                    f"window {n}; adjust window/patch/input size")

    def stage_grid(self, i: int) -> tuple[int, int]:
        return (self.height // self.patch // 2 ** i,
                self.width // self.patch // 2 ** i)

    def stage_window(self, i: int) -> int:
        gh, gw = self.stage_grid(i)
        return min(self.window, gh, gw)

    def stage_shift(self, i: int, block: int) -> int:
        gh, gw = self.stage_grid(i)
        n = self.stage_window(i)
        if block % 2 == 0 or (n == gh and n == gw):
            return 0  # shifting a single whole-map window is a no-op
        return n // 2

    @property
    def decoder_dim(self) -> int:
        return self.widths[0]

    @property
    def bottleneck_dim(self) -> int:
        return max(self.widths[3] // 2, 1)

    @property
    def pca_prefixes(self) -> tuple[str, ...]:
        return {"P2S": ("pca.p2s.",), "S2P": ("pca.s2p.",),
                "Bi": ("pca.p2s.", "pca.s2p.")}[self.pca_direction]


_PPM_POOLS = (1, 2, 4)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable parameter's name and shape, in build order."""
    p2 = cfg.patch * cfg.patch
    d = cfg.decoder_dim
    c4 = cfg.widths[3]
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (3 * p2, cfg.widths[0]),
        "embed.bias": (cfg.widths[0],),
    }
    for i in range(4):
        c = cfg.widths[i]
        for j in range(cfg.depths[i]):
            base = f"stage{i + 1}.block{j + 1}."
            shapes[base + "ln1.gamma"] = (c,)
            shapes[base + "ln1.beta"] = (c,)
            for name in ("wq", "wk", "wv", "wo"):
                shapes[base + "attn." + name] = (c, c)
            shapes[base + "ln2.gamma"] = (c,)
            shapes[base + "ln2.beta"] = (c,)
            shapes[base + "mlp.w1"] = (c, 4 * c)
            shapes[base + "mlp.b1"] = (4 * c,)
            shapes[base + "mlp.w2"] = (4 * c, c)
            shapes[base + "mlp.b2"] = (c,)
        if i < 3:
            shapes[f"merge{i + 1}.norm.gamma"] = (4 * c,)
            shapes[f"merge{i + 1}.norm.beta"] = (4 * c,)
            shapes[f"merge{i + 1}.weight"] = (4 * c, cfg.widths[i + 1])
    for prefix in cfg.pca_prefixes:
        shapes[prefix + "ls.weight"] = (c4, c4)
        shapes[prefix + "ls.bias"] = (c4,)
        shapes[prefix + "lc.weight"] = (c4, c4)
        shapes[prefix + "lc.bias"] = (c4,)
        for name in ("pq", "pk", "pv"):
            shapes[prefix + name] = (c4, c4)
        shapes[prefix + "bn.w1"] = (c4, cfg.bottleneck_dim)
        shapes[prefix + "bn.b1"] = (cfg.bottleneck_dim,)
        shapes[prefix + "bn.w2"] = (cfg.bottleneck_dim, c4)
        shapes[prefix + "bn.b2"] = (c4,)
    for i in range(4):
        shapes[f"paint.lateral{i + 1}.weight"] = (cfg.widths[i], d)
        shapes[f"paint.lateral{i + 1}.bias"] = (d,)
    for name in ("conv1", "conv2"):
        shapes[f"paint.{name}.weight"] = (9 * d, d)
        shapes[f"paint.{name}.bias"] = (d,)
    shapes["paint.proj.weight"] = (d, 3 * p2)
    shapes["paint.proj.bias"] = (3 * p2,)
    for s in _PPM_POOLS:
        shapes[f"seg.ppm{s}.weight"] = (c4, d)
        shapes[f"seg.ppm{s}.bias"] = (d,)
    shapes["seg.ppm_fuse.weight"] = (c4 + len(_PPM_POOLS) * d, d)
    shapes["seg.ppm_fuse.bias"] = (d,)
    for i in range(3):
        shapes[f"seg.lateral{i + 1}.weight"] = (cfg.widths[i], d)
        shapes[f"seg.lateral{i + 1}.bias"] = (d,)
    shapes["seg.fuse.weight"] = (4 * d, d)
    shapes["seg.fuse.bias"] = (d,)
    shapes["seg.cls.weight"] = (d, cfg.num_classes)
    shapes["seg.cls.bias"] = (cfg.num_classes,)
    return shapes


# residual-path output projections start at zero so fresh blocks are identity
_ZERO_INIT_SUFFIXES = ("attn.wo", "mlp.w2", "bn.w2")


def init_weights(cfg: ModelConfig) -> dict[str, T.Tensor]:
    """Deterministic init from cfg.seed: trunc-normal(0.02) projections,
    unit norm gains, zero biases and residual output projections."""
    rng = np.random.default_rng(cfg.seed)
    weights: dict[str, T.Tensor] = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(("gamma",)):
            data = np.ones(shape, np.float32)
        elif name.endswith(("beta", "bias", ".b1", ".b2")) or \
                name.endswith(_ZERO_INIT_SUFFIXES):
            data = np.zeros(shape, np.float32)
        else:
            data = np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02
        weights[name] = T.Tensor(np.asarray(data, np.float32), requires_grad=True)
    return weights


def check_weights(cfg: ModelConfig, weights: dict[str, T.Tensor]) -> None:
    expected = expected_shapes(cfg)
    missing = expected.keys() - weights.keys()
    extra = weights.keys() - expected.keys()
    if missing or extra:
        raise WeightMismatchError(missing, extra)
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise WeightMismatchError(
                [f"{name} (shape {weights[name].shape}, expected {shape})"], [])


# ---------------------------------------------------------------------------
# forward

def _space_to_depth(x: T.Tensor, f: int) -> T.Tensor:
    h, w, c = x.shape
    x = T.reshape(x, (h // f, f, w // f, f, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (h // f, w // f, f * f * c))


def _depth_to_space(x: T.Tensor, f: int) -> T.Tensor:
    h, w, fc = x.shape
    c = fc // (f * f)
    x = T.reshape(x, (h, w, f, f, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (h * f, w * f, c))


def _conv3x3(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    h, wd, _ = x.shape
    y = linear(T.im2col3x3(x), w, b)
    return T.reshape(y, (h, wd, y.shape[-1]))


def _block_params(weights, prefix: str, heads: int) -> SwinBlockParams:
    g = lambda n: weights[prefix + n]
    return SwinBlockParams(
        ln1_gamma=g("ln1.gamma"), ln1_beta=g("ln1.beta"),
        attn=AttentionParams(wq=g("attn.wq"), wk=g("attn.wk"),
                             wv=g("attn.wv"), wo=g("attn.wo"), num_heads=heads),
        ln2_gamma=g("ln2.gamma"), ln2_beta=g("ln2.beta"),
        mlp_w1=g("mlp.w1"), mlp_b1=g("mlp.b1"),
        mlp_w2=g("mlp.w2"), mlp_b2=g("mlp.b2"))


def _pca_params(cfg: ModelConfig, weights) -> PcaParams:
    def direction(prefix):
        g = lambda n: weights[prefix + n]
        return PcaDirectionParams(
            l_s_w=g("ls.weight"), l_s_b=g("ls.bias"),
            l_c_w=g("lc.weight"), l_c_b=g("lc.bias"),
            pq=g("pq"), pk=g("pk"), pv=g("pv"),
            bn_w1=g("bn.w1"), bn_b1=g("bn.b1"),
            bn_w2=g("bn.w2"), bn_b2=g("bn.b2"))

    return PcaParams(
        direction=cfg.pca_direction, num_heads=cfg.heads[3],
        p2s=direction("pca.p2s.") if "pca.p2s." in cfg.pca_prefixes else None,
        s2p=direction("pca.s2p.") if "pca.s2p." in cfg.pca_prefixes else None)


def _encoder(x: T.Tensor, cfg: ModelConfig, weights) -> list[T.Tensor]:
    z = linear(_space_to_depth(x, cfg.patch), weights["embed.weight"],
               weights["embed.bias"])
    feats = []
    for i in range(4):
        gh, gw = cfg.stage_grid(i)
        n = cfg.stage_window(i)
        for j in range(cfg.depths[i]):
            grid = WindowGrid(gh, gw, cfg.widths[i], n, cfg.stage_shift(i, j))
            z = swin_block(z, _block_params(weights, f"stage{i + 1}.block{j + 1}.",
                                            cfg.heads[i]), grid)
        feats.append(z)
        if i < 3:
            m = _space_to_depth(z, 2)
            m = T.layer_norm(m, weights[f"merge{i + 1}.norm.gamma"],
                             weights[f"merge{i + 1}.norm.beta"])
            z = T.matmul(m, weights[f"merge{i + 1}.weight"])
    return feats


def _paint_head(feats, cfg: ModelConfig, weights) -> T.Tensor:
    g = lambda n: weights["paint." + n]
    top = None
    for i in (3, 2, 1, 0):
        lat = linear(feats[i], g(f"lateral{i + 1}.weight"), g(f"lateral{i + 1}.bias"))
        top = lat if top is None else T.add(lat, T.upsample_nearest(top, 2))
    y = T.gelu(_conv3x3(top, g("conv1.weight"), g("conv1.bias")))
    y = T.gelu(_conv3x3(y, g("conv2.weight"), g("conv2.bias")))
    y = linear(y, g("proj.weight"), g("proj.bias"))
    return _depth_to_space(y, cfg.patch)


def _seg_head(feats, cfg: ModelConfig, weights) -> T.Tensor:
    g = lambda n: weights["seg." + n]
    deep = feats[3]
    g4 = deep.shape[:2]
    pooled = [deep]
    for s in _PPM_POOLS:
        p = linear(T.adaptive_avg_pool(deep, (s, s)), g(f"ppm{s}.weight"),
                   g(f"ppm{s}.bias"))
        pooled.append(T.upsample_bilinear(p, g4))
    top = T.gelu(linear(T.concat(pooled, axis=-1), g("ppm_fuse.weight"),
                        g("ppm_fuse.bias")))
    pyramid = [top]
    for i in (2, 1, 0):
        lat = linear(feats[i], g(f"lateral{i + 1}.weight"), g(f"lateral{i + 1}.bias"))
        top = T.add(lat, T.upsample_nearest(top, 2))
        pyramid.append(top)
    g1 = feats[0].shape[:2]
    fused = T.concat([p if p.shape[:2] == g1 else T.upsample_bilinear(p, g1)
                      for p in pyramid], axis=-1)
    fused = T.gelu(linear(fused, g("fuse.weight"), g("fuse.bias")))
    logits = linear(fused, g("cls.weight"), g("cls.bias"))
    return T.upsample_bilinear(logits, (cfg.height, cfg.width))


def forward(x, fov_mask: CircularMask, cfg: ModelConfig,
            weights: dict[str, T.Tensor]) -> tuple[T.Tensor, T.Tensor]:
    """Full-frame (rgb, logits) from a fisheye frame and its FoV mask.

    ``x`` is (H, W, 3) in [0, 1]; it is multiplied by the mask, so content
    beyond the FoV never reaches the encoder. Deterministic given weights.
    """
    check_weights(cfg, weights)
    if not isinstance(x, T.Tensor):
        x = T.Tensor(x)
    if x.shape != (cfg.height, cfg.width, 3):
        raise ValueError(
            f"input shape {x.shape} does not match config "
            f"({cfg.height}, {cfg.width}, 3)")
    if (fov_mask.height, fov_mask.width) != (cfg.height, cfg.width):
        raise ValueError("FoV mask dims do not match the config")
    mask = T.Tensor(fov_mask.data.astype(np.float32)[..., None])
    x = T.mul(x, mask)

    feats = _encoder(x, cfg, weights)
    downscale = cfg.patch * 8
    gh, gw = cfg.stage_grid(3)
    polar = generate_polar_masks(gh, gw, cfg.n_mask,
                                 r_max=fov_mask.radius / downscale)
    z_s, z_c = pca_forward(feats[3], feats[3], polar, _pca_params(cfg, weights))

    logits = _seg_head(feats[:3] + [z_s], cfg, weights)
    rgb_hall = _paint_head(feats[:3] + [z_c], cfg, weights)
    # copy mode: the observed disc is pasted back verbatim
    rgb = T.add(T.mul(x, mask), T.mul(rgb_hall, T.add(T.Tensor(1.0), T.neg(mask))))
    return rgb, logits


def loss(rgb_out: T.Tensor, logits: T.Tensor, rgb_gt, label_gt,
         fov_mask: CircularMask | None = None,
         ignore_index: int | None = None) -> T.Tensor:
    """Full-frame L1 + cross-entropy (weight 1). ``fov_mask`` is accepted for
    signature symmetry with forward; both terms score the whole frame."""
    rgb_gt = rgb_gt if isinstance(rgb_gt, T.Tensor) else T.Tensor(rgb_gt)
    if rgb_out.shape != rgb_gt.shape:
        raise ValueError(f"rgb shapes differ: {rgb_out.shape} vs {rgb_gt.shape}")
    h, w, k = logits.shape
    labels = np.asarray(label_gt)
    if labels.shape != (h, w):
        raise ValueError(f"label shape {labels.shape} != ({h}, {w})")
    ce = T.cross_entropy(T.reshape(logits, (h * w, k)), labels.reshape(-1),
                         ignore_index=ignore_index)
    return T.add(T.l1_loss(rgb_out, rgb_gt), ce)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class Sample:
    """One in-memory training example: full-FoV image + mask + labels."""

    image: np.ndarray
    mask: CircularMask
    labels: np.ndarray


def train_toy(samples, cfg: ModelConfig, steps: int, lr: float,
              weight_decay: float = 1e-2,
              weights: dict[str, T.Tensor] | None = None):
    """Full-batch AdamW; returns (weights, per-step mean loss curve).

    Deterministic under a fixed cfg.seed and sample order. Raises
    TrainingDivergedError as soon as the loss stops being finite.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    if weights is None:
        weights = init_weights(cfg)
    else:
        check_weights(cfg, weights)
    names = list(weights)
    m = {n: np.zeros_like(weights[n].data) for n in names}
    v = {n: np.zeros_like(weights[n].data) for n in names}
    curve = []
    for step in range(1, steps + 1):
        for n in names:
            weights[n].grad = None
        total = 0.0
        for s in samples:
            with T.Tape() as tape:
                rgb, logits = forward(s.image, s.mask, cfg, weights)
                step_loss = loss(rgb, logits, s.image, s.labels,
                                 fov_mask=s.mask, ignore_index=cfg.ignore_index)
            tape.backward(step_loss)
            total += step_loss.item()
        mean_loss = total / len(samples)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(step)
        curve.append(mean_loss)
        bc1 = 1.0 - _ADAM_BETA1 ** step
        bc2 = 1.0 - _ADAM_BETA2 ** step
        for n in names:
            w = weights[n]
            g = (np.zeros_like(w.data) if w.grad is None
                 else w.grad / len(samples))
            m[n] = _ADAM_BETA1 * m[n] + (1 - _ADAM_BETA1) * g
            v[n] = _ADAM_BETA2 * v[n] + (1 - _ADAM_BETA2) * g * g
            update = (m[n] / bc1) / (np.sqrt(v[n] / bc2) + _ADAM_EPS)
            w.data = (w.data - lr * (update + weight_decay * w.data)).astype(np.float32)
    return weights, curve


# ---------------------------------------------------------------------------
# serialization

def save_weights(path, weights: dict[str, T.Tensor]) -> None:
    """Write the FDW1 container, tensors sorted by name for reproducibility."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            data = weights[name].data
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, "<f4").tobytes())


def load_weights(path, expected: dict[str, tuple[int, ...]] | None = None
                 ) -> dict[str, T.Tensor]:
    """Read an FDW1 file; with ``expected`` shapes, unknown names and shape
    drift are format errors pointing at the offending offset."""
    with open(path, "rb") as f:
        blob = f.read()

    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise WeightFormatError(f"truncated while reading {what}", offset)
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFormatError(f"bad magic, expected {MAGIC!r}", 0)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    weights: dict[str, T.Tensor] = {}
    for _ in range(count):
        name_at = offset
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if expected is not None and name not in expected:
            raise WeightFormatError(f"unknown tensor name {name!r}", name_at)
        if name in weights:
            raise WeightFormatError(f"duplicate tensor name {name!r}", name_at)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        if expected is not None and tuple(dims) != tuple(expected[name]):
            raise WeightFormatError(
                f"tensor {name!r} has shape {dims}, expected {expected[name]}",
                name_at)
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * n_items, f"data of {name!r}")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        weights[name] = T.Tensor(data, requires_grad=True)
    if offset != len(blob):
        raise WeightFormatError("trailing bytes after last tensor", offset)
    if expected is not None:
        missing = expected.keys() - weights.keys()
        if missing:
            raise WeightFormatError(
                f"missing tensors: {sorted(missing)}", offset)
    return weights
