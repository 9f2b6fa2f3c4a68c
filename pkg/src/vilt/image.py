"""Image loading, resizing, RandAugment subset, patchification and patch sampling.

Images are float arrays shaped ``[3, H, W]`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageEnhance, ImageOps

MAX_LEVEL = 30.0

# invert and cutout are deliberately absent
AUGMENT_OPS = (
    "identity",
    "autocontrast",
    "equalize",
    "rotate",
    "solarize",
    "posterize",
    "color",
    "contrast",
    "brightness",
    "sharpness",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)
_SIGNED_OPS = {"rotate", "shear_x", "shear_y", "translate_x", "translate_y",
               "color", "contrast", "brightness", "sharpness"}
FILL = (128, 128, 128)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in {".png", ".ppm"}:
        raise ValueError(f"unsupported image format: {path.suffix} (PNG and PPM only)")
    with Image.open(path) as im:
        return from_pil(im.convert("RGB"))


def save_image(img: np.ndarray, path: str | Path) -> None:
    to_pil(img).save(path)


def from_pil(im: Image.Image) -> np.ndarray:
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def to_pil(img: np.ndarray) -> Image.Image:
    arr = np.clip(np.rint(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def target_size(height: int, width: int, short: int = 384, long_cap: int = 640) -> tuple[int, int]:
    if height <= 0 or width <= 0:
        raise ValueError("cannot resize an empty image")
    scale = short / min(height, width)
    if max(height, width) * scale > long_cap:
        scale = long_cap / max(height, width)
    return max(1, round(height * scale)), max(1, round(width * scale))


def resize_keep_aspect(img: np.ndarray, short: int = 384, long_cap: int = 640) -> np.ndarray:
    """Scale the shorter edge to ``short`` unless that pushes the longer edge past ``long_cap``."""
    _, h, w = img.shape
    size = target_size(h, w, short, long_cap)
    if size == (h, w):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].clamp_(0.0, 1.0).numpy()


# -- augmentation ---------------------------------------------------------------

def op_parameter(name: str, magnitude: float) -> float | int | None:
    """Unsigned parameter of an augmentation op at a given level in [0, 30]."""
    level = magnitude / MAX_LEVEL
    if name == "rotate":
        return 30.0 * level
    if name in ("shear_x", "shear_y"):
        return 0.3 * level
    if name in ("translate_x", "translate_y"):
        return 0.45 * level
    if name == "solarize":
        return 1.0 - level
    if name == "posterize":
        return 8 - int(4 * level)
    if name in ("color", "contrast", "brightness", "sharpness"):
        return 0.9 * level
    return None


def sample_policy(n_ops: int, magnitude: float, rng: np.random.Generator) -> list[tuple[str, float | int | None]]:
    """Draw ``n_ops`` ops uniformly (with replacement) and their signed parameters."""
    if not 0 <= magnitude <= MAX_LEVEL:
        raise ValueError("magnitude must lie in [0, 30]")
    policy = []
    for _ in range(n_ops):
        name = AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))]
        param = op_parameter(name, magnitude)
        if name in _SIGNED_OPS and rng.random() < 0.5:
            param = -param
        if name in ("color", "contrast", "brightness", "sharpness"):
            param = 1.0 + param
        policy.append((name, param))
    return policy


def _apply_op(im: Image.Image, name: str, param) -> Image.Image:
    w, h = im.size
    if name == "identity":
        return im
    if name == "autocontrast":
        return ImageOps.autocontrast(im)
    if name == "equalize":
        return ImageOps.equalize(im)
    if name == "rotate":
        return im.rotate(param, resample=Image.BILINEAR, fillcolor=FILL)
    if name == "solarize":
        return ImageOps.solarize(im, threshold=int(round(param * 255)))
    if name == "posterize":
        return ImageOps.posterize(im, int(param))
    if name == "color":
        return ImageEnhance.Color(im).enhance(param)
    if name == "contrast":
        return ImageEnhance.Contrast(im).enhance(param)
    if name == "brightness":
        return ImageEnhance.Brightness(im).enhance(param)
    if name == "sharpness":
        return ImageEnhance.Sharpness(im).enhance(param)
    if name == "shear_x":
        return im.transform(im.size, Image.AFFINE, (1, param, 0, 0, 1, 0), Image.BILINEAR, fillcolor=FILL)
    if name == "shear_y":
        return im.transform(im.size, Image.AFFINE, (1, 0, 0, param, 1, 0), Image.BILINEAR, fillcolor=FILL)
    if name == "translate_x":
        return im.transform(im.size, Image.AFFINE, (1, 0, param * w, 0, 1, 0), Image.BILINEAR, fillcolor=FILL)
    if name == "translate_y":
        return im.transform(im.size, Image.AFFINE, (1, 0, 0, 0, 1, param * h), Image.BILINEAR, fillcolor=FILL)
    raise ValueError(f"unknown augmentation op {name!r}")


def apply_policy(img: np.ndarray, policy) -> np.ndarray:
    if not policy:
        return img
    im = to_pil(img)
    for name, param in policy:
        im = _apply_op(im, name, param)
    return np.clip(from_pil(im), 0.0, 1.0)


def rand_augment(img: np.ndarray, n_ops: int = 2, magnitude: float = 9, rng: np.random.Generator | None = None):
    """RandAugment without invert/cutout. Returns ``(image, policy)``."""
    rng = np.random.default_rng() if rng is None else rng
    policy = sample_policy(n_ops, magnitude, rng)
    return apply_policy(img, policy), policy


# -- patches ---------------------------------------------------------------------

@dataclass
class PatchBatch:
    """Flattened patches of one image.

    ``patches`` rows are channel-major ``P*P*C`` vectors; ``grid_pos`` holds the
    (row, col) of each row in the full ``grid`` of the image.
    """

    patches: np.ndarray  # [N, P*P*C]
    grid_pos: np.ndarray  # [N, 2] int
    keep_mask: np.ndarray  # [N] bool
    grid: tuple[int, int]
    patch_size: int

    def __len__(self) -> int:
        return self.patches.shape[0]


def patchify(img: np.ndarray, patch_size: int = 32) -> PatchBatch:
    c, h, w = img.shape
    p = patch_size
    gh, gw = math.ceil(h / p), math.ceil(w / p)
    if (gh * p, gw * p) != (h, w):
        padded = np.zeros((c, gh * p, gw * p), dtype=img.dtype)
        padded[:, :h, :w] = img
        img = padded
    patches = img.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    grid_pos = np.stack([rows, cols], axis=1)
    return PatchBatch(np.ascontiguousarray(patches), grid_pos, np.ones(gh * gw, dtype=bool), (gh, gw), p)


def unpatchify(pb: PatchBatch, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`patchify` for a complete (unsampled) grid."""
    gh, gw = pb.grid
    p = pb.patch_size
    if len(pb) != gh * gw:
        raise ValueError("unpatchify needs every patch of the grid")
    order = np.lexsort((pb.grid_pos[:, 1], pb.grid_pos[:, 0]))
    x = pb.patches[order].reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, gh * p, gw * p)


def sample_patches(pb: PatchBatch, max_keep: int = 200, rng: np.random.Generator | None = None) -> PatchBatch:
    """Keep at most ``max_keep`` patches, uniformly without replacement, in original order."""
    if max_keep < 1:
        raise ValueError("max_keep must be >= 1")
    if len(pb) <= max_keep:
        return pb
    rng = np.random.default_rng() if rng is None else rng
    keep = np.sort(rng.choice(len(pb), size=max_keep, replace=False))
    return PatchBatch(pb.patches[keep], pb.grid_pos[keep], pb.keep_mask[keep], pb.grid, pb.patch_size)


def patch_mean_rgb(patches: np.ndarray, channels: int = 3) -> np.ndarray:
    return patches.reshape(patches.shape[0], channels, -1).mean(axis=-1)


def normalize_patches(patches: torch.Tensor, mean, std, channels: int = 3) -> torch.Tensor:
    """Per-channel standardisation of flattened channel-major patch vectors."""
    shape = patches.shape
    x = patches.reshape(*shape[:-1], channels, -1)
    mean = torch.as_tensor(mean, dtype=patches.dtype)[:, None]
    std = torch.as_tensor(std, dtype=patches.dtype)[:, None]
    return ((x - mean) / std).reshape(shape)


def interpolate_pos_grid(pos: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align-corners) resampling of a ``[h0, w0, H]`` position grid to ``[h, w, H]``."""
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"invalid target grid {target}")
    if tuple(pos.shape[:2]) == (h, w):
        return pos
    x = pos.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=True)
    return x[0].permute(1, 2, 0)


@dataclass
class ImageBatch:
    """Padded patches of a batch of images, as model input."""

    patches: torch.Tensor  # [B, N, P*P*C]
    grid_pos: torch.Tensor  # [B, N, 2] long
    mask: torch.Tensor  # [B, N] bool
    grid_shapes: list[tuple[int, int]]

    @property
    def batch_size(self) -> int:
        return self.patches.shape[0]

    def index_select(self, idx) -> "ImageBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageBatch(
            self.patches[idx], self.grid_pos[idx], self.mask[idx],
            [self.grid_shapes[i] for i in idx.tolist()],
        )

    def to(self, dtype: torch.dtype) -> "ImageBatch":
        return ImageBatch(self.patches.to(dtype), self.grid_pos, self.mask, self.grid_shapes)


def collate_patches(items: list[PatchBatch], dtype: torch.dtype = torch.float32) -> ImageBatch:
    n = max(len(pb) for pb in items)
    dim = items[0].patches.shape[1]
    patches = torch.zeros((len(items), n, dim), dtype=dtype)
    grid_pos = torch.zeros((len(items), n, 2), dtype=torch.long)
    mask = torch.zeros((len(items), n), dtype=torch.bool)
    for b, pb in enumerate(items):
        k = len(pb)
        patches[b, :k] = torch.from_numpy(pb.patches).to(dtype)
        grid_pos[b, :k] = torch.from_numpy(pb.grid_pos)
        mask[b, :k] = torch.from_numpy(pb.keep_mask)
    return ImageBatch(patches, grid_pos, mask, [pb.grid for pb in items])
