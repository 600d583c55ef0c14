"""Image representation and I/O helpers.

Throughout the package an image is a ``float32`` numpy array of shape
(H, W, 3) with values in [0, 1].  Networks operate on torch tensors of
shape (N, 3, H, W); the converters below are the only place that mapping
lives.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError


def validate_image(image: np.ndarray, *, name: str = "image") -> np.ndarray:
    """Check the (H, W, 3) float [0, 1] contract and return the array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(
            f"{name} must have shape (H, W, 3), got {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        raise InvalidInputError(f"{name} must be a float array, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return arr.astype(np.float32, copy=False)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) numpy -> (1, 3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)

def batch_to_tensor(batch: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) numpy -> (N, 3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(batch, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


def from_tensor(x: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float32 numpy."""
    if x.dim() == 4:
        x = x.squeeze(0)
    return x.detach().permute(1, 2, 0).contiguous().numpy().astype(np.float32)

def batch_from_tensor(x: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) tensor -> (N, H, W, 3) float32 numpy."""
    return x.detach().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)


def load_image(path) -> np.ndarray:
    """Decode an image file into the (H, W, 3) float [0, 1] form."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) float [0, 1] array as an 8-bit PNG/JPEG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, int, int]:
    """Reflection-pad (N, C, H, W) so H and W are multiples of ``multiple``.

    Returns the padded tensor and the original (H, W) for cropping back.
    """
    h, w = int(x.shape[2]), int(x.shape[3])
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, h, w
