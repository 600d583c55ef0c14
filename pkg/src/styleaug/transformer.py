"""Restyling network: encoder, residual trunk, decoder.

The network maps a content image plus a style embedding to a restyled
image of the same size.  Style enters through conditional instance
normalization: each conditioned layer renormalizes its feature map to
zero mean / unit variance per channel and then applies a scale and
shift produced from the embedding by a learned affine map.  The three
encoder convolutions use plain (unconditioned) instance normalization
with learned per-layer scale/shift; everything after them is
conditioned.  The final 3-channel convolution feeds a sigmoid, so
outputs always land in [0, 1].

Desk profile: encoder convs 3->32 (9x9, stride 1), 32->64 (3x3, stride
2), 64->128 (3x3, stride 2); five 128-channel residual blocks; two
nearest-neighbor-upsample + conv decoder stages; 9x9 output conv.  All
convolutions use reflection padding.  Total downsampling factor 4;
`stylize` pads inputs internally when their dims are not multiples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import weights as weight_io
from .embedding import DEFAULT_EMBED_DIM, validate_embedding
from .errors import InvalidInputError
from .images import from_tensor, pad_to_multiple, to_tensor, validate_image

CIN_EPS = 1e-5
MIN_INPUT_SIZE = 8  # reflection padding of the 9x9 stem needs >= 5 px; 8 keeps margins sane


@dataclass(frozen=True)
class CINParams:
    """Per-channel scale and shift for one conditioned layer."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64).ravel()
        b = np.asarray(self.beta, dtype=np.float64).ravel()
        if g.shape != b.shape:
            raise InvalidInputError("gamma and beta must have equal length")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            raise InvalidInputError("CIN parameters must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)


def instance_norm_tensor(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float
) -> torch.Tensor:
    """Normalize (N, C, H, W) per instance and channel, then scale and shift.

    Uses the population variance over the spatial axes; ``eps`` keeps
    constant channels finite (they collapse onto beta).
    """
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    xhat = (x - mu) / torch.sqrt(var + eps)
    return gamma.unsqueeze(-1).unsqueeze(-1) * xhat + beta.unsqueeze(-1).unsqueeze(-1)


def conditional_instance_norm(
    x: np.ndarray, params: CINParams, eps: float = CIN_EPS
) -> np.ndarray:
    """Renormalize a (C, H, W) feature map with explicit per-channel params."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"feature map must be (C, H, W), got {arr.shape}")
    if arr.shape[1] * arr.shape[2] < 1:
        raise InvalidInputError("feature map needs at least one spatial position")
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if params.gamma.shape[0] != arr.shape[0]:
        raise InvalidInputError(
            f"params have {params.gamma.shape[0]} channels, feature map has {arr.shape[0]}"
        )
    t = torch.from_numpy(arr).unsqueeze(0)
    out = instance_norm_tensor(
        t, torch.from_numpy(params.gamma).unsqueeze(0),
        torch.from_numpy(params.beta).unsqueeze(0), eps,
    )
    return out.squeeze(0).numpy()


class ConditionalInstanceNorm2d(nn.Module):
    """Instance norm whose scale/shift are affine functions of an embedding."""

    def __init__(self, channels: int, embed_dim: int, eps: float = CIN_EPS):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma_fc = nn.Linear(embed_dim, channels)
        self.beta_fc = nn.Linear(embed_dim, channels)
        # Start close to an unconditioned instance norm: small projections,
        # gamma biased at one, beta at zero.
        nn.init.normal_(self.gamma_fc.weight, std=0.02)
        nn.init.normal_(self.beta_fc.weight, std=0.02)
        nn.init.ones_(self.gamma_fc.bias)
        nn.init.zeros_(self.beta_fc.bias)

    def params_for(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gamma_fc(z), self.beta_fc(z)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.params_for(z)
        return instance_norm_tensor(x, gamma, beta, self.eps)


class _ConvBlock(nn.Module):
    """Reflection-padded conv + unconditioned instance norm + ReLU."""

    def __init__(self, in_ch, out_ch, kernel, stride):
        super().__init__()
        self.pad = nn.ReflectionPad2d(kernel // 2)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(self.pad(x))))


class _ResidualBlock(nn.Module):
    def __init__(self, channels, embed_dim):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.norm1 = ConditionalInstanceNorm2d(channels, embed_dim)
        self.conv2 = nn.Conv2d(channels, channels, 3)
        self.norm2 = ConditionalInstanceNorm2d(channels, embed_dim)

    def forward(self, x, z):
        h = F.relu(self.norm1(self.conv1(self.pad(x)), z))
        h = self.norm2(self.conv2(self.pad(h)), z)
        return x + h


class _UpsampleBlock(nn.Module):
    def __init__(self, in_ch, out_ch, embed_dim):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(in_ch, out_ch, 3)
        self.norm = ConditionalInstanceNorm2d(out_ch, embed_dim)

    def forward(self, x, z):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(self.pad(x)), z))


class StyleTransformer(nn.Module):
    """Fully convolutional restyling network conditioned on an embedding."""

    DOWNSAMPLE_FACTOR = 4

    def __init__(self, embed_dim: int = DEFAULT_EMBED_DIM, base_channels: int = 32,
                 num_residual: int = 5):
        super().__init__()
        self.embed_dim = embed_dim
        self.base_channels = base_channels
        self.num_residual = num_residual
        c1, c2, c3 = base_channels, base_channels * 2, base_channels * 4
        self.enc1 = _ConvBlock(3, c1, 9, 1)
        self.enc2 = _ConvBlock(c1, c2, 3, 2)
        self.enc3 = _ConvBlock(c2, c3, 3, 2)
        self.residual = nn.ModuleList(
            _ResidualBlock(c3, embed_dim) for _ in range(num_residual)
        )
        self.dec1 = _UpsampleBlock(c3, c2, embed_dim)
        self.dec2 = _UpsampleBlock(c2, c1, embed_dim)
        self.out_pad = nn.ReflectionPad2d(4)
        self.out_conv = nn.Conv2d(c1, 3, 9)

    def conditioned_layers(self) -> dict[str, ConditionalInstanceNorm2d]:
        """Conditioned normalization layers keyed by stable layer id."""
        layers: dict[str, ConditionalInstanceNorm2d] = {}
        for i, block in enumerate(self.residual, start=1):
            layers[f"res{i}a"] = block.norm1
            layers[f"res{i}b"] = block.norm2
        layers["dec1"] = self.dec1.norm
        layers["dec2"] = self.dec2.norm
        return layers

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        h = self.enc3(self.enc2(self.enc1(x)))
        for block in self.residual:
            h = block(h, z)
        h = self.dec2(self.dec1(h, z), z)
        return torch.sigmoid(self.out_conv(self.out_pad(h)))

    # -- persistence ------------------------------------------------------

    def meta(self) -> dict:
        return {
            "kind": "transformer",
            "embed_dim": self.embed_dim,
            "base_channels": self.base_channels,
            "num_residual": self.num_residual,
        }

    def save(self, path) -> None:
        weight_io.save_weight_archive(weight_io.state_dict_to_arrays(self), path, self.meta())

    @classmethod
    def load(cls, path) -> "StyleTransformer":
        tensors, meta = weight_io.load_weight_archive(path)
        net = cls(
            embed_dim=int(meta.get("embed_dim", DEFAULT_EMBED_DIM)),
            base_channels=int(meta.get("base_channels", 32)),
            num_residual=int(meta.get("num_residual", 5)),
        )
        weight_io.load_arrays_into_module(net, tensors, archive_name=str(path))
        net.eval()
        return net


def cin_params_from_embedding(
    z, layer_id: str, net: StyleTransformer
) -> CINParams:
    """Scale/shift a conditioned layer would use for embedding ``z``."""
    layers = net.conditioned_layers()
    if layer_id not in layers:
        raise InvalidInputError(
            f"'{layer_id}' is not a conditioned layer; valid ids: {sorted(layers)}"
        )
    vec = validate_embedding(z, dim=net.embed_dim, name="z")
    layer = layers[layer_id]
    with torch.no_grad():
        zt = torch.from_numpy(vec).to(torch.float32).unsqueeze(0)
        gamma, beta = layer.params_for(zt)
    return CINParams(gamma.squeeze(0).numpy(), beta.squeeze(0).numpy())


def stylize_batch(
    batch: torch.Tensor, z: torch.Tensor, net: StyleTransformer
) -> torch.Tensor:
    """Restyle a (N, 3, H, W) batch with per-sample embeddings (N, D)."""
    if batch.shape[2] < MIN_INPUT_SIZE or batch.shape[3] < MIN_INPUT_SIZE:
        raise InvalidInputError(
            f"input spatial dims must be >= {MIN_INPUT_SIZE}, got "
            f"{tuple(batch.shape[2:])}"
        )
    padded, h, w = pad_to_multiple(batch, net.DOWNSAMPLE_FACTOR)
    out = net(padded, z)
    return out[:, :, :h, :w].clamp(0.0, 1.0)


def stylize(content: np.ndarray, z, net: StyleTransformer) -> np.ndarray:
    """Restyle one image; output matches the input's spatial dims.

    Deterministic given (content, z, weights).  With ``z`` equal to the
    image's own predicted embedding the output stays close to the input;
    embeddings sampled from a fitted distribution give random restyles.
    """
    validate_image(content, name="content")
    vec = validate_embedding(z, dim=net.embed_dim, name="z")
    x = to_tensor(content)
    zt = torch.from_numpy(vec).to(torch.float32).unsqueeze(0)
    net.eval()
    with torch.no_grad():
        out = stylize_batch(x, zt, net)
    return from_tensor(out)
