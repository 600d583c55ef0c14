"""Feature-space losses for style transfer.

A frozen convolutional feature extractor provides activations; style is
summarized by per-layer Gram matrices and content by raw activations at
deeper layers.  The content loss sums, over the configured content
layers, the squared Frobenius distance between activations scaled by
1/n_i; the style loss does the same for Gram matrices of the style
layers.  Here n_i is the layer's channel count, and Gram matrices are
normalized by C*H*W, which makes the style term independent of image
resolution.  The joint objective is ``content + lambda * style``.

Desk feature extractor ("desk" profile)
---------------------------------------
Eight 3x3 convolutions with ReLU, zero biases, and fixed weights
generated from a frozen seed (so every install sees identical
parameters).  Layers are indexed 1..8; defaults use content layer {6}
and style layers {1, 3, 5, 7}.  Shapes for a 64x64 input:

    layer  channels  stride  output
      1       16        1     64x64
      2       16        1     64x64
      3       32        2     32x32
      4       32        1     32x32
      5       48        1     32x32
      6       48        1     32x32
      7       64        1     32x32
      8       64        2     16x16

A conventional pretrained extractor can be swapped in through the
weight-archive format (`LossNetwork.from_archive`).
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F

from . import weights as weight_io
from .errors import InvalidInputError, NumericError
from .images import from_tensor, to_tensor, validate_image

DESK_CHANNELS = (16, 16, 32, 32, 48, 48, 64, 64)
DESK_STRIDES = (1, 1, 2, 1, 1, 1, 1, 2)
DESK_CONTENT_LAYERS = (6,)
DESK_STYLE_LAYERS = (1, 3, 5, 7)
_DESK_WEIGHT_SEED = 73

DEFAULT_STYLE_WEIGHT = 1e4  # desk-scale lambda balancing the two terms


class LossNetwork:
    """Frozen feature extractor plus content/style layer configuration.

    Immutable after construction: parameters never receive gradients and
    `weights_hash` is stable across calls, so concurrent use is safe.
    """

    def __init__(
        self,
        conv_weights: list[np.ndarray],
        conv_biases: list[np.ndarray],
        strides: tuple[int, ...],
        content_layers=DESK_CONTENT_LAYERS,
        style_layers=DESK_STYLE_LAYERS,
        dtype: torch.dtype = torch.float32,
    ):
        if len(conv_weights) != len(conv_biases) or len(conv_weights) != len(strides):
            raise InvalidInputError("conv_weights, conv_biases and strides must align")
        if not conv_weights:
            raise InvalidInputError("feature extractor needs at least one layer")
        self._np_weights = [np.asarray(w, dtype=np.float64) for w in conv_weights]
        self._np_biases = [np.asarray(b, dtype=np.float64) for b in conv_biases]
        self.strides = tuple(int(s) for s in strides)
        self.num_layers = len(conv_weights)
        available = set(range(1, self.num_layers + 1))
        self.content_layers = tuple(sorted(int(i) for i in content_layers))
        self.style_layers = tuple(sorted(int(i) for i in style_layers))
        for name, layers in (("content", self.content_layers), ("style", self.style_layers)):
            if not layers:
                raise InvalidInputError(f"{name} layer set must be non-empty")
            bad = set(layers) - available
            if bad:
                raise InvalidInputError(
                    f"{name} layers {sorted(bad)} are not in 1..{self.num_layers}"
                )
        self.dtype = dtype
        self._convs = []
        for w, b, s in zip(self._np_weights, self._np_biases, self.strides):
            conv = torch.nn.Conv2d(
                w.shape[1], w.shape[0], kernel_size=w.shape[2], stride=s,
                padding=w.shape[2] // 2,
            )
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(w))
                conv.bias.copy_(torch.from_numpy(b))
            conv.requires_grad_(False)
            self._convs.append(conv.to(dtype))
        # channel count doubles as the per-layer unit count n_i
        self.unit_counts = {
            i + 1: self._np_weights[i].shape[0] for i in range(self.num_layers)
        }

    @property
    def available_layers(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_layers + 1))

    @classmethod
    def desk(cls, content_layers=DESK_CONTENT_LAYERS, style_layers=DESK_STYLE_LAYERS,
             dtype: torch.dtype = torch.float32) -> "LossNetwork":
        """The fixed desk extractor; weights derive from a frozen seed."""
        rng = np.random.RandomState(_DESK_WEIGHT_SEED)
        ws, bs = [], []
        in_ch = 3
        for out_ch in DESK_CHANNELS:
            std = np.sqrt(2.0 / (in_ch * 9))
            ws.append(rng.standard_normal((out_ch, in_ch, 3, 3)) * std)
            bs.append(np.zeros(out_ch))
            in_ch = out_ch
        return cls(ws, bs, DESK_STRIDES, content_layers, style_layers, dtype)

    @classmethod
    def from_archive(cls, path, content_layers=None, style_layers=None,
                     dtype: torch.dtype = torch.float32) -> "LossNetwork":
        tensors, meta = weight_io.load_weight_archive(path)
        n = int(meta.get("num_layers", len(tensors) // 2))
        ws = [tensors[f"conv{i}.weight"] for i in range(1, n + 1)]
        bs = [tensors[f"conv{i}.bias"] for i in range(1, n + 1)]
        strides = tuple(meta.get("strides", [1] * n))
        return cls(
            ws, bs, strides,
            content_layers or tuple(meta.get("content_layers", DESK_CONTENT_LAYERS)),
            style_layers or tuple(meta.get("style_layers", DESK_STYLE_LAYERS)),
            dtype,
        )

    def save(self, path) -> None:
        tensors = {}
        for i, (w, b) in enumerate(zip(self._np_weights, self._np_biases), start=1):
            tensors[f"conv{i}.weight"] = w.astype(np.float32)
            tensors[f"conv{i}.bias"] = b.astype(np.float32)
        meta = {
            "kind": "loss-network",
            "num_layers": self.num_layers,
            "strides": list(self.strides),
            "content_layers": list(self.content_layers),
            "style_layers": list(self.style_layers),
        }
        weight_io.save_weight_archive(tensors, path, meta)

    def to_dtype(self, dtype: torch.dtype) -> "LossNetwork":
        if dtype == self.dtype:
            return self
        return LossNetwork(
            self._np_weights, self._np_biases, self.strides,
            self.content_layers, self.style_layers, dtype,
        )

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self._np_weights, self._np_biases):
            h.update(w.astype("<f8").tobytes())
            h.update(b.astype("<f8").tobytes())
        return h.hexdigest()

    def features_tensor(
        self, x: torch.Tensor, layers=None
    ) -> dict[int, torch.Tensor]:
        """Activations after each requested layer for a (N, 3, H, W) batch."""
        wanted = set(self.available_layers if layers is None else layers)
        unknown = wanted - set(self.available_layers)
        if unknown:
            raise InvalidInputError(
                f"unknown feature layers {sorted(unknown)}; available: 1..{self.num_layers}"
            )
        out: dict[int, torch.Tensor] = {}
        h = x
        for i, conv in enumerate(self._convs, start=1):
            h = F.relu(conv(h))
            if i in wanted:
                out[i] = h
            if len(out) == len(wanted):
                break
        return out


def extract_features(image: np.ndarray, layers, net: LossNetwork) -> dict[int, np.ndarray]:
    """Feature maps (C, H, W) of a single image for the requested layers."""
    validate_image(image)
    x = to_tensor(image).to(net.dtype)
    with torch.no_grad():
        feats = net.features_tensor(x, layers)
    return {i: f.squeeze(0).numpy() for i, f in feats.items()}


def gram_matrix_tensor(feat: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, C), normalized by C*H*W."""
    n, c, h, w = feat.shape
    flat = feat.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def gram_matrix(feat: np.ndarray) -> np.ndarray:
    """Channel correlation matrix of a (C, H, W) feature tensor.

    ``G[a, b] = sum_{h,w} feat[a,h,w] * feat[b,h,w] / (C*H*W)``; symmetric
    and positive semi-definite by construction.
    """
    arr = np.asarray(feat, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"feature tensor must be (C, H, W), got {arr.shape}")
    c, h, w = arr.shape
    if h * w < 1:
        raise InvalidInputError("feature tensor needs at least one spatial position")
    flat = arr.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def content_loss_tensor(x: torch.Tensor, c: torch.Tensor, net: LossNetwork) -> torch.Tensor:
    """Per-batch mean content loss between restyled and content batches."""
    fx = net.features_tensor(x, net.content_layers)
    fc = net.features_tensor(c, net.content_layers)
    total = x.new_zeros(())
    for i in net.content_layers:
        diff = fx[i] - fc[i]
        per_sample = diff.pow(2).sum(dim=(1, 2, 3)) / net.unit_counts[i]
        total = total + per_sample.mean()
    return total


def style_loss_tensor(x: torch.Tensor, s: torch.Tensor, net: LossNetwork) -> torch.Tensor:
    """Per-batch mean style loss; Gram matrices make it size-independent."""
    fx = net.features_tensor(x, net.style_layers)
    fs = net.features_tensor(s, net.style_layers)
    total = x.new_zeros(())
    for i in net.style_layers:
        diff = gram_matrix_tensor(fx[i]) - gram_matrix_tensor(fs[i])
        per_sample = diff.pow(2).sum(dim=(1, 2)) / net.unit_counts[i]
        total = total + per_sample.mean()
    return total


def content_loss(x: np.ndarray, c: np.ndarray, net: LossNetwork) -> float:
    """Feature distance between two equally sized images (0 iff features match)."""
    validate_image(x, name="x")
    validate_image(c, name="c")
    if x.shape != c.shape:
        raise InvalidInputError(
            f"content loss needs matching spatial dims, got {x.shape} vs {c.shape}"
        )
    with torch.no_grad():
        val = content_loss_tensor(
            to_tensor(x).to(net.dtype), to_tensor(c).to(net.dtype), net
        )
    return float(val)


def style_loss(x: np.ndarray, s: np.ndarray, net: LossNetwork) -> float:
    """Gram-matrix distance between two images; spatial dims may differ."""
    validate_image(x, name="x")
    validate_image(s, name="s")
    with torch.no_grad():
        val = style_loss_tensor(
            to_tensor(x).to(net.dtype), to_tensor(s).to(net.dtype), net
        )
    return float(val)


def joint_objective(
    x: np.ndarray, c: np.ndarray, s: np.ndarray, lam: float, net: LossNetwork
) -> float:
    """``content_loss(x, c) + lam * style_loss(x, s)``."""
    if lam < 0:
        raise InvalidInputError(f"lambda must be non-negative, got {lam}")
    return content_loss(x, c, net) + lam * style_loss(x, s, net)


def direct_optimize(
    content: np.ndarray,
    style: np.ndarray,
    *,
    lam: float,
    steps: int,
    step_size: float,
    net: LossNetwork,
) -> tuple[np.ndarray, list[dict]]:
    """Minimize the joint objective by gradient descent in pixel space.

    The iterate starts at the content image and stays clamped to [0, 1].
    Whenever a step would increase the objective the step size is halved
    and the step retried, so the logged objective sequence is
    non-increasing.  Returns the final image and a log with one record
    per step: {step, content_loss, style_loss, total}.

    This is the slow reference path that the feed-forward network
    approximates; it doubles as an independent oracle in tests.
    """
    validate_image(content, name="content")
    validate_image(style, name="style")
    if steps < 0:
        raise InvalidInputError("steps must be >= 0")
    if lam < 0:
        raise InvalidInputError(f"lambda must be non-negative, got {lam}")

    c = to_tensor(content).to(net.dtype)
    s = to_tensor(style).to(net.dtype)
    x = c.clone()

    def objective(img: torch.Tensor) -> tuple[torch.Tensor, float, float]:
        cl = content_loss_tensor(img, c, net)
        sl = style_loss_tensor(img, s, net)
        return cl + lam * sl, float(cl), float(sl)

    log: list[dict] = []
    with torch.no_grad():
        total0, cl0, sl0 = objective(x)
    current = float(total0)
    log.append({"step": 0, "content_loss": cl0, "style_loss": sl0, "total": current})
    if not np.isfinite(current):
        raise NumericError("objective is non-finite at initialization (step 0)")

    lr = float(step_size)
    for step in range(1, steps + 1):
        xg = x.detach().requires_grad_(True)
        total, _, _ = objective(xg)
        grad = torch.autograd.grad(total, xg)[0]
        accepted = None
        while lr > 1e-16:
            cand = (xg.detach() - lr * grad).clamp(0.0, 1.0)
            with torch.no_grad():
                cand_total, cand_cl, cand_sl = objective(cand)
            if not np.isfinite(float(cand_total)):
                raise NumericError(f"objective became non-finite at step {step}")
            if float(cand_total) <= current:
                accepted = (cand, float(cand_total), cand_cl, cand_sl)
                break
            lr *= 0.5
        if accepted is None:
            # No descent direction at machine step size: already at a
            # clamped stationary point; remaining steps are no-ops.
            log.append({"step": step, "content_loss": float(log[-1]["content_loss"]),
                        "style_loss": float(log[-1]["style_loss"]), "total": current})
            continue
        x, current, cl, sl = accepted
        log.append({"step": step, "content_loss": cl, "style_loss": sl, "total": current})

    return from_tensor(x.clamp(0.0, 1.0).to(torch.float32)), log


def write_objective_log(log: list[dict], path) -> None:
    """Persist an objective log as CSV: step, content_loss, style_loss, total."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "content_loss", "style_loss", "total"])
        writer.writeheader()
        for row in log:
            writer.writerow(row)
