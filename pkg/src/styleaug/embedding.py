"""Fitting, sampling and interpolating style embeddings.

A style embedding is a length-D real vector (D = 100 by default) that
conditions the restyling network's output.  Random styles come from a
multivariate normal whose mean and covariance are fitted to a corpus of
embeddings, so a draw simulates picking a random style image without
keeping the corpus around.

File formats
------------
``<name>.embdist``       little-endian float32: mean (D) followed by the
                         covariance (D*D, row-major).
``<name>.embdist.json``  sidecar manifest: {"dim", "count", "jitter",
                         "created"}.
Corpus files are a flat little-endian float32 array (N*D, row-major)
with a JSON header at ``<path>.json`` recording dim/count/source files.

``created`` honors the ``SOURCE_DATE_EPOCH`` environment variable so
archives can be produced byte-reproducibly.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericError

DEFAULT_EMBED_DIM = 100

# Relative scale of the default diagonal jitter added before factorization.
DEFAULT_JITTER_SCALE = 1e-5


def validate_embedding(z, *, dim: int | None = None, name: str = "embedding") -> np.ndarray:
    """Check that ``z`` is a finite 1-D real vector (optionally of length ``dim``)."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidInputError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a PSD matrix; zero matrix maps to zero factor."""
    if not np.any(matrix):
        # Degenerate distribution (e.g. a single sample with no jitter):
        # sampling collapses onto the mean.
        return np.zeros_like(matrix)
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            "Cholesky factorization of the jittered covariance failed; "
            "the matrix is not positive definite. Refit with a larger jitter."
        ) from exc


@dataclass(frozen=True)
class EmbeddingDistribution:
    """Multivariate normal over style embeddings, ready for sampling.

    Immutable after construction; safe for concurrent reads.  ``chol`` is
    the lower-triangular factor of ``covariance + jitter * I``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    jitter: float
    count: int = 0
    chol: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        mean = validate_embedding(self.mean, name="mean")
        cov = np.asarray(self.covariance, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InvalidInputError(
                f"covariance must have shape ({d}, {d}), got {cov.shape}"
            )
        if not np.all(np.isfinite(cov)):
            raise InvalidInputError("covariance contains non-finite entries")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
            raise InvalidInputError("covariance must be symmetric")
        if self.jitter < 0:
            raise InvalidInputError("jitter must be non-negative")
        chol = self.chol
        if chol is None:
            chol = _cholesky(cov + self.jitter * np.eye(d))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", np.asarray(chol, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_embedding_distribution(
    embeddings, jitter: float | None = None
) -> EmbeddingDistribution:
    """Fit a normal distribution to a set of embeddings.

    The mean is the arithmetic mean and the covariance is the unbiased
    sample covariance (divisor N-1; the zero matrix for N=1).  ``jitter``
    is added to the covariance diagonal before factorization; when None
    it defaults to ``1e-5 * mean(diag(cov))``, which keeps small or
    rank-deficient corpora factorizable.
    """
    rows = [validate_embedding(z, name="embeddings[...]") for z in embeddings]
    if not rows:
        raise InvalidInputError("cannot fit a distribution to an empty embedding list")
    dim = rows[0].shape[0]
    for r in rows:
        if r.shape[0] != dim:
            raise InvalidInputError(
                f"all embeddings must have the same length; saw {dim} and {r.shape[0]}"
            )
    data = np.stack(rows)
    n = data.shape[0]
    mean = data.mean(axis=0)
    if n == 1:
        cov = np.zeros((dim, dim))
    else:
        centered = data - mean
        cov = centered.T @ centered / (n - 1)
        cov = (cov + cov.T) / 2.0  # kill round-off asymmetry
    if jitter is None:
        jitter = DEFAULT_JITTER_SCALE * float(np.mean(np.diag(cov)))
    return EmbeddingDistribution(mean=mean, covariance=cov, jitter=float(jitter), count=n)


def sample_style_embedding(
    dist: EmbeddingDistribution, rng: np.random.Generator
) -> np.ndarray:
    """Draw one embedding: ``mean + chol @ eps`` with ``eps ~ N(0, I)``.

    Deterministic given the generator state; callers that need parallel
    sampling should hand each worker its own spawned generator.
    """
    eps = rng.standard_normal(dist.dim)
    return dist.mean + dist.chol @ eps


def interpolate_embedding(z_rand, z_content, alpha: float) -> np.ndarray:
    """Blend a random embedding with the image's own: ``alpha*z_rand + (1-alpha)*z_content``.

    ``alpha=0`` keeps the content image's style, ``alpha=1`` is a full
    restyle; values in between control augmentation strength.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    a = validate_embedding(z_rand, name="z_rand")
    b = validate_embedding(z_content, dim=a.shape[0], name="z_content")
    return alpha * a + (1.0 - alpha) * b


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _created_stamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def save_distribution(dist: EmbeddingDistribution, path) -> None:
    """Write ``<path>`` (binary) and ``<path>.json`` (manifest)."""
    path = Path(path)
    blob = np.concatenate([dist.mean, dist.covariance.ravel()]).astype("<f4")
    path.write_bytes(blob.tobytes())
    manifest = {
        "dim": dist.dim,
        "count": dist.count,
        "jitter": dist.jitter,
        "created": _created_stamp(),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_distribution(path) -> EmbeddingDistribution:
    """Load a distribution archive; the factor is recomputed in float64."""
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not path.exists() or not manifest_path.exists():
        raise InvalidInputError(f"distribution archive {path} (+ .json) not found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    dim = int(manifest["dim"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = dim + dim * dim
    if raw.size != expected:
        raise InvalidInputError(
            f"distribution file {path} has {raw.size} floats, expected {expected} "
            f"for dim={dim}"
        )
    mean = raw[:dim].astype(np.float64)
    cov = raw[dim:].astype(np.float64).reshape(dim, dim)
    cov = (cov + cov.T) / 2.0  # float32 storage may break exact symmetry
    return EmbeddingDistribution(
        mean=mean,
        covariance=cov,
        jitter=float(manifest["jitter"]),
        count=int(manifest.get("count", 0)),
    )


def save_corpus(embeddings: np.ndarray, path, files: list[str] | None = None) -> None:
    """Write an N x D embedding corpus as flat float32 plus a JSON header."""
    data = np.asarray(embeddings, dtype="<f4")
    if data.ndim != 2:
        raise InvalidInputError(f"corpus must be a 2-D array, got shape {data.shape}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(data).tobytes())
    header = {
        "count": int(data.shape[0]),
        "dim": int(data.shape[1]),
        "dtype": "float32",
        "order": "row-major",
    }
    if files is not None:
        header["files"] = list(files)
    with open(str(path) + ".json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(path) -> tuple[np.ndarray, dict]:
    """Read a corpus file; returns (N x D float32 array, header dict)."""
    path = Path(path)
    header_path = Path(str(path) + ".json")
    if not path.exists() or not header_path.exists():
        raise InvalidInputError(f"corpus file {path} (+ .json) not found")
    with open(header_path) as fh:
        header = json.load(fh)
    n, d = int(header["count"]), int(header["dim"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != n * d:
        raise InvalidInputError(
            f"corpus file {path} has {raw.size} floats, expected {n * d}"
        )
    return raw.reshape(n, d).copy(), header
