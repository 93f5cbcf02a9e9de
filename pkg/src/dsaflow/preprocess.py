"""Vectorization, centering and whitening of an image series.

Each frame is one observed mixture, so the data matrix has one row per
frame and one column per pixel. Whitening works on the small ``d x d``
temporal covariance with pixels as samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import ImageSeries

RANK_EPS = 1e-10


class WhiteningError(ValueError):
    """Raised when the data cannot be whitened to the requested dimension."""


@dataclass(frozen=True, eq=False)
class DataMatrix:
    values: np.ndarray  # (d, h*w), row-major pixel order
    shape: tuple[int, int]  # (h, w) for back-projection

    def __post_init__(self):
        h, w = self.shape
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"data matrix must be 2-D with >=1 row, got {self.values.shape}")
        if self.values.shape[1] != h * w:
            raise ValueError(f"{self.values.shape[1]} columns do not match {h}x{w}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("data matrix contains non-finite values")

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    """How whitened coordinates were obtained from the raw data matrix.

    ``mean`` is the per-pixel temporal mean removed by :func:`center`
    (zeros if centering was skipped). ``row_mean`` is the per-frame pixel
    mean removed inside :func:`whiten` so that the covariance is a true
    sample covariance. ``projection`` is ``K = L^{-1/2} E^T`` of shape
    ``(p, d)``; ``basis`` holds the retained eigenvectors ``E`` (``d x p``).
    """

    mean: np.ndarray
    row_mean: np.ndarray
    projection: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray  # all d eigenvalues, descending

    @property
    def p(self) -> int:
        return self.projection.shape[0]

    def apply(self, data: np.ndarray) -> np.ndarray:
        """Whiten a raw ``(d, n)`` matrix with the stored statistics."""
        return self.projection @ (data - self.mean[None, :] - self.row_mean[:, None])

    def dewhitening(self) -> np.ndarray:
        """Pseudo-inverse of ``projection``: ``E L^{1/2}`` (``d x p``)."""
        return self.basis * np.sqrt(self.eigenvalues[: self.p])[None, :]

    def reconstruct(self, whitened: np.ndarray) -> np.ndarray:
        """Map whitened rows back to the raw data space (top-p subspace)."""
        return self.dewhitening() @ whitened + self.row_mean[:, None] + self.mean[None, :]


def vectorize(series: ImageSeries) -> DataMatrix:
    frames = series.frames
    return DataMatrix(frames.reshape(frames.shape[0], -1).copy(), series.shape)


def devectorize(row, h: int, w: int) -> np.ndarray:
    row = np.asarray(row)
    if row.ndim != 1 or row.size != h * w:
        raise ValueError(f"row of length {row.size} cannot form a {h}x{w} image")
    return row.reshape(h, w).copy()


def center(matrix):
    """Subtract the per-pixel temporal mean.

    Accepts a :class:`DataMatrix` or a plain ``(d, n)`` array and returns
    ``(centered, mean)`` of the same kind.
    """
    values = matrix.values if isinstance(matrix, DataMatrix) else np.asarray(matrix, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError(f"centering needs at least 2 frames, got {values.shape[0]}")
    mean = values.mean(axis=0)
    centered = values - mean[None, :]
    if isinstance(matrix, DataMatrix):
        return DataMatrix(centered, matrix.shape), mean
    return centered, mean


def whiten(matrix, p: int, mean=None):
    """Whiten ``matrix`` (``d x n``) down to ``p`` rows.

    The sample covariance uses the population normalization ``1/n``.
    ``mean`` is the temporal mean previously removed by :func:`center`; it
    is only recorded in the returned transform.

    Returns ``(whitened, transform)`` where ``whitened`` is ``p x n``.
    """
    values = matrix.values if isinstance(matrix, DataMatrix) else np.asarray(matrix, dtype=np.float64)
    d, n = values.shape
    if d < 2:
        raise WhiteningError(f"whitening needs at least 2 frames, got {d}")
    if not 1 <= p <= d:
        raise WhiteningError(f"cannot whiten {d} frames to p={p} components (need 1 <= p <= d)")

    row_mean = values.mean(axis=1)
    xc = values - row_mean[:, None]
    cov = (xc @ xc.T) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    # eigh leaves each eigenvector's sign arbitrary; pin the largest entry positive
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(d)])
    evecs = evecs * np.where(flip == 0, 1.0, flip)[None, :]

    top = evals[0]
    if not top > 0:
        raise WhiteningError("data has zero variance")
    if evals[p - 1] <= RANK_EPS * top:
        raise WhiteningError(
            f"rank deficient: eigenvalue {p} is {evals[p - 1]:.3g}, "
            f"below {RANK_EPS:g} x largest ({top:.3g})"
        )
    basis = evecs[:, :p]
    projection = basis.T / np.sqrt(evals[:p])[:, None]
    whitened = projection @ xc
    if mean is None:
        mean = np.zeros(n)
    transform = WhiteningTransform(
        mean=np.asarray(mean, dtype=np.float64),
        row_mean=row_mean,
        projection=projection,
        basis=basis,
        eigenvalues=evals,
    )
    return whitened, transform


def sample_covariance(rows: np.ndarray) -> np.ndarray:
    """Population covariance of ``rows`` with columns as samples."""
    xc = rows - rows.mean(axis=1, keepdims=True)
    return (xc @ xc.T) / rows.shape[1]
