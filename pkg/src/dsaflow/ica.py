"""Fixed-point ICA with symmetric decorrelation.

The data are whitened frames (``p x n``, pixels as samples); the recovered
sources are images and the columns of the mixing matrix are their temporal
signatures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .preprocess import WhiteningTransform

CONTRASTS = ("logcosh", "exp", "cube")
SCHEMES = ("symmetric", "deflation")
AMARI_FLOOR = 1e-10


class IcaError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IcaConfig:
    p: int = 3
    contrast: str = "logcosh"
    tol: float = 1e-6
    max_iter: int = 200
    seed: int = 0
    scheme: str = "symmetric"

    def __post_init__(self):
        if self.p < 2:
            raise IcaError(f"need at least 2 components, got p={self.p}")
        if not self.tol > 0:
            raise IcaError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise IcaError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.contrast not in CONTRASTS:
            raise IcaError(f"unknown contrast {self.contrast!r}; choose from {CONTRASTS}")
        if self.scheme not in SCHEMES:
            raise IcaError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")


@dataclass(frozen=True, eq=False)
class UnmixingModel:
    W: np.ndarray
    whitening: Optional[WhiteningTransform]
    contrast: str
    iterations_run: int
    converged: bool
    final_delta: float
    deltas: list = field(default_factory=list)

    @property
    def unmixing(self) -> np.ndarray:
        """``W K`` mapping de-meaned frames to sources (``p x d``)."""
        if self.whitening is None:
            return self.W
        return self.W @ self.whitening.projection

    def centered_mixing(self) -> np.ndarray:
        """Pseudo-inverse of ``W K``; maps sources to de-meaned frames."""
        if self.whitening is None:
            return self.W.T
        return self.whitening.dewhitening() @ self.W.T

    def reconstruct(self, sources: np.ndarray) -> np.ndarray:
        """Rebuild the data matrix (top-p projection) from ``(p, n)`` sources."""
        x = self.centered_mixing() @ sources
        if self.whitening is not None:
            x = x + self.whitening.row_mean[:, None] + self.whitening.mean[None, :]
        return x


@dataclass(frozen=True, eq=False)
class SourceSet:
    sources: np.ndarray  # (p, h, w), zero mean and unit variance over pixels
    mixing: np.ndarray  # (d, p), column j is the temporal signature of source j

    @property
    def p(self) -> int:
        return self.sources.shape[0]

    def permuted(self, perm) -> "SourceSet":
        perm = list(perm)
        return SourceSet(self.sources[perm].copy(), self.mixing[:, perm].copy())


def contrast_eval(name: str, u):
    """Return ``(g(u), g'(u))`` for the named contrast."""
    u = np.asarray(u, dtype=np.float64)
    if name == "logcosh":
        g = np.tanh(u)
        return g, 1.0 - g * g
    if name == "exp":
        e = np.exp(-0.5 * u * u)
        return u * e, (1.0 - u * u) * e
    if name == "cube":
        return u ** 3, 3.0 * u * u
    raise IcaError(f"unknown contrast {name!r}; choose from {CONTRASTS}")


def symmetric_decorrelate(W: np.ndarray) -> np.ndarray:
    """Return ``(W W^T)^{-1/2} W``."""
    W = np.asarray(W, dtype=np.float64)
    s, u = np.linalg.eigh(W @ W.T)
    if s.min() <= 1e-12 * max(s.max(), 1e-300):
        raise IcaError("W W^T is singular")
    return (u * (1.0 / np.sqrt(s))[None, :]) @ u.T @ W


def _skewness(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=1, keepdims=True)
    m2 = (xc ** 2).mean(axis=1)
    m3 = (xc ** 3).mean(axis=1)
    return m3 / np.maximum(m2, 1e-300) ** 1.5


def _symmetric_iterations(Z, W, config, hook):
    n = Z.shape[1]
    deltas = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        g, dg = contrast_eval(config.contrast, W @ Z)
        W_new = (g @ Z.T) / n - dg.mean(axis=1)[:, None] * W
        W_new = symmetric_decorrelate(W_new)
        if not np.all(np.isfinite(W_new)):
            raise IcaError(f"non-finite unmixing matrix at iteration {it}")
        delta = float(np.max(np.abs(1.0 - np.abs(np.sum(W_new * W, axis=1)))))
        W = W_new
        deltas.append(delta)
        if hook is not None:
            hook(it, W)
        if delta < config.tol:
            converged = True
            break
    return W, it, converged, deltas


def _deflation_iterations(Z, W, config, hook):
    n = Z.shape[1]
    p = W.shape[0]
    deltas = []
    converged = True
    total = 0
    out = np.zeros_like(W)
    for i in range(p):
        w = W[i].copy()
        w -= out[:i].T @ (out[:i] @ w)
        w /= np.linalg.norm(w)
        row_converged = False
        for it in range(1, config.max_iter + 1):
            g, dg = contrast_eval(config.contrast, w @ Z)
            w_new = (Z @ g) / n - dg.mean() * w
            w_new -= out[:i].T @ (out[:i] @ w_new)
            w_new /= np.linalg.norm(w_new)
            if not np.all(np.isfinite(w_new)):
                raise IcaError(f"non-finite unmixing vector {i} at iteration {it}")
            delta = float(abs(1.0 - abs(w_new @ w)))
            w = w_new
            total += 1
            if hook is not None:
                partial = out.copy()
                partial[i] = w
                hook(total, partial[: i + 1])
            if delta < config.tol:
                row_converged = True
                break
        deltas.append(delta)
        converged = converged and row_converged
        out[i] = w
    return out, min(total, config.max_iter), converged, deltas


def fastica(
    whitened: np.ndarray,
    config: IcaConfig = IcaConfig(),
    whitening: Optional[WhiteningTransform] = None,
    shape: Optional[tuple[int, int]] = None,
    hook: Optional[Callable[[int, np.ndarray], None]] = None,
):
    """Estimate ``config.p`` independent sources from whitened data.

    Parameters
    ----------
    whitened : ndarray, shape (q, n)
        Whitened observations with ``q >= p``; only the first ``p`` rows
        (largest variance) are used. With ``whitening`` given, ``q`` must
        equal ``p``.
    whitening : WhiteningTransform, optional
        Used to express the mixing matrix in frame space. Without it the
        mixing is given in whitened coordinates.
    shape : (h, w), optional
        Image shape for the source images; defaults to ``(1, n)``.
    hook : callable, optional
        Called as ``hook(iteration, W)`` after every outer iteration.

    Returns
    -------
    (UnmixingModel, SourceSet)
    """
    Z = np.asarray(whitened, dtype=np.float64)
    if Z.ndim != 2:
        raise IcaError(f"whitened data must be 2-D, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise IcaError("whitened data contain non-finite values")
    p = config.p
    if p > Z.shape[0]:
        raise IcaError(f"p={p} exceeds the whitened rank {Z.shape[0]}")
    if whitening is not None and whitening.p != Z.shape[0]:
        raise IcaError(f"whitening transform has {whitening.p} rows, data has {Z.shape[0]}")
    if whitening is not None and whitening.p != p:
        raise IcaError(f"data were whitened to {whitening.p} components, config asks for {p}")
    Z = Z[:p]
    n = Z.shape[1]
    if shape is None:
        shape = (1, n)
    if shape[0] * shape[1] != n:
        raise IcaError(f"shape {shape} does not match {n} samples")

    rng = np.random.default_rng(config.seed)
    W0 = symmetric_decorrelate(rng.standard_normal((p, p)))
    if config.scheme == "symmetric":
        W, iters, converged, deltas = _symmetric_iterations(Z, W0, config, hook)
    else:
        W, iters, converged, deltas = _deflation_iterations(Z, W0, config, hook)
    if not converged:
        warnings.warn(
            f"FastICA did not converge in {config.max_iter} iterations "
            f"(last delta {deltas[-1]:.3g}, tol {config.tol:g})",
            ConvergenceWarning,
            stacklevel=2,
        )

    S = W @ Z
    flip = np.where(_skewness(S) < 0, -1.0, 1.0)
    W = W * flip[:, None]
    S = S * flip[:, None]

    model = UnmixingModel(
        W=W,
        whitening=whitening,
        contrast=config.contrast,
        iterations_run=iters,
        converged=converged,
        final_delta=deltas[-1],
        deltas=deltas,
    )
    mixing = model.centered_mixing()
    if whitening is not None:
        # regress the removed temporal mean onto the sources (unit variance, zero mean)
        mixing = mixing + (S @ whitening.mean / n)[None, :]
    sources = SourceSet(S.reshape(p, *shape), mixing)
    return model, sources


def amari_index(A_est, A_true) -> float:
    """Normalized Amari error of ``pinv(A_est) @ A_true``, in ``[0, 1]``.

    Zero exactly when the two matrices agree up to column permutation and
    nonzero column scaling.
    """
    A_est = np.asarray(A_est, dtype=np.float64)
    A_true = np.asarray(A_true, dtype=np.float64)
    if A_est.shape != A_true.shape:
        raise ValueError(f"shape mismatch {A_est.shape} vs {A_true.shape}")
    p = A_est.shape[1]
    for name, a in (("A_est", A_est), ("A_true", A_true)):
        if np.linalg.matrix_rank(a) < p:
            raise ValueError(f"{name} is rank deficient")
    if p < 2:
        return 0.0
    P = np.abs(np.linalg.pinv(A_est) @ A_true)
    # round-off from pinv would otherwise keep an exact match slightly above 0
    P[P <= AMARI_FLOOR * P.max()] = 0.0
    return permutation_error(P)


def permutation_error(P) -> float:
    """Normalized Amari error of a square matrix ``P`` (0 = scaled permutation)."""
    P = np.abs(np.asarray(P, dtype=np.float64))
    p = P.shape[0]
    rows = (P.sum(axis=1) / P.max(axis=1) - 1.0).sum()
    cols = (P.sum(axis=0) / P.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * p * (p - 1)))
