"""Learnable residual encoding layer: forward, exact backward, L2 normalisation.

Shapes used throughout::

    X  (N, D)     descriptor set, one descriptor per row
    C  (K, D)     codebook
    s  (K,)       smoothing factors (no sign constraint)
    R  (N, K, D)  residuals x_i - c_k
    A  (N, K)     soft assignments, rows sum to one
    E  (K, D)     aggregated residuals

All reductions use :func:`resenc.numeric.ordered_sum` and run
single-threaded, so results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ShapeError, as_mat, ordered_sum

NORM_EPS = 1e-12
NORMALIZE_MODES = ("global", "per_codeword")


@dataclass(frozen=True)
class Assignment:
    """Soft assignment plus the quantities cached for backward.

    ``f`` holds the shifted exponentials exp(-d_ik + phi_i), ``h`` their row
    sums and ``phi`` the per-row shift min_k d_ik.  ``sqnorm`` is ||r_ik||^2.
    """

    A: np.ndarray
    f: np.ndarray
    h: np.ndarray
    phi: np.ndarray
    sqnorm: np.ndarray

    @property
    def g(self) -> np.ndarray:
        """Sum of f over the other codewords, h_i - f_ik."""
        return self.h[:, None] - self.f


@dataclass(frozen=True)
class ForwardCache:
    X: np.ndarray
    C: np.ndarray
    s: np.ndarray
    R: np.ndarray
    assignment: Assignment

    @property
    def A(self) -> np.ndarray:
        return self.assignment.A


@dataclass(frozen=True)
class EncodingGrads:
    dX: np.ndarray
    dC: np.ndarray
    ds: np.ndarray


def as_smoothing(s, K: int | None = None) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if K is not None and s.shape[0] != K:
        raise ShapeError(f"smoothing factors: expected {K} values, got {s.shape[0]}")
    return s


def residuals(X, C) -> np.ndarray:
    X = as_mat(X, "descriptors")
    C = as_mat(C, "codebook")
    if X.shape[1] != C.shape[1]:
        raise ShapeError(f"descriptor dim {X.shape[1]} != codeword dim {C.shape[1]}")
    if X.shape[0] < 1 or C.shape[0] < 1:
        raise ShapeError("need at least one descriptor and one codeword")
    return X[:, None, :] - C[None, :, :]


def assign(R: np.ndarray, s) -> Assignment:
    if R.ndim != 3:
        raise ShapeError(f"residual tensor must be 3-D, got {R.shape}")
    s = as_smoothing(s, R.shape[1])
    sqnorm = ordered_sum(R * R, axis=2)
    d = s[None, :] * sqnorm
    phi = d.min(axis=1)
    f = np.exp(-d + phi[:, None])
    h = ordered_sum(f, axis=1)
    return Assignment(A=f / h[:, None], f=f, h=h, phi=phi, sqnorm=sqnorm)


def assign_unshifted(R: np.ndarray, s) -> np.ndarray:
    """Soft assignment without the overflow shift; only for comparison."""
    s = as_smoothing(s, R.shape[1])
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        f = np.exp(-s[None, :] * ordered_sum(R * R, axis=2))
        return f / ordered_sum(f, axis=1)[:, None]


def aggregate(A: np.ndarray, R: np.ndarray) -> np.ndarray:
    if A.shape != R.shape[:2]:
        raise ShapeError(f"assignment {A.shape} does not match residuals {R.shape}")
    return ordered_sum(A[:, :, None] * R, axis=0)


def encode_forward(X, C, s) -> tuple[np.ndarray, ForwardCache]:
    """Encode a descriptor set into the K x D aggregated residual matrix."""
    X = as_mat(X, "descriptors")
    C = as_mat(C, "codebook")
    s = as_smoothing(s, C.shape[0])
    R = residuals(X, C)
    assignment = assign(R, s)
    E = aggregate(assignment.A, R)
    return E, ForwardCache(X=X, C=C, s=s, R=R, assignment=assignment)


def encode_backward(cache: ForwardCache, dE) -> EncodingGrads:
    """Exact gradients of the loss w.r.t. X, C and s given dloss/dE.

    Includes the coupling between codewords through the shared softmax
    denominator, so every codeword's gradient sees every other codeword.
    """
    dE = as_mat(dE, "upstream gradient")
    if dE.shape != cache.C.shape:
        raise ShapeError(f"dE shape {dE.shape} != encoding shape {cache.C.shape}")
    R, A, s = cache.R, cache.A, cache.s
    # dloss/da_ik = dE_k . r_ik
    dA = ordered_sum(R * dE[None, :, :], axis=2)
    # softmax Jacobian: dloss/dd_ik = -a_ik (dA_ik - sum_j a_ij dA_ij)
    dd = -A * (dA - ordered_sum(A * dA, axis=1)[:, None])
    dR = A[:, :, None] * dE[None, :, :] + (2.0 * dd * s[None, :])[:, :, None] * R
    return EncodingGrads(
        dX=ordered_sum(dR, axis=1),
        dC=-ordered_sum(dR, axis=0),
        ds=ordered_sum(dd * cache.assignment.sqnorm, axis=0),
    )


@dataclass(frozen=True)
class NormCache:
    vhat: np.ndarray
    norm: np.ndarray  # scalar for global mode, one per row for per_codeword
    mode: str


def l2norm_forward(v, mode: str = "global") -> tuple[np.ndarray, NormCache]:
    """Normalise ``v``; zero stays zero thanks to the epsilon guard.

    ``global`` treats ``v`` as one flat vector; ``per_codeword`` normalises
    each row of a 2-D ``v`` separately.
    """
    v = np.asarray(v, dtype=np.float64)
    if mode == "global":
        flat = v.reshape(-1)
        norm = np.sqrt(ordered_sum(flat * flat, axis=0))
        vhat = (flat / max(float(norm), NORM_EPS)).reshape(v.shape)
    elif mode == "per_codeword":
        v2 = as_mat(v, "per-codeword input")
        norm = np.sqrt(ordered_sum(v2 * v2, axis=1))
        vhat = v2 / np.maximum(norm, NORM_EPS)[:, None]
    else:
        raise ValueError(f"unknown normalize mode {mode!r}; expected one of {NORMALIZE_MODES}")
    return vhat, NormCache(vhat=vhat, norm=norm, mode=mode)


def l2norm_backward(cache: NormCache, dvhat) -> np.ndarray:
    dvhat = np.asarray(dvhat, dtype=np.float64)
    if dvhat.shape != cache.vhat.shape:
        raise ShapeError(f"gradient shape {dvhat.shape} != {cache.vhat.shape}")
    vhat = cache.vhat
    if cache.mode == "global":
        flat, dflat = vhat.reshape(-1), dvhat.reshape(-1)
        proj = ordered_sum(flat * dflat, axis=0)
        return ((dflat - flat * proj) / max(float(cache.norm), NORM_EPS)).reshape(vhat.shape)
    proj = ordered_sum(vhat * dvhat, axis=1)
    return (dvhat - vhat * proj[:, None]) / np.maximum(cache.norm, NORM_EPS)[:, None]
