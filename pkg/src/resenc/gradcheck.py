"""Central finite differences and gradient reports.

The probe loss for the encoding layer is a fixed seeded linear functional of
the L2-normalised encoding, ``loss = <vhat, w>``, which exercises the whole
forward chain while staying smooth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoding import ForwardCache, encode_backward, encode_forward, l2norm_backward, l2norm_forward
from .network import NetworkParams, backward, forward, init_params, softmax_xent
from .numeric import Rng, ShapeError, derive_seed, ordered_sum


class NumericError(ArithmeticError):
    pass


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    argmax: tuple[int, ...]
    analytic: float
    numeric: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def central_diff(loss_fn: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Per-element (loss(theta + h e) - loss(theta - h e)) / 2h."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    theta = np.array(theta, dtype=np.result_type(np.asarray(theta).dtype, np.float64))
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        orig = theta[idx]
        theta[idx] = orig + h
        fp = loss_fn(theta.copy())
        theta[idx] = orig - h
        fm = loss_fn(theta.copy())
        theta[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss when perturbing coordinate {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """max |a - b| / max(|a|, |b|, 1e-10) over elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rel_error: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(_rel(a, b).max())


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)


def compare(name: str, analytic, numeric) -> GradReport:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"{name}: {analytic.shape} vs {numeric.shape}")
    err = _rel(analytic, numeric)
    idx = np.unravel_index(int(np.argmax(err)), err.shape)
    return GradReport(name, float(err[idx]), tuple(int(i) for i in idx),
                      float(analytic[idx]), float(numeric[idx]))


# --------------------------------------------------------------------------
# encoding layer


@dataclass
class EncodingInstance:
    X: np.ndarray
    C: np.ndarray
    s: np.ndarray
    w: np.ndarray  # probe direction, K*D

    def loss(self, X=None, C=None, s=None) -> float:
        E, _ = encode_forward(self.X if X is None else X, self.C if C is None else C,
                              self.s if s is None else s)
        vhat, _ = l2norm_forward(E)
        return float(ordered_sum(vhat.reshape(-1) * self.w, axis=0))

    def oracle_loss(self, X=None, C=None, s=None):
        """Probe loss re-derived from the defining formulas in extended precision.

        Shares no code with the layer.  Working in ``np.longdouble`` keeps
        the cancellation error of central differences near 1e-13, well below
        the size of the smallest gradient entries being checked.
        """
        ext = np.longdouble
        X = np.asarray(self.X if X is None else X, dtype=ext)
        C = np.asarray(self.C if C is None else C, dtype=ext)
        s = np.asarray(self.s if s is None else s, dtype=ext)
        R = X[:, None, :] - C[None, :, :]
        d = s[None, :] * (R * R).sum(axis=2)
        f = np.exp(-(d - d.min(axis=1, keepdims=True)))
        A = f / f.sum(axis=1, keepdims=True)
        E = (A[:, :, None] * R).sum(axis=0).reshape(-1)
        norm = np.sqrt((E * E).sum())
        return ((E / max(norm, ext(1e-12))) * self.w.astype(ext)).sum()


def make_instance(N: int, K: int, D: int, seed: int) -> EncodingInstance:
    """Seeded instance with O(1) scaled distances, so assignments stay non-degenerate.

    Descriptors and codewords are standard normal; s_k is uniform in
    [0.5, 1.5] / D, which keeps s_k * ||r_ik||^2 of order one.
    """
    for name, v in (("N", N), ("K", K), ("D", D)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = Rng(derive_seed(seed, "encoding-instance", N, K, D))
    X = rng.normal((N, D))
    C = rng.normal((K, D))
    s = rng.uniform(0.5, 1.5, (K,)) / D
    w = rng.normal((K * D,))
    return EncodingInstance(X, C, s, w)


def analytic_grads(inst: EncodingInstance, backward_fn=encode_backward):
    E, cache = encode_forward(inst.X, inst.C, inst.s)
    _, ncache = l2norm_forward(E)
    dE = l2norm_backward(ncache, inst.w.reshape(E.shape))
    return backward_fn(cache, dE)


def check_encoding(N: int, K: int, D: int, seed: int, h: float = 1e-6, tol: float = 1e-5,
                   backward_fn=encode_backward, extended: bool = True,
                   ) -> tuple[bool, tuple[GradReport, GradReport, GradReport]]:
    """Compare analytic dX, dC, ds with central differences of the probe loss.

    With ``extended`` (default) the differenced loss is the independent
    long-double oracle; otherwise it is the float64 layer itself.
    """
    inst = make_instance(N, K, D, seed)
    g = analytic_grads(inst, backward_fn)
    loss = inst.oracle_loss if extended else inst.loss
    ext = np.longdouble if extended else np.float64
    reports = (
        compare("dX", g.dX, central_diff(lambda X: loss(X=X), inst.X.astype(ext), h)),
        compare("dC", g.dC, central_diff(lambda C: loss(C=C), inst.C.astype(ext), h)),
        compare("ds", g.ds, central_diff(lambda s: loss(s=s), inst.s.astype(ext), h)),
    )
    return all(r.passed(tol) for r in reports), reports


def encode_backward_diagonal(cache: ForwardCache, dE):
    """The codeword gradient with only the j == k assignment term.

    Uses da_ik/dc_k = 2 s_k f_ik g_ik / h_i^2 * r_ik and ignores how c_k moves
    the other assignments a_ij through the shared denominator.  Exact for
    K = 1, wrong otherwise; kept to show that the check catches it.
    """
    exact = encode_backward(cache, dE)
    a = cache.assignment
    R, s = cache.R, cache.s
    dE = np.asarray(dE, dtype=np.float64)
    dadc = (2.0 * s[None, :] * a.f * a.g / (a.h[:, None] ** 2))[:, :, None] * R
    proj = ordered_sum(R * dE[None, :, :], axis=2)  # dE_k . r_ik
    dC = ordered_sum(proj[:, :, None] * dadc - a.A[:, :, None] * dE[None, :, :], axis=0)
    return type(exact)(dX=exact.dX, dC=dC, ds=exact.ds)


GRID_N = (1, 5, 17)
GRID_K = (1, 4, 8)
GRID_D = (2, 16)


def encoding_grid(name: str = "default") -> list[tuple[int, int, int, int]]:
    """(N, K, D, seed) instances.

    ``default``: every cell of the 3 x 3 x 2 grid once plus two extra seeds
    on the largest cells, 20 instances.  ``small``: 4 instances.
    """
    if name == "default":
        cells = list(itertools.product(GRID_N, GRID_K, GRID_D))
        out = [(n, k, d, i) for i, (n, k, d) in enumerate(cells)]
        out += [(17, 8, 16, 100), (17, 4, 16, 101)]
        return out
    if name == "small":
        return [(1, 1, 1, 0), (5, 4, 2, 1), (17, 8, 2, 2), (5, 4, 16, 3)]
    raise ValueError(f"unknown grid {name!r}; expected 'default' or 'small'")


# --------------------------------------------------------------------------
# whole network


def tiny_network(seed: int = 0, D_in: int = 3, D_proj: int = 2, K: int = 2, n_classes: int = 2,
                 N: int = 4) -> tuple[NetworkParams, np.ndarray, int]:
    params = init_params(D_in, D_proj, K, n_classes, seed)
    rng = Rng(derive_seed(seed, "tiny-net-data"))
    X = rng.normal((N, D_in))
    label = int(rng.integers(0, n_classes, 1)[0])
    return params, X, label


def network_loss(params: NetworkParams, X, label: int) -> float:
    logits, _ = forward(params, X)
    return softmax_xent(logits, label)[0]


def check_network(params: NetworkParams, X, label: int, h: float = 1e-6,
                  tol: float = 1e-5) -> tuple[bool, list[GradReport]]:
    """Finite-difference check of every parameter tensor and of the input."""
    logits, cache = forward(params, X)
    _, dlogits = softmax_xent(logits, label)
    grads = backward(cache, dlogits)
    reports = []
    for name, value in params.tensors().items():
        def loss_fn(theta, name=name):
            p = params.copy()
            getattr(p, name)[...] = theta
            return network_loss(p, X, label)

        reports.append(compare(name, grads[name], central_diff(loss_fn, value, h)))
    return all(r.passed(tol) for r in reports), reports
