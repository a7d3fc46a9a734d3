"""B-spline bases, curvature penalties and sum-to-zero centering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "DesignBlock",
    "SmoothTerm",
    "quantile_knots",
    "full_knots",
    "bspline_design",
    "bspline_row",
    "curvature_penalty",
    "center_block",
]


@dataclass
class DesignBlock:
    """Design columns of one predictor term with the matching penalty block."""

    columns: np.ndarray
    penalty: np.ndarray
    kind: str = "smooth"

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=float)
        if self.columns.ndim == 1:
            self.columns = self.columns[:, None]
        self.penalty = np.asarray(self.penalty, dtype=float)
        q = self.columns.shape[1]
        if self.penalty.shape != (q, q):
            raise ValueError(f"penalty must be {q}x{q}, got {self.penalty.shape}")
        if self.kind not in ("parametric", "smooth", "mrf", "random"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "parametric" and np.any(self.penalty != 0):
            raise ValueError("parametric blocks carry a zero penalty")

    @property
    def n_columns(self):
        return self.columns.shape[1]


def quantile_knots(x, basis_dim: int, degree: int = 3):
    """Interior knots at empirical quantiles, boundary knots at the data range."""
    x = np.asarray(x, dtype=float)
    n_interior = basis_dim - degree - 1
    if n_interior < 0:
        raise ValueError("basis_dim must be at least degree + 1")
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise ValueError("smooth covariate is constant")
    probs = np.linspace(0, 1, n_interior + 2)[1:-1]
    inner = np.quantile(x, probs)
    knots = np.concatenate([[lo], inner, [hi]])
    if np.any(np.diff(knots) <= 0):
        # heavy ties: fall back to equally spaced knots
        knots = np.linspace(lo, hi, n_interior + 2)
    return knots


def full_knots(knots, degree: int):
    """Clamp ``knots`` by repeating each boundary knot ``degree`` extra times."""
    knots = np.asarray(knots, dtype=float)
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be strictly increasing")
    return np.concatenate([[knots[0]] * degree, knots, [knots[-1]] * degree])


def bspline_design(x, knots, degree: int = 3, deriv: int = 0):
    """Evaluate all B-splines (or their ``deriv``-th derivative) at ``x``.

    ``knots`` are the distinct breakpoints (boundary included); the returned
    matrix has ``len(knots) + degree - 1`` columns.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    knots = np.asarray(knots, dtype=float)
    lo, hi = knots[0], knots[-1]
    span = hi - lo
    if np.any(np.isnan(x)) or np.any(x < lo - 1e-12 * span) or np.any(x > hi + 1e-12 * span):
        raise ValueError(f"evaluation points outside the knot range [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    t = full_knots(knots, degree)
    n_basis = len(t) - degree - 1
    # index of the knot span containing x; the right end belongs to the last span
    idx = np.searchsorted(t, x, side="right") - 1
    idx = np.clip(idx, degree, n_basis - 1)

    # Cox-de Boor on the degree+1 non-zero functions of each span
    order = degree - deriv
    if order < 0:
        return np.zeros((x.size, n_basis))
    vals = np.ones((x.size, 1))
    for d in range(1, order + 1):
        new = np.zeros((x.size, d + 1))
        for r in range(d):
            left_i = idx - d + 1 + r
            right_i = idx + 1 + r
            tl = t[left_i]
            tr = t[right_i]
            denom = tr - tl
            w = np.where(denom > 0, vals[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            new[:, r] += (tr - x) * w
            new[:, r + 1] += (x - tl) * w
        vals = new
    # raise from degree `order` to `degree` by differentiating
    for d in range(order + 1, degree + 1):
        new = np.zeros((x.size, d + 1))
        for r in range(d):
            left_i = idx - d + 1 + r
            right_i = idx + 1 + r
            denom = t[right_i] - t[left_i]
            w = np.where(denom > 0, d * vals[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            new[:, r] += -w
            new[:, r + 1] += w
        vals = new
    out = np.zeros((x.size, n_basis))
    rows = np.arange(x.size)
    for r in range(degree + 1):
        out[rows, idx - degree + r] += vals[:, r]
    return out


def bspline_row(knots, degree: int, x: float):
    """B-spline basis row at a single point."""
    return bspline_design(np.array([x]), knots, degree)[0]


def curvature_penalty(knots, degree: int = 3, order: int = 2):
    """Integrated squared ``order``-th derivative penalty ``int b'' b''^T``.

    Gauss-Legendre per knot interval with enough nodes to be exact for the
    piecewise polynomial integrand.
    """
    if degree < 2 or order > degree:
        raise ValueError("curvature penalty requires degree >= 2 and order <= degree")
    knots = np.asarray(knots, dtype=float)
    pdeg = degree - order
    n_nodes = int(np.ceil((2 * pdeg + 1) / 2)) + 1
    gx, gw = np.polynomial.legendre.leggauss(n_nodes)
    a, b = knots[:-1], knots[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * gx[None, :]
    wts = half[:, None] * gw[None, :]
    B = bspline_design(pts.ravel(), knots, degree, deriv=order)
    S = B.T @ (B * wts.ravel()[:, None])
    return 0.5 * (S + S.T)


def center_block(block: DesignBlock):
    """Reparameterise a block onto the null space of its column-sum constraint.

    Returns the centred block and the ``q x (q-1)`` map ``Z`` such that the
    original coefficients are ``Z @ theta``.
    """
    X = block.columns
    q = X.shape[1]
    if q < 2:
        raise ValueError("centering needs at least two columns")
    C = X.sum(axis=0)[None, :]
    Q, _ = linalg.qr(C.T)
    Z = Q[:, 1:]
    Xc = X @ Z
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * max(sv[0], 1.0):
        raise np.linalg.LinAlgError("centered design is rank deficient")
    Sc = Z.T @ block.penalty @ Z
    Sc = 0.5 * (Sc + Sc.T)
    return DesignBlock(Xc, Sc, block.kind), Z


@dataclass
class SmoothTerm:
    """Penalised regression spline of one covariate, centred over the sample."""

    covariate_values: np.ndarray
    basis_dim: int = 10
    degree: int = 3
    penalty_order: int = 2
    knots: np.ndarray | None = None
    constraint: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.covariate_values = np.asarray(self.covariate_values, dtype=float)
        if self.basis_dim < self.penalty_order + 1:
            raise ValueError("basis_dim must be at least penalty_order + 1")
        if self.knots is None:
            self.knots = quantile_knots(self.covariate_values, self.basis_dim, self.degree)
        self.knots = np.asarray(self.knots, dtype=float)
        if len(self.knots) + self.degree - 1 != self.basis_dim:
            raise ValueError("knot vector does not match basis_dim")

    def block(self) -> DesignBlock:
        X = bspline_design(self.covariate_values, self.knots, self.degree)
        S = curvature_penalty(self.knots, self.degree, self.penalty_order)
        centered, Z = center_block(DesignBlock(X, S, "smooth"))
        self.constraint = Z
        return centered

    def transform(self, values):
        """Centred design rows for new covariate values."""
        if self.constraint is None:
            self.block()
        return bspline_design(values, self.knots, self.degree) @ self.constraint
