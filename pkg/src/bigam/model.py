"""Bivariate discrete-response models: design, cell probabilities and derivatives.

Every model is evaluated through the same pipeline. Each observation has a
small vector ``t`` of quantities linear in the coefficients (``t_i = Z_i theta``),
which is mapped to the predictor vector ``e`` entering the joint CDF (the map is
the identity except for the triangular model). A cell probability is the
rectangle volume of ``F(x, y) = C(Phi(x), Phi(y); gamma)`` between the
category bounds of the two margins.

Category coding is internal: a binary margin puts ``y = 1`` in the lower
rectangle (success when the latent error falls below the predictor); an
ordinal margin with levels ``1..K`` maps level ``k`` to category ``k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .basis import DesignBlock, SmoothTerm, center_block
from .copula import CopulaSpec, normal_margin_cdf, parse_copula
from .penalty import Adjacency, PenaltyAssembly, incidence_block, mrf_penalty

__all__ = [
    "KINDS",
    "ResponseSpec",
    "TermSpec",
    "ModelTriplet",
    "Design",
    "Evaluation",
    "ObsContrib",
    "build_design",
    "cell_probability",
    "log_likelihood",
    "evaluate",
    "obs_contrib",
    "triangular_transform",
    "mixed_response_map",
    "PROB_FLOOR",
]

KINDS = ("biv_binary_copula", "biv_ordinal_gaussian", "selection_binary", "triangular_ordinal")
PROB_FLOOR = 1e-300
CELL_EPS = 1e-12


class DesignError(ValueError):
    """Raised when data cannot be turned into a design for the requested model."""


@dataclass(frozen=True)
class ResponseSpec:
    kind: str = "binary"
    levels: int = 2

    def __post_init__(self):
        if self.kind not in ("binary", "ordinal"):
            raise ValueError(f"response kind must be binary or ordinal, got {self.kind!r}")
        if self.kind == "binary" and self.levels != 2:
            raise ValueError("binary responses have exactly two levels")
        if self.kind == "ordinal" and self.levels < 2:
            raise ValueError("ordinal responses need at least two levels")

    @property
    def n_thresholds(self):
        return 1 if self.kind == "binary" else self.levels - 1


@dataclass(frozen=True)
class TermSpec:
    kind: str
    column: str
    basis_dim: int = 10
    degree: int = 3
    penalty_order: int = 2
    adjacency: Adjacency | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "smooth", "mrf", "random"):
            raise ValueError(f"unknown term type {self.kind!r}")
        if self.kind == "mrf" and self.adjacency is None:
            raise ValueError(f"mrf term on {self.column!r} needs an adjacency")

    @property
    def name(self):
        if self.kind == "linear":
            return self.column
        tag = {"smooth": "s", "mrf": "mrf", "random": "re"}[self.kind]
        return f"{tag}({self.column})"


@dataclass
class ModelTriplet:
    """Response map, joint CDF and predictor layout of a bivariate model."""

    kind: str
    responses: tuple
    equations: list
    copula: CopulaSpec = field(default_factory=CopulaSpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.responses = tuple(self.responses)
        if len(self.responses) != 2:
            raise ValueError("exactly two response margins are required")
        if isinstance(self.copula, str):
            self.copula = parse_copula(self.copula)
        self.equations = [list(eq) for eq in self.equations]
        if len(self.equations) == 2:
            self.equations.append([])
        if len(self.equations) != 3:
            raise ValueError("two or three equations are required")
        r1, r2 = self.responses
        if self.kind in ("biv_binary_copula", "selection_binary"):
            if r1.kind != "binary" or r2.kind != "binary":
                raise ValueError(f"{self.kind} needs two binary responses")
        if self.kind in ("biv_ordinal_gaussian", "triangular_ordinal"):
            if self.copula.family != "gaussian":
                raise ValueError(f"{self.kind} uses the bivariate normal; copula must be gaussian")
            if self.equations[2]:
                raise ValueError(f"{self.kind} takes a scalar association parameter")
        if self.kind == "triangular_ordinal" and (r1.kind != "ordinal" or r2.kind != "ordinal"):
            raise ValueError("triangular_ordinal needs two ordinal responses")


# ---------------------------------------------------------------------------
# fitted predictor terms
# ---------------------------------------------------------------------------

def _numeric(data, column, rows=None):
    if column not in data.columns:
        raise DesignError(f"unknown column {column!r}")
    vals = pd.to_numeric(data[column], errors="coerce").to_numpy(dtype=float)
    raw = data[column]
    bad = np.isnan(vals) & ~raw.isna().to_numpy()
    if np.any(bad):
        raise DesignError(f"column {column!r} contains non-numeric values")
    if rows is not None:
        vals = vals[rows]
    if np.any(np.isnan(vals)):
        raise DesignError(f"column {column!r} has missing values")
    return vals


@dataclass
class FittedTerm:
    """A predictor term with everything needed to rebuild its columns on new data."""

    spec: TermSpec
    kind: str
    penalty: np.ndarray
    knots: np.ndarray | None = None
    constraint: np.ndarray | None = None
    levels: list | None = None
    region_count: int | None = None

    @property
    def name(self):
        return self.spec.name

    @property
    def n_columns(self):
        return self.penalty.shape[0]

    @property
    def penalized(self):
        return self.kind != "parametric"

    def columns(self, data, rows=None):
        v = None
        if self.spec.kind != "random":
            v = _numeric(data, self.spec.column, rows)
        if self.spec.kind == "linear":
            return v[:, None]
        if self.spec.kind == "smooth":
            from .basis import bspline_design

            return bspline_design(v, self.knots, self.spec.degree) @ self.constraint
        if self.spec.kind == "mrf":
            X = incidence_block(v, self.region_count)
            return X if self.constraint is None else X @ self.constraint
        col = data[self.spec.column] if self.spec.column in data.columns else None
        if col is None:
            raise DesignError(f"unknown column {self.spec.column!r}")
        vals = col.to_numpy() if rows is None else col.to_numpy()[rows]
        lookup = {lv: i for i, lv in enumerate(self.levels)}
        X = np.zeros((len(vals), len(self.levels)))
        for i, lv in enumerate(vals):
            if lv not in lookup:
                raise DesignError(f"unseen level {lv!r} in random effect {self.name}")
            X[i, lookup[lv]] = 1.0
        return X

    def to_dict(self):
        d = {
            "type": self.spec.kind,
            "column": self.spec.column,
            "basis_dim": self.spec.basis_dim,
            "degree": self.spec.degree,
            "penalty_order": self.spec.penalty_order,
            "kind": self.kind,
            "penalty": self.penalty.tolist(),
        }
        if self.knots is not None:
            d["knots"] = self.knots.tolist()
        if self.constraint is not None:
            d["constraint"] = self.constraint.tolist()
        if self.levels is not None:
            d["levels"] = [lv.item() if hasattr(lv, "item") else lv for lv in self.levels]
        if self.region_count is not None:
            d["region_count"] = self.region_count
        if self.spec.adjacency is not None:
            d["neighbors"] = [sorted(nb) for nb in self.spec.adjacency.neighbor_sets]
        return d

    @classmethod
    def from_dict(cls, d):
        adj = None
        if "neighbors" in d:
            adj = Adjacency(len(d["neighbors"]), tuple(d["neighbors"]))
        spec = TermSpec(d["type"], d["column"], d["basis_dim"], d["degree"], d["penalty_order"], adj)
        return cls(
            spec,
            d["kind"],
            np.asarray(d["penalty"], dtype=float),
            np.asarray(d["knots"]) if "knots" in d else None,
            np.asarray(d["constraint"]) if "constraint" in d else None,
            d.get("levels"),
            d.get("region_count"),
        )


def _fit_term(spec: TermSpec, data, rows, center_mrf):
    if spec.kind == "linear":
        _numeric(data, spec.column, rows)
        return FittedTerm(spec, "parametric", np.zeros((1, 1)))
    if spec.kind == "smooth":
        v = _numeric(data, spec.column, rows)
        if np.ptp(v) == 0:
            raise DesignError(f"smooth covariate {spec.column!r} is constant")
        sm = SmoothTerm(v, spec.basis_dim, spec.degree, spec.penalty_order)
        block = sm.block()
        return FittedTerm(spec, "smooth", block.penalty, knots=sm.knots, constraint=sm.constraint)
    if spec.kind == "mrf":
        v = _numeric(data, spec.column, rows)
        R = spec.adjacency.region_count
        X = incidence_block(v, R)
        S = mrf_penalty(spec.adjacency)
        if center_mrf:
            block, Z = center_block(DesignBlock(X, S, "mrf"))
            return FittedTerm(spec, "mrf", block.penalty, constraint=Z, region_count=R)
        return FittedTerm(spec, "mrf", S, region_count=R)
    if spec.column not in data.columns:
        raise DesignError(f"unknown column {spec.column!r}")
    col = data[spec.column].to_numpy()
    col = col if rows is None else col[rows]
    if pd.isna(col).any():
        raise DesignError(f"column {spec.column!r} has missing values")
    levels = sorted(pd.unique(col).tolist())
    return FittedTerm(spec, "random", np.eye(len(levels)), levels=levels)


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

@dataclass
class EquationLayout:
    index: int
    threshold: str          # "intercept", "cuts", "none", "structural"
    n_threshold: int
    terms: list
    offset: int
    size: int
    sign: float = 1.0

    def term_slices(self):
        out = {}
        pos = self.offset + self.n_threshold
        for term in self.terms:
            out[term.name] = slice(pos, pos + term.n_columns)
            pos += term.n_columns
        return out


@dataclass
class Design:
    """Model design on a fixed data set."""

    triplet: ModelTriplet
    equations: list
    Z: np.ndarray              # (n, t_dim, p)
    cat1: np.ndarray           # internal category of margin 1
    lo2: np.ndarray            # lower / upper bound index of margin 2 rectangle
    hi2: np.ndarray
    names: list
    penalties: PenaltyAssembly
    penalty_terms: list
    n_cuts: tuple

    @property
    def n(self):
        return self.Z.shape[0]

    @property
    def p(self):
        return self.Z.shape[2]

    @property
    def t_dim(self):
        return self.Z.shape[1]

    @property
    def e_dim(self):
        return self.n_cuts[0] + self.n_cuts[1] + 1

    @property
    def triangular(self):
        return self.triplet.kind == "triangular_ordinal"

    @property
    def selection(self):
        return self.triplet.kind == "selection_binary"

    def cut_slices(self):
        out = []
        for eq in self.equations[:2]:
            if eq.threshold == "cuts":
                out.append(slice(eq.offset, eq.offset + eq.n_threshold))
        return out

    def feasible(self, theta):
        """Ordinal cut points must be non-decreasing."""
        return all(np.all(np.diff(theta[s]) >= 0) for s in self.cut_slices())

    def rows_for(self, data, y=None):
        """Design of the same model on new covariate rows (responses optional)."""
        return build_design(data, self.triplet, y=y, template=self)

    def term_slices(self):
        out = {}
        for eq in self.equations:
            for name, s in eq.term_slices().items():
                out[(eq.index, name)] = s
        return out


def _response_codes(y, spec: ResponseSpec, label, allow_missing=None):
    y = np.asarray(y, dtype=float)
    miss = np.isnan(y)
    if allow_missing is None and np.any(miss):
        raise DesignError(f"response {label} has missing values")
    if allow_missing is not None and np.any(miss & ~allow_missing):
        raise DesignError(f"response {label} is missing where it should be observed")
    yy = np.where(miss, 0, y)
    if np.any(yy != np.round(yy)):
        raise DesignError(f"response {label} must be integer coded")
    yy = yy.astype(int)
    if spec.kind == "binary":
        ok = np.isin(yy, (0, 1)) | miss
        if not np.all(ok):
            raise DesignError(f"binary response {label} must be coded 0/1")
        return np.where(yy == 1, 0, 1), miss
    ok = ((yy >= 1) & (yy <= spec.levels)) | miss
    if not np.all(ok):
        raise DesignError(f"ordinal response {label} must lie in 1..{spec.levels}")
    return yy - 1, miss


def build_design(data, triplet: ModelTriplet, y=None, template: Design | None = None) -> Design:
    """Assemble per-observation linear maps, penalties and response codes.

    ``data`` is a DataFrame of covariates; ``y`` an ``(n, 2)`` array of
    responses (``NaN`` marks an unobserved outcome in selection models). With
    ``template`` the fitted terms of an existing design are reused, so the
    result is a design for prediction on new rows.
    """
    if not isinstance(data, pd.DataFrame):
        data = pd.DataFrame(data)
    n = len(data)
    kind = triplet.kind
    r1, r2 = triplet.responses

    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (n, 2):
            raise DesignError(f"responses must have shape ({n}, 2), got {y.shape}")
        cat1, _ = _response_codes(y[:, 0], r1, "1")
        if kind == "selection_binary":
            selected = y[:, 0] == 1
            cat2, miss2 = _response_codes(y[:, 1], r2, "2", allow_missing=~selected)
            cat2 = np.where(selected, cat2, 0)
        else:
            cat2, _ = _response_codes(y[:, 1], r2, "2")
            selected = np.ones(n, dtype=bool)
    else:
        cat1 = np.zeros(n, dtype=int)
        cat2 = np.zeros(n, dtype=int)
        selected = np.ones(n, dtype=bool)

    nb1, nb2 = r1.n_thresholds, r2.n_thresholds
    lo2 = cat2.copy()
    hi2 = cat2 + 1
    if kind == "selection_binary":
        lo2 = np.where(selected, lo2, 0)
        hi2 = np.where(selected, hi2, nb2 + 1)
    # rows used to place knots / centre terms of each equation
    fit_rows = [None, np.flatnonzero(selected) if kind == "selection_binary" else None, None]

    equations = []
    offset = 0
    for j in range(3):
        specs = triplet.equations[j]
        if j < 2:
            resp = triplet.responses[j]
            has_mrf = any(s.kind == "mrf" for s in specs)
            if resp.kind == "ordinal":
                threshold, nth, sign = "cuts", resp.n_thresholds, -1.0
            elif has_mrf:
                threshold, nth, sign = "none", 0, 1.0
            else:
                threshold, nth, sign = "intercept", 1, 1.0
            center_mrf = resp.kind == "ordinal"
        elif kind == "triangular_ordinal":
            threshold, nth, sign, center_mrf = "structural", 2, 1.0, False
        else:
            has_mrf = any(s.kind == "mrf" for s in specs)
            threshold = "none" if has_mrf else "intercept"
            nth, sign, center_mrf = (0 if has_mrf else 1), 1.0, False
        if template is not None:
            terms = template.equations[j].terms
        else:
            terms = [_fit_term(s, data, fit_rows[j], center_mrf) for s in specs]
        size = nth + sum(t.n_columns for t in terms)
        equations.append(EquationLayout(j + 1, threshold, nth, terms, offset, size, sign))
        offset += size
    p = offset

    # columns of each equation's terms (zeros on rows where they are irrelevant)
    eq_cols = []
    for j, eq in enumerate(equations):
        if not eq.terms:
            eq_cols.append(np.zeros((n, 0)))
            continue
        rows = fit_rows[j] if j == 1 and kind == "selection_binary" else None
        if rows is None:
            eq_cols.append(np.hstack([t.columns(data) for t in eq.terms]))
        else:
            full = np.zeros((n, eq.size - eq.n_threshold))
            if rows.size:
                full[rows] = np.hstack([t.columns(data, rows) for t in eq.terms])
            eq_cols.append(full)

    if kind == "triangular_ordinal":
        t_dim = nb1 + nb2 + 3
    else:
        t_dim = nb1 + nb2 + 1
    Z = np.zeros((n, t_dim, p))

    def put_margin(row0, eq, cols, nb):
        a = eq.offset
        for k in range(nb):
            r = row0 + k
            if eq.threshold == "cuts":
                Z[:, r, a + k] = 1.0
            elif eq.threshold == "intercept":
                Z[:, r, a] = 1.0
            Z[:, r, a + eq.n_threshold:a + eq.size] = eq.sign * cols

    e1, e2, e3 = equations
    put_margin(0, e1, eq_cols[0], nb1)
    if kind == "triangular_ordinal":
        # t = (eta1_k, L1 = X1 b1, c2_k - X2 b2, psi, atanh rho)
        Z[:, nb1, e1.offset + e1.n_threshold:e1.offset + e1.size] = eq_cols[0]
        put_margin(nb1 + 1, e2, eq_cols[1], nb2)
        Z[:, nb1 + nb2 + 1, e3.offset] = 1.0
        Z[:, nb1 + nb2 + 2, e3.offset + 1] = 1.0
    else:
        put_margin(nb1, e2, eq_cols[1], nb2)
        r = nb1 + nb2
        if e3.threshold == "intercept":
            Z[:, r, e3.offset] = 1.0
        Z[:, r, e3.offset + e3.n_threshold:e3.offset + e3.size] = eq_cols[2]

    names = []
    for eq in equations:
        pre = f"eq{eq.index}:"
        if eq.threshold == "cuts":
            names += [f"{pre}cut{k + 1}" for k in range(eq.n_threshold)]
        elif eq.threshold == "intercept":
            names.append(f"{pre}(Intercept)")
        elif eq.threshold == "structural":
            names += ["psi", "atanh_rho"]
        for t in eq.terms:
            if t.n_columns == 1:
                names.append(pre + t.name)
            else:
                names += [f"{pre}{t.name}.{i + 1}" for i in range(t.n_columns)]

    blocks, pterms = [], []
    for eq in equations:
        for t in eq.terms:
            if t.penalized:
                blocks.append((eq.term_slices()[t.name].start, t.penalty))
                pterms.append((eq.index, t.name))
    return Design(
        triplet, equations, Z, cat1, lo2, hi2, names, PenaltyAssembly(blocks, p), pterms, (nb1, nb2)
    )


# ---------------------------------------------------------------------------
# triangular structure
# ---------------------------------------------------------------------------

class TriangularPieces(NamedTuple):
    Gamma: np.ndarray
    L: np.ndarray
    Sigma: np.ndarray
    corr: float


def triangular_transform(psi: float, rho: float) -> TriangularPieces:
    """Gamma, L and the implied error covariance of the standardised system.

    ``L`` holds the standard deviation of the reduced-form second error; the
    standardised predictor is ``inv(L) inv(Gamma) eta`` and its error covariance
    ``Sigma`` has a unit diagonal.
    """
    if not -1 < rho < 1:
        raise ValueError("rho must lie in (-1, 1)")
    Gamma = np.array([[1.0, 0.0], [-psi, 1.0]])
    L = np.diag([1.0, np.sqrt(1.0 + 2.0 * psi * rho + psi * psi)])
    Omega = np.array([[1.0, rho], [rho, 1.0]])
    A = np.linalg.solve(L, np.linalg.inv(Gamma))
    Sigma = A @ Omega @ A.T
    return TriangularPieces(Gamma, L, Sigma, float(Sigma[0, 1]))


def _triangular_map(t, nb1, nb2, order=2):
    """Map ``t`` to the predictor vector ``e`` with Jacobian and second derivatives."""
    n = t.shape[0]
    m = nb1 + nb2 + 1
    td = t.shape[1]
    iL1, iM2 = nb1, nb1 + 1
    ia, ir = nb1 + nb2 + 1, nb1 + nb2 + 2
    L1 = t[:, iL1]
    M2 = t[:, iM2:iM2 + nb2]
    a = t[:, ia]
    b = np.tanh(t[:, ir])
    bp = 1.0 - b * b
    bpp = -2.0 * b * bp
    S = 1.0 + 2.0 * a * b + a * a
    S12, S32, S52 = np.sqrt(S), S ** 1.5, S ** 2.5
    q = 1.0 / S12
    N = M2 - (a * L1)[:, None]
    r = (a + b) / S12

    e = np.empty((n, m))
    e[:, :nb1] = t[:, :nb1]
    e[:, nb1:nb1 + nb2] = N * q[:, None]
    e[:, m - 1] = np.arctanh(np.clip(r, -1 + 1e-16, 1 - 1e-16))
    if order == 0:
        return e, None, None

    qa = -(a + b) / S32
    qb = -a / S32
    qaa = -1.0 / S32 + 3.0 * (a + b) ** 2 / S52
    qab = -1.0 / S32 + 3.0 * a * (a + b) / S52
    qbb = 3.0 * a * a / S52
    qr = qb * bp
    qar = qab * bp
    qrr = qbb * bp * bp + qb * bpp

    ra = (1.0 - b * b) / S32
    rb = (1.0 + a * b) / S32
    raa = -3.0 * (1.0 - b * b) * (a + b) / S52
    rab = -2.0 * b / S32 - 3.0 * a * (1.0 - b * b) / S52
    rbb = a / S32 - 3.0 * a * (1.0 + a * b) / S52
    om = 1.0 - r * r
    gr = 1.0 / om
    grr = 2.0 * r / om ** 2
    ga = gr * ra
    gb = gr * rb
    gaa = grr * ra * ra + gr * raa
    gab = grr * ra * rb + gr * rab
    gbb = grr * rb * rb + gr * rbb

    J = np.zeros((n, m, td))
    J[:, np.arange(nb1), np.arange(nb1)] = 1.0
    for k in range(nb2):
        row = nb1 + k
        J[:, row, iM2 + k] = q
        J[:, row, iL1] = -a * q
        J[:, row, ia] = -L1 * q + N[:, k] * qa
        J[:, row, ir] = N[:, k] * qr
    J[:, m - 1, ia] = ga
    J[:, m - 1, ir] = gb * bp
    if order == 1:
        return e, J, None

    H = np.zeros((n, m, td, td))

    def sym(row, i, j, val):
        H[:, row, i, j] = val
        H[:, row, j, i] = val

    for k in range(nb2):
        row = nb1 + k
        sym(row, iM2 + k, ia, qa)
        sym(row, iM2 + k, ir, qr)
        sym(row, iL1, ia, -q - a * qa)
        sym(row, iL1, ir, -a * qr)
        H[:, row, ia, ia] = -2.0 * L1 * qa + N[:, k] * qaa
        sym(row, ia, ir, -L1 * qr + N[:, k] * qar)
        H[:, row, ir, ir] = N[:, k] * qrr
    H[:, m - 1, ia, ia] = gaa
    sym(m - 1, ia, ir, gab * bp)
    H[:, m - 1, ir, ir] = gbb * bp * bp + gb * bpp
    return e, J, H


def predictor_map(design: Design, theta, order=2, t=None):
    """Linear quantities ``t``, predictors ``e``, Jacobian ``de/dt`` and Hessians."""
    if t is None:
        t = np.einsum("ntp,p->nt", design.Z, np.asarray(theta, dtype=float))
    if design.triangular:
        e, J, H = _triangular_map(t, design.n_cuts[0], design.n_cuts[1], order)
        return t, e, J, H
    return t, t, None, None


# ---------------------------------------------------------------------------
# cell probabilities and derivatives
# ---------------------------------------------------------------------------

def _corner_grid(design, e, order):
    """Joint CDF at every corner of the category grid, with e-space gradients."""
    n = e.shape[0]
    nb1, nb2 = design.n_cuts
    m = design.e_dim
    A, B = nb1 + 2, nb2 + 2
    xs = np.full((n, A), -np.inf)
    xs[:, A - 1] = np.inf
    xs[:, 1:A - 1] = e[:, :nb1]
    ys = np.full((n, B), -np.inf)
    ys[:, B - 1] = np.inf
    ys[:, 1:B - 1] = e[:, nb1:nb1 + nb2]
    g = e[:, m - 1]
    X = np.broadcast_to(xs[:, :, None], (n, A, B))
    Y = np.broadcast_to(ys[:, None, :], (n, A, B))
    G = np.broadcast_to(g[:, None, None], (n, A, B))
    val, grad, _ = normal_margin_cdf(design.triplet.copula, X, Y, G, order=min(order, 1))
    if order == 0:
        return val, None
    # scatter (x, y, g) derivatives into e-space
    de = np.zeros((n, A, B, m))
    for a in range(1, A - 1):
        de[:, a, :, a - 1] += grad[:, a, :, 0]
    for b in range(1, B - 1):
        de[:, :, b, nb1 + b - 1] += grad[:, :, b, 1]
    de[..., m - 1] += grad[..., 2]
    return val, de


def _cell_table(design, val, de=None):
    """Rectangle volumes for every internal (cat1, cat2) cell."""
    P = val[:, 1:, 1:] - val[:, :-1, 1:] - val[:, 1:, :-1] + val[:, :-1, :-1]
    if de is None:
        return P, None
    dP = de[:, 1:, 1:] - de[:, :-1, 1:] - de[:, 1:, :-1] + de[:, :-1, :-1]
    return P, dP


def _observable_cells(design, P, dP=None):
    """Flatten the cell table to the cells that can actually be observed."""
    n = P.shape[0]
    if design.selection:
        cells = np.stack([P[:, 0, 0], P[:, 0, 1], P[:, 1, :].sum(axis=1)], axis=1)
        if dP is None:
            return cells, None
        dcells = np.stack([dP[:, 0, 0], dP[:, 0, 1], dP[:, 1, :].sum(axis=1)], axis=1)
        return cells, dcells
    cells = P.reshape(n, -1)
    if dP is None:
        return cells, None
    return cells, dP.reshape(n, -1, dP.shape[-1])


def _observed_corners(design):
    c1 = design.cat1
    return [
        (c1 + 1, design.hi2, 1.0),
        (c1, design.hi2, -1.0),
        (c1 + 1, design.lo2, -1.0),
        (c1, design.lo2, 1.0),
    ]


def _observed(design, e, order):
    """Observed-cell probability with e-space gradient and Hessian."""
    n = e.shape[0]
    nb1, nb2 = design.n_cuts
    m = design.e_dim
    A, B = nb1 + 2, nb2 + 2
    rows = np.arange(n)
    xs = np.full((n, A), -np.inf)
    xs[:, A - 1] = np.inf
    xs[:, 1:A - 1] = e[:, :nb1]
    ys = np.full((n, B), -np.inf)
    ys[:, B - 1] = np.inf
    ys[:, 1:B - 1] = e[:, nb1:nb1 + nb2]
    g = e[:, m - 1]
    pi = np.zeros(n)
    grad = np.zeros((n, m)) if order >= 1 else None
    hess = np.zeros((n, m, m)) if order >= 2 else None
    for a_idx, b_idx, sign in _observed_corners(design):
        x = xs[rows, a_idx]
        y = ys[rows, b_idx]
        val, gr, he = normal_margin_cdf(design.triplet.copula, x, y, g, order=order)
        pi += sign * val
        if order == 0:
            continue
        # e-space positions of x and y for this corner (-1 when infinite)
        ix = np.where((a_idx >= 1) & (a_idx <= nb1), a_idx - 1, -1)
        iy = np.where((b_idx >= 1) & (b_idx <= nb2), nb1 + b_idx - 1, -1)
        pos = [ix, iy, np.full(n, m - 1)]
        for k in range(3):
            ok = pos[k] >= 0
            np.add.at(grad, (rows[ok], pos[k][ok]), sign * gr[ok, k])
        if order >= 2:
            for k in range(3):
                for l in range(3):
                    ok = (pos[k] >= 0) & (pos[l] >= 0)
                    np.add.at(hess, (rows[ok], pos[k][ok], pos[l][ok]), sign * he[ok, k, l])
    return pi, grad, hess


@dataclass
class Evaluation:
    """Log-likelihood and its derivatives at one coefficient vector."""

    loglik: float
    floored: int
    score: np.ndarray | None = None
    hessian: np.ndarray | None = None      # observed, D'WD + K
    fisher: np.ndarray | None = None       # expected information D'W_bar D
    rss0: float | None = None              # sum_i u_i' inv(W_bar_i) u_i
    loglik_i: np.ndarray | None = None


def _sandwich(Z, A):
    """sum_i Z_i' A_i Z_i for Z (n, t, p) and A (n, t, t)."""
    n, t, p = Z.shape
    AZ = np.einsum("nts,nsp->ntp", A, Z)
    return Z.reshape(n * t, p).T @ AZ.reshape(n * t, p)


def evaluate(design: Design, theta, order: int = 2, fisher: bool = True) -> Evaluation:
    """Log-likelihood (order 0), score (1), observed Hessian (2) and Fisher information."""
    theta = np.asarray(theta, dtype=float)
    if not design.feasible(theta):
        return Evaluation(-np.inf, design.n)
    t, e, J, H2 = predictor_map(design, theta, order=order if order else 0)
    pi, ge, he = _observed(design, e, order)
    floored = int(np.sum(pi < PROB_FLOOR))
    pi_f = np.maximum(pi, PROB_FLOOR)
    ll_i = np.log(pi_f)
    out = Evaluation(float(np.sum(ll_i)), floored, loglik_i=ll_i)
    if order == 0:
        return out
    n, m = e.shape
    live = (pi >= PROB_FLOOR)[:, None]
    u = np.where(live, ge / pi_f[:, None], 0.0)
    ut = u if J is None else np.einsum("nm,nmt->nt", u, J)
    out.score = np.einsum("nt,ntp->p", ut, design.Z)
    if order >= 2:
        W = np.where(live[:, :, None], he / pi_f[:, None, None], 0.0) - u[:, :, None] * u[:, None, :]
        if J is None:
            At = W
        else:
            At = np.einsum("nmt,nml,nls->nts", J, W, J) + np.einsum("nm,nmts->nts", u, H2)
        out.hessian = _sandwich(design.Z, At)
    if fisher:
        Wbar = fisher_weights(design, e)
        Ft = Wbar if J is None else np.einsum("nmt,nml,nls->nts", J, Wbar, J)
        out.fisher = _sandwich(design.Z, Ft)
        sol = np.einsum("nml,nl->nm", np.linalg.pinv(Wbar, rcond=1e-12, hermitian=True), u)
        out.rss0 = float(np.sum(u * sol))
    return out


def fisher_weights(design: Design, e):
    """Expected weights ``sum_k dpi_k dpi_k' / pi_k`` per observation (e-space)."""
    val, de = _corner_grid(design, e, order=1)
    P, dP = _cell_table(design, val, de)
    cells, dcells = _observable_cells(design, P, dP)
    # cells at rounding level carry no usable information and would swamp the sum
    inv = np.where(cells > CELL_EPS, 1.0 / np.maximum(cells, CELL_EPS), 0.0)
    return np.einsum("ncm,nc,ncl->nml", dcells, inv, dcells)


class ObsContrib(NamedTuple):
    D: np.ndarray       # (n, m, p)  d eta / d theta
    u: np.ndarray       # (n, m)
    W: np.ndarray       # (n, m, m)
    K: np.ndarray       # (n, p, p)
    W_bar: np.ndarray   # (n, m, m)
    loglik: np.ndarray  # (n,)


def obs_contrib(design: Design, theta) -> ObsContrib:
    """Per-observation chain-rule pieces: score_i = D_i'u_i, Hessian_i = D_i'W_iD_i + K_i."""
    theta = np.asarray(theta, dtype=float)
    t, e, J, H2 = predictor_map(design, theta, order=2)
    pi, ge, he = _observed(design, e, 2)
    pi_f = np.maximum(pi, PROB_FLOOR)
    live = (pi >= PROB_FLOOR)[:, None]
    u = np.where(live, ge / pi_f[:, None], 0.0)
    W = np.where(live[:, :, None], he / pi_f[:, None, None], 0.0) - u[:, :, None] * u[:, None, :]
    n, m = e.shape
    p = design.p
    if J is None:
        D = design.Z.copy()
        K = np.zeros((n, p, p))
    else:
        D = np.einsum("nmt,ntp->nmp", J, design.Z)
        Kt = np.einsum("nm,nmts->nts", u, H2)
        K = np.einsum("ntp,nts,nsq->npq", design.Z, Kt, design.Z)
    return ObsContrib(D, u, W, K, fisher_weights(design, e), np.log(pi_f))


def log_likelihood(design: Design, theta) -> float:
    return evaluate(design, theta, order=0, fisher=False).loglik


def cell_probability(design: Design, theta, t=None):
    """Probabilities of every observable cell, indexed by response values.

    Returns ``(n, K1, K2)`` with binary margins ordered ``(0, 1)`` and ordinal
    margins ordered ``(1, ..., K)``. Selection models return ``(n, 3)`` with
    columns ``(pi_0., pi_10, pi_11)``. Passing ``t`` (rows of ``Z_i theta``)
    bypasses the design product, e.g. to evaluate many coefficient draws.
    """
    _, e, _, _ = predictor_map(design, theta, order=0, t=t)
    val, _ = _corner_grid(design, e, order=0)
    P, _ = _cell_table(design, val)
    # rectangle volumes are non-negative; differencing can leave -1e-16 residue
    P = np.maximum(P, 0.0)
    r1, r2 = design.triplet.responses
    if r1.kind == "binary":
        P = P[:, ::-1, :]
    if r2.kind == "binary":
        P = P[:, :, ::-1]
    if design.selection:
        return np.stack([P[:, 0, :].sum(axis=1), P[:, 1, 0], P[:, 1, 1]], axis=1)
    return P


def mixed_response_map(kinds, pi_table):
    """Apply the response map ``r`` to a table of cell probabilities.

    Binary margins use the identity, ordinal margins cumulative sums. The
    composition does not depend on which margin is processed first.
    """
    kinds = tuple(kinds)
    if len(kinds) != 2 or any(k not in ("binary", "ordinal") for k in kinds):
        raise ValueError(f"unsupported response kinds {kinds}")
    out = np.asarray(pi_table, dtype=float)
    for axis, k in enumerate(kinds):
        if k == "ordinal":
            out = np.cumsum(out, axis=out.ndim - 2 + axis)
    return out
