"""Standard normal helpers, the bivariate normal CDF and bivariate copulas.

Copulas are evaluated either on the unit square (``copula_cdf``,
``copula_derivs``) or composed with standard normal margins
(``normal_margin_cdf``), which is the form the likelihood code consumes.
"""
from __future__ import annotations

import functools
import re
from dataclasses import dataclass

import numpy as np
import sympy as sp
from scipy import special
from sympy.codegen.cfunctions import expm1, log1p

__all__ = [
    "CopulaSpec",
    "DerivBundle",
    "std_normal",
    "norm_cdf",
    "norm_pdf",
    "norm_ppf",
    "bvn_cdf",
    "bvn_pdf",
    "copula_cdf",
    "copula_derivs",
    "normal_margin_cdf",
    "parse_copula",
    "FAMILIES",
]

FAMILIES = ("gaussian", "frank", "clayton", "gumbel", "joe")
ROTATIONS = (0, 90, 180, 270)

# u, v are clamped into [EDGE, 1 - EDGE] before copula derivatives are taken
EDGE = 1e-8
_FRANK_DEADBAND = 1e-6

# (lower, upper) clip applied to the unbounded association parameter
_GSTAR_CLIP = {
    "gaussian": (-8.0, 8.0),
    "frank": (-40.0, 40.0),
    "clayton": (-12.0, 4.0),
    "gumbel": (-12.0, 4.0),
    "joe": (-12.0, 4.0),
}


def norm_cdf(x):
    return special.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def norm_ppf(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("normal quantile is only defined on the open interval (0, 1)")
    return special.ndtri(p)


def std_normal(x):
    """Return ``(cdf, pdf)`` of the standard normal at ``x``."""
    return norm_cdf(x), norm_pdf(x)


# ---------------------------------------------------------------------------
# bivariate normal
# ---------------------------------------------------------------------------

# 20-point Gauss-Legendre half-set (Genz, BVNU)
_GL_W = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
    0.1527533871307259,
])
_GL_X = np.array([
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
    0.07652652113349733,
])
_W = np.concatenate([_GL_W, _GL_W])
_X = np.concatenate([1.0 - _GL_X, 1.0 + _GL_X])
_TWO_PI = 2.0 * np.pi


def _bvnu_finite(h, k, r):
    """P(X > h, Y > k) for finite h, k and |r| < 1 (Drezner-Wesolowsky / Genz)."""
    out = np.empty_like(h)
    mid = np.abs(r) < 0.925
    if np.any(mid):
        hm, km, rm = h[mid], k[mid], r[mid]
        hk = hm * km
        hs = 0.5 * (hm * hm + km * km)
        asr = 0.5 * np.arcsin(rm)
        sn = np.sin(asr[:, None] * _X[None, :])
        vals = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn)) @ _W
        out[mid] = vals * asr / _TWO_PI + norm_cdf(-hm) * norm_cdf(-km)
    tail = ~mid
    if np.any(tail):
        ht, rt = h[tail], r[tail]
        kt = np.where(rt < 0, -k[tail], k[tail])
        hk = ht * kt
        bvn = np.zeros_like(ht)
        inner = np.abs(rt) < 1.0
        if np.any(inner):
            hi, ki, hki, ri = ht[inner], kt[inner], hk[inner], rt[inner]
            as_ = 1.0 - ri * ri
            a = np.sqrt(as_)
            bs = (hi - ki) ** 2
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 80.0
            asr = -0.5 * (bs / as_ + hki)
            val = np.where(
                asr > -100.0,
                a * np.exp(np.maximum(asr, -100.0))
                * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
                0.0,
            )
            b = np.sqrt(bs)
            sp_ = np.sqrt(_TWO_PI) * norm_cdf(-b / a)
            val = val - np.where(
                hki > -100.0,
                np.exp(-0.5 * np.maximum(hki, -100.0)) * sp_ * b
                * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
                0.0,
            )
            a2 = 0.5 * a
            xs = (a2[:, None] * _X[None, :]) ** 2
            asr2 = -0.5 * (bs[:, None] / xs + hki[:, None])
            spn = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-0.5 * hki[:, None] * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(
                asr2 > -100.0, np.exp(np.maximum(asr2, -100.0)) * (ep - spn), 0.0
            )
            val = val + a2 * (terms @ _W)
            bvn[inner] = -val / _TWO_PI
        pos = rt > 0
        bvn = np.where(pos, bvn + norm_cdf(-np.maximum(ht, kt)), bvn)
        neg = ~pos
        lo_part = np.where(ht < 0, norm_cdf(kt) - norm_cdf(ht), norm_cdf(-ht) - norm_cdf(-kt))
        bvn = np.where(neg & (ht >= kt), -bvn, bvn)
        bvn = np.where(neg & (ht < kt), lo_part - bvn, bvn)
        out[tail] = bvn
    return np.clip(out, 0.0, 1.0)


def bvn_cdf(a, b, rho):
    """Standard bivariate normal CDF ``P(X <= a, Y <= b)`` with correlation ``rho``.

    ``a`` and ``b`` may be infinite. ``|rho| >= 1`` uses the exact comonotone
    or countermonotone limits.
    """
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    scalar = a.ndim == 0
    shape = a.shape
    a, b, rho = a.ravel(), b.ravel(), rho.ravel()
    if np.any(np.isnan(a) | np.isnan(b) | np.isnan(rho)):
        raise ValueError("bvn_cdf received NaN input")
    out = np.empty(a.shape)
    done = np.zeros(a.shape, dtype=bool)

    m = (a == -np.inf) | (b == -np.inf)
    out[m] = 0.0
    done |= m
    m = ~done & (a == np.inf)
    out[m] = norm_cdf(b[m])
    done |= m
    m = ~done & (b == np.inf)
    out[m] = norm_cdf(a[m])
    done |= m
    m = ~done & (rho >= 1.0)
    out[m] = norm_cdf(np.minimum(a[m], b[m]))
    done |= m
    m = ~done & (rho <= -1.0)
    out[m] = np.maximum(norm_cdf(a[m]) + norm_cdf(b[m]) - 1.0, 0.0)
    done |= m
    m = ~done & (rho == 0.0)
    out[m] = norm_cdf(a[m]) * norm_cdf(b[m])
    done |= m
    rest = ~done
    if np.any(rest):
        out[rest] = _bvnu_finite(-a[rest], -b[rest], rho[rest])
    return out[0] if scalar else out.reshape(shape)


def bvn_pdf(x, y, rho):
    x, y, rho = (np.asarray(z, dtype=float) for z in (x, y, rho))
    om = 1.0 - rho * rho
    q = (x * x - 2.0 * rho * x * y + y * y) / om
    return np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(om))


# ---------------------------------------------------------------------------
# copula families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CopulaSpec:
    family: str = "gaussian"
    rotation: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown copula family {self.family!r}")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")
        if self.family in ("gaussian", "frank") and self.rotation != 0:
            raise ValueError(f"{self.family} copula is radially symmetric; rotation must be 0")

    @property
    def name(self) -> str:
        return self.family + (str(self.rotation) if self.rotation else "")

    @property
    def independence_gstar(self) -> float:
        """Association parameter value on the unbounded scale closest to independence."""
        return 0.0 if self.family in ("gaussian", "frank") else _GSTAR_CLIP[self.family][0] / 2

    # links ---------------------------------------------------------------
    def gamma(self, gstar):
        """Map the unbounded parameter to the family's admissible range."""
        return self.link(gstar)[0]

    def link(self, gstar):
        """Return ``(gamma, dgamma/dgstar, d2gamma/dgstar2)``."""
        g = np.asarray(gstar, dtype=float)
        lo, hi = _GSTAR_CLIP[self.family]
        inside = (g >= lo) & (g <= hi)
        g = np.clip(g, lo, hi)
        if self.family == "gaussian":
            r = np.tanh(g)
            d1 = 1.0 - r * r
            d2 = -2.0 * r * d1
        elif self.family == "frank":
            small = np.abs(g) < _FRANK_DEADBAND
            r = np.where(small, np.where(g < 0, -_FRANK_DEADBAND, _FRANK_DEADBAND), g)
            d1 = np.ones_like(g)
            d2 = np.zeros_like(g)
        elif self.family == "clayton":
            r = np.exp(g)
            d1 = r
            d2 = r
        else:
            e = np.exp(g)
            r = 1.0 + e
            d1 = e
            d2 = e
        d1 = np.where(inside, d1, 0.0)
        d2 = np.where(inside, d2, 0.0)
        return r, d1, d2

    def inverse_link(self, gamma):
        g = np.asarray(gamma, dtype=float)
        if self.family == "gaussian":
            if np.any(np.abs(g) >= 1):
                raise ValueError("Gaussian copula correlation must lie in (-1, 1)")
            return np.arctanh(g)
        if self.family == "frank":
            if np.any(g == 0):
                raise ValueError("Frank copula parameter must be non-zero")
            return g
        if self.family == "clayton":
            if np.any(g <= 0):
                raise ValueError("Clayton copula parameter must be positive")
            return np.log(g)
        if np.any(g <= 1):
            raise ValueError(f"{self.family} copula parameter must exceed 1")
        return np.log(g - 1.0)


_NAME_RE = re.compile(r"^(gaussian|frank|clayton|gumbel|joe)(0|90|180|270)?$")


def parse_copula(name: str) -> CopulaSpec:
    """Parse names such as ``"gaussian"``, ``"joe90"`` or ``"clayton270"``."""
    if isinstance(name, CopulaSpec):
        return name
    m = _NAME_RE.match(str(name).strip().lower())
    if m is None:
        raise ValueError(f"unknown copula {name!r}")
    return CopulaSpec(m.group(1), int(m.group(2) or 0))


def _archimedean_expr(family, u, v, t):
    if family == "clayton":
        return (u ** (-t) + v ** (-t) - 1) ** (-1 / t)
    if family == "gumbel":
        return sp.exp(-(((-sp.log(u)) ** t + (-sp.log(v)) ** t) ** (1 / t)))
    if family == "joe":
        a = (1 - u) ** t
        b = (1 - v) ** t
        return 1 - (a + b - a * b) ** (1 / t)
    if family == "frank":
        return -log1p(expm1(-t * u) * expm1(-t * v) / expm1(-t)) / t
    raise ValueError(family)


@functools.lru_cache(maxsize=None)
def _symbolic(family):
    u, v, t = sp.symbols("u v t", positive=True)
    if family == "frank":
        t = sp.Symbol("t", real=True, nonzero=True)
    expr = _archimedean_expr(family, u, v, t)
    args = (u, v, t)
    grad = [sp.diff(expr, z) for z in args]
    hess = [[sp.diff(grad[i], args[j]) for j in range(3)] for i in range(3)]
    f0 = sp.lambdify(args, expr, "numpy")
    f1 = sp.lambdify(args, grad, "numpy", cse=True)
    f2 = sp.lambdify(args, [hess[i][j] for i in range(3) for j in range(i, 3)], "numpy", cse=True)
    return f0, f1, f2


# C_rot(u, v) = a + b*u + c*v + s * C(fu(u), fv(v)); du, dv are the derivatives of fu, fv
_ROT = {
    0: (0.0, 0.0, 0.0, 1.0, 1.0, 1.0),
    90: (0.0, 0.0, 1.0, -1.0, -1.0, 1.0),
    180: (-1.0, 1.0, 1.0, 1.0, -1.0, -1.0),
    270: (0.0, 1.0, 0.0, -1.0, 1.0, -1.0),
}


def _flip(x, d):
    return x if d > 0 else 1.0 - x


def _base_cdf(family, u, v, gam):
    if family == "gaussian":
        with np.errstate(divide="ignore"):
            x = special.ndtri(u)
            y = special.ndtri(v)
        return bvn_cdf(x, y, gam)
    f0 = _symbolic(family)[0]
    with np.errstate(all="ignore"):
        c = f0(u, v, gam)
    # exact values on the boundary of the unit square
    c = np.where((u <= 0) | (v <= 0), 0.0, c)
    c = np.where(u >= 1, v, c)
    c = np.where(v >= 1, u, c)
    return np.clip(c, np.maximum(u + v - 1.0, 0.0), np.minimum(u, v))


def _base_derivs(family, u, v, gam):
    """Gradient (..., 3) and Hessian (..., 3, 3) of the unrotated copula in (u, v, gamma)."""
    if family == "gaussian":
        x = special.ndtri(u)
        y = special.ndtri(v)
        r = gam
        om = 1.0 - r * r
        sq = np.sqrt(om)
        wx = (y - r * x) / sq
        wy = (x - r * y) / sq
        dens2 = bvn_pdf(x, y, r)
        px, py = norm_pdf(x), norm_pdf(y)
        h1 = norm_cdf(wx)
        h2 = norm_cdf(wy)
        h3 = dens2
        cop_dens = dens2 / (px * py)
        h11 = -r / sq * norm_pdf(wx) / px
        h22 = -r / sq * norm_pdf(wy) / py
        h12 = cop_dens
        h13 = dens2 * (r * y - x) / om / px
        h23 = dens2 * (r * x - y) / om / py
        q = x * x - 2 * r * x * y + y * y
        h33 = dens2 * (r / om + (x * y * om - r * q) / om ** 2)
        grad = np.stack([h1, h2, h3], axis=-1)
        hess = np.stack(
            [np.stack([h11, h12, h13], -1), np.stack([h12, h22, h23], -1), np.stack([h13, h23, h33], -1)],
            axis=-2,
        )
        return grad, hess
    _, f1, f2 = _symbolic(family)
    with np.errstate(all="ignore"):
        g = f1(u, v, gam)
        h = f2(u, v, gam)
    shape = np.broadcast(u, v, gam).shape
    g = [np.broadcast_to(np.asarray(z, dtype=float), shape) for z in g]
    h = [np.broadcast_to(np.asarray(z, dtype=float), shape) for z in h]
    h11, h12, h13, h22, h23, h33 = h
    grad = np.stack(g, axis=-1)
    hess = np.stack(
        [np.stack([h11, h12, h13], -1), np.stack([h12, h22, h23], -1), np.stack([h13, h23, h33], -1)],
        axis=-2,
    )
    return grad, hess


def _check_unit(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(np.isnan(u)) or np.any(np.isnan(v)):
        raise ValueError("copula evaluated at NaN")
    if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
        raise ValueError("copula arguments must lie in [0, 1]")
    return u, v


def copula_cdf(spec: CopulaSpec, u, v, gstar):
    """Copula CDF at ``(u, v)`` with association given on the unbounded scale."""
    u, v = _check_unit(u, v)
    gstar = np.asarray(gstar, dtype=float)
    if np.any(np.isnan(gstar)):
        raise ValueError("copula evaluated at NaN association parameter")
    gam = spec.gamma(gstar)
    a, b, c, s, du, dv = _ROT[spec.rotation]
    return a + b * u + c * v + s * _base_cdf(spec.family, _flip(u, du), _flip(v, dv), gam)


@dataclass(frozen=True)
class DerivBundle:
    """First and second partial derivatives of a copula in ``(u, v, gamma)``."""

    grad: np.ndarray
    hess: np.ndarray

    @property
    def h1(self):
        return self.grad[..., 0]

    @property
    def h2(self):
        return self.grad[..., 1]

    @property
    def h3(self):
        return self.grad[..., 2]

    @property
    def h_lm(self):
        return self.hess


def copula_derivs(spec: CopulaSpec, u, v, gstar) -> DerivBundle:
    """Analytic partial derivatives of the (rotated) copula in ``(u, v, gamma)``.

    ``u`` and ``v`` are clamped to ``[1e-8, 1 - 1e-8]``. The chain rule through
    the link is left to the caller.
    """
    u, v = _check_unit(u, v)
    u = np.clip(u, EDGE, 1.0 - EDGE)
    v = np.clip(v, EDGE, 1.0 - EDGE)
    gam = spec.gamma(gstar)
    _, _, _, s, du, dv = _ROT[spec.rotation]
    a, b, c, _, _, _ = _ROT[spec.rotation]
    g, h = _base_derivs(spec.family, _flip(u, du), _flip(v, dv), gam)
    dvec = np.array([du, dv, 1.0])
    grad = s * g * dvec
    grad[..., 0] += b
    grad[..., 1] += c
    hess = s * h * np.outer(dvec, dvec)
    return DerivBundle(grad, hess)


# ---------------------------------------------------------------------------
# copula composed with standard normal margins
# ---------------------------------------------------------------------------

def normal_margin_cdf(spec: CopulaSpec, x, y, gstar, order: int = 2):
    """``F(x, y) = C(Phi(x), Phi(y); gamma(gstar))`` and derivatives in ``(x, y, gstar)``.

    ``x`` and ``y`` may be infinite. Returns ``(F, grad, hess)`` with ``grad`` of
    shape ``(..., 3)`` and ``hess`` of shape ``(..., 3, 3)``; trailing entries
    are ``None`` when ``order`` is lower.
    """
    x, y, gstar = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(gstar, dtype=float)
    )
    shape = x.shape
    x, y, gstar = x.ravel(), y.ravel(), gstar.ravel()
    n = x.size
    val = np.zeros(n)
    grad = np.zeros((n, 3)) if order >= 1 else None
    hess = np.zeros((n, 3, 3)) if order >= 2 else None

    zero = (x == -np.inf) | (y == -np.inf)
    both = ~zero & (x == np.inf) & (y == np.inf)
    xinf = ~zero & ~both & (x == np.inf)
    yinf = ~zero & ~both & (y == np.inf)
    fin = ~(zero | both | xinf | yinf)
    val[both] = 1.0
    for mask, arg, col in ((xinf, y, 1), (yinf, x, 0)):
        if np.any(mask):
            z = arg[mask]
            val[mask] = norm_cdf(z)
            if order >= 1:
                grad[mask, col] = norm_pdf(z)
            if order >= 2:
                hess[mask, col, col] = -z * norm_pdf(z)

    if np.any(fin):
        xf, yf, gf = x[fin], y[fin], gstar[fin]
        gam, dg, d2g = spec.link(gf)
        if spec.family == "gaussian":
            r = gam
            val[fin] = bvn_cdf(xf, yf, r)
            if order >= 1:
                om = 1.0 - r * r
                sq = np.sqrt(om)
                wx = (yf - r * xf) / sq
                wy = (xf - r * yf) / sq
                phi2 = bvn_pdf(xf, yf, r)
                px, py = norm_pdf(xf), norm_pdf(yf)
                Fx = px * norm_cdf(wx)
                Fy = py * norm_cdf(wy)
                Fr = phi2
                grad[fin] = np.stack([Fx, Fy, Fr * dg], axis=-1)
                if order >= 2:
                    Fxx = -xf * Fx - r / sq * px * norm_pdf(wx)
                    Fyy = -yf * Fy - r / sq * py * norm_pdf(wy)
                    Fxy = phi2
                    Fxr = phi2 * (r * yf - xf) / om
                    Fyr = phi2 * (r * xf - yf) / om
                    q = xf * xf - 2 * r * xf * yf + yf * yf
                    Frr = phi2 * (r / om + (xf * yf * om - r * q) / om ** 2)
                    H = np.empty((xf.size, 3, 3))
                    H[:, 0, 0] = Fxx
                    H[:, 1, 1] = Fyy
                    H[:, 0, 1] = H[:, 1, 0] = Fxy
                    H[:, 0, 2] = H[:, 2, 0] = Fxr * dg
                    H[:, 1, 2] = H[:, 2, 1] = Fyr * dg
                    H[:, 2, 2] = Frr * dg * dg + Fr * d2g
                    hess[fin] = H
        else:
            u = norm_cdf(xf)
            v = norm_cdf(yf)
            val[fin] = copula_cdf(spec, u, v, gf)
            if order >= 1:
                bundle = copula_derivs(spec, u, v, gf)
                h = bundle.grad
                px, py = norm_pdf(xf), norm_pdf(yf)
                grad[fin] = np.stack([h[:, 0] * px, h[:, 1] * py, h[:, 2] * dg], axis=-1)
                if order >= 2:
                    hh = bundle.hess
                    scale = np.stack([px, py, dg], axis=-1)
                    H = hh * scale[:, :, None] * scale[:, None, :]
                    H[:, 0, 0] -= h[:, 0] * px * xf
                    H[:, 1, 1] -= h[:, 1] * py * yf
                    H[:, 2, 2] += h[:, 2] * d2g
                    hess[fin] = H

    val = val.reshape(shape)
    if grad is not None:
        grad = grad.reshape(shape + (3,))
    if hess is not None:
        hess = hess.reshape(shape + (3, 3))
    return val, grad, hess
