"""Spline families on clamped knot vectors: B (partition of unity),
M (unit integral), I (integrated M, monotone 0 to 1) and O (L2-orthonormal),
plus weight normalizations, max-value bounds and 1D rejection sampling.

Evaluation has two routes sharing one recurrence:

* a dense route (all basis functions at arbitrary points, analytic
  derivatives of any order) used for precomputation, tests and plotting;
* a local route (only the ``order`` nonzero values per point) written against
  the generic arithmetic of :mod:`waveflow.autodiff`, so one code path serves
  plain arrays, tape variables and Taylor jets.

The local route runs a single de Boor triangle on the once-augmented knot
vector: its final level gives the order-(k+1) values needed for I-curves,
its previous level gives the order-k values needed for M- and O-curves.
"""

import numpy as np

from . import autodiff as ad
from .errors import (ConfigurationError, DegenerateWeightsError,
                     NonSmoothPointError, NumericalError,
                     PathologicalDensityError)
from .numerics import composite_gauss_legendre

EPS_REGULARIZE = 1e-4
_MAX_CONSECUTIVE_REJECTIONS = 10 ** 6


class KnotVector:
    """Clamped knot sequence with lazily cached basis metadata."""

    def __init__(self, knots, order):
        knots = np.asarray(knots, dtype=float)
        if order < 1:
            raise ConfigurationError("spline order must be >= 1")
        if knots.ndim != 1 or len(knots) < 2 * order:
            raise ConfigurationError(
                f"need n_basis >= order, got {len(knots)} knots for order {order}")
        if np.any(np.diff(knots) < 0):
            raise ConfigurationError("knots must be non-decreasing")
        a, b = knots[0], knots[-1]
        if not a < b:
            raise ConfigurationError("knot interval is degenerate")
        if not (np.all(knots[:order] == a) and np.all(knots[-order:] == b)):
            raise ConfigurationError("knot vector is not clamped")
        self.knots = knots
        self.order = order
        self.n_basis = len(knots) - order
        self._cache = {}

    @property
    def interval(self):
        return float(self.knots[0]), float(self.knots[-1])

    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def augmented(self):
        """Knot vector of the order-(k+1) basis the I-splines expand in."""
        return self._cached("augmented", lambda: np.concatenate(
            ([self.knots[0]], self.knots, [self.knots[-1]])))

    @property
    def m_scale(self):
        # M_i = order/(t_{i+k} - t_i) * B_i; widths are positive on clamped vectors
        return self._cached("m_scale", lambda: self.order / (
            self.knots[self.order:] - self.knots[:self.n_basis]))

    @property
    def cum_matrix(self):
        # maps I-weights alpha to order-(k+1) B-coefficients (0, cumsum(alpha))
        def build():
            n = self.n_basis
            return np.triu(np.ones((n, n + 1)), 1)
        return self._cached("cum_matrix", build)

    @property
    def identity_alpha(self):
        """Simplex weights for which the I-curve is the identity map."""
        def build():
            a, b = self.interval
            widths = self.knots[self.order:] - self.knots[:self.n_basis]
            return widths / (self.order * (b - a))
        return self._cached("identity_alpha", build)

    @property
    def gram(self):
        return self._cached("gram", lambda: gram_matrix(self))

    @property
    def ortho(self):
        return self._cached("ortho", lambda: lowdin_orthogonalize(self.gram))

    @property
    def mspline_basis_max(self):
        """max_i max_x M_i, found on a per-basis grid with Newton polish."""
        return self._cached("mspline_basis_max", lambda: _per_basis_m_max(self))

    def spans(self, x):
        s = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(s, self.order - 1, self.n_basis - 1).astype(np.int64)


def make_clamped_knots(n_basis, order, interval=(0.0, 1.0)):
    """Clamped knot vector with equidistant interior knots."""
    if n_basis < order:
        raise ConfigurationError(f"n_basis={n_basis} < order={order}")
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ConfigurationError("interval must satisfy a < b")
    body = np.linspace(a, b, n_basis - order + 2)
    knots = np.concatenate((np.full(order - 1, a), body, np.full(order - 1, b)))
    return KnotVector(knots, order)


# ---------------------------------------------------------------------------
# Core recurrence
# ---------------------------------------------------------------------------

def _triangle(tknots, order, spans, x, want_previous=False):
    """Nonzero B-spline values at each point (vectorized de Boor triangle).

    ``x`` may be any value kind; ``spans`` are plain span indices into
    ``tknots``.  Returns the final level (order ``order``, width ``order``);
    with ``want_previous`` also the level before it (width ``order-1``).
    """
    k = order
    npts = spans.shape[0]
    prev = None
    level = np.ones((npts, 1))
    if k > 1:
        m_idx = np.arange(1, k)
        tl = tknots[spans[:, None] + 1 - m_idx]
        tr = tknots[spans[:, None] + m_idx]
        xcol = ad.reshape(x, (npts, 1))
        left = xcol - tl
        right = tr - xcol
        for j in range(1, k):
            r_idx = np.arange(j)
            dens = (tknots[spans[:, None] + r_idx + 1]
                    - tknots[spans[:, None] + r_idx + 1 - j])
            temp = level / dens
            a_part = ad.pad_last(ad.slice_last(right, 0, j) * temp, 0, 1)
            b_part = ad.pad_last(ad.flip_last(ad.slice_last(left, 0, j)) * temp, 1, 0)
            if want_previous and j == k - 1:
                prev = level
            level = a_part + b_part
    if want_previous:
        return prev, level
    return level


def local_bases(kv, x):
    """Span indices plus the order-k and order-(k+1) local basis values.

    One augmented-knot triangle yields both: the order-(k+1) values feed
    I-curves, the previous level equals the order-k basis on the base knots.
    """
    data = np.asarray(ad.data_of(x), dtype=float)
    if isinstance(x, ad.Jet) and kv.order < 4:
        interior = kv.knots[kv.order:-kv.order]
        if interior.size and np.any(np.isin(data, interior)):
            raise NonSmoothPointError(
                f"second derivative at a knot of an order-{kv.order} spline")
    spans = kv.spans(data)
    b_local, bp_local = _triangle(kv.augmented, kv.order + 1, spans + 1, x,
                                  want_previous=True)
    return spans, b_local, bp_local


def icurve_local(kv, alpha, spans, bp_local):
    """I-spline curve value from precomputed local order-(k+1) values."""
    cplus = alpha @ kv.cum_matrix
    idxp = spans[:, None] + np.arange(1 - kv.order, 2)
    return ad.sum_last(ad.gather_last(cplus, idxp) * bp_local)


def mcurve_local(kv, alpha, spans, b_local):
    """M-spline curve value (the I-curve derivative) from local values."""
    idx = spans[:, None] + np.arange(1 - kv.order, 1)
    return ad.sum_last(ad.gather_last(alpha, idx) * (b_local * kv.m_scale[idx]))


def ocurve_local(kv, bcoefs, spans, b_local):
    """O-family curve value given its B-spline coefficients."""
    idx = spans[:, None] + np.arange(1 - kv.order, 1)
    return ad.sum_last(ad.gather_last(bcoefs, idx) * b_local)


# ---------------------------------------------------------------------------
# Dense evaluation (plain points, any derivative order)
# ---------------------------------------------------------------------------

def _dense_b(tknots, order, x):
    k = order
    n = len(tknots) - k
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, b = tknots[0], tknots[-1]
    inside = (x >= a) & (x <= b)
    xs = np.where(inside, x, a)
    # clamp spans to the nonempty range; end repeats can exceed `order` when
    # the derivative recursion evaluates a lower order on the same knots
    lo = np.searchsorted(tknots, a, side="right") - 1
    hi = np.searchsorted(tknots, b, side="left") - 1
    spans = np.clip(np.searchsorted(tknots, xs, side="right") - 1, lo, hi)
    local = _triangle(tknots, k, spans, xs)
    dense = np.zeros((len(x), n))
    rows = np.arange(len(x))[:, None]
    cols = spans[:, None] + np.arange(1 - k, 1)
    dense[rows, cols] = local
    dense[~inside] = 0.0
    return dense


def _dense_b_deriv(tknots, order, x, d):
    x1 = np.atleast_1d(np.asarray(x, dtype=float))
    if d == 0:
        return _dense_b(tknots, order, x1)
    k = order
    n = len(tknots) - k
    if d > k - 1:
        return np.zeros((len(x1), n))
    # d/dx B_{i,k} = (k-1) [ B_{i,k-1}/(t_{i+k-1}-t_i) - B_{i+1,k-1}/(t_{i+k}-t_{i+1}) ]
    low = _dense_b_deriv(tknots, k - 1, x1, d - 1)
    out = np.zeros((len(x1), n))
    for i in range(n):
        den1 = tknots[i + k - 1] - tknots[i]
        den2 = tknots[i + k] - tknots[i + 1]
        acc = np.zeros(len(x1))
        if den1 > 0:
            acc = low[:, i] / den1
        if den2 > 0:
            acc = acc - low[:, i + 1] / den2
        out[:, i] = (k - 1) * acc
    return out


def _as_batch(x):
    arr = np.asarray(x, dtype=float)
    return np.atleast_1d(arr), arr.ndim == 0


def eval_basis(family, knots, x, derivative_order=0):
    """All B- or M-basis values (or d-th analytic derivatives) at x.

    Points outside the knot interval get all-zero rows; this convention is
    what rejection sampling relies on.  Scalar x returns a flat vector.
    """
    if family not in ("B", "M"):
        raise ConfigurationError(f"unknown basis family {family!r}")
    x1, scalar = _as_batch(x)
    dense = _dense_b_deriv(knots.knots, knots.order, x1, derivative_order)
    if family == "M":
        dense = dense * knots.m_scale
    return dense[0] if scalar else dense


def eval_ispline_basis(knots, x, derivative_order=0):
    """All I-basis values at x; derivative order 1 is exactly the M basis."""
    if derivative_order > 0:
        return eval_basis("M", knots, x, derivative_order - 1)
    x1, scalar = _as_batch(x)
    # I_i(x) = sum_{j > i} of the order-(k+1) B-splines on the augmented knots
    bp = _dense_b(knots.augmented, knots.order + 1, x1)
    suffix = np.cumsum(bp[:, ::-1], axis=1)[:, ::-1]
    dense = suffix[:, 1:]
    a, b = knots.interval
    dense[(x1 < a) | (x1 > b)] = 0.0
    return dense[0] if scalar else dense


# ---------------------------------------------------------------------------
# Gram matrix and symmetric orthogonalization
# ---------------------------------------------------------------------------

def gram_matrix(knots):
    """G[i,j] = integral of B_i B_j, exact Gauss-Legendre per knot span."""
    xs, ws = composite_gauss_legendre(np.unique(knots.knots), knots.order + 1)
    E = _dense_b(knots.knots, knots.order, xs)
    G = (E * ws[:, None]).T @ E
    return 0.5 * (G + G.T)


class OrthoBasis:
    """Basis change from O-spline coefficients to B-spline coefficients."""

    def __init__(self, change_matrix, gram, sq_norms):
        self.change_matrix = change_matrix
        self.gram = gram
        self.sq_norms = sq_norms


def lowdin_orthogonalize(gram):
    """Symmetrized Gram-Schmidt: pair the first basis vector with the last,
    the second with the second-to-last, and so on inwards; each pair is first
    orthogonalized against all completed vectors, then rotated by the
    two-vector symmetric (Loewdin) formula; an odd middle vector passes
    through.  Columns of the result are orthonormal under the Gram metric.
    """
    G = np.asarray(gram, dtype=float)
    n = G.shape[0]
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("gram matrix is not positive definite") from exc
    sq_norms = np.sqrt(np.diag(G))
    V = np.eye(n) / sq_norms
    C = np.zeros((n, n))
    done = []

    def project_out(v):
        for d in done:
            v = v - (d @ G @ v) * d
        return v

    def gnormalize(v, what):
        norm = np.sqrt(v @ G @ v)
        if norm < 1e-12:
            raise NumericalError(f"{what} collapsed during orthogonalization")
        return v / norm

    for i in range(n // 2):
        j = n - 1 - i
        a = gnormalize(project_out(V[:, i]), f"basis vector {i}")
        b = gnormalize(project_out(V[:, j]), f"basis vector {j}")
        s = a @ G @ b
        if 1.0 - abs(s) < 1e-12:
            raise NumericalError(f"pair ({i},{j}) is numerically parallel")
        plus = (a + b) / np.sqrt(1.0 + s)
        minus = (a - b) / np.sqrt(1.0 - s)
        C[:, i] = 0.5 * (plus + minus)
        C[:, j] = 0.5 * (plus - minus)
        done.append(C[:, i].copy())
        done.append(C[:, j].copy())
    if n % 2 == 1:
        m = n // 2
        C[:, m] = gnormalize(project_out(V[:, m]), f"basis vector {m}")
    return OrthoBasis(change_matrix=C, gram=G, sq_norms=sq_norms)


# ---------------------------------------------------------------------------
# Weights and curves
# ---------------------------------------------------------------------------

class WeightVector:
    """Weights plus the constraint mode they satisfy."""

    MODES = ("simplex", "unit-sphere", "raw")

    def __init__(self, weights, mode="raw"):
        weights = np.asarray(weights, dtype=float)
        if mode not in self.MODES:
            raise ConfigurationError(f"unknown weight mode {mode!r}")
        if mode == "simplex":
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ConfigurationError("simplex weights must be >= 0 and sum to 1")
        if mode == "unit-sphere":
            if abs(np.sum(weights ** 2) - 1.0) > 1e-12:
                raise ConfigurationError("sphere weights must have unit square sum")
        self.weights = weights
        self.mode = mode


def normalize_simplex(raw, floor=EPS_REGULARIZE):
    """Softmax then an additive floor: every weight >= floor/(1 + n*floor).

    Works on any value kind, normalizing along the last axis.
    """
    data = ad.data_of(raw)
    n = data.shape[-1]
    shift = data.max(axis=-1, keepdims=True)
    e = ad.exp(raw - shift)
    w = e / ad.sum_last_keep(e)
    return (w + floor) / (1.0 + n * floor)


def normalize_sphere(raw):
    """Scale the last axis to the unit sphere; zero vectors are rejected."""
    data = ad.data_of(raw)
    if np.any(np.sum(data * data, axis=-1) == 0.0):
        raise DegenerateWeightsError("cannot sphere-normalize an all-zero vector")
    return raw / ad.sqrt(ad.sum_last_keep(raw * raw))


class SplineCurve:
    """A weighted curve in one family, with its family-specific max bound."""

    def __init__(self, family, knots, weights, ortho=None):
        if family not in ("B", "M", "I", "O"):
            raise ConfigurationError(f"unknown spline family {family!r}")
        if isinstance(weights, WeightVector):
            wv = weights
        else:
            wv = WeightVector(weights, "raw")
        if len(wv.weights) != knots.n_basis:
            raise ConfigurationError("weight count does not match basis size")
        self.family = family
        self.knots = knots
        self.weights = wv
        self.ortho = ortho if ortho is not None else (
            knots.ortho if family == "O" else None)

    @property
    def bcoefs(self):
        """Coefficients over the order-k B-basis (O family only)."""
        return self.ortho.change_matrix @ self.weights.weights

    @property
    def precomputed_max_bound(self):
        if self.family == "M":
            return mspline_max_bound(self)
        if self.family == "O":
            return ospline_sq_max_bound(self)
        return None

    def value(self, x, derivative_order=0):
        w = self.weights.weights
        if self.family == "I":
            return eval_ispline_basis(self.knots, x, derivative_order) @ w
        if self.family == "O":
            return eval_basis("B", self.knots, x, derivative_order) @ self.bcoefs
        return eval_basis(self.family, self.knots, x, derivative_order) @ w


def _per_basis_m_max(kv):
    t, k = kv.knots, kv.order
    best = 0.0
    for i in range(kv.n_basis):
        lo, hi = t[i], t[i + k]
        grid = np.linspace(lo, hi, 4096)
        vals = _dense_b(t, k, grid)[:, i] * kv.m_scale[i]
        x0 = grid[np.argmax(vals)]
        best = max(best, vals.max())
        # three Newton steps on the stationarity condition
        for _ in range(3):
            d1 = _dense_b_deriv(t, k, x0, 1)[0, i]
            d2 = _dense_b_deriv(t, k, x0, 2)[0, i]
            if d2 >= 0.0:
                break
            xn = x0 - d1 / d2
            if not lo <= xn <= hi:
                break
            x0 = xn
        best = max(best, float(_dense_b(t, k, np.atleast_1d(x0))[0, i] * kv.m_scale[i]))
    return best


def mspline_max_bound(curve):
    """Upper bound k * max_i max_x M_i on any simplex-weighted M-curve."""
    return curve.knots.order * curve.knots.mspline_basis_max


def ospline_sq_max_bound(curve):
    """Upper bound max_i b_i^2 over the curve's B-coefficients, for O^2."""
    return float(np.max(curve.bcoefs ** 2))


def rejection_sample(density, bound, interval, rng):
    """One exact sample from an (unnormalized) density below ``bound``."""
    a, b = interval
    if bound <= 0:
        raise ConfigurationError("rejection bound must be positive")
    rejections = 0
    while True:
        x = rng.uniform(a, b)
        if rng.uniform() * bound < density(x):
            return x
        rejections += 1
        if rejections > _MAX_CONSECUTIVE_REJECTIONS:
            raise PathologicalDensityError(
                "over 1e6 consecutive rejections; bound violated or density degenerate")
