"""The autoregressive square-normalizing flow: L stacked I-spline bijection
layers over an adaptive O-spline prior, with exact evaluation and exact
(MCMC-free) sampling.

Evaluation follows the layer algorithm: the conditioner is re-run on the
partially transformed coordinates x^l to produce layer-l bijection weights,
the log-Jacobian accumulates log M over layers and dimensions, and the prior
is read off at x^L.  The wavefunction factor per dimension is
psi_z(z_i | SP) * sqrt(dz_i/dx_i), tracked as log-magnitude plus sign.

Sampling runs the algorithm backwards, dimension by dimension: draw z_i from
the squared prior by rejection under the max-B-coefficient bound, then invert
each bijection layer by bisection.
"""

import os
import struct

import numpy as np

from . import autodiff as ad
from . import splines as sp
from .conditioner import build_masked_net
from .errors import (CheckpointError, ConfigurationError, DomainError,
                     PathologicalDensityError, UnsupportedEnforcementPointError)
from .numerics import composite_gauss_legendre

_MAGIC = b"WVFL"
_VERSION = 1
BISECT_TOL = 1e-10
_BISECT_ITERS = 34  # 2^-34 < 1e-10


def _prior_matrix(kv, enforced):
    """Rows are O-spline coefficient vectors over the B-basis.

    Enforced mode orthogonalizes the interior sub-basis (first and last
    B-coefficients pinned to zero), so every decoded prior vanishes at both
    endpoints for any shape parameters.
    """
    if enforced:
        gram_in = kv.gram[1:-1, 1:-1]
        c_in = sp.lowdin_orthogonalize(gram_in).change_matrix
        full = np.zeros((kv.n_basis, kv.n_basis - 2))
        full[1:-1, :] = c_in
        return full.T
    return kv.ortho.change_matrix.T


def identity_theta_raw(kv, eps_regularize):
    """Raw head bias whose regularized softmax is the identity I-curve."""
    nb = kv.n_basis
    target = kv.identity_alpha * (1.0 + nb * eps_regularize) - eps_regularize
    if np.any(target <= 0):
        raise ConfigurationError("eps_regularize too large for the identity weights")
    return np.log(target)


def default_prior_raw(kv, prior_matrix):
    """Raw shape-parameter bias: projection of sqrt(2) sin(pi x) onto the prior
    basis (node-free, endpoint-vanishing start)."""
    xs, ws = composite_gauss_legendre(np.unique(kv.knots), 4 * (kv.order + 1))
    dense_o = sp.eval_basis("B", kv, xs) @ prior_matrix.T
    return (ws * (np.sqrt(2.0) * np.sin(np.pi * xs))) @ dense_o


class SquareFlow:
    """Flow state: knot vector, conditioner net, prior decode matrix."""

    def __init__(self, knots, n_dims, n_layers, net, eps_regularize=sp.EPS_REGULARIZE,
                 enforce_endpoints=True):
        self.knots = knots
        self.n_dims = n_dims
        self.n_layers = n_layers
        self.net = net
        self.eps_regularize = eps_regularize
        self.enforced = enforce_endpoints
        self.n_sp = knots.n_basis - 2 if enforce_endpoints else knots.n_basis
        expected = {f"theta_{l}": knots.n_basis for l in range(n_layers)}
        expected["sp"] = self.n_sp
        if net.head_spec != expected or net.n_dims != n_dims:
            raise ConfigurationError("conditioner head layout does not match the flow")
        self.prior_matrix = _prior_matrix(knots, enforce_endpoints)


def build_flow(n_dims, n_layers, order=5, n_knots=23, hidden_width=64,
               n_hidden_layers=1, eps_regularize=sp.EPS_REGULARIZE, seed=0,
               enforce_endpoints=True):
    """A flow initialized at identity bijections over the default prior."""
    kv = sp.make_clamped_knots(n_knots - order, order)
    n_sp = kv.n_basis - 2 if enforce_endpoints else kv.n_basis
    head_spec = {f"theta_{l}": kv.n_basis for l in range(n_layers)}
    head_spec["sp"] = n_sp
    biases = {f"theta_{l}": identity_theta_raw(kv, eps_regularize)
              for l in range(n_layers)}
    biases["sp"] = default_prior_raw(kv, _prior_matrix(kv, enforce_endpoints))
    net = build_masked_net(n_dims, hidden_width, n_hidden_layers, head_spec,
                           seed, head_biases=biases)
    return SquareFlow(kv, n_dims, n_layers, net, eps_regularize, enforce_endpoints)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _evaluate_batch(flow, x, params=None):
    data = np.asarray(ad.data_of(x), dtype=float)
    if np.any(data < 0.0) or np.any(data > 1.0):
        raise DomainError("flow coordinates must lie in [0,1]")
    nbatch, n = data.shape
    kv = flow.knots
    nb = kv.n_basis
    xl = x
    logdet = 0.0
    for l in range(flow.n_layers):
        role = f"theta_{l}"
        raw = flow.net.forward(xl, params=params, roles={role})[role]
        alpha = sp.normalize_simplex(ad.reshape(raw, (nbatch * n, nb)),
                                     flow.eps_regularize)
        x_flat = ad.reshape(xl, (nbatch * n,))
        spans, b_loc, bp_loc = sp.local_bases(kv, x_flat)
        y_flat = sp.icurve_local(kv, alpha, spans, bp_loc)
        # at the right endpoint the bijection value is the float sum of the
        # simplex weights, which rounds off exact 1.0 either way; pin it (and
        # any interior rounding overshoot) so enforced zeros stay exact
        pin = (ad.data_of(x_flat) == 1.0) | (ad.data_of(y_flat) >= 1.0)
        y_flat = ad.where(pin, 1.0, y_flat)
        logdet = logdet + ad.log(sp.mcurve_local(kv, alpha, spans, b_loc))
        xl = ad.reshape(y_flat, (nbatch, n))
    raw_sp = flow.net.forward(xl, params=params, roles={"sp"})["sp"]
    beta = sp.normalize_sphere(ad.reshape(raw_sp, (nbatch * n, flow.n_sp)))
    bcoefs = beta @ flow.prior_matrix
    x_flat = ad.reshape(xl, (nbatch * n,))
    spans, b_loc, _ = sp.local_bases(kv, x_flat)
    o_flat = sp.ocurve_local(kv, bcoefs, spans, b_loc)
    sign = np.prod(np.sign(ad.data_of(o_flat)).reshape(nbatch, n), axis=1)
    with np.errstate(divide="ignore"):
        per_dim = ad.log_abs(o_flat) + 0.5 * logdet
    log_abs = ad.sum_last(ad.reshape(per_dim, (nbatch, n)))
    psi = sign * ad.exp(log_abs)
    return psi, log_abs, sign


def evaluate(flow, x, params=None):
    """(psi, log_abs_psi, sign) at x in [0,1]^n.

    A single plain vector returns scalars; a (batch, n) array — or a Taylor
    jet / tape variable carrying one — returns per-sample arrays.
    """
    if not isinstance(x, (ad.Var, ad.Jet)) and np.asarray(x).ndim == 1:
        psi, log_abs, sign = _evaluate_batch(flow, np.asarray(x, float)[None, :],
                                             params)
        return float(psi[0]), float(log_abs[0]), float(sign[0])
    return _evaluate_batch(flow, x, params)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _rejection_rounds(kv, bcoefs, bound, rng):
    """Vectorized rejection sampling of z ~ O^2 per row, exact per slot."""
    out = np.empty(bcoefs.shape[0])
    alive = np.arange(bcoefs.shape[0])
    rounds = 0
    while alive.size:
        x = rng.uniform(0.0, 1.0, alive.size)
        u = rng.uniform(0.0, 1.0, alive.size)
        spans, b_loc, _ = sp.local_bases(kv, x)
        val = sp.ocurve_local(kv, bcoefs[alive], spans, b_loc) ** 2
        accept = u * bound[alive] < val
        out[alive[accept]] = x[accept]
        alive = alive[~accept]
        rounds += 1
        if rounds > sp._MAX_CONSECUTIVE_REJECTIONS:
            raise PathologicalDensityError(
                "prior rejection sampling exceeded the rejection cap")
    return out


def _bisect_batch(kv, alpha, y, iters=_BISECT_ITERS):
    """Solve I_alpha(x) = y per row by bisection on [0,1]."""
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        spans, _, bp_loc = sp.local_bases(kv, mid)
        val = sp.icurve_local(kv, alpha, spans, bp_loc)
        less = val < y
        lo = np.where(less, mid, lo)
        hi = np.where(less, hi, mid)
    mid = 0.5 * (lo + hi)
    return np.where(y <= 0.0, 0.0, np.where(y >= 1.0, 1.0, mid))


def sample_batch(flow, size, rng):
    """Exact samples from psi^2 on [0,1]^n, shape (size, n)."""
    kv = flow.knots
    nb = kv.n_basis
    n, L = flow.n_dims, flow.n_layers
    levels = [np.full((size, n), 0.5) for _ in range(L + 1)]
    for i in range(n):
        raw_sp = flow.net.forward(levels[L], roles={"sp"})["sp"]
        beta = sp.normalize_sphere(raw_sp[:, i * flow.n_sp:(i + 1) * flow.n_sp])
        bcoefs = beta @ flow.prior_matrix
        bound = np.max(bcoefs ** 2, axis=1)
        levels[L][:, i] = _rejection_rounds(kv, bcoefs, bound, rng)
        for l in range(L - 1, -1, -1):
            role = f"theta_{l}"
            raw = flow.net.forward(levels[l], roles={role})[role]
            alpha = sp.normalize_simplex(raw[:, i * nb:(i + 1) * nb],
                                         flow.eps_regularize)
            levels[l][:, i] = _bisect_batch(kv, alpha, levels[l + 1][:, i])
    return levels[0]


def sample(flow, rng):
    """One exact sample from psi^2 (vector in [0,1]^n)."""
    return sample_batch(flow, 1, rng)[0]


# ---------------------------------------------------------------------------
# Bijection object and boundary enforcement
# ---------------------------------------------------------------------------

class ISplineBijection:
    """The monotone per-dimension map g^{-1} on [0,1] (an I-spline curve)."""

    def __init__(self, knots, raw_params=None, weights=None,
                 eps_regularize=sp.EPS_REGULARIZE):
        if weights is None:
            weights = sp.normalize_simplex(np.asarray(raw_params, float),
                                           eps_regularize)
        self.knots = knots
        self.alpha = np.asarray(weights, dtype=float)
        self.fixed_points = (0.0, 1.0)

    def value(self, x):
        return sp.eval_ispline_basis(self.knots, x) @ self.alpha

    def derivative(self, x):
        return sp.eval_basis("M", self.knots, x) @ self.alpha


def invert_bijection(bij, y, tol=BISECT_TOL):
    """x with |g^{-1}(x) - y| <= tol, by bisection; endpoints are exact."""
    if y <= 0.0:
        return 0.0
    if y >= 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(40):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if bij.value(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def enforce_boundary(flow, zero_points=(0.0, 1.0), fixed_points=(0.0, 1.0)):
    """Flow whose prior vanishes at the zero points and whose bijections fix
    the fixed points, structurally, for all parameter values.

    Only the endpoints are supported: I-splines fix 0 and 1 automatically,
    and the constrained prior basis pins the first and last B-coefficients
    to zero.
    """
    for pt in set(zero_points) | set(fixed_points):
        if pt not in (0.0, 1.0):
            raise UnsupportedEnforcementPointError(
                f"enforcement point {pt} unsupported; only endpoints are")
    if flow.enforced:
        return flow
    new = build_flow(flow.n_dims, flow.n_layers, order=flow.knots.order,
                     n_knots=flow.knots.n_basis + flow.knots.order,
                     hidden_width=flow.net.hidden_width,
                     n_hidden_layers=flow.net.n_hidden_layers,
                     eps_regularize=flow.eps_regularize, seed=0,
                     enforce_endpoints=True)
    # carry over everything except the (re-shaped) shape-parameter head
    for name in new.net.param_names:
        if not name.startswith("head.sp."):
            new.net.params[name] = flow.net.params[name].copy()
    return new


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(flow, path):
    """Atomic write: magic, shape header, then flat float64 parameters."""
    header = struct.pack("<4sIIIIII", _MAGIC, _VERSION, flow.n_dims,
                         flow.n_layers, flow.knots.order, flow.knots.n_basis,
                         flow.net.hidden_width)
    payload = flow.net.flat_params().astype("<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def _infer_layout(count, n_dims, n_layers, nb, hidden):
    """Recover (n_hidden_layers, enforced) from the parameter count."""
    candidates = []
    for enforced in (True, False):
        n_sp = nb - 2 if enforced else nb
        heads = (hidden + 1) * n_dims * (n_layers * nb + n_sp)
        rem = count - heads - (n_dims * hidden + hidden)
        step = hidden * hidden + hidden
        if rem >= 0 and rem % step == 0:
            candidates.append((rem // step + 1, enforced))
    if len(candidates) != 1:
        raise CheckpointError(
            f"cannot infer network layout from {count} parameters")
    return candidates[0]


def load_checkpoint(path, eps_regularize=sp.EPS_REGULARIZE):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    magic, version, n_dims, n_layers, order, nb, hidden = struct.unpack(
        "<4sIIIIII", blob[:28])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = blob[28:]
    if len(payload) % 8:
        raise CheckpointError("truncated checkpoint payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    n_hidden_layers, enforced = _infer_layout(flat.size, n_dims, n_layers,
                                              nb, hidden)
    flow = build_flow(n_dims, n_layers, order=order, n_knots=nb + order,
                      hidden_width=hidden, n_hidden_layers=n_hidden_layers,
                      eps_regularize=eps_regularize, seed=0,
                      enforce_endpoints=enforced)
    flow.net.set_flat_params(flat)
    return flow
