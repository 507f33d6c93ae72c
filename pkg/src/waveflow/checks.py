"""Self-contained property suite shared by the check command and tests.

Each check re-derives an invariant of the spline basis, the flow, the
coordinate maps, the differentiation stack, or the sampler, and reports a
pass/fail verdict with a one-line measurement.  The suite is deterministic
for a fixed seed and runs in well under two minutes.
"""

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import flow as fl
from . import numerics as nm
from . import oracle as orc
from . import physics as ph
from . import splines as sp
from . import vqmc as vq

__all__ = ["CheckResult", "CHECKS", "run_property_suite"]


@dataclass
class CheckResult:
    """Outcome of one property check."""

    name: str
    passed: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# Shared builders
# ---------------------------------------------------------------------------

def _flow(n_dims=2, n_layers=2, hidden=8, seed=0):
    return fl.build_flow(n_dims, n_layers, order=5, n_knots=23,
                         hidden_width=hidden, n_hidden_layers=1, seed=seed)


def _randomize(flow, rng, scale=0.3):
    for name in flow.net.param_names:
        flow.net.params[name] = flow.net.params[name] + scale * rng.normal(
            size=flow.net.params[name].shape)


def _model(flow, half_length=5.0, variant="mean"):
    return ph.WaveflowModel(flow, ph.BoxGeometry(half_length),
                            ph.CoordinateChoice(variant))


def _quad_1d(n_per_span=24):
    kv = sp.make_clamped_knots(18, 5)
    return nm.composite_gauss_legendre(np.unique(kv.knots), n_per_span)


# ---------------------------------------------------------------------------
# Spline basis invariants
# ---------------------------------------------------------------------------

def _check_partition_of_unity(rng):
    grid = np.linspace(0.0, 1.0, 10001)
    worst = 0.0
    for order in (2, 3, 4, 5, 6):
        kv = sp.make_clamped_knots(12 + order, order)
        dev = np.abs(sp.eval_basis("B", kv, grid).sum(axis=1) - 1.0).max()
        worst = max(worst, float(dev))
    return worst < 1e-12, f"max |sum B - 1| = {worst:.2e} (< 1e-12)"


def _check_mspline_unit_mass(rng):
    worst = 0.0
    for order in (2, 3, 4, 5, 6):
        kv = sp.make_clamped_knots(12 + order, order)
        xs, ws = nm.composite_gauss_legendre(np.unique(kv.knots), order + 1)
        masses = ws @ sp.eval_basis("M", kv, xs)
        worst = max(worst, float(np.abs(masses - 1.0).max()))
    return worst < 1e-10, f"max |integral M - 1| = {worst:.2e} (< 1e-10)"


def _check_ospline_orthonormality(rng):
    kv = sp.make_clamped_knots(18, 5)
    change = kv.ortho.change_matrix
    xs, ws = nm.composite_gauss_legendre(np.unique(kv.knots), kv.order + 2)
    dense_o = sp.eval_basis("B", kv, xs) @ change
    overlaps = (dense_o * ws[:, None]).T @ dense_o
    dev = float(np.abs(overlaps - np.eye(kv.n_basis)).max())
    return dev < 1e-8, f"max |<O_i, O_j> - delta_ij| = {dev:.2e} (< 1e-8)"


def _check_curve_bounds(rng):
    kv = sp.make_clamped_knots(18, 5)
    grid = np.linspace(0.0, 1.0, 100_001)
    dense_m = sp.eval_basis("M", kv, grid)
    dense_b = sp.eval_basis("B", kv, grid)
    violations = 0
    for _ in range(50):
        w = sp.normalize_simplex(rng.normal(size=kv.n_basis))
        curve = sp.SplineCurve("M", kv, sp.WeightVector(w, "simplex"))
        if float((dense_m @ w).max()) > sp.mspline_max_bound(curve):
            violations += 1
    for _ in range(50):
        beta = sp.normalize_sphere(rng.normal(size=kv.n_basis))
        curve = sp.SplineCurve("O", kv, sp.WeightVector(beta, "unit-sphere"))
        peak = float(((dense_b @ curve.bcoefs) ** 2).max())
        if peak > sp.ospline_sq_max_bound(curve):
            violations += 1
    return violations == 0, (
        f"{violations} bound violations over 100 weight draws "
        "on a 100001-point grid")


# ---------------------------------------------------------------------------
# Flow normalization
# ---------------------------------------------------------------------------

def _check_conditional_normalization(rng):
    xs, ws = _quad_1d()
    worst = 0.0
    for trial in range(10):
        flow = _flow(n_dims=1, n_layers=2, seed=trial)
        _randomize(flow, rng)
        psi, _, _ = fl.evaluate(flow, xs[:, None])
        worst = max(worst, float(abs(ws @ psi ** 2 - 1.0)))
    return worst < 1e-6, f"max |integral psi^2 - 1| = {worst:.2e} (< 1e-6)"


def _check_joint_normalization(rng):
    xs, ws = _quad_1d()
    x0, x1 = np.meshgrid(xs, xs, indexing="ij")
    weights = np.outer(ws, ws).ravel()
    pts = np.stack([x0.ravel(), x1.ravel()], axis=1)
    worst = 0.0
    for trial in range(3):
        flow = _flow(seed=trial)
        _randomize(flow, rng)
        psi, _, _ = fl.evaluate(flow, pts)
        worst = max(worst, float(abs(weights @ psi ** 2 - 1.0)))
    return worst < 1e-4, f"max |integral psi^2 - 1| = {worst:.2e} (< 1e-4)"


# ---------------------------------------------------------------------------
# Antisymmetry
# ---------------------------------------------------------------------------

def _check_antisymmetry_and_nodes(rng):
    big_l = 5.0
    for n in (2, 3):
        flow = _flow(n_dims=n)
        _randomize(flow, rng)
        model = _model(flow, big_l)
        x = np.sort(rng.uniform(-big_l, big_l, (64, n)), axis=1)
        value, _, _ = ph.psi_batch(model, x)
        swapped = x.copy()
        swapped[:, [0, 1]] = swapped[:, [1, 0]]
        v_swapped, _, _ = ph.psi_batch(model, swapped)
        if not np.array_equal(v_swapped, -value):
            return False, f"n={n}: transposition does not flip the sign exactly"
        for bad in (_with_column(x, 0, -big_l), _with_column(x, n - 1, big_l),
                    _with_coincidence(x)):
            v_bad, _, _ = ph.psi_batch(model, bad)
            if not np.array_equal(v_bad, np.zeros(len(bad))):
                return False, f"n={n}: wall/coincidence value not exactly zero"
    return True, "exact sign flip; exact zeros on walls and coincidences"


def _with_column(x, col, value):
    out = x.copy()
    out[:, col] = value
    return out


def _with_coincidence(x):
    out = x.copy()
    out[:, 1] = out[:, 0]
    return out


def _inversions(perm):
    return sum(1 for a, b in itertools.combinations(perm, 2) if a > b)


def _check_permutation_parity(rng):
    for n in (2, 3, 4, 5):
        flow = _flow(n_dims=n, n_layers=1)
        _randomize(flow, rng)
        model = _model(flow)
        base = np.sort(rng.uniform(-4.0, 4.0, n))
        perms = list(itertools.permutations(range(n)))
        batch = np.array([base[list(p)] for p in perms])
        value, _, _ = ph.psi_batch(model, batch)
        signs = np.array([(-1.0) ** _inversions(p) for p in perms])
        if not np.array_equal(value, signs * value[0]):
            return False, f"n={n}: parity mismatch across the {len(perms)} permutations"
    return True, "value equals permutation sign times sorted value, n = 2..5"


# ---------------------------------------------------------------------------
# Inverses and Jacobians
# ---------------------------------------------------------------------------

def _check_bijection_round_trip(rng):
    kv = sp.make_clamped_knots(18, 5)
    worst = 0.0
    for _ in range(3):
        bij = fl.ISplineBijection(kv, raw_params=rng.normal(size=kv.n_basis))
        if fl.invert_bijection(bij, 0.0) != 0.0 or \
                fl.invert_bijection(bij, 1.0) != 1.0:
            return False, "endpoint inversion not exact"
        ys = rng.uniform(0.0, 1.0, 500)
        xs = np.array([fl.invert_bijection(bij, y) for y in ys])
        worst = max(worst, float(np.abs(bij.value(xs) - ys).max()))
    return worst < 2e-10, f"max |I(I^-1(y)) - y| = {worst:.2e} (< 2e-10)"


def _check_coordinate_round_trip(rng):
    big_l = 5.0
    worst = 0.0
    for variant in ("first", "mean"):
        coord = ph.CoordinateChoice(variant)
        for n in (2, 3, 5):
            x = np.sort(rng.uniform(-big_l, big_l, (200, n)), axis=1)
            u, _ = ph.to_relative_batch(coord, x, big_l)
            back = ph.from_relative_batch(coord, u, big_l)
            worst = max(worst, float(np.abs(back - x).max()))
    return worst < 1e-12, f"max round-trip error = {worst:.2e} (< 1e-12)"


def _check_coordinate_logdet(rng):
    big_l = 5.0
    step = 1e-6
    worst = 0.0
    for variant, n in (("first", 2), ("mean", 2), ("mean", 3)):
        coord = ph.CoordinateChoice(variant)
        x = np.sort(rng.uniform(-big_l + 0.5, big_l - 0.5, (20, n)), axis=1)
        # keep a gap so the finite-difference stencil stays inside the wedge
        x += 0.2 * np.arange(n)
        _, log_det = ph.to_relative_batch(coord, x, big_l)
        jac = np.empty((x.shape[0], n, n))
        for j in range(n):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += step
            xm[:, j] -= step
            up, _ = ph.to_relative_batch(coord, xp, big_l)
            um, _ = ph.to_relative_batch(coord, xm, big_l)
            jac[:, :, j] = (up - um) / (2.0 * step)
        fd = np.log(np.abs(np.linalg.det(jac)))
        scale = np.maximum(1.0, np.abs(fd))
        worst = max(worst, float((np.abs(log_det - fd) / scale).max()))
    return worst < 1e-6, f"max relative log-det deviation = {worst:.2e} (< 1e-6)"


def _check_laplacian(rng):
    spec = ph.HamiltonianSpec(kind="free_box", n_particles=2)
    flow = _flow()
    _randomize(flow, rng)
    model = _model(flow)
    x = np.sort(rng.uniform(-4.0, 4.0, (8, 2)), axis=1)
    x[:, 1] += 0.5
    x = np.clip(x, -4.5, 4.5)
    local = ph.local_energy_batch(model, spec, x)
    step = 1e-5
    lap = np.zeros(x.shape[0])
    base, _ = ph.log_abs_model_batch(model, x)
    for j in range(2):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        lap_p, _ = ph.log_abs_model_batch(model, xp)
        lap_m, _ = ph.log_abs_model_batch(model, xm)
        d1 = (lap_p - lap_m) / (2.0 * step)
        d2 = (lap_p - 2.0 * base + lap_m) / step ** 2
        lap += d2 + d1 ** 2
    fd_local = -0.5 * lap
    scale = np.maximum(1.0, np.abs(fd_local))
    worst = float((np.abs(local - fd_local) / scale).max())
    return worst < 1e-5, f"max relative Laplacian deviation = {worst:.2e} (< 1e-5)"


# ---------------------------------------------------------------------------
# Estimators and sampling
# ---------------------------------------------------------------------------

def _check_score_gradient(rng):
    flow = fl.build_flow(n_dims=1, n_layers=1, order=5, n_knots=23,
                         hidden_width=8, n_hidden_layers=1, seed=0)
    _randomize(flow, np.random.default_rng(100), scale=0.2)
    model = _model(flow, half_length=5.0)
    spec = ph.HamiltonianSpec(kind="soft_coulomb_helium", n_particles=1,
                              nuclear_charge=4.0)
    report = vq.gradient_check(model, spec, rng, n_samples=1_000_000,
                               n_nodes=256)
    dev = report["max_rel_deviation"]
    return dev < 5e-2, f"max relative deviation = {dev:.3f} at 1e6 samples (< 0.05)"


def _check_local_energy_constant(rng):
    state = orc.AnalyticTwoFermionBox(5.0)
    spec = ph.HamiltonianSpec(kind="free_box", n_particles=2)
    x = np.sort(state.sample_batch(256, rng), axis=1)
    local = ph.local_energy_batch(state, spec, x)
    worst = float(np.abs(local - state.energy).max() / state.energy)
    return worst < 1e-8, f"max relative deviation from E0 = {worst:.2e} (< 1e-8)"


def _check_ks_sampling(rng):
    n_samples = 20_000
    critical = nm.ks_critical(n_samples, 0.01)

    # identity-initialized prior against its quadrature CDF
    flow1 = _flow(n_dims=1, n_layers=1)
    samples1 = fl.sample_batch(flow1, n_samples, rng)[:, 0]
    kv = flow1.knots
    beta0 = sp.normalize_sphere(fl.default_prior_raw(kv, flow1.prior_matrix))
    grid = np.linspace(0.0, 1.0, 20001)
    dens = (sp.eval_basis("B", kv, grid) @ (beta0 @ flow1.prior_matrix)) ** 2
    cdf = np.concatenate([[0.0], np.cumsum(
        0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    d_prior = nm.ks_statistic(samples1, lambda t: np.interp(t, grid, cdf))

    # randomized two-coordinate flow: first marginal against quadrature CDF
    flow2 = _flow()
    _randomize(flow2, rng)
    samples2 = fl.sample_batch(flow2, n_samples, rng)[:, 0]
    grid0 = np.linspace(0.0, 1.0, 801)
    ys, ws = _quad_1d()
    x0, x1 = np.meshgrid(grid0, ys, indexing="ij")
    pts = np.stack([x0.ravel(), x1.ravel()], axis=1)
    psi = np.concatenate([fl.evaluate(flow2, chunk)[0]
                          for chunk in np.array_split(pts, 8)])
    marginal = (psi.reshape(grid0.size, ys.size) ** 2) @ ws
    cdf0 = np.concatenate([[0.0], np.cumsum(
        0.5 * (marginal[1:] + marginal[:-1]) * np.diff(grid0))])
    cdf0 /= cdf0[-1]
    d_marginal = nm.ks_statistic(samples2, lambda t: np.interp(t, grid0, cdf0))

    passed = d_prior < critical and d_marginal < critical
    return passed, (f"D = {d_prior:.4f} (prior), {d_marginal:.4f} (marginal) "
                    f"< {critical:.4f} at alpha = 0.01, n = {n_samples}")


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

CHECKS = (
    ("partition-of-unity", _check_partition_of_unity),
    ("mspline-unit-mass", _check_mspline_unit_mass),
    ("ospline-orthonormality", _check_ospline_orthonormality),
    ("curve-bounds", _check_curve_bounds),
    ("conditional-normalization", _check_conditional_normalization),
    ("joint-normalization", _check_joint_normalization),
    ("antisymmetry-and-nodes", _check_antisymmetry_and_nodes),
    ("permutation-parity", _check_permutation_parity),
    ("bijection-round-trip", _check_bijection_round_trip),
    ("coordinate-round-trip", _check_coordinate_round_trip),
    ("coordinate-logdet-fd", _check_coordinate_logdet),
    ("laplacian-fd", _check_laplacian),
    ("score-gradient", _check_score_gradient),
    ("local-energy-constant", _check_local_energy_constant),
    ("ks-sampling", _check_ks_sampling),
)


def run_property_suite(seed=0, names=None):
    """Run the property checks and return one CheckResult per check.

    Parameters
    ----------
    seed : int
        Base seed; each check derives its own independent generator.
    names : iterable of str, optional
        Subset of check names to run (default: all, in registry order).

    Returns
    -------
    list of CheckResult
    """
    wanted = None if names is None else set(names)
    results = []
    for index, (name, fn) in enumerate(CHECKS):
        if wanted is not None and name not in wanted:
            continue
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        try:
            passed, detail = fn(rng)
        except Exception as exc:  # a crash is a failure, not an abort
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail,
                                   time.perf_counter() - start))
    return results
