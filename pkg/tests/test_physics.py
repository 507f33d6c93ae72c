import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest

from waveflow import autodiff as ad
from waveflow import flow as fl
from waveflow import physics as ph
from waveflow.errors import ConfigurationError, DomainError, NodeProximityError
from waveflow.numerics import composite_gauss_legendre

FIRST = ph.CoordinateChoice("first")
MEAN = ph.CoordinateChoice("mean")


def _model(n_dims=2, half_length=5.0, coord=MEAN, seed=0, randomize=True,
           n_layers=2, hidden=8):
    flow = fl.build_flow(n_dims, n_layers, hidden_width=hidden, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for name in flow.net.param_names:
            flow.net.params[name] = flow.net.params[name] + 0.3 * rng.normal(
                size=flow.net.params[name].shape)
    return ph.WaveflowModel(flow, ph.BoxGeometry(half_length), coord)


def test_to_relative_worked_examples():
    # check 1: first-particle variant, hand-executed
    u, log_det = ph.to_relative(FIRST, np.array([-1.0, 1.0]), 5.0)
    npt.assert_allclose(u, [0.4, 1.0 / 3.0], atol=1e-15)
    npt.assert_allclose(math.exp(log_det), (1 / 10) * (1 / 6), atol=1e-16)

    # check 2: free-space variant, hand-executed
    u, log_det = ph.to_relative(MEAN, np.array([-1.0, 1.0]), 5.0)
    npt.assert_allclose(u, [0.2, 0.5], atol=1e-15)
    npt.assert_allclose(math.exp(log_det), (1 / 10) * (1 / 8), atol=1e-16)


def test_to_relative_wall_contact():
    # check 1: bottom-wall contact maps some slot to exactly 0
    u, _ = ph.to_relative(FIRST, np.array([-5.0, 0.7, 2.0]), 5.0)
    assert u[0] == 0.0
    u, _ = ph.to_relative(MEAN, np.array([-5.0, 0.7, 2.0]), 5.0)
    assert u[2] == 0.0

    # check 2: top-wall contact maps some slot to exactly 1
    u, _ = ph.to_relative(FIRST, np.array([-0.3, 0.7, 5.0]), 5.0)
    assert u[2] == 1.0
    u, _ = ph.to_relative(MEAN, np.array([-0.3, 0.7, 5.0]), 5.0)
    assert u[2] == 1.0

    # check 3: coincident particles map their gap slot to exactly 0
    for coord, slot in [(FIRST, 1), (MEAN, 0)]:
        u, _ = ph.to_relative(coord, np.array([0.4, 0.4, 3.0]), 5.0)
        assert u[slot] == 0.0

    # check 4: pile-up on the top wall stays finite and in range
    for coord in (FIRST, MEAN):
        u, _ = ph.to_relative(coord, np.array([1.0, 5.0, 5.0]), 5.0)
        assert np.all(np.isfinite(u)) and np.all((u >= 0) & (u <= 1))


def test_to_relative_validation():
    with pytest.raises(DomainError):
        ph.to_relative(FIRST, np.array([1.0, -1.0]), 5.0)
    with pytest.raises(DomainError):
        ph.to_relative(MEAN, np.array([-6.0, 1.0]), 5.0)


def test_from_relative_worked_examples():
    # check 1: inverse of the hand-executed forward example
    x = ph.from_relative(FIRST, np.array([0.4, 1.0 / 3.0]), 5.0)
    npt.assert_allclose(x, [-1.0, 1.0], atol=1e-12)
    x = ph.from_relative(MEAN, np.array([0.2, 0.5]), 5.0)
    npt.assert_allclose(x, [-1.0, 1.0], atol=1e-12)

    # check 2: the cube center maps strictly inside the box
    for coord in (FIRST, MEAN):
        for n in (1, 2, 4):
            x = ph.from_relative(coord, np.full(n, 0.5), 5.0)
            assert np.all(np.abs(x) < 5.0)
            assert np.all(np.diff(x) > 0) or n == 1


def test_round_trips():
    rng = np.random.default_rng(0)
    for coord in (FIRST, MEAN):
        for n in (1, 2, 3, 5):
            u = rng.uniform(0, 1, (1000, n))
            x = ph.from_relative_batch(coord, u, 5.0)
            assert np.all(np.abs(x) <= 5.0)
            assert np.all(np.diff(x, axis=1) >= 0)
            u_back, _ = ph.to_relative_batch(coord, x, 5.0)
            npt.assert_allclose(u_back, u, atol=1e-12)


def test_log_det_matches_fd_jacobian():
    rng = np.random.default_rng(1)
    h = 1e-6
    for coord in (FIRST, MEAN):
        for n in (2, 3, 4):
            x = np.sort(rng.uniform(-4.5, 4.5, n))
            _, log_det = ph.to_relative(coord, x, 5.0)
            jac = np.empty((n, n))
            for j in range(n):
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                up, _ = ph.to_relative_batch(coord, xp[None, :], 5.0)
                um, _ = ph.to_relative_batch(coord, xm[None, :], 5.0)
                jac[:, j] = (up[0] - um[0]) / (2 * h)
            fd = math.log(abs(np.linalg.det(jac)))
            npt.assert_allclose(log_det, fd, rtol=1e-6)


def test_antisymmetry_exact():
    model = _model()
    rng = np.random.default_rng(2)
    x = rng.uniform(-4.9, 4.9, (1000, 2))
    v, s, la = ph.psi_batch(model, x)
    v2, s2, la2 = ph.psi_batch(model, x[:, ::-1])
    npt.assert_array_equal(v2, -v)
    npt.assert_array_equal(la2, la)


def test_cyclic_permutation_even():
    model = _model(n_dims=3)
    rng = np.random.default_rng(3)
    x = rng.uniform(-4.9, 4.9, (200, 3))
    v, _, _ = ph.psi_batch(model, x)
    v2, _, _ = ph.psi_batch(model, x[:, [2, 0, 1]])
    npt.assert_array_equal(v2, v)


def test_parity_exhaustive_small_n():
    rng = np.random.default_rng(4)
    for n in (2, 3, 4, 5):
        model = _model(n_dims=n, n_layers=1, hidden=4, seed=n)
        base = np.sort(rng.uniform(-4.5, 4.5, n))
        v0, _, _ = ph.psi(model, base)
        assert v0 != 0.0
        for perm in itertools.permutations(range(n)):
            swaps = sum(1 for i in range(n) for j in range(i + 1, n)
                        if perm[i] > perm[j])
            v, _, _ = ph.psi(model, base[list(perm)])
            expected = v0 if swaps % 2 == 0 else -v0
            assert v == expected


def test_boundary_zeros_exact():
    for coord in (FIRST, MEAN):
        model = _model(coord=coord, seed=5)
        # check 1: coincidence
        assert ph.psi(model, np.array([0.33, 0.33]))[0] == 0.0
        # check 2: wall contact on either side
        assert ph.psi(model, np.array([-5.0, 1.2]))[0] == 0.0
        assert ph.psi(model, np.array([0.4, 5.0]))[0] == 0.0


def test_box_normalization_mean_map():
    # substituting x = L sin(pi t / 2) clusters Gauss-Legendre points
    # quadratically at the walls where the coordinate map is steepest
    t, wt = composite_gauss_legendre(np.linspace(-1, 1, 61), 8)
    xs = 5.0 * np.sin(0.5 * np.pi * t)
    ws = wt * 5.0 * 0.5 * np.pi * np.cos(0.5 * np.pi * t)
    X0, X1 = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([X0.ravel(), X1.ravel()], axis=1)
    W = np.outer(ws, ws).ravel()
    model = _model(coord=MEAN, seed=6)
    v, _, _ = ph.psi_batch(model, pts)
    npt.assert_allclose(W @ v ** 2, 1.0, atol=1e-4)


def test_box_normalization_first_map():
    # the first-particle map funnels the whole gap axis into the top box
    # corner, defeating tensor quadrature in absolute coordinates; in
    # (wall distance s, gap ratio rho) coordinates -- d x0 d x1 = s ds drho
    # over the sorted half -- the integrand is smooth, while psi itself is
    # still evaluated through the production path with its Jacobian fold
    model = _model(coord=FIRST, seed=6)
    L = 5.0
    s, ws_ = composite_gauss_legendre(np.linspace(0, 2 * L, 49), 8)
    rho, wr = composite_gauss_legendre(np.linspace(0, 1, 49), 8)
    S, R = np.meshgrid(s, rho, indexing="ij")
    pts = np.stack([(L - S).ravel(), (L - R * S).ravel()], axis=1)
    v, _, _ = ph.psi_batch(model, pts)
    mass = 2.0 * (np.outer(ws_, wr).ravel() * S.ravel() @ v ** 2)
    npt.assert_allclose(mass, 1.0, atol=1e-4)


def test_potential_values():
    he = ph.HamiltonianSpec("soft_coulomb_helium", 2)

    # check 1: both electrons on the nucleus
    npt.assert_allclose(ph.potential(he, np.array([0.0, 0.0])), -3.0, atol=0)

    # check 2: far-out symmetric configuration stays bounded
    expect = 1.0 - 4.0 / math.sqrt(101.0)
    npt.assert_allclose(ph.potential(he, np.array([10.0, 10.0])), expect,
                        atol=1e-14)

    # check 3: free box vanishes, batched shapes pass through
    free = ph.HamiltonianSpec("free_box", 2)
    npt.assert_array_equal(ph.potential(free, np.zeros((7, 2))), np.zeros(7))

    # check 4: custom callable is consulted per row
    cust = ph.HamiltonianSpec("custom", 2,
                              custom_potential=lambda r: float(r @ r))
    npt.assert_allclose(ph.potential(cust, np.array([[1.0, 2.0]])), [5.0],
                        atol=1e-14)

    # check 5: validation
    with pytest.raises(ConfigurationError):
        ph.HamiltonianSpec("nonsense", 2)
    with pytest.raises(ConfigurationError):
        ph.HamiltonianSpec("free_box", 0)
    with pytest.raises(ConfigurationError):
        ph.HamiltonianSpec("custom", 2)


class _SineState:
    """Single free particle in the box, exact ground state."""

    def __init__(self, half_length):
        self.geometry = ph.BoxGeometry(half_length)

    def log_abs_batch(self, x):
        width = 2.0 * self.geometry.half_length
        col = ad.getcol(x, 0)
        return ad.log_abs(ad.sin((col + self.geometry.half_length)
                                 * (math.pi / width)))


def test_local_energy_single_particle_sine():
    state = _SineState(5.0)
    free = ph.HamiltonianSpec("free_box", 1)
    rng = np.random.default_rng(7)
    x = rng.uniform(-4.5, 4.5, (100, 1))
    e = ph.local_energy_batch(state, free, x)
    expect = math.pi ** 2 / (2.0 * 10.0 ** 2)
    npt.assert_allclose(e, expect, rtol=1e-10)
    npt.assert_allclose(ph.local_energy(state, free, x[0]), expect,
                        rtol=1e-10)


def test_local_energy_matches_finite_differences():
    he = ph.HamiltonianSpec("soft_coulomb_helium", 2)
    h = 1e-3
    stencil = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
    offsets = np.array([-2, -1, 0, 1, 2]) * h
    for coord in (FIRST, MEAN):
        model = _model(coord=coord, seed=8)
        rng = np.random.default_rng(9)
        count = 0
        while count < 10:
            x = np.sort(rng.uniform(-4.0, 4.0, 2))
            v0, _, _ = ph.psi(model, x)
            if abs(v0) < 1e-3:
                continue
            count += 1
            lap = 0.0
            for j in range(2):
                vals = []
                for o in offsets:
                    xp = x.copy()
                    xp[j] += o
                    vals.append(ph.psi(model, xp)[0])
                lap += stencil @ np.array(vals) / h ** 2
            expect = -0.5 * lap / v0 + ph.potential(he, x)
            got = ph.local_energy(model, he, x)
            npt.assert_allclose(got, expect, rtol=1e-5)


def test_local_energy_node_guard():
    model = _model()
    free = ph.HamiltonianSpec("free_box", 2)
    with pytest.raises(NodeProximityError):
        ph.local_energy(model, free, np.array([0.4, 0.4]))


def test_geometry_validation():
    with pytest.raises(ConfigurationError):
        ph.BoxGeometry(0.0)
    with pytest.raises(ConfigurationError):
        ph.CoordinateChoice("median")
