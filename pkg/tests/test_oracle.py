"""Tests for the grid eigensolver and the analytic reference state."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import waveflow.numerics as nm
import waveflow.oracle as orc
import waveflow.physics as ph
from waveflow.errors import (ConfigurationError, InsufficientStatesError,
                             TooLargeError)

FREE1 = ph.HamiltonianSpec(kind="free_box", n_particles=1)
FREE2 = ph.HamiltonianSpec(kind="free_box", n_particles=2)
HELIUM = ph.HamiltonianSpec(kind="soft_coulomb_helium", n_particles=2)


def _box_level(k, width):
    return k * k * math.pi ** 2 / (2.0 * width * width)


def test_build_validation():
    # check 1: too few grid points is rejected
    with pytest.raises(ConfigurationError):
        orc.build_hamiltonian(FREE1, 10.0, 15)
    # check 2: only one- and two-particle grids are supported
    with pytest.raises(ConfigurationError):
        orc.build_hamiltonian(
            ph.HamiltonianSpec(kind="free_box", n_particles=3), 10.0, 32)
    # check 3: a grid whose workspace cannot fit raises the size error
    with pytest.raises(TooLargeError):
        orc.build_hamiltonian(FREE2, 10.0, 1001)


def test_kinetic_stencil_hand_check():
    h = orc.build_hamiltonian(FREE1, 8.0, 17)
    step = h.h
    npt.assert_allclose(step, 1.0, atol=0.0)
    # check 1: a unit vector at an interior node maps to the familiar
    # second-difference column: 1/h^2 on site, -1/(2 h^2) on the neighbors
    e = np.zeros(17)
    e[8] = 1.0
    out = h.apply(e)
    expected = np.zeros(17)
    expected[8] = 1.0 / step ** 2
    expected[7] = expected[9] = -0.5 / step ** 2
    npt.assert_array_equal(out, expected)
    # check 2: on constant ones the second difference vanishes except where a
    # wall neighbor is pinned to zero
    out = h.apply(h.project(np.ones(17)))
    expected = np.zeros(17)
    expected[1] = expected[-2] = 0.5 / step ** 2
    npt.assert_array_equal(out, expected)


def test_potential_on_grid():
    # check 1: the helium potential at the origin node is exactly -3
    h = orc.build_hamiltonian(HELIUM, 10.0, 17)
    npt.assert_array_equal(h.potential[8, 8], -3.0)
    # check 2: the free box has no potential anywhere
    h = orc.build_hamiltonian(FREE2, 10.0, 17)
    npt.assert_array_equal(h.potential, np.zeros((17, 17)))


def test_operator_symmetry():
    rng = np.random.default_rng(3)
    for spec in (FREE2, HELIUM):
        h = orc.build_hamiltonian(spec, 10.0, 101)
        for _ in range(10):
            u = h.project(rng.standard_normal(h.size))
            v = h.project(rng.standard_normal(h.size))
            u /= np.linalg.norm(u)
            v /= np.linalg.norm(v)
            # check: <u, H v> equals <H u, v> on boundary-zero vectors
            npt.assert_allclose(u @ h.apply(v), h.apply(u) @ v, atol=1e-10)


def test_swap_commutation():
    rng = np.random.default_rng(4)
    h = orc.build_hamiltonian(HELIUM, 10.0, 101)
    for _ in range(5):
        v = h.project(rng.standard_normal(h.size))
        v /= np.linalg.norm(v)
        # check: exchanging particle axes commutes with the Hamiltonian
        gap = np.linalg.norm(h.apply(h.swap(v)) - h.swap(h.apply(v)))
        npt.assert_allclose(gap, 0.0, atol=1e-10)


def test_free_box_spectrum_fine_grid():
    h = orc.build_hamiltonian(FREE1, 10.0, 2001)
    result = orc.lowest_eigenpairs(h, 2)
    width = 20.0
    # check 1: the ground level matches the box formula to 1e-3 relative
    npt.assert_allclose(result.eigenvalues[0], _box_level(1, width),
                        rtol=1e-3, atol=0.0)
    # check 2: the level ratio is 4 within one percent
    npt.assert_allclose(result.eigenvalues[1] / result.eigenvalues[0], 4.0,
                        rtol=1e-2, atol=0.0)
    # check 3: returned pairs satisfy the residual bound on unit vectors
    for lam, vec in zip(result.eigenvalues, result.eigenvectors):
        unit = vec / np.linalg.norm(vec)
        res = np.linalg.norm(h.apply(unit) - lam * unit)
        npt.assert_allclose(res, 0.0, atol=1e-8)
    # check 4: eigenvectors are orthonormal under the grid measure
    gram = result.eigenvectors @ result.eigenvectors.T * result.grid_spacing
    npt.assert_allclose(gram, np.eye(2), atol=1e-8)


def test_grid_convergence_and_richardson():
    width = 20.0
    exact = _box_level(1, width)
    energies, steps = [], []
    for n in (101, 201):
        h = orc.build_hamiltonian(FREE1, 10.0, n)
        energies.append(orc.lowest_eigenpairs(h, 1).eigenvalues[0])
        steps.append(h.h)
    err = [abs(e - exact) for e in energies]
    # check 1: halving the spacing divides the error by about four
    assert 3.5 < err[0] / err[1] < 4.5
    # check 2: Richardson extrapolation removes the leading error term
    extrap = orc.richardson_extrapolate(energies[0], steps[0],
                                        energies[1], steps[1])
    npt.assert_allclose(extrap, exact, rtol=1e-3, atol=0.0)
    npt.assert_allclose(extrap, exact, rtol=1e-6, atol=0.0)


def test_eigensolver_determinism():
    h = orc.build_hamiltonian(FREE1, 10.0, 201)
    a = orc.lowest_eigenpairs(h, 3, seed=7)
    b = orc.lowest_eigenpairs(h, 3, seed=7)
    # check: identical seeds give bitwise identical results
    npt.assert_array_equal(a.eigenvalues, b.eigenvalues)
    npt.assert_array_equal(a.eigenvectors, b.eigenvectors)


def test_two_particle_free_box_selection():
    h = orc.build_hamiltonian(FREE2, 10.0, 101)
    result = orc.lowest_eigenpairs(h, 4)
    width = 20.0
    # check 1: the lowest state is the symmetric (1,1) level
    assert result.antisymmetry_scores[0] > 0.99
    npt.assert_allclose(result.eigenvalues[0], 2.0 * _box_level(1, width),
                        rtol=1e-3, atol=0.0)
    # check 2: the degenerate (1,2) level is completed into one symmetric and
    # one antisymmetric member with unit-magnitude scores
    npt.assert_allclose(result.eigenvalues[1], result.eigenvalues[2],
                        atol=1e-9)
    pair_scores = sorted(result.antisymmetry_scores[1:3])
    npt.assert_allclose(pair_scores, [-1.0, 1.0], atol=1e-8)
    # check 3: selection returns the antisymmetric member at the known energy
    idx, energy = orc.select_antisymmetric(result)
    assert idx in (1, 2)
    npt.assert_allclose(energy, 5.0 * math.pi ** 2 / (2.0 * width ** 2),
                        rtol=1e-3, atol=0.0)
    # check 4: selected eigenvectors still meet the residual bound
    vec = result.eigenvectors[idx]
    unit = vec / np.linalg.norm(vec)
    res = np.linalg.norm(h.apply(unit) - energy * unit)
    npt.assert_allclose(res, 0.0, atol=1e-8)


def test_select_antisymmetric_errors():
    # check 1: a one-particle result has no exchange structure
    h1 = orc.build_hamiltonian(FREE1, 10.0, 101)
    r1 = orc.lowest_eigenpairs(h1, 2)
    with pytest.raises(ConfigurationError):
        orc.select_antisymmetric(r1)
    # check 2: if only symmetric states were computed the selection fails
    h2 = orc.build_hamiltonian(FREE2, 10.0, 51)
    r2 = orc.lowest_eigenpairs(h2, 1)
    with pytest.raises(InsufficientStatesError):
        orc.select_antisymmetric(r2)


def test_eigensolver_validation():
    h = orc.build_hamiltonian(FREE1, 10.0, 101)
    # check: nonsensical pair counts are rejected
    with pytest.raises(ConfigurationError):
        orc.lowest_eigenpairs(h, 0)
    with pytest.raises(ConfigurationError):
        orc.lowest_eigenpairs(h, 33)


def test_helium_excited_state_small_grid():
    h = orc.build_hamiltonian(HELIUM, 10.0, 81)
    result = orc.lowest_eigenpairs(h, 4)
    # check 1: the overall ground state is symmetric under exchange
    assert result.antisymmetry_scores[0] > 0.99
    # check 2: the lowest antisymmetric level sits near -1.8125 already on a
    # coarse grid; the finer extrapolated run lives in the acceptance suite
    _, energy = orc.select_antisymmetric(result)
    npt.assert_allclose(energy, -1.8125, atol=2e-2)


def test_analytic_state_values():
    state = orc.AnalyticTwoFermionBox(5.0)
    width = 10.0
    # check 1: hand-evaluated value at one point
    z0, z1 = 4.0, 6.0  # box frame for x = (-1.0, 1.0)
    expected = (math.sqrt(2.0) / width) * (
        math.sin(math.pi * z0 / width) * math.sin(2.0 * math.pi * z1 / width)
        - math.sin(math.pi * z1 / width)
        * math.sin(2.0 * math.pi * z0 / width))
    npt.assert_allclose(orc.analytic_box_two_fermion(5.0, (-1.0, 1.0)),
                        expected, atol=1e-15)
    # check 2: coincident coordinates give exactly zero
    npt.assert_array_equal(orc.analytic_box_two_fermion(5.0, (1.3, 1.3)), 0.0)
    # check 3: swapping the particles flips the sign exactly
    rng = np.random.default_rng(5)
    x = rng.uniform(-5.0, 5.0, (200, 2))
    npt.assert_array_equal(state.value(x[:, ::-1]), -state.value(x))
    # check 4: the state is normalized over the box
    nodes, weights = nm.gauss_legendre(60, -5.0, 5.0)
    grid0, grid1 = np.meshgrid(nodes, nodes, indexing="ij")
    pts = np.stack([grid0.ravel(), grid1.ravel()], axis=1)
    mass = np.outer(weights, weights).ravel() @ state.value(pts) ** 2
    npt.assert_allclose(mass, 1.0, atol=1e-10)
    # check 5: the quoted energy matches the two lowest box levels
    npt.assert_allclose(state.energy, _box_level(1, width)
                        + _box_level(2, width), atol=1e-15)


def test_analytic_state_local_energy_constant():
    state = orc.AnalyticTwoFermionBox(5.0)
    rng = np.random.default_rng(6)
    x = np.sort(rng.uniform(-4.9, 4.9, (100, 2)), axis=1)
    energies = ph.local_energy_batch(state, FREE2, x)
    # check: the local energy of an exact eigenstate is its eigenvalue
    npt.assert_allclose(energies, np.full(100, state.energy),
                        rtol=1e-8, atol=0.0)


def test_analytic_state_sampling():
    state = orc.AnalyticTwoFermionBox(5.0)
    rng = np.random.default_rng(7)
    samples = state.sample_batch(40000, rng)
    # check 1: all draws are inside the box
    assert np.all(np.abs(samples) <= 5.0)
    # check 2: a coarse histogram matches the quadrature cell masses
    edges = np.linspace(-5.0, 5.0, 13)
    hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[edges] * 2)
    hist /= samples.shape[0]
    masses = np.zeros((12, 12))
    for i in range(12):
        nodes_i, w_i = nm.gauss_legendre(12, edges[i], edges[i + 1])
        for j in range(12):
            nodes_j, w_j = nm.gauss_legendre(12, edges[j], edges[j + 1])
            g0, g1 = np.meshgrid(nodes_i, nodes_j, indexing="ij")
            pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
            masses[i, j] = np.outer(w_i, w_j).ravel() @ state.value(pts) ** 2
    total_variation = 0.5 * np.abs(hist - masses).sum()
    assert total_variation < 0.05
