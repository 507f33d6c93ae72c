"""Grid eigensolver ground truth and analytic reference states.

Everything here is deliberately independent of the flow machinery: a
finite-difference Hamiltonian on a regular grid with Dirichlet walls, a
thick-restart Lanczos eigensolver with full reorthogonalization, selection of
the antisymmetric state by swap overlap, and the closed-form two-fermion box
eigenstate.  Training results are validated against these, never against the
model itself.
"""

import math

import numpy as np

from . import autodiff as ad
from .errors import (ConfigurationError, ConvergenceError,
                     InsufficientStatesError, TooLargeError)
from .physics import BoxGeometry, potential

__all__ = [
    "GridHamiltonian", "EigenResult", "build_hamiltonian",
    "lowest_eigenpairs", "select_antisymmetric", "richardson_extrapolate",
    "analytic_box_two_fermion", "AnalyticTwoFermionBox",
]

_MAX_BASIS = 240
_MAX_MATVECS = 25000
_RESIDUAL_TOL = 1e-8
_MEMORY_CAP_BYTES = 1_200_000_000


class GridHamiltonian:
    """Matrix-free -1/2 laplacian + V on a regular grid with Dirichlet walls.

    The grid includes the wall nodes; operator input and output are flat
    vectors over the full grid with the wall entries pinned to zero, which
    keeps the operator symmetric on the boundary-zero subspace.
    """

    def __init__(self, spec, half_length, n_points):
        self.spec = spec
        self.half_length = float(half_length)
        self.n_points = int(n_points)
        self.n_dims = spec.n_particles
        self.h = 2.0 * self.half_length / (self.n_points - 1)
        self.axis = np.linspace(-self.half_length, self.half_length,
                                self.n_points)
        if self.n_dims == 1:
            pts = self.axis[:, None]
        else:
            X0, X1 = np.meshgrid(self.axis, self.axis, indexing="ij")
            pts = np.stack([X0.ravel(), X1.ravel()], axis=1)
        self.potential = potential(spec, pts).reshape(self.shape)

    @property
    def shape(self):
        return (self.n_points,) * self.n_dims

    @property
    def size(self):
        return self.n_points ** self.n_dims

    def project(self, v):
        """Zero the wall entries of a flat vector (returns a copy)."""
        f = np.array(v, float).reshape(self.shape)
        if self.n_dims == 1:
            f[0] = f[-1] = 0.0
        else:
            f[0, :] = f[-1, :] = 0.0
            f[:, 0] = f[:, -1] = 0.0
        return f.ravel()

    def apply(self, v):
        """H v for a boundary-zero flat vector; output is boundary-zero."""
        f = np.asarray(v).reshape(self.shape)
        out = np.zeros_like(f)
        inv_h2 = 1.0 / (self.h * self.h)
        if self.n_dims == 1:
            lap = (f[:-2] + f[2:] - 2.0 * f[1:-1]) * inv_h2
            out[1:-1] = -0.5 * lap + self.potential[1:-1] * f[1:-1]
            out[0] = out[-1] = 0.0
        else:
            lap = (f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:]
                   - 4.0 * f[1:-1, 1:-1]) * inv_h2
            out[1:-1, 1:-1] = (-0.5 * lap
                               + self.potential[1:-1, 1:-1] * f[1:-1, 1:-1])
        return out.ravel()

    def swap(self, v):
        """Exchange the two particle axes of a flat vector."""
        if self.n_dims != 2:
            raise ConfigurationError("swap needs a two-particle grid")
        return np.asarray(v).reshape(self.shape).T.ravel().copy()


def build_hamiltonian(spec, half_length, n_points):
    """Discretize the Hamiltonian on an n_points-per-dimension grid.

    Second-order central differences for the Laplacian, potential sampled at
    the nodes, zero boundary condition at the walls.  Grids whose eigensolver
    workspace would exceed the configured memory cap raise ``TooLargeError``.
    """
    if n_points < 16:
        raise ConfigurationError("n_points must be at least 16")
    if spec.n_particles not in (1, 2):
        raise ConfigurationError("grid oracle supports 1 or 2 particles")
    size = n_points ** spec.n_particles
    workspace = 8 * size * (_MAX_BASIS + 8)
    if workspace > _MEMORY_CAP_BYTES:
        raise TooLargeError(
            f"eigensolver workspace for a {n_points}^{spec.n_particles} grid "
            f"would need about {workspace / 1e9:.1f} GB; shrink the grid")
    return GridHamiltonian(spec, half_length, n_points)


class EigenResult:
    """Ascending eigenvalues with grid-normalized vectors and swap scores."""

    def __init__(self, eigenvalues, eigenvectors, scores, h, n_dims):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors
        self.antisymmetry_scores = scores
        self.grid_spacing = h
        self.n_dims = n_dims


def _ritz_matrix(theta, coupling, alphas, betas):
    """Dense projected matrix: restart block, coupling row, new tridiagonal."""
    ell, k = len(theta), len(alphas)
    q = ell + k
    t = np.zeros((q, q))
    if ell:
        t[:ell, :ell] = np.diag(theta)
        t[:ell, ell] = coupling
        t[ell, :ell] = coupling
    t[ell:, ell:] += np.diag(alphas)
    for i in range(k - 1):
        t[ell + i, ell + i + 1] = betas[i]
        t[ell + i + 1, ell + i] = betas[i]
    return t


def _orthonormalize_rows(basis, count, w):
    """Two classical Gram-Schmidt sweeps of w against the first count rows."""
    for _ in range(2):
        w = w - basis[:count].T @ (basis[:count] @ w)
    return w


def lowest_eigenpairs(h, m, seed=0):
    """The m lowest eigenpairs of a grid Hamiltonian.

    Thick-restart Lanczos with full reorthogonalization: the Krylov basis is
    capped, and on each restart the lowest Ritz vectors are kept and the
    recurrence continued from the residual direction.  Deterministic for a
    given seed.  Exactly degenerate levels are completed with their swap
    images and rotated to definite exchange symmetry before scoring, so the
    antisymmetric member of a degenerate pair is always present.

    Returns an ``EigenResult``; every returned pair satisfies
    ``|H v - lambda v| < 1e-8`` on unit vectors, otherwise
    ``ConvergenceError`` is raised.
    """
    if m < 1:
        raise ConfigurationError("need at least one eigenpair")
    if m > 32 or 4 * m >= h.size:
        raise ConfigurationError("m is too large for this grid")
    n_want = m + 2  # converge a small buffer to see cluster structure
    rng = np.random.default_rng(seed)
    basis = np.empty((_MAX_BASIS + 1, h.size))
    v = h.project(rng.standard_normal(h.size))
    basis[0] = v / np.linalg.norm(v)
    theta = np.empty(0)
    coupling = np.empty(0)
    ell = 0
    matvecs = 0
    best_est = np.inf
    vals = vecs_small = None
    converged = False
    while matvecs < _MAX_MATVECS and not converged:
        alphas, betas = [], []
        j = ell
        while j < _MAX_BASIS:
            w = h.apply(basis[j])
            matvecs += 1
            if j == ell and ell:
                w = w - coupling @ basis[:ell]
            elif j > ell:
                w = w - betas[-1] * basis[j - 1]
            a = float(basis[j] @ w)
            w = w - a * basis[j]
            w = _orthonormalize_rows(basis, j + 1, w)
            alphas.append(a)
            b = float(np.linalg.norm(w))
            if b < 1e-12 * max(1.0, abs(a)):
                # invariant subspace exhausted; continue in a fresh direction
                w = _orthonormalize_rows(basis, j + 1,
                                         h.project(rng.standard_normal(h.size)))
                b = float(np.linalg.norm(w))
                betas.append(0.0)
                basis[j + 1] = w / b
            else:
                betas.append(b)
                basis[j + 1] = w / b
            j += 1
            if j % 20 == 0 or j == _MAX_BASIS:
                t = _ritz_matrix(theta, coupling, alphas, betas[:-1])
                vals, vecs_small = np.linalg.eigh(t)
                est = betas[-1] * np.abs(vecs_small[-1, :n_want])
                best_est = float(est.max())
                if best_est < 0.3 * _RESIDUAL_TOL:
                    converged = True
                    break
        if converged or matvecs >= _MAX_MATVECS:
            break
        # thick restart: keep the lowest Ritz vectors plus the residual
        keep = min(2 * n_want + 8, len(vals) - 2)
        kept = (basis[:ell + len(alphas)].T @ vecs_small[:, :keep]).T
        resid_dir = basis[ell + len(alphas)]
        theta = vals[:keep]
        coupling = betas[-1] * vecs_small[-1, :keep]
        basis[:keep] = kept
        basis[keep] = resid_dir
        ell = keep
    if not converged:
        raise ConvergenceError(
            f"eigensolver did not reach residual {_RESIDUAL_TOL:g} within "
            f"{matvecs} operator applications (best estimate {best_est:.2e})")
    span = ell + len(alphas)
    states = (basis[:span].T @ vecs_small[:, :n_want]).T
    energies = vals[:n_want].copy()
    states /= np.linalg.norm(states, axis=1, keepdims=True)
    if h.n_dims == 2:
        energies, states, scores = _definite_symmetry(h, energies, states)
    else:
        scores = np.ones(energies.size)
    order = np.argsort(energies)[:m]
    energies, states, scores = energies[order], states[order], scores[order]
    for lam, v in zip(energies, states):
        res = float(np.linalg.norm(h.apply(v) - lam * v))
        if res > _RESIDUAL_TOL:
            raise ConvergenceError(
                f"eigenpair at {lam:.6f} has residual {res:.2e} "
                f"above {_RESIDUAL_TOL:g}")
    # sign convention and grid-measure normalization for the output
    cell = h.h ** h.n_dims
    out = []
    for v in states:
        i = int(np.argmax(np.abs(v)))
        out.append((math.copysign(1.0, v[i]) / math.sqrt(cell)) * v)
    return EigenResult(energies, np.array(out), scores, h.h, h.n_dims)


def _definite_symmetry(h, energies, states):
    """Rotate degenerate clusters into swap eigenstates and score them."""
    width = 4.0 / (h.h * h.h) + float(np.abs(h.potential).max())
    atol = max(1e-8 * max(1.0, float(np.abs(energies).max())), 1e-11 * width)
    out_e, out_v, out_s = [], [], []
    i = 0
    while i < energies.size:
        j = i + 1
        while j < energies.size and energies[j] - energies[j - 1] < atol:
            j += 1
        block = states[i:j]
        # complete the cluster with swap images: for an exactly degenerate
        # pair the Krylov space carries only one mixed member, and its swap
        # image supplies the missing direction
        stack = np.concatenate([block, np.array([h.swap(v) for v in block])])
        u, sing, _ = np.linalg.svd(stack.T, full_matrices=False)
        rank = int(np.sum(sing > 1e-8 * sing[0]))
        q = u[:, :rank].T
        sq = np.array([h.swap(v) for v in q])
        overlap = 0.5 * (q @ sq.T + sq @ q.T)
        parities, rot = np.linalg.eigh(overlap)
        defin = rot.T @ q
        for k in range(rank):
            out_e.append(float(energies[i]))
            out_v.append(defin[k])
            out_s.append(float(parities[k]))
        i = j
    return np.array(out_e), np.array(out_v), np.array(out_s)


def select_antisymmetric(result):
    """Index and energy of the lowest antisymmetric state in a result."""
    if result.n_dims != 2:
        raise ConfigurationError(
            "antisymmetric selection needs a two-particle result")
    for i, score in enumerate(result.antisymmetry_scores):
        if score < -0.99:
            return i, float(result.eigenvalues[i])
    raise InsufficientStatesError(
        "no antisymmetric state among the computed eigenpairs; increase m")


def richardson_extrapolate(e_coarse, h_coarse, e_fine, h_fine):
    """Eliminate the O(h^2) stencil error from two grid energies."""
    w = h_coarse ** 2 - h_fine ** 2
    return (e_fine * h_coarse ** 2 - e_coarse * h_fine ** 2) / w


# ---------------------------------------------------------------------------
# Analytic reference state
# ---------------------------------------------------------------------------

class AnalyticTwoFermionBox:
    """Exact lowest antisymmetric state of two free fermions in a box.

    The normalized combination of the two lowest box orbitals,
    proportional to sin(pi z0 / W) sin(2 pi z1 / W) minus the exchange term
    with z = x + L and W = 2 L; its energy is 5 pi^2 / (2 W^2).
    """

    def __init__(self, half_length):
        self.geometry = BoxGeometry(half_length)
        self.width = 2.0 * float(half_length)
        self.norm = math.sqrt(2.0) / self.width

    @property
    def energy(self):
        return 5.0 * math.pi ** 2 / (2.0 * self.width ** 2)

    def _raw(self, x):
        big_l = self.geometry.half_length
        k = math.pi / self.width
        z0 = ad.getcol(x, 0) + big_l
        z1 = ad.getcol(x, 1) + big_l
        return (ad.sin(z0 * k) * ad.sin(z1 * (2.0 * k))
                - ad.sin(z1 * k) * ad.sin(z0 * (2.0 * k)))

    def value(self, x):
        """Wavefunction values for one pair or a (batch, 2) block."""
        x = np.asarray(x, float)
        squeeze = x.ndim == 1
        v = self.norm * self._raw(x[None, :] if squeeze else x)
        return float(v[0]) if squeeze else v

    def log_abs_batch(self, x):
        """log|psi| for any value kind, pluggable into the local energy."""
        with np.errstate(divide="ignore"):
            return ad.log_abs(self._raw(x)) + math.log(self.norm)

    def sample_batch(self, size, rng):
        """Exact draws from psi^2 by rejection under a flat bound."""
        big_l = self.geometry.half_length
        bound = (2.0 * self.norm) ** 2
        out = np.empty((size, 2))
        filled = 0
        while filled < size:
            cand = rng.uniform(-big_l, big_l, (2 * (size - filled) + 64, 2))
            accept = rng.uniform(0.0, bound, cand.shape[0])
            keep = cand[accept < self.value(cand) ** 2]
            take = min(keep.shape[0], size - filled)
            out[filled:filled + take] = keep[:take]
            filled += take
        return out


def analytic_box_two_fermion(half_length, x):
    """Value of the analytic two-fermion box state at one coordinate pair."""
    return AnalyticTwoFermionBox(half_length).value(np.asarray(x, float))
