"""Box geometry, relative-coordinate maps, and the antisymmetric wavefunction.

A model wavefunction lives on the fundamental domain where the particle
coordinates are sorted ascending.  Mapping a sorted configuration into the
unit hypercube (two autoregressive variants: the first-particle map and the
mean-style free-space map), evaluating the square flow there, and attaching
the permutation parity extends it antisymmetrically to the whole box.  The
Jacobian of the coordinate map is folded into the amplitude so the extended
wavefunction is square-normalized over the box itself.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as fl
from .errors import ConfigurationError, DomainError, NodeProximityError
from .numerics import inversion_count_rows

__all__ = [
    "BoxGeometry", "CoordinateChoice", "HamiltonianSpec", "WaveflowModel",
    "to_relative", "from_relative", "psi", "potential", "local_energy",
    "to_relative_batch", "from_relative_batch", "psi_batch",
    "local_energy_batch",
]

LOG_NODE_CUTOFF = math.log(1e-300)


@dataclass(frozen=True)
class BoxGeometry:
    """The simulation box [-L, L] in atomic units."""

    half_length: float

    def __post_init__(self):
        if not self.half_length > 0:
            raise ConfigurationError("box half_length must be positive")


@dataclass(frozen=True)
class CoordinateChoice:
    """Which coordinate carries the unconstrained degree of freedom.

    ``"first"`` keeps the scaled position of the lowest particle followed by
    scaled gaps; ``"mean"`` keeps gaps scaled by the remaining free space,
    with the global position last.
    """

    variant: str

    def __post_init__(self):
        if self.variant not in ("first", "mean"):
            raise ConfigurationError(
                f"unknown coordinate variant {self.variant!r}; "
                "expected 'first' or 'mean'")


@dataclass(frozen=True)
class HamiltonianSpec:
    """Potential-energy description for a chain of identical particles."""

    kind: str
    n_particles: int
    nuclear_charge: float = 2.0
    interaction_strength: float = 1.0
    custom_potential: object = None

    def __post_init__(self):
        if self.kind not in ("soft_coulomb_helium", "free_box", "custom"):
            raise ConfigurationError(f"unknown hamiltonian kind {self.kind!r}")
        if self.n_particles < 1:
            raise ConfigurationError("n_particles must be at least 1")
        if self.kind == "custom" and not callable(self.custom_potential):
            raise ConfigurationError(
                "custom hamiltonian needs a callable custom_potential")


@dataclass(frozen=True)
class WaveflowModel:
    """Square flow plus geometry: a normalized antisymmetric wavefunction."""

    flow: object
    geometry: BoxGeometry
    coord: CoordinateChoice = field(default_factory=lambda: CoordinateChoice("mean"))


# ---------------------------------------------------------------------------
# Relative coordinates
# ---------------------------------------------------------------------------

def _safe_div(num, den):
    # boundary corners make both terms vanish (particle pile-up on a wall);
    # the quotient is then 0 by continuity, so divide by 1 there instead
    den_data = ad.data_of(den)
    safe = ad.where(den_data == 0.0, 1.0, den)
    return num / safe, safe


def to_relative_batch(coord, x, half_length):
    """Unit-cube coordinates and log|det| for rows of sorted configurations.

    Parameters
    ----------
    coord : CoordinateChoice
    x : (batch, n) array, tape variable, or Taylor jet of sorted coordinates
    half_length : float

    Returns
    -------
    u : (batch, n) of the same kind as ``x``, componentwise in [0, 1]
    log_det : (batch,) accumulated log-Jacobian of the map
    """
    big_l = float(half_length)
    n = ad.data_of(x).shape[1]
    cols = [ad.getcol(x, i) for i in range(n)]
    if coord.variant == "first":
        # each slot divides by a float with the same subtrahend as its
        # numerator, so wall contact lands on exactly 0 or 1 by itself
        us = [(cols[0] + big_l) / (2.0 * big_l)]
        log_det = -math.log(2.0 * big_l)
        for i in range(1, n):
            u_i, den = _safe_div(cols[i] - cols[i - 1], big_l - cols[i - 1])
            us.append(u_i)
            log_det = log_det - ad.log(den)
    else:
        free = 2.0 * big_l
        us = []
        log_det = 0.0
        for i in range(n - 1):
            gap = cols[i + 1] - cols[i]
            u_i, den = _safe_div(gap, free)
            # the running free space is a chained subtraction, so the ratio
            # can round past 1 even though it never exceeds 1 analytically
            us.append(ad.where(ad.data_of(u_i) > 1.0, 1.0, u_i))
            log_det = log_det - ad.log(den)
            free = free - gap
        u_last, den = _safe_div(cols[0] + big_l, free)
        # top-wall contact must land on exactly 1 despite the rounded free
        # space, or the enforced zero there would only be approximate
        pin = (ad.data_of(cols[n - 1]) == big_l) | (ad.data_of(u_last) > 1.0)
        us.append(ad.where(pin, 1.0, u_last))
        log_det = log_det - ad.log(den)
    if not isinstance(log_det, (ad.Var, ad.Jet)):
        log_det = np.broadcast_to(np.asarray(log_det, float),
                                  (ad.data_of(x).shape[0],))
    return ad.stack_last(us), log_det


def to_relative(coord, x, half_length):
    """Map one sorted in-box configuration to the unit cube.

    Returns ``(u, log_det)`` with u componentwise in [0, 1] and the
    log-Jacobian of the map.  Unsorted or out-of-box input raises
    ``DomainError``.
    """
    x = np.asarray(x, float)
    if np.any(np.diff(x) < 0):
        raise DomainError("coordinates must be sorted ascending")
    if np.any(np.abs(x) > half_length):
        raise DomainError("coordinates must lie inside the box")
    u, log_det = to_relative_batch(coord, x[None, :], half_length)
    return u[0], float(log_det[0])


def from_relative_batch(coord, u, half_length):
    """Absolute sorted configurations for rows of unit-cube coordinates."""
    big_l = float(half_length)
    u = np.asarray(u, float)
    nbatch, n = u.shape
    x = np.empty_like(u)
    if coord.variant == "first":
        x[:, 0] = (u[:, 0] - 0.5) * 2.0 * big_l
        for i in range(1, n):
            x[:, i] = x[:, i - 1] + u[:, i] * (big_l - x[:, i - 1])
    else:
        free = np.full(nbatch, 2.0 * big_l)
        gaps = np.empty((nbatch, max(n - 1, 0)))
        for i in range(n - 1):
            gaps[:, i] = u[:, i] * free
            free -= gaps[:, i]
        x[:, 0] = u[:, n - 1] * free - big_l
        for i in range(n - 1):
            x[:, i + 1] = x[:, i] + gaps[:, i]
    return x


def from_relative(coord, u, half_length):
    """Exact inverse of ``to_relative`` for one coordinate vector."""
    return from_relative_batch(coord, np.asarray(u, float)[None, :],
                               half_length)[0]


# ---------------------------------------------------------------------------
# Wavefunction and energies
# ---------------------------------------------------------------------------

def _log_norm(n):
    return 0.5 * math.log(math.factorial(n))


def log_abs_model_batch(model, x_sorted, params=None):
    """log|psi| for rows of sorted configurations, any value kind."""
    n = ad.data_of(x_sorted).shape[1]
    u, log_det = to_relative_batch(model.coord, x_sorted,
                                   model.geometry.half_length)
    _, log_abs, sign = fl.evaluate(model.flow, u, params=params)
    return log_abs + 0.5 * log_det - _log_norm(n), sign


def psi_batch(model, x, params=None):
    """(value, sign, log_abs) arrays for a (batch, n) block of configurations."""
    x = np.asarray(x, float)
    if np.any(np.abs(x) > model.geometry.half_length):
        raise DomainError("coordinates must lie inside the box")
    order = np.argsort(x, axis=1, kind="stable")
    x_sorted = np.take_along_axis(x, order, axis=1)
    parity = np.where(inversion_count_rows(x) % 2 == 0, 1.0, -1.0)
    log_abs, sign = log_abs_model_batch(model, x_sorted, params=params)
    sign = sign * parity
    with np.errstate(over="ignore"):
        value = sign * ad.exp(log_abs)
    return value, sign, log_abs


def psi(model, x):
    """Antisymmetric wavefunction value at one configuration.

    Returns ``(value, sign, log_abs)``; the sign is 0 on nodes.  The
    permutation parity comes from the inversion count of the sorting, and the
    coordinate-map Jacobian and symmetrization constant are folded in so the
    square of the wavefunction integrates to 1 over the box.
    """
    value, sign, log_abs = psi_batch(model, np.asarray(x, float)[None, :])
    return float(value[0]), float(sign[0]), float(log_abs[0])


def potential(spec, x):
    """Potential energy at one configuration or a (batch, n) block."""
    x = np.asarray(x, float)
    squeeze = x.ndim == 1
    xb = x[None, :] if squeeze else x
    if spec.kind == "free_box":
        v = np.zeros(xb.shape[0])
    elif spec.kind == "custom":
        v = np.asarray([spec.custom_potential(row) for row in xb], float)
    else:
        v = -spec.nuclear_charge * np.sum(1.0 / np.sqrt(1.0 + xb ** 2), axis=1)
        n = xb.shape[1]
        for i in range(n):
            for j in range(i + 1, n):
                sep = xb[:, i] - xb[:, j]
                v = v + spec.interaction_strength / np.sqrt(1.0 + sep ** 2)
    return float(v[0]) if squeeze else v


def local_energy_batch(model, spec, x, params=None):
    """Local energies for a (batch, n) block of configurations.

    The Laplacian runs through the log-magnitude: psi''/psi per coordinate is
    (log|psi|)'' + ((log|psi|)')^2, accumulated over all coordinates from a
    single Taylor-jet pass carrying one derivative direction per coordinate.
    When ``params`` maps names to tape variables the result stays on the tape
    so energy gradients can flow.
    """
    x = np.asarray(x, float)
    if np.any(np.abs(x) > model.geometry.half_length):
        raise DomainError("coordinates must lie inside the box")
    nbatch, n = x.shape
    x_sorted = np.sort(x, axis=1)

    def log_abs_of(arg, arg_params):
        if hasattr(model, "log_abs_batch"):
            # reference states (e.g. analytic eigenstates) plug in here
            return model.log_abs_batch(arg)
        return log_abs_model_batch(model, arg, params=arg_params)[0]

    # guard on a plain-value pass first so near-node configurations raise
    # before infinities enter the derivative components
    plain = ad.data_of(log_abs_of(x_sorted, None))
    if np.any(plain < LOG_NODE_CUTOFF):
        raise NodeProximityError(
            "wavefunction magnitude underflows at a sampled configuration; "
            "discard the sample and redraw")
    d1 = np.broadcast_to(np.eye(n)[:, None, :], (n, nbatch, n)).copy()
    jet = ad.Jet(x_sorted, d1, np.zeros((n, nbatch, n)))
    log_abs = log_abs_of(jet, params)
    lap = None
    for i in range(n):
        d1_i = ad.take_first(log_abs.d1, i)
        d2_i = ad.take_first(log_abs.d2, i)
        term = d2_i + d1_i * d1_i
        lap = term if lap is None else lap + term
    return -0.5 * lap + potential(spec, x)


def local_energy(model, spec, x):
    """Local energy Hpsi/psi at one configuration.

    Kinetic part from the autodiff Laplacian through the full composition
    (coordinate map, conditioner network, splines); potential part from the
    Hamiltonian description.  Near-node configurations (|psi| below 1e-300)
    raise ``NodeProximityError``.
    """
    e = local_energy_batch(model, spec, np.asarray(x, float)[None, :])
    return float(ad.data_of(e)[0])
