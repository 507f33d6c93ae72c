"""Sectioned run configuration: TOML parsing, validation, serialization.

A run is described by four sections: ``[system]`` (which Hamiltonian, how
many particles, the box), ``[model]`` (spline flow architecture),
``[training]`` (optimizer loop), and ``[output]`` (artifact directory and
checkpoint cadence).  The defaults reproduce the full soft-Coulomb
two-fermion experiment; every field can be overridden from a config file.
"""

import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import flow as fl
from . import physics as ph
from . import splines as sp
from .errors import ConfigurationError
from .vqmc import TrainConfig

__all__ = [
    "SystemConfig",
    "ModelConfig",
    "OutputConfig",
    "RunConfig",
    "default_config",
    "parse_config",
    "load_config",
    "serialize_config",
]

_HAMILTONIAN_KINDS = ("soft_coulomb_helium", "free_box")


@dataclass(frozen=True)
class SystemConfig:
    """Physical system: potential kind, particle count, box half length."""

    hamiltonian: str = "soft_coulomb_helium"
    n_particles: int = 2
    half_length: float = 10.0
    nuclear_charge: float = 2.0
    interaction_strength: float = 1.0

    def __post_init__(self):
        if self.hamiltonian not in _HAMILTONIAN_KINDS:
            raise ConfigurationError(
                f"[system] hamiltonian must be one of {_HAMILTONIAN_KINDS}, "
                f"got {self.hamiltonian!r}")
        if self.n_particles < 1:
            raise ConfigurationError(
                "[system] n_particles must be a positive integer")
        if not self.half_length > 0.0:
            raise ConfigurationError("[system] half_length must be positive")

    def hamiltonian_spec(self):
        """The potential-energy description used by physics and oracle."""
        return ph.HamiltonianSpec(
            kind=self.hamiltonian,
            n_particles=self.n_particles,
            nuclear_charge=self.nuclear_charge,
            interaction_strength=self.interaction_strength)


@dataclass(frozen=True)
class ModelConfig:
    """Spline flow architecture."""

    order: int = 5
    n_knots: int = 23
    n_layers: int = 3
    hidden_width: int = 64
    n_hidden_layers: int = 1
    coordinates: str = "mean"
    eps_regularize: float = sp.EPS_REGULARIZE

    def __post_init__(self):
        for name in ("order", "n_knots", "n_layers", "hidden_width",
                     "n_hidden_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(
                    f"[model] {name} must be a positive integer")
        if self.n_knots <= 2 * self.order:
            raise ConfigurationError(
                "[model] n_knots must exceed twice the spline order")
        ph.CoordinateChoice(self.coordinates)  # validates the variant name
        if not 0.0 < self.eps_regularize < 1.0:
            raise ConfigurationError(
                "[model] eps_regularize must lie in (0, 1)")


@dataclass(frozen=True)
class OutputConfig:
    """Artifact directory and checkpoint cadence."""

    directory: str = "runs/default"
    checkpoint_every: int = 5000

    def __post_init__(self):
        if not self.directory:
            raise ConfigurationError("[output] directory must be non-empty")
        if int(self.checkpoint_every) < 1:
            raise ConfigurationError(
                "[output] checkpoint_every must be a positive integer")


@dataclass(frozen=True)
class RunConfig:
    """Complete description of a training/evaluation run."""

    system: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def build_model(self, seed=None):
        """Construct the wavefunction model this config describes.

        Parameters
        ----------
        seed : int, optional
            Network initialization seed; defaults to the training seed.
        """
        if seed is None:
            seed = self.training.seed
        flow = fl.build_flow(
            n_dims=self.system.n_particles,
            n_layers=self.model.n_layers,
            order=self.model.order,
            n_knots=self.model.n_knots,
            hidden_width=self.model.hidden_width,
            n_hidden_layers=self.model.n_hidden_layers,
            eps_regularize=self.model.eps_regularize,
            seed=seed)
        return ph.WaveflowModel(flow,
                                ph.BoxGeometry(self.system.half_length),
                                ph.CoordinateChoice(self.model.coordinates))


def default_config():
    """The configuration of the full two-fermion soft-Coulomb experiment."""
    return RunConfig()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

# section -> key -> expected scalar type; order fixes the serialized layout
_SCHEMA = {
    "system": {
        "hamiltonian": str,
        "n_particles": int,
        "half_length": float,
        "nuclear_charge": float,
        "interaction_strength": float,
    },
    "model": {
        "order": int,
        "n_knots": int,
        "n_layers": int,
        "hidden_width": int,
        "n_hidden_layers": int,
        "coordinates": str,
        "eps_regularize": float,
    },
    "training": {
        "learning_rate": float,
        "batch_size": int,
        "epochs": int,
        "seed": int,
        "baseline_window": int,
        "variance_window": int,
    },
    "output": {
        "directory": str,
        "checkpoint_every": int,
    },
}

_SECTION_TYPES = {
    "system": SystemConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "output": OutputConfig,
}


def _coerce(section, key, expected, value):
    if isinstance(value, bool):  # bool is an int subclass; never a config type
        raise ConfigurationError(
            f"[{section}] {key}: expected {expected.__name__}, got a boolean")
    if expected is float and isinstance(value, (int, float)):
        return float(value)
    if expected is int and isinstance(value, int):
        return int(value)
    if expected is str and isinstance(value, str):
        return value
    raise ConfigurationError(
        f"[{section}] {key}: expected {expected.__name__}, "
        f"got {type(value).__name__}")


def parse_config(text):
    """Parse sectioned key/value text into a validated RunConfig.

    Unknown sections or keys are rejected with the offending name; scalar
    type mismatches name the section and key.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config parse error: {exc}") from exc
    sections = {}
    for section, payload in data.items():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(payload, dict):
            raise ConfigurationError(
                f"[{section}] must be a section of key = value lines")
        schema = _SCHEMA[section]
        kwargs = {}
        for key, value in payload.items():
            if key not in schema:
                raise ConfigurationError(
                    f"[{section}] unknown key {key!r}")
            kwargs[key] = _coerce(section, key, schema[key], value)
        sections[section] = _SECTION_TYPES[section](**kwargs)
    return RunConfig(**sections)


def load_config(path):
    """Read and parse a config file; missing files are config errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _format_value(value):
    if isinstance(value, str):
        return json.dumps(value)  # valid basic-string escaping
    if isinstance(value, int):
        return str(value)
    return repr(float(value))  # shortest round-trip float literal


def serialize_config(cfg):
    """Canonical text form; parse(serialize(cfg)) reproduces cfg exactly."""
    lines = []
    for section, schema in _SCHEMA.items():
        holder = getattr(cfg, section)
        lines.append(f"[{section}]")
        for key in schema:
            lines.append(f"{key} = {_format_value(getattr(holder, key))}")
        lines.append("")
    return "\n".join(lines)
