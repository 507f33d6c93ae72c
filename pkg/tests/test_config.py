import numpy.testing as npt
import pytest

from waveflow import config as cf
from waveflow.errors import ConfigurationError


FULL_TEXT = """
[system]
hamiltonian = "free_box"
n_particles = 2
half_length = 5.0

[model]
order = 4
n_knots = 15
n_layers = 2
hidden_width = 16
coordinates = "first"

[training]
learning_rate = 3e-4
batch_size = 32
epochs = 500
seed = 11

[output]
directory = "runs/test"
checkpoint_every = 100
"""


def test_default_config_reproduces_experiment():
    cfg = cf.default_config()
    # check 1: the published run settings are the defaults
    assert cfg.system.hamiltonian == "soft_coulomb_helium"
    assert cfg.system.n_particles == 2
    assert cfg.system.half_length == 10.0
    assert cfg.system.nuclear_charge == 2.0
    assert cfg.model.order == 5
    assert cfg.model.n_knots == 23
    assert cfg.model.n_layers == 3
    assert cfg.model.hidden_width == 64
    assert cfg.model.coordinates == "mean"
    assert cfg.training.learning_rate == 1e-4
    assert cfg.training.batch_size == 128
    assert cfg.training.epochs == 60000
    assert cfg.training.baseline_window == 100
    assert cfg.training.variance_window == 5000
    # check 2: an empty document parses to the defaults
    assert cf.parse_config("") == cfg


def test_parse_and_round_trip():
    cfg = cf.parse_config(FULL_TEXT)
    # check 1: overridden fields land in the right sections with float coercion
    assert cfg.system.hamiltonian == "free_box"
    assert cfg.model.order == 4 and cfg.model.coordinates == "first"
    assert cfg.training.learning_rate == 3e-4
    assert isinstance(cfg.system.half_length, float)
    # check 2: untouched fields keep their defaults
    assert cfg.model.eps_regularize == cf.ModelConfig().eps_regularize
    assert cfg.training.variance_window == 5000
    # check 3: serialize -> parse is a fixed point
    text = cf.serialize_config(cfg)
    again = cf.parse_config(text)
    assert again == cfg
    assert cf.serialize_config(again) == text


def test_integer_literal_fills_float_field():
    cfg = cf.parse_config("[training]\nlearning_rate = 1\n")
    assert cfg.training.learning_rate == 1.0
    assert isinstance(cfg.training.learning_rate, float)


@pytest.mark.parametrize("text", [
    "[orchestra]\n",                                  # unknown section
    "[model]\nwidth = 3\n",                           # unknown key
    "[training]\nbatch_size = true\n",                # boolean for integer
    "[system]\nhalf_length = \"ten\"\n",              # string for float
    "[training]\nlearning_rate = [1.0]\n",            # array for scalar
    "[system]\nhamiltonian = \"harmonic\"\n",         # unknown enum value
    "[model]\ncoordinates = \"median\"\n",            # unknown enum value
    "[system\nn_particles = 2\n",                     # malformed syntax
    "system = 3\n",                                   # scalar where a section goes
])
def test_parse_rejects_bad_documents(text):
    with pytest.raises(ConfigurationError):
        cf.parse_config(text)


@pytest.mark.parametrize("text", [
    "[system]\nn_particles = 0\n",
    "[system]\nhalf_length = -1.0\n",
    "[model]\nn_knots = 10\norder = 5\n",     # too few knots for the order
    "[model]\neps_regularize = 1.5\n",
    "[model]\nn_layers = 0\n",
    "[training]\nepochs = 0\n",
    "[output]\ncheckpoint_every = 0\n",
    "[output]\ndirectory = \"\"\n",
])
def test_parse_rejects_invalid_values(text):
    with pytest.raises(ConfigurationError):
        cf.parse_config(text)


def test_build_model_and_spec():
    cfg = cf.parse_config(FULL_TEXT)
    model = cfg.build_model()
    # check 1: architecture follows the model section
    assert model.flow.n_dims == 2
    assert model.flow.n_layers == 2
    assert model.flow.knots.order == 4
    assert model.geometry.half_length == 5.0
    assert model.coord.variant == "first"
    # check 2: the training seed is the default initialization seed
    same = cfg.build_model(seed=cfg.training.seed)
    npt.assert_array_equal(model.flow.net.flat_params(),
                           same.flow.net.flat_params())
    other = cfg.build_model(seed=cfg.training.seed + 1)
    assert (other.flow.net.flat_params()
            != model.flow.net.flat_params()).any()
    # check 3: the hamiltonian spec mirrors the system section
    spec = cfg.system.hamiltonian_spec()
    assert spec.kind == "free_box" and spec.n_particles == 2


def test_load_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(FULL_TEXT)
    assert cf.load_config(str(path)) == cf.parse_config(FULL_TEXT)
    with pytest.raises(ConfigurationError):
        cf.load_config(str(tmp_path / "absent.toml"))
