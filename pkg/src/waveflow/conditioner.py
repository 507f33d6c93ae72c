"""Masked autoregressive conditioner (MADE-style): one shared trunk with
several output heads, producing per-dimension raw bijection parameters for
every flow layer plus raw prior shape parameters, all in one pass.

Masks enforce the strict autoregressive property: every output slot that
belongs to dimension i depends only on inputs x_0 .. x_{i-1}; dimension-0
slots are learned constants.  Head outputs are laid out dimension-major, so
a (batch, n_dims*width) head reshapes directly to (batch*n_dims, width).
"""

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError


def _degrees(n_dims, hidden_width):
    m_in = np.arange(1, n_dims + 1)
    m_hidden = np.arange(hidden_width) % max(n_dims - 1, 1) + 1
    return m_in, m_hidden


class MaskedNet:
    """Trunk + heads with autoregressive connectivity masks."""

    def __init__(self, n_dims, hidden_width, n_hidden_layers, head_spec,
                 masks, head_masks, params, param_names):
        self.n_dims = n_dims
        self.hidden_width = hidden_width
        self.n_hidden_layers = n_hidden_layers
        self.head_spec = dict(head_spec)
        self.masks = masks
        self.head_masks = head_masks
        self.params = params
        self.param_names = param_names

    def lift(self, tape):
        """Leaf Vars for every parameter, in canonical order."""
        return {name: tape.leaf(self.params[name]) for name in self.param_names}

    def flat_params(self):
        return np.concatenate([self.params[n].ravel() for n in self.param_names])

    def set_flat_params(self, flat):
        pos = 0
        for name in self.param_names:
            size = self.params[name].size
            self.params[name] = flat[pos:pos + size].reshape(self.params[name].shape)
            pos += size
        if pos != len(flat):
            raise ConfigurationError("flat parameter vector has the wrong length")

    def forward(self, x, params=None, roles=None):
        """Raw head outputs at x, each shaped (batch, n_dims*width).

        ``x`` may be a plain array, a tape Var, or a Taylor jet; ``params``
        defaults to the stored arrays (pass lifted Vars when training).
        """
        p = self.params if params is None else params
        h = x
        for li in range(self.n_hidden_layers):
            w = p[f"trunk.{li}.w"] * self.masks[li]
            h = ad.tanh(h @ w + p[f"trunk.{li}.b"])
        out = {}
        for role in self.head_spec:
            if roles is not None and role not in roles:
                continue
            w = p[f"head.{role}.w"] * self.head_masks[role]
            out[role] = h @ w + p[f"head.{role}.b"]
        return out


def build_masked_net(n_dims, hidden_width, n_hidden_layers, head_spec, seed,
                     head_biases=None):
    """Construct a MaskedNet with identity-friendly initialization.

    Trunk weights are random (deterministic in ``seed``); every head weight
    matrix starts at zero so each head initially outputs its bias, taken from
    ``head_biases`` (per-dimension vector or a single vector tiled over
    dimensions).
    """
    if n_dims < 1 or hidden_width < 1 or n_hidden_layers < 1:
        raise ConfigurationError("network dimensions must be positive")
    for role, width in head_spec.items():
        if width < 1:
            raise ConfigurationError(f"head {role!r} has non-positive width")
    m_in, m_hid = _degrees(n_dims, hidden_width)

    masks = []
    # input -> hidden: connect when the hidden degree dominates the input degree
    masks.append((m_hid[None, :] >= m_in[:, None]).astype(float))
    for _ in range(n_hidden_layers - 1):
        masks.append((m_hid[None, :] >= m_hid[:, None]).astype(float))

    head_masks = {}
    for role, width in head_spec.items():
        mask = np.zeros((hidden_width, n_dims * width))
        for i in range(n_dims):
            # outputs of dimension i see only hidden units of degree <= i,
            # which in turn see only inputs x_0 .. x_{i-1}
            cols = slice(i * width, (i + 1) * width)
            mask[:, cols] = (m_hid <= i)[:, None]
        head_masks[role] = mask

    rng = np.random.default_rng(seed)
    params = {}
    param_names = []
    fan = n_dims
    for li in range(n_hidden_layers):
        params[f"trunk.{li}.w"] = rng.normal(size=(fan, hidden_width)) / np.sqrt(fan)
        params[f"trunk.{li}.b"] = np.zeros(hidden_width)
        param_names += [f"trunk.{li}.w", f"trunk.{li}.b"]
        fan = hidden_width
    head_biases = head_biases or {}
    for role, width in head_spec.items():
        params[f"head.{role}.w"] = np.zeros((hidden_width, n_dims * width))
        bias = np.asarray(head_biases.get(role, np.zeros(width)), dtype=float)
        if bias.ndim == 1:
            bias = np.tile(bias, n_dims)
        if bias.shape != (n_dims * width,):
            raise ConfigurationError(f"head {role!r} bias has the wrong shape")
        params[f"head.{role}.b"] = bias.copy()
        param_names += [f"head.{role}.w", f"head.{role}.b"]
    return MaskedNet(n_dims, hidden_width, n_hidden_layers, head_spec,
                     masks, head_masks, params, param_names)


def forward(net, x, params=None, roles=None):
    """Raw per-dimension parameter vectors for every head at input x."""
    return net.forward(x, params=params, roles=roles)


def connectivity(net, role):
    """Binary input->output reachability matrix for one head (for testing)."""
    reach = net.masks[0].copy()
    for mask in net.masks[1:]:
        reach = reach @ mask
    return (reach @ net.head_masks[role]) > 0
