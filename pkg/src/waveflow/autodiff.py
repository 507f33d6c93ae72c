"""Differentiation engine: a reverse-mode tape over network weights combined
with forward-mode second-order Taylor scalars over input coordinates
(reverse-over-forward).

Three kinds of values flow through the same generic numerical code:

* plain ndarrays            -- no derivatives (sampling, plotting, oracles),
* ``Var``                   -- tracked on a ``Tape``; ``backward`` yields
                               gradients w.r.t. leaves (network weights),
* ``Jet``                   -- (value, d1, d2) truncated Taylor triple w.r.t.
                               one input coordinate at a time; components may
                               themselves be ndarrays or ``Var``s, which is
                               what lets a weight gradient flow through a
                               Laplacian.

The module-level helpers (``exp``, ``tanh``, ``gather_last``, ...) dispatch on
the value kind so downstream code is written once.
"""

import numpy as np

from .errors import NanPropagationError


def _unbroadcast(g, shape):
    """Sum a gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-ordered record of operations; append order is topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def leaf(self, data):
        return Var(np.asarray(data, dtype=float), self)

    def backward(self, root, seed=None):
        """Accumulate gradients of ``root`` into ``.grad`` of every ancestor."""
        root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, float)
        for v in reversed(self.nodes):
            g = v.grad
            if g is None or v._vjp is None:
                continue
            for p, pg in zip(v._parents, v._vjp(g)):
                if p is None or pg is None:
                    continue
                pg = _unbroadcast(np.asarray(pg), p.data.shape)
                if p.grad is None:
                    p.grad = np.array(pg)
                else:
                    p.grad += pg

    def first_nonfinite_op(self):
        for v in self.nodes:
            if not np.all(np.isfinite(v.data)):
                return v._op
        return None

    def release(self):
        """Sever the recorded graph so its arrays free by reference count.

        Recorded nodes hold the tape and the tape holds them, so a finished
        graph is otherwise reclaimed only by a full cycle collection, which
        lets large per-batch graphs pile up.  Severing the links makes
        teardown immediate.  Leaves keep their accumulated gradients; the
        tape must not record or replay anything afterwards.
        """
        for v in self.nodes:
            v.grad = None
            v._parents = ()
            v._vjp = None
        self.nodes.clear()


def _record(tape, data, parents, vjp, op):
    v = Var(data, tape)
    v._parents = parents
    v._vjp = vjp
    v._op = op
    tape.nodes.append(v)
    return v


def _dat(x):
    return x.data if isinstance(x, Var) else x


class Var:
    """A value tracked on a reverse-mode tape."""

    __slots__ = ("data", "tape", "grad", "_parents", "_vjp", "_op")
    __array_ufunc__ = None  # force ndarray <op> Var to defer to our dunders

    def __init__(self, data, tape):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=float)
        self.tape = tape
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return self.data

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, o):
        if isinstance(o, Jet):
            return NotImplemented
        od = _dat(o)
        return _record(self.tape, self.data + od,
                       (self, o if isinstance(o, Var) else None),
                       lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Jet):
            return NotImplemented
        od = _dat(o)
        return _record(self.tape, self.data - od,
                       (self, o if isinstance(o, Var) else None),
                       lambda g: (g, -g), "sub")

    def __rsub__(self, o):
        od = _dat(o)
        return _record(self.tape, od - self.data, (self,), lambda g: (-g,), "rsub")

    def __mul__(self, o):
        if isinstance(o, Jet):
            return NotImplemented
        od = _dat(o)
        sd = self.data
        return _record(self.tape, sd * od,
                       (self, o if isinstance(o, Var) else None),
                       lambda g: (g * od, g * sd), "mul")

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Jet):
            return NotImplemented
        od = _dat(o)
        out = self.data / od
        return _record(self.tape, out,
                       (self, o if isinstance(o, Var) else None),
                       lambda g: (g / od, -g * out / od), "div")

    def __rtruediv__(self, o):
        od = _dat(o)
        sd = self.data
        out = od / sd
        return _record(self.tape, out, (self,), lambda g: (-g * out / sd,), "rdiv")

    def __neg__(self):
        return _record(self.tape, -self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        sd = self.data
        out = sd ** p
        return _record(self.tape, out, (self,), lambda g: (g * p * sd ** (p - 1),), "pow")

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _record(self.tape, out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        sd = self.data
        return _record(self.tape, np.log(sd), (self,), lambda g: (g / sd,), "log")

    def log_abs(self):
        sd = self.data
        return _record(self.tape, np.log(np.abs(sd)), (self,), lambda g: (g / sd,), "log_abs")

    def sqrt(self):
        out = np.sqrt(self.data)
        return _record(self.tape, out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return _record(self.tape, out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sin(self):
        sd = self.data
        return _record(self.tape, np.sin(sd), (self,), lambda g: (g * np.cos(sd),), "sin")

    def cos(self):
        sd = self.data
        return _record(self.tape, np.cos(sd), (self,), lambda g: (-g * np.sin(sd),), "cos")

    # -- reductions and structure ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        sd = self.data

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, sd.shape),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, sd.shape),)

        return _record(self.tape, sd.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self):
        n = self.data.size
        return _record(self.tape, self.data.mean(), (self,),
                       lambda g: (np.broadcast_to(g / n, self.data.shape),), "mean")

    def __matmul__(self, o):
        if isinstance(o, Jet):
            return NotImplemented
        od = _dat(o)
        sd = self.data
        out = sd @ od

        def vjp(g):
            ga = g @ od.swapaxes(-1, -2)
            if sd.ndim == 2:
                gb = sd.T @ g
            else:
                gb = np.tensordot(sd, g, axes=(tuple(range(sd.ndim - 1)),
                                               tuple(range(g.ndim - 1))))
            return (ga, gb)

        return _record(self.tape, out, (self, o if isinstance(o, Var) else None), vjp, "matmul")

    def __rmatmul__(self, o):
        # const @ var (matrix side tracked)
        od = np.asarray(o)
        sd = self.data
        out = od @ sd

        def vjp(g):
            gb = np.tensordot(od, g, axes=(tuple(range(od.ndim - 1)),
                                           tuple(range(g.ndim - 1))))
            return (gb,)

        return _record(self.tape, out, (self,), vjp, "rmatmul")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.data.shape
        return _record(self.tape, self.data.reshape(shape), (self,),
                       lambda g: (g.reshape(old),), "reshape")

    def gather_last(self, idx):
        sd = self.data
        if sd.ndim == 1 and idx.ndim > 1:
            # shared coefficient vector gathered with a batched index table
            out = sd[idx]

            def vjp(g):
                buf = np.zeros_like(sd)
                np.add.at(buf, idx.ravel(), np.asarray(g).ravel())
                return (buf,)

            return _record(self.tape, out, (self,), vjp, "gather")
        idxb = np.broadcast_to(idx, sd.shape[:-1] + idx.shape[-1:])
        out = np.take_along_axis(sd, idxb, axis=-1)

        def vjp(g):
            buf = np.zeros_like(sd)
            m = sd.shape[-1]
            rows = np.arange(buf.size // m).reshape(-1, 1)
            np.add.at(buf.reshape(-1, m), (rows, idxb.reshape(rows.shape[0], -1)),
                      np.broadcast_to(g, idxb.shape).reshape(rows.shape[0], -1))
            return (buf,)

        return _record(self.tape, out, (self,), vjp, "gather")

    def pad_last(self, before, after):
        sd = self.data
        n = sd.shape[-1]

        def vjp(g):
            return (g[..., before:before + n],)

        return _record(self.tape, _zero_pad_last(sd, before, after), (self,),
                       vjp, "pad")

    def slice_last(self, lo, hi):
        sd = self.data
        n = sd.shape[-1]
        # a broadcast-pending length-1 axis clamps the slice window; the
        # clamped window must pad back only what was actually cut
        lo_eff, hi_eff = min(lo, n), min(hi, n)

        def vjp(g):
            return (_zero_pad_last(np.asarray(g), lo_eff, n - hi_eff),)

        return _record(self.tape, sd[..., lo:hi], (self,), vjp, "slice")

    def getcol(self, i):
        sd = self.data

        def vjp(g):
            buf = np.zeros_like(sd)
            buf[..., i] = g
            return (buf,)

        return _record(self.tape, sd[..., i], (self,), vjp, "getcol")

    def flip_last(self):
        return _record(self.tape, self.data[..., ::-1].copy(), (self,),
                       lambda g: (g[..., ::-1],), "flip")


def var_where(cond, a, b):
    ad, bd = _dat(a), _dat(b)
    tape = a.tape if isinstance(a, Var) else b.tape
    return _record(tape, np.where(cond, ad, bd),
                   (a if isinstance(a, Var) else None, b if isinstance(b, Var) else None),
                   lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), "where")


def var_stack_last(vs):
    tape = next(v.tape for v in vs if isinstance(v, Var))
    data = np.stack([_dat(v) for v in vs], axis=-1)
    parents = tuple(v if isinstance(v, Var) else None for v in vs)

    def vjp(g):
        return tuple(g[..., i] for i in range(len(vs)))

    return _record(tape, data, parents, vjp, "stack")


# ---------------------------------------------------------------------------
# Forward-mode second-order Taylor scalars
# ---------------------------------------------------------------------------

class Jet:
    """Truncated Taylor triple (value, d1, d2) w.r.t. the active coordinate.

    Components are floats, ndarrays, or ``Var``s; arithmetic follows truncated
    Taylor composition, e.g. (f*g).d2 = f.d2*g.f + 2*f.d1*g.d1 + f.f*g.d2.
    """

    __slots__ = ("f", "d1", "d2")
    __array_ufunc__ = None

    def __init__(self, f, d1=0.0, d2=0.0):
        self.f = f
        self.d1 = d1
        self.d2 = d2

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, o):
        if isinstance(o, Jet):
            return Jet(self.f + o.f, self.d1 + o.d1, self.d2 + o.d2)
        return Jet(self.f + o, self.d1, self.d2)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Jet):
            return Jet(self.f - o.f, self.d1 - o.d1, self.d2 - o.d2)
        return Jet(self.f - o, self.d1, self.d2)

    def __rsub__(self, o):
        return Jet(o - self.f, -self.d1, -self.d2)

    def __mul__(self, o):
        if isinstance(o, Jet):
            return Jet(self.f * o.f,
                       self.d1 * o.f + self.f * o.d1,
                       self.d2 * o.f + 2.0 * (self.d1 * o.d1) + self.f * o.d2)
        return Jet(self.f * o, self.d1 * o, self.d2 * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Jet):
            q = self.f / o.f
            q1 = (self.d1 - q * o.d1) / o.f
            q2 = (self.d2 - 2.0 * (q1 * o.d1) - q * o.d2) / o.f
            return Jet(q, q1, q2)
        return Jet(self.f / o, self.d1 / o, self.d2 / o)

    def __rtruediv__(self, o):
        q = o / self.f
        q1 = -(q * self.d1) / self.f
        q2 = -(2.0 * (q1 * self.d1) + q * self.d2) / self.f
        return Jet(q, q1, q2)

    def __neg__(self):
        return Jet(-self.f, -self.d1, -self.d2)

    def __pow__(self, p):
        f = self.f
        d2u = p * (p - 1) * f ** (p - 2) if p != 1 else 0.0
        return _chain(self, f ** p, p * f ** (p - 1), d2u)

    def __matmul__(self, o):
        # matrix is constant w.r.t. the active coordinate (weights)
        return Jet(self.f @ o, self.d1 @ o, self.d2 @ o)


def _chain(x, u, du, d2u):
    """Unary chain rule on a jet: value u, derivative du, second d2u (all at x.f)."""
    return Jet(u, du * x.d1, d2u * (x.d1 * x.d1) + du * x.d2)


# ---------------------------------------------------------------------------
# Kind-dispatching helpers (ndarray | Var | Jet)
# ---------------------------------------------------------------------------

def data_of(x):
    """The plain ndarray value underneath any kind."""
    if isinstance(x, Jet):
        return data_of(x.f)
    if isinstance(x, Var):
        return x.data
    return np.asarray(x)


def exp(x):
    if isinstance(x, Jet):
        u = exp(x.f)
        return _chain(x, u, u, u)
    if isinstance(x, Var):
        return x.exp()
    return np.exp(x)


def log(x):
    if isinstance(x, Jet):
        du = 1.0 / x.f
        return _chain(x, log(x.f), du, -(du * du))
    if isinstance(x, Var):
        return x.log()
    return np.log(x)


def log_abs(x):
    if isinstance(x, Jet):
        du = 1.0 / x.f
        return _chain(x, log_abs(x.f), du, -(du * du))
    if isinstance(x, Var):
        return x.log_abs()
    return np.log(np.abs(x))


def sqrt(x):
    if isinstance(x, Jet):
        u = sqrt(x.f)
        du = 0.5 / u
        return _chain(x, u, du, -0.5 * du / x.f)
    if isinstance(x, Var):
        return x.sqrt()
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, Jet):
        t = tanh(x.f)
        sech2 = 1.0 - t * t
        return _chain(x, t, sech2, -2.0 * (t * sech2))
    if isinstance(x, Var):
        return x.tanh()
    return np.tanh(x)


def sin(x):
    if isinstance(x, Jet):
        s, c = sin(x.f), cos(x.f)
        return _chain(x, s, c, -s)
    if isinstance(x, Var):
        return x.sin()
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet):
        s, c = sin(x.f), cos(x.f)
        return _chain(x, c, -s, -c)
    if isinstance(x, Var):
        return x.cos()
    return np.cos(x)


def where(cond, a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        aj = a if isinstance(a, Jet) else Jet(a)
        bj = b if isinstance(b, Jet) else Jet(b)
        return Jet(where(cond, aj.f, bj.f), where(cond, aj.d1, bj.d1),
                   where(cond, aj.d2, bj.d2))
    if isinstance(a, Var) or isinstance(b, Var):
        return var_where(cond, a, b)
    return np.where(cond, a, b)


def sum_last(x):
    if isinstance(x, Jet):
        return Jet(sum_last(x.f), sum_last(x.d1), sum_last(x.d2))
    if isinstance(x, Var):
        return x.sum(axis=-1)
    return np.sum(x, axis=-1)


def gather_last(x, idx):
    if isinstance(x, Jet):
        return Jet(gather_last(x.f, idx), gather_last(x.d1, idx), gather_last(x.d2, idx))
    if isinstance(x, Var):
        return x.gather_last(idx)
    x = np.asarray(x)
    if x.ndim == 1 and idx.ndim > 1:
        return x[idx]
    idxb = np.broadcast_to(idx, x.shape[:-1] + idx.shape[-1:])
    return np.take_along_axis(x, idxb, axis=-1)


def sum_last_keep(x):
    if isinstance(x, Jet):
        return Jet(sum_last_keep(x.f), sum_last_keep(x.d1), sum_last_keep(x.d2))
    if isinstance(x, Var):
        return x.sum(axis=-1, keepdims=True)
    return np.sum(x, axis=-1, keepdims=True)


def pad_last(x, before, after):
    if isinstance(x, Jet):
        return Jet(pad_last(x.f, before, after), pad_last(x.d1, before, after),
                   pad_last(x.d2, before, after))
    if isinstance(x, Var):
        return x.pad_last(before, after)
    x = np.asarray(x)
    return _zero_pad_last(x, before, after)


def _zero_pad_last(x, before, after):
    """Zero-pad the last axis (plain arrays; faster than the generic pad)."""
    n = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (before + n + after,), dtype=x.dtype)
    out[..., before:before + n] = x
    return out


def slice_last(x, lo, hi):
    if isinstance(x, Jet):
        return Jet(slice_last(x.f, lo, hi), slice_last(x.d1, lo, hi), slice_last(x.d2, lo, hi))
    if isinstance(x, Var):
        return x.slice_last(lo, hi)
    return np.asarray(x)[..., lo:hi]


def getcol(x, i):
    if isinstance(x, Jet):
        return Jet(getcol(x.f, i), getcol(x.d1, i), getcol(x.d2, i))
    if isinstance(x, Var):
        return x.getcol(i)
    return np.asarray(x)[..., i]


def flip_last(x):
    if isinstance(x, Jet):
        return Jet(flip_last(x.f), flip_last(x.d1), flip_last(x.d2))
    if isinstance(x, Var):
        return x.flip_last()
    return np.asarray(x)[..., ::-1]


def take_first(x, i):
    """``x[i]`` along the leading axis, for plain arrays and tape variables."""
    if isinstance(x, Var):
        sd = x.data

        def vjp(g):
            buf = np.zeros_like(sd)
            buf[i] = g
            return (buf,)

        return _record(x.tape, sd[i], (x,), vjp, "take_first")
    return np.asarray(x)[i]


def stack_last(xs):
    if any(isinstance(x, Jet) for x in xs):
        return Jet(stack_last([x.f for x in xs]),
                   stack_last([x.d1 for x in xs]),
                   stack_last([x.d2 for x in xs]))
    if any(isinstance(x, Var) for x in xs):
        return var_stack_last(xs)
    return np.stack(xs, axis=-1)


def reshape(x, shape):
    if isinstance(x, Jet):
        vnd = data_of(x.f).ndim  # derivative components may carry extra leading axes

        def r(c):
            if not isinstance(c, (np.ndarray, Var)):
                c = np.asarray(c)
            cs = c.data.shape if isinstance(c, Var) else c.shape
            if len(cs) == 0:
                return c  # scalar component broadcasts unchanged
            lead = cs[:len(cs) - vnd]
            return c.reshape(lead + tuple(shape))

        return Jet(reshape(x.f, shape), r(x.d1), r(x.d2))
    if isinstance(x, Var):
        return x.reshape(shape)
    return np.asarray(x).reshape(shape)


# ---------------------------------------------------------------------------
# Spec-level entry points
# ---------------------------------------------------------------------------

def laplacian(f, x) -> float:
    """Sum_i d^2 f / dx_i^2 at x, by n forward passes seeded one coordinate
    at a time (d1=1, d2=0).

    ``f`` receives a list of scalar ``Jet``s and must return a ``Jet``.
    """
    x = np.asarray(x, dtype=float).ravel()
    total = 0.0
    for i in range(x.size):
        jets = [Jet(x[j], 1.0 if j == i else 0.0, 0.0) for j in range(x.size)]
        total += float(data_of(f(jets).d2))
    return total


def grad_params(loss: Var, param_vars) -> np.ndarray:
    """Exact gradient of a scalar loss w.r.t. an ordered list of leaf Vars.

    Supports losses whose forward computation contains input second
    derivatives (Jet components that are Vars on the same tape).
    """
    if not np.all(np.isfinite(loss.data)):
        op = loss.tape.first_nonfinite_op()
        raise NanPropagationError(f"non-finite loss; first bad op: {op!r}")
    loss.tape.backward(loss)
    parts = []
    for p in param_vars:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(np.asarray(g, dtype=float).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if not np.all(np.isfinite(flat)):
        op = loss.tape.first_nonfinite_op()
        raise NanPropagationError(f"non-finite gradient; first bad op: {op!r}")
    return flat
