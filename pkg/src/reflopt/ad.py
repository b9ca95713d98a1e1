"""Minimal reverse-mode automatic differentiation on an append-only tape.

Node values may be scalars or numpy arrays (broadcasting is handled in the
reverse sweep), which keeps losses over dense evaluation grids cheap without
changing the scalar semantics of the tape.  Forward-mode tangents for small
Jacobians are provided by :class:`Dual2`, a two-tangent dual number whose
components may themselves live on a tape.

All math helpers in this module (``sin``, ``atan2``, ``where``, ...) dispatch
on the argument type, so the same geometry code runs on plain numpy data,
tape variables, and dual numbers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "AdScalar", "Dual2", "AdError", "TapeMismatchError",
    "UnsupportedPrimitiveError", "NonFiniteNodeError",
    "grad", "gradient_of", "jacobian2", "value_of",
    "sin", "cos", "tan", "tanh", "exp", "log", "log1p", "sqrt", "atan2",
    "absolute", "minimum", "maximum", "where", "softplus", "sigmoid",
    "asum", "sum_axis", "amin", "getitem", "stack1d", "take_sum", "reshape",
]


class AdError(Exception):
    pass


class TapeMismatchError(AdError):
    """Operands belong to different tapes."""


class UnsupportedPrimitiveError(AdError):
    """Requested operation is not a supported tape primitive."""


class NonFiniteNodeError(AdError):
    """A tape node holds a non-finite value."""

    def __init__(self, node_index, opcode):
        self.node_index = node_index
        self.opcode = opcode
        super().__init__(f"non-finite value at tape node {node_index} (op {opcode!r})")


class Tape:
    """Append-only operation trace.

    Parallel lists hold, per node: value, parent indices, local partials
    (or auxiliary data for indexing/reduction opcodes), and the opcode.
    Parents always precede children, so a single reverse sweep suffices.
    """

    def __init__(self):
        self.values = []
        self.parents = []
        self.partials = []
        self.opcodes = []
        self.reverse_mac_count = 0

    def __len__(self):
        return len(self.values)

    def _append(self, value, parents, partials, opcode):
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        self.opcodes.append(opcode)
        return AdScalar(self, idx, value)

    def var(self, value):
        """Create a leaf variable."""
        return self._append(value, (), (), "var")

    def const(self, value):
        return self._append(value, (), (), "const")

    def app(self, opcode, value, parents, partials):
        return self._append(value, parents, partials, opcode)

    def check_finite(self):
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                raise NonFiniteNodeError(i, self.opcodes[i])


def value_of(x):
    """Underlying numeric value of a plain number, AdScalar, or Dual2."""
    while isinstance(x, (AdScalar, Dual2)):
        x = x.value if isinstance(x, AdScalar) else x.val
    return x


def _shape_of(v):
    return np.shape(v)


def _accumulate(current, g, target_shape):
    """Add adjoint contribution ``g``, reduced/broadcast to ``target_shape``."""
    gs = np.shape(g)
    if gs != target_shape:
        if target_shape == ():
            g = np.sum(g)
        elif len(gs) < len(target_shape) or gs == ():
            g = np.broadcast_to(g, target_shape)
        else:
            # standard unbroadcast: sum extra leading axes, then size-1 axes
            while len(np.shape(g)) > len(target_shape):
                g = np.sum(g, axis=0)
            for ax, n in enumerate(target_shape):
                if n == 1 and np.shape(g)[ax] != 1:
                    g = np.sum(g, axis=ax, keepdims=True)
    if current is None:
        return +g
    return current + g


class AdScalar:
    """A value recorded on a tape. Arithmetic records new nodes."""

    __slots__ = ("tape", "idx", "value")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"AdScalar({self.value!r})"

    # -- helpers -----------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, AdScalar):
            if other.tape is not self.tape:
                raise TapeMismatchError("operands recorded on different tapes")
            return other
        return None

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        o = self._coerce(other)
        if o is not None:
            return self.tape.app("add", self.value + o.value,
                                 (self.idx, o.idx), (1.0, 1.0))
        return self.tape.app("add", self.value + other, (self.idx,), (1.0,))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        o = self._coerce(other)
        if o is not None:
            return self.tape.app("sub", self.value - o.value,
                                 (self.idx, o.idx), (1.0, -1.0))
        return self.tape.app("sub", self.value - other, (self.idx,), (1.0,))

    def __rsub__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        return self.tape.app("rsub", other - self.value, (self.idx,), (-1.0,))

    def __mul__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        o = self._coerce(other)
        if o is not None:
            return self.tape.app("mul", self.value * o.value,
                                 (self.idx, o.idx), (o.value, self.value))
        return self.tape.app("mul", self.value * other, (self.idx,), (other,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        o = self._coerce(other)
        if o is not None:
            inv = 1.0 / o.value
            return self.tape.app("div", self.value * inv, (self.idx, o.idx),
                                 (inv, -self.value * inv * inv))
        inv = 1.0 / other
        return self.tape.app("div", self.value * inv, (self.idx,), (inv,))

    def __rtruediv__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        inv = 1.0 / self.value
        val = other * inv
        return self.tape.app("rdiv", val, (self.idx,), (-val * inv,))

    def __neg__(self):
        return self.tape.app("neg", -self.value, (self.idx,), (-1.0,))

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise UnsupportedPrimitiveError("only constant exponents are supported")
        return self.tape.app("pow", self.value ** n, (self.idx,),
                             (n * self.value ** (n - 1),))

    # -- comparisons look at values (used for control flow only) ----------
    def __lt__(self, other): return self.value < value_of(other)
    def __le__(self, other): return self.value <= value_of(other)
    def __gt__(self, other): return self.value > value_of(other)
    def __ge__(self, other): return self.value >= value_of(other)

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# generic math, dispatching on plain / AdScalar / Dual2
# ---------------------------------------------------------------------------

def _unary(x, opcode, fval, fpartial):
    if isinstance(x, AdScalar):
        v = x.value
        return x.tape.app(opcode, fval(v), (x.idx,), (fpartial(v),))
    return fval(x)


def sin(x):
    if isinstance(x, Dual2):
        c = cos(x.val)
        return Dual2(sin(x.val), c * x.dp, c * x.ds)
    return _unary(x, "sin", np.sin, np.cos)


def cos(x):
    if isinstance(x, Dual2):
        s = sin(x.val)
        return Dual2(cos(x.val), -s * x.dp, -s * x.ds)
    return _unary(x, "cos", np.cos, lambda v: -np.sin(v))


def tan(x):
    if isinstance(x, Dual2):
        t = tan(x.val)
        d = 1.0 + t * t
        return Dual2(t, d * x.dp, d * x.ds)
    return _unary(x, "tan", np.tan, lambda v: 1.0 / np.cos(v) ** 2)


def tanh(x):
    if isinstance(x, Dual2):
        t = tanh(x.val)
        d = 1.0 - t * t
        return Dual2(t, d * x.dp, d * x.ds)
    return _unary(x, "tanh", np.tanh, lambda v: 1.0 - np.tanh(v) ** 2)


def exp(x):
    if isinstance(x, Dual2):
        e = exp(x.val)
        return Dual2(e, e * x.dp, e * x.ds)
    return _unary(x, "exp", np.exp, np.exp)


def log(x):
    if isinstance(x, Dual2):
        return Dual2(log(x.val), x.dp / x.val, x.ds / x.val)
    return _unary(x, "log", np.log, lambda v: 1.0 / v)


def log1p(x):
    if isinstance(x, Dual2):
        d = 1.0 / (1.0 + x.val)
        return Dual2(log1p(x.val), d * x.dp, d * x.ds)
    return _unary(x, "log1p", np.log1p, lambda v: 1.0 / (1.0 + v))


def sqrt(x):
    if isinstance(x, Dual2):
        r = sqrt(x.val)
        d = 0.5 / r
        return Dual2(r, d * x.dp, d * x.ds)
    return _unary(x, "sqrt", np.sqrt, lambda v: 0.5 / np.sqrt(v))


def absolute(x):
    """abs with the one-sided convention d|x|/dx = sign(x), 0 at 0."""
    if isinstance(x, Dual2):
        s = np.sign(value_of(x.val))
        return Dual2(absolute(x.val), s * x.dp, s * x.ds)
    if isinstance(x, AdScalar):
        return x.tape.app("abs", np.abs(x.value), (x.idx,), (np.sign(x.value),))
    return np.abs(x)


def atan2(y, x):
    if isinstance(y, Dual2) or isinstance(x, Dual2):
        y = y if isinstance(y, Dual2) else Dual2(y, 0.0, 0.0)
        x = x if isinstance(x, Dual2) else Dual2(x, 0.0, 0.0)
        r2 = x.val * x.val + y.val * y.val
        return Dual2(atan2(y.val, x.val),
                     (x.val * y.dp - y.val * x.dp) / r2,
                     (x.val * y.ds - y.val * x.ds) / r2)
    if isinstance(y, AdScalar) or isinstance(x, AdScalar):
        tape = y.tape if isinstance(y, AdScalar) else x.tape
        yv = value_of(y)
        xv = value_of(x)
        r2 = xv * xv + yv * yv
        val = np.arctan2(yv, xv)
        if isinstance(y, AdScalar) and isinstance(x, AdScalar):
            if y.tape is not x.tape:
                raise TapeMismatchError("atan2 operands on different tapes")
            return tape.app("atan2", val, (y.idx, x.idx), (xv / r2, -yv / r2))
        if isinstance(y, AdScalar):
            return tape.app("atan2", val, (y.idx,), (xv / r2,))
        return tape.app("atan2", val, (x.idx,), (-yv / r2,))
    return np.arctan2(y, x)


def _select_binary(opname, a, b, pick_a):
    """min/max via one-sided subgradient: pick a on ties."""
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        a = a if isinstance(a, Dual2) else Dual2(a, 0.0, 0.0)
        b = b if isinstance(b, Dual2) else Dual2(b, 0.0, 0.0)
        m = pick_a(value_of(a.val), value_of(b.val))
        return Dual2(where(m, a.val, b.val), where(m, a.dp, b.dp),
                     where(m, a.ds, b.ds))
    if isinstance(a, AdScalar) or isinstance(b, AdScalar):
        av, bv = value_of(a), value_of(b)
        m = pick_a(av, bv)
        return where(m, a, b)
    return np.where(pick_a(a, b), a, b)


def minimum(a, b):
    return _select_binary("min", a, b, lambda x, y: np.less_equal(x, y))


def maximum(a, b):
    return _select_binary("max", a, b, lambda x, y: np.greater_equal(x, y))


def where(cond, a, b):
    """Select by a *constant* boolean condition (no gradient through cond)."""
    cond = np.asarray(value_of(cond), dtype=bool) if np.ndim(cond) else bool(value_of(cond))
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        a = a if isinstance(a, Dual2) else Dual2(a, 0.0, 0.0)
        b = b if isinstance(b, Dual2) else Dual2(b, 0.0, 0.0)
        return Dual2(where(cond, a.val, b.val), where(cond, a.dp, b.dp),
                     where(cond, a.ds, b.ds))
    if isinstance(a, AdScalar) or isinstance(b, AdScalar):
        tape = a.tape if isinstance(a, AdScalar) else b.tape
        if isinstance(a, AdScalar) and isinstance(b, AdScalar) and a.tape is not b.tape:
            raise TapeMismatchError("where branches on different tapes")
        av, bv = value_of(a), value_of(b)
        val = np.where(cond, av, bv)
        ca = np.where(cond, 1.0, 0.0)
        cb = np.where(cond, 0.0, 1.0)
        if isinstance(a, AdScalar) and isinstance(b, AdScalar):
            return tape.app("where", val, (a.idx, b.idx), (ca, cb))
        if isinstance(a, AdScalar):
            return tape.app("where", val, (a.idx,), (ca,))
        return tape.app("where", val, (b.idx,), (cb,))
    return np.where(cond, a, b)


def sigmoid(x):
    if isinstance(x, (Dual2, AdScalar)):
        # stable: sigma(x) = exp(-softplus(-x))
        return exp(-softplus(-x))
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def softplus(x):
    """log(1 + e^x), overflow-safe for all argument types."""
    return maximum(x, 0.0) + log1p(exp(-absolute(x)))


# -- array structure ops (tape / plain only; no Dual2 use in hot reductions) --

def asum(x):
    """Sum of all elements to a scalar."""
    if isinstance(x, AdScalar):
        return x.tape.app("sum", np.sum(x.value), (x.idx,), (1.0,))
    return np.sum(x)


def sum_axis(x, axis):
    if isinstance(x, AdScalar):
        return x.tape.app("sum_axis", np.sum(x.value, axis=axis), (x.idx,), (axis,))
    return np.sum(x, axis=axis)


def amin(x):
    """Minimum element; subgradient flows to the first argmin."""
    if isinstance(x, AdScalar):
        flat = np.ravel(x.value)
        k = int(np.argmin(flat))
        return x.tape.app("amin", flat[k], (x.idx,), (k,))
    return np.min(x)


def getitem(x, index):
    if isinstance(x, AdScalar):
        return x.tape.app("getitem", np.asarray(x.value)[index], (x.idx,), (index,))
    return np.asarray(x)[index]


def stack1d(xs):
    """Stack scalars (tape or plain) into a 1D array node."""
    if any(isinstance(x, AdScalar) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, AdScalar))
        vals = np.array([value_of(x) for x in xs], dtype=float)
        parents = tuple(x.idx for x in xs if isinstance(x, AdScalar))
        slots = tuple(i for i, x in enumerate(xs) if isinstance(x, AdScalar))
        return tape.app("stack", vals, parents, (slots,))
    return np.array([float(x) for x in xs])


def reshape(x, shape):
    if isinstance(x, AdScalar):
        return x.tape.app("reshape", np.reshape(x.value, shape), (x.idx,), (shape,))
    return np.reshape(x, shape)


def take_sum(x, indices):
    """Sum of selected flat elements."""
    if isinstance(x, AdScalar):
        flat = np.ravel(x.value)
        idx = np.asarray(indices, dtype=int)
        return x.tape.app("take_sum", float(np.sum(flat[idx])), (x.idx,), (idx,))
    return np.sum(np.ravel(x)[np.asarray(indices, dtype=int)])


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

_STRUCTURAL = {"sum", "sum_axis", "amin", "getitem", "stack", "take_sum",
               "reshape"}


def gradient_of(out, wrt):
    """Reverse sweep from a scalar output to the given leaf variables."""
    if not isinstance(out, AdScalar):
        raise AdError("output is not a traced scalar")
    tape = out.tape
    for w in wrt:
        if w.tape is not tape:
            raise TapeMismatchError("gradient target on a different tape")
    adj = [None] * (out.idx + 1)
    adj[out.idx] = 1.0
    values = tape.values
    parents = tape.parents
    partials = tape.partials
    opcodes = tape.opcodes
    mac = 0
    for i in range(out.idx, -1, -1):
        a = adj[i]
        if a is None:
            continue
        ps = parents[i]
        if not ps:
            continue
        op = opcodes[i]
        if op in _STRUCTURAL:
            p = ps[0]
            pv = values[p]
            tgt = np.shape(pv)
            if op == "sum":
                adj[p] = _accumulate(adj[p], a, tgt)
            elif op == "sum_axis":
                axis = partials[i][0]
                adj[p] = _accumulate(adj[p], np.expand_dims(np.asarray(a), axis), tgt)
            elif op == "amin":
                g = np.zeros(np.size(pv))
                g[partials[i][0]] = a
                adj[p] = _accumulate(adj[p], g.reshape(tgt), tgt)
            elif op == "getitem":
                g = np.zeros(tgt)
                idx = partials[i][0]
                has_array = (isinstance(idx, np.ndarray)
                             or (isinstance(idx, tuple)
                                 and any(isinstance(k, np.ndarray) for k in idx)))
                if has_array:
                    np.add.at(g, idx, a)
                else:
                    g[idx] += a
                adj[p] = _accumulate(adj[p], g, tgt)
            elif op == "reshape":
                adj[p] = _accumulate(adj[p], np.reshape(np.asarray(a), tgt), tgt)
            elif op == "take_sum":
                g = np.zeros(np.size(pv))
                np.add.at(g, partials[i][0], a)
                adj[p] = _accumulate(adj[p], g.reshape(tgt), tgt)
            elif op == "stack":
                slots = partials[i][0]
                a = np.asarray(a)
                for j, p in enumerate(ps):
                    adj[p] = _accumulate(adj[p], a[slots[j]], np.shape(values[p]))
            mac += 1
        else:
            part = partials[i]
            for j, p in enumerate(ps):
                adj[p] = _accumulate(adj[p], part[j] * a, np.shape(values[p]))
                mac += 1
    tape.reverse_mac_count = mac
    out_grads = []
    for w in wrt:
        g = adj[w.idx] if w.idx <= out.idx else None
        if g is None:
            g = np.zeros(np.shape(w.value)) if np.shape(w.value) else 0.0
        out_grads.append(g)
    return out_grads


def grad(f, x):
    """Value and gradient of a traced scalar function of a real vector.

    ``f`` receives a list of AdScalar leaves and must return a single traced
    scalar built from supported primitives.
    """
    x = np.asarray(x, dtype=float)
    tape = Tape()
    leaves = [tape.var(float(v)) for v in x]
    out = f(leaves)
    if not isinstance(out, AdScalar):
        raise AdError("function output is not traced; gradient is zero everywhere")
    tape.check_finite()
    gs = gradient_of(out, leaves)
    return value_of(out), np.array([float(g) for g in gs])


# ---------------------------------------------------------------------------
# forward-mode dual numbers with two tangents
# ---------------------------------------------------------------------------

class Dual2:
    """Value plus two directional tangents (d/dp, d/dsigma).

    Components may be plain numerics or AdScalars, so Jacobian entries can
    themselves remain differentiable with respect to tape leaves.
    """

    __slots__ = ("val", "dp", "ds")
    __array_ufunc__ = None

    def __init__(self, val, dp=0.0, ds=0.0):
        self.val = val
        self.dp = dp
        self.ds = ds

    def __repr__(self):
        return f"Dual2({self.val!r}, dp={self.dp!r}, ds={self.ds!r})"

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Dual2) else Dual2(x, 0.0, 0.0)

    def __add__(self, o):
        o = Dual2._lift(o)
        return Dual2(self.val + o.val, self.dp + o.dp, self.ds + o.ds)

    __radd__ = __add__

    def __sub__(self, o):
        o = Dual2._lift(o)
        return Dual2(self.val - o.val, self.dp - o.dp, self.ds - o.ds)

    def __rsub__(self, o):
        o = Dual2._lift(o)
        return o.__sub__(self)

    def __mul__(self, o):
        o = Dual2._lift(o)
        return Dual2(self.val * o.val,
                     self.dp * o.val + self.val * o.dp,
                     self.ds * o.val + self.val * o.ds)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Dual2._lift(o)
        inv = 1.0 / o.val
        v = self.val * inv
        return Dual2(v, (self.dp - v * o.dp) * inv, (self.ds - v * o.ds) * inv)

    def __rtruediv__(self, o):
        return Dual2._lift(o).__truediv__(self)

    def __neg__(self):
        return Dual2(-self.val, -self.dp, -self.ds)

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise UnsupportedPrimitiveError("only constant exponents are supported")
        d = n * self.val ** (n - 1)
        return Dual2(self.val ** n, d * self.dp, d * self.ds)

    def __lt__(self, o): return value_of(self.val) < value_of(o)
    def __le__(self, o): return value_of(self.val) <= value_of(o)
    def __gt__(self, o): return value_of(self.val) > value_of(o)
    def __ge__(self, o): return value_of(self.val) >= value_of(o)


def jacobian2(f, z):
    """2x2 Jacobian and |det| of a 2->2 function at z = (p, sigma).

    Uses a single forward pass with two-tangent dual numbers.  If ``f``
    internally involves tape scalars, the returned entries stay traced.
    """
    p, s = z
    o1, o2 = f(Dual2(p, 1.0, 0.0), Dual2(s, 0.0, 1.0))
    jac = ((o1.dp, o1.ds), (o2.dp, o2.ds))
    det = o1.dp * o2.ds - o1.ds * o2.dp
    for row in jac:
        for entry in row:
            if not np.all(np.isfinite(value_of(entry))):
                raise AdError("non-finite Jacobian entry")
    return jac, absolute(det)
