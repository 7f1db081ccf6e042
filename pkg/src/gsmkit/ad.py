"""Automatic differentiation over generic scalar payloads.

Three value families are provided:

* :class:`Dual1` -- first-order forward mode. The tangent slot carries a
  leading direction axis, so one evaluation can push any number of
  directions (vector mode); width 1 and width 6 are the common cases.
* :class:`Dual2` -- second-order forward mode with two independent
  direction families: a single "inner" direction and a vector of "outer"
  directions, plus the mixed second-order slot. Third and higher orders
  are deliberately not representable.
* Reverse expression nodes (:class:`RLeaf`, :class:`RConst` and the
  operation nodes). Operator overloading assembles a tree of elementary
  operations; ``v()`` evaluates it forward and ``back(bv)`` propagates
  adjoints into the leaves. No tape is recorded: whenever ``back`` needs
  an intermediate value it re-invokes ``v()`` on the subtree. Nodes never
  cache, which keeps them pure (repeated ``v()`` is bitwise identical).

All payload arithmetic is generic: plain floats, numpy arrays (batched
evaluation), or dual numbers can sit in the leaves. Reverse sweeps over
``Dual1`` payloads realize the tangent-over-adjoint combination that
yields gradients and directional second derivatives in one pass.
Constants never accumulate adjoints, so mixed-order expressions do not
propagate derivative values into inputs that only carry forward tangents.

Supported elementary operations: ``+ - * /``, unary ``-``, ``pow`` with
a real constant exponent, ``sqrt``, ``exp``, ``log``, ``abs`` and the
positive part ``pos(x) = max(x, 0)``. Branch decisions compare primal
values only. The derivative of ``pos`` at exactly zero is defined as 0.
"""

import numpy as np


def value_of(x):
    """Strip AD wrappers down to the primal float/array."""
    while True:
        if isinstance(x, RNode):
            x = x.v()
        elif isinstance(x, (Dual1, Dual2)):
            x = x.val
        else:
            return x


class Dual1:
    """First-order forward dual: value and tangent(s).

    For batched values of shape (B,) a vector tangent is stored with a
    leading width axis (W, B); broadcasting keeps the arithmetic uniform.
    """

    __slots__ = ("val", "dot")
    __array_ufunc__ = None
    __array_priority__ = 1000.0

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    def __repr__(self):
        return f"Dual1({self.val!r}, {self.dot!r})"

    def __add__(self, o):
        if isinstance(o, Dual1):
            return Dual1(self.val + o.val, self.dot + o.dot)
        return Dual1(self.val + o, self.dot)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual1):
            return Dual1(self.val - o.val, self.dot - o.dot)
        return Dual1(self.val - o, self.dot)

    def __rsub__(self, o):
        return Dual1(o - self.val, -self.dot)

    def __mul__(self, o):
        if isinstance(o, Dual1):
            return Dual1(self.val * o.val, self.dot * o.val + self.val * o.dot)
        return Dual1(self.val * o, self.dot * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual1):
            inv = 1.0 / o.val
            return Dual1(self.val * inv, (self.dot - self.val * inv * o.dot) * inv)
        return Dual1(self.val / o, self.dot / o)

    def __rtruediv__(self, o):
        inv = 1.0 / self.val
        return Dual1(o * inv, -o * inv * inv * self.dot)

    def __neg__(self):
        return Dual1(-self.val, -self.dot)

    def __pow__(self, c):
        return Dual1(self.val**c, c * self.val ** (c - 1.0) * self.dot)

    def sqrt(self):
        s = np.sqrt(self.val)
        return Dual1(s, 0.5 / s * self.dot)

    def exp(self):
        e = np.exp(self.val)
        return Dual1(e, e * self.dot)

    def log(self):
        return Dual1(np.log(self.val), self.dot / self.val)

    def pos(self):
        gate = np.where(self.val > 0.0, 1.0, 0.0)
        return Dual1(self.val * gate, self.dot * gate)

    def __abs__(self):
        s = np.sign(self.val)
        return Dual1(self.val * s, self.dot * s)

    def __lt__(self, o):
        return self.val < value_of(o)

    def __le__(self, o):
        return self.val <= value_of(o)

    def __gt__(self, o):
        return self.val > value_of(o)

    def __ge__(self, o):
        return self.val >= value_of(o)


class Dual2:
    """Second-order forward dual with an inner and an outer direction family.

    Slots: value, d1 = inner first derivative (value-shaped), d2 = outer
    first derivatives (leading width axis), d12 = mixed second derivative
    (leading width axis). Squaring the inner family against itself is not
    supported by design; the type stops at order two.
    """

    __slots__ = ("val", "d1", "d2", "d12")
    __array_ufunc__ = None
    __array_priority__ = 1000.0

    def __init__(self, val, d1, d2, d12):
        self.val = val
        self.d1 = d1
        self.d2 = d2
        self.d12 = d12

    def __repr__(self):
        return f"Dual2({self.val!r}, {self.d1!r}, {self.d2!r}, {self.d12!r})"

    def __add__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val + o.val, self.d1 + o.d1, self.d2 + o.d2, self.d12 + o.d12)
        return Dual2(self.val + o, self.d1, self.d2, self.d12)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual2):
            return Dual2(self.val - o.val, self.d1 - o.d1, self.d2 - o.d2, self.d12 - o.d12)
        return Dual2(self.val - o, self.d1, self.d2, self.d12)

    def __rsub__(self, o):
        return Dual2(o - self.val, -self.d1, -self.d2, -self.d12)

    def __mul__(self, o):
        if isinstance(o, Dual2):
            return Dual2(
                self.val * o.val,
                self.d1 * o.val + self.val * o.d1,
                self.d2 * o.val + self.val * o.d2,
                self.d12 * o.val + self.d1 * o.d2 + self.d2 * o.d1 + self.val * o.d12,
            )
        return Dual2(self.val * o, self.d1 * o, self.d2 * o, self.d12 * o)

    __rmul__ = __mul__

    def _reciprocal(self):
        inv = 1.0 / self.val
        inv2 = inv * inv
        return Dual2(
            inv,
            -self.d1 * inv2,
            -self.d2 * inv2,
            -self.d12 * inv2 + 2.0 * self.d1 * self.d2 * inv2 * inv,
        )

    def __truediv__(self, o):
        if isinstance(o, Dual2):
            return self * o._reciprocal()
        return Dual2(self.val / o, self.d1 / o, self.d2 / o, self.d12 / o)

    def __rtruediv__(self, o):
        return self._reciprocal() * o

    def __neg__(self):
        return Dual2(-self.val, -self.d1, -self.d2, -self.d12)

    def __pow__(self, c):
        f1 = c * self.val ** (c - 1.0)
        f2 = c * (c - 1.0) * self.val ** (c - 2.0)
        return Dual2(
            self.val**c,
            f1 * self.d1,
            f1 * self.d2,
            f1 * self.d12 + f2 * self.d1 * self.d2,
        )

    def sqrt(self):
        s = np.sqrt(self.val)
        g = 0.5 / s
        return Dual2(s, g * self.d1, g * self.d2, g * self.d12 - 0.5 * g / self.val * self.d1 * self.d2)

    def exp(self):
        e = np.exp(self.val)
        return Dual2(e, e * self.d1, e * self.d2, e * (self.d12 + self.d1 * self.d2))

    def log(self):
        inv = 1.0 / self.val
        return Dual2(np.log(self.val), self.d1 * inv, self.d2 * inv, self.d12 * inv - self.d1 * self.d2 * inv * inv)

    def pos(self):
        gate = np.where(self.val > 0.0, 1.0, 0.0)
        return Dual2(self.val * gate, self.d1 * gate, self.d2 * gate, self.d12 * gate)

    def __abs__(self):
        s = np.sign(self.val)
        return Dual2(self.val * s, self.d1 * s, self.d2 * s, self.d12 * s)

    def __lt__(self, o):
        return self.val < value_of(o)

    def __gt__(self, o):
        return self.val > value_of(o)


# --------------------------------------------------------------------------
# reverse mode on the expression level
# --------------------------------------------------------------------------


def _wrap(x):
    return x if isinstance(x, RNode) else RConst(x)


class RNode:
    """Base of the reverse expression tree.

    ``v()`` recomputes the subtree value; ``back(bv)`` deposits
    ``bv * d(root)/d(leaf)`` into every reachable leaf. Values required
    during backpropagation are recomputed, never stored.
    """

    __slots__ = ()
    __array_ufunc__ = None
    __array_priority__ = 1000.0

    def v(self):
        raise NotImplementedError

    def back(self, bv):
        raise NotImplementedError

    def __add__(self, o):
        return RAdd(self, _wrap(o))

    def __radd__(self, o):
        return RAdd(_wrap(o), self)

    def __sub__(self, o):
        return RSub(self, _wrap(o))

    def __rsub__(self, o):
        return RSub(_wrap(o), self)

    def __mul__(self, o):
        return RMul(self, _wrap(o))

    def __rmul__(self, o):
        return RMul(_wrap(o), self)

    def __truediv__(self, o):
        return RDiv(self, _wrap(o))

    def __rtruediv__(self, o):
        return RDiv(_wrap(o), self)

    def __neg__(self):
        return RNeg(self)

    def __pow__(self, c):
        return RPow(self, c)

    def sqrt(self):
        return RSqrt(self)

    def exp(self):
        return RExp(self)

    def log(self):
        return RLog(self)

    def pos(self):
        return RPos(self)

    def __abs__(self):
        return RAbs(self)

    def __lt__(self, o):
        return value_of(self) < value_of(o)

    def __le__(self, o):
        return value_of(self) <= value_of(o)

    def __gt__(self, o):
        return value_of(self) > value_of(o)

    def __ge__(self, o):
        return value_of(self) >= value_of(o)


class RLeaf(RNode):
    """Differentiable input; accumulates the adjoint across back() calls."""

    __slots__ = ("value", "adj")

    def __init__(self, value):
        self.value = value
        self.adj = None

    def v(self):
        return self.value

    def back(self, bv):
        self.adj = bv if self.adj is None else self.adj + bv

    def adjoint(self):
        return self.value * 0.0 if self.adj is None else self.adj


class RConst(RNode):
    """Non-differentiable input; adjoints are dropped here."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def v(self):
        return self.value

    def back(self, bv):
        pass


class RAdd(RNode):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def v(self):
        return self.a.v() + self.b.v()

    def back(self, bv):
        self.a.back(bv)
        self.b.back(bv)


class RSub(RNode):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def v(self):
        return self.a.v() - self.b.v()

    def back(self, bv):
        self.a.back(bv)
        self.b.back(-bv)


class RMul(RNode):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def v(self):
        return self.a.v() * self.b.v()

    def back(self, bv):
        self.a.back(bv * self.b.v())
        self.b.back(bv * self.a.v())


class RDiv(RNode):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def v(self):
        return self.a.v() / self.b.v()

    def back(self, bv):
        bval = self.b.v()
        self.a.back(bv / bval)
        self.b.back(-bv * self.a.v() / (bval * bval))


class RNeg(RNode):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return -self.a.v()

    def back(self, bv):
        self.a.back(-bv)


class RPow(RNode):
    """x**c with a real constant exponent c."""

    __slots__ = ("a", "c")

    def __init__(self, a, c):
        self.a = a
        self.c = c

    def v(self):
        return self.a.v() ** self.c

    def back(self, bv):
        av = self.a.v()
        self.a.back(bv * (self.c * av ** (self.c - 1.0)))


class RSqrt(RNode):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return sqrt(self.a.v())

    def back(self, bv):
        self.a.back(bv * (0.5 / sqrt(self.a.v())))


class RExp(RNode):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return exp(self.a.v())

    def back(self, bv):
        self.a.back(bv * exp(self.a.v()))


class RLog(RNode):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return log(self.a.v())

    def back(self, bv):
        self.a.back(bv / self.a.v())


class RPos(RNode):
    """Positive part; the branch is decided on the primal value."""

    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return pos(self.a.v())

    def back(self, bv):
        gate = np.where(value_of(self.a.v()) > 0.0, 1.0, 0.0)
        self.a.back(bv * gate)


class RAbs(RNode):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a

    def v(self):
        return abs(self.a.v())

    def back(self, bv):
        self.a.back(bv * np.sign(value_of(self.a.v())))


# --------------------------------------------------------------------------
# generic elementary functions (dispatch on payload type)
# --------------------------------------------------------------------------


def sqrt(x):
    if isinstance(x, (RNode, Dual1, Dual2)):
        return x.sqrt()
    return np.sqrt(x)


def exp(x):
    if isinstance(x, (RNode, Dual1, Dual2)):
        return x.exp()
    return np.exp(x)


def log(x):
    if isinstance(x, (RNode, Dual1, Dual2)):
        return x.log()
    return np.log(x)


def pos(x):
    """Positive part max(x, 0); derivative at exactly 0 is defined as 0."""
    if isinstance(x, (RNode, Dual1, Dual2)):
        return x.pos()
    return np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# driver routines
# --------------------------------------------------------------------------


def grad_reverse(f, x, seed=1.0):
    """Gradient of a scalar expression via one reverse sweep.

    ``f`` maps a list of n leaf nodes to a single expression built from
    the supported elementary operations; ``x`` is the list of primal
    payloads. Returns ``seed * grad f(x)`` as a list of payloads (the
    payload type of the inputs is preserved, so dual-valued inputs give
    dual-valued adjoints).
    """
    leaves = [RLeaf(xi) for xi in x]
    root = _wrap(f(leaves))
    root.v()
    root.back(seed)
    return [leaf.adjoint() for leaf in leaves]


def forward_jet(f, x, dx):
    """Evaluate ``f`` and its directional derivative in one forward pass.

    ``f`` maps a list of scalar-likes to a scalar-like or a list of them.
    Returns ``(f(x), Jf(x) dx)`` with the same list structure as the
    output of ``f``.
    """
    duals = [Dual1(xi, di) for xi, di in zip(x, dx)]
    out = f(duals)
    if isinstance(out, (list, tuple)):
        return [value_of(o) for o in out], [o.dot if isinstance(o, Dual1) else o * 0.0 for o in out]
    return value_of(out), out.dot if isinstance(out, Dual1) else out * 0.0


def second_partials(f, x, p_idx, q_idx):
    """Mixed second derivative block d2f/dx_P dx_Q by tangent-over-adjoint.

    Leaves in P are differentiated in reverse, inputs in Q carry unit
    forward tangents; the mixed block is read off the tangent slots of
    the P adjoints. Inputs only in Q are constants of the reverse sweep,
    so no adjoints propagate into them.
    """
    p_idx = list(p_idx)
    q_idx = list(q_idx)
    nq = len(q_idx)
    nodes = []
    for i, xi in enumerate(x):
        if i in q_idx:
            shape = np.shape(xi)
            dot = np.zeros((nq,) + shape)
            dot[q_idx.index(i)] = 1.0
            payload = Dual1(xi, dot)
        else:
            payload = xi
        nodes.append(RLeaf(payload) if i in p_idx else RConst(payload))
    root = _wrap(f(nodes))
    root.v()
    root.back(Dual1(1.0, 0.0))
    rows = []
    for i in p_idx:
        adj = nodes[i].adjoint()
        if isinstance(adj, Dual1):
            target = (nq,) + np.shape(adj.val)
            rows.append(np.broadcast_to(np.asarray(adj.dot, dtype=float), target))
        else:
            rows.append(np.zeros((nq,) + np.shape(value_of(adj))))
    return np.stack(rows, axis=0)
