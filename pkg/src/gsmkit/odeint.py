"""Error-controlled integration of internal-variable evolution equations.

One material evaluation integrates da/dt = f(eps(t), a) over a loading
step [0, dt] with eps(t) linearly interpolated between the given strains.
Schemes are written in the common stage form

    k_i = h f(y^(i), p) + h J sum_j gamma_ij k_j  (+ h^2 gbar_i df/dt),
    y_{n+1} = y_n + sum_j b_j k_j,      y^(i) = y_n + sum_j a_ij k_j,

which covers the explicit embedded pairs (gamma = 0) and linearly
implicit Rosenbrock schemes; the single implicit Euler step is handled by
a Newton solve. In coupled mode the sensitivity da/d eps_{n+1} is
advanced alongside the state by applying the same integration step to the
linearized equation; the step size controller itself never carries
derivative content, and the derivative components enter the error
measure exactly like state components (they can be excluded for
diagnostics). The step size sequence of an adaptive run can be recorded
and replayed, either on plain values (frozen primal map) or on forward
duals with implicit-function treatment of every equation solve.
"""

from dataclasses import dataclass, field

import numpy as np

from .ad import Dual1, value_of
from .linalg import lu_factor, lu_solve_factored


class IntegrationError(RuntimeError):
    """Substep count cap exceeded, step size underflow, or similar."""


class NewtonDivergenceError(IntegrationError):
    """Newton iteration on an implicit step failed to converge."""


# ---------------------------------------------------------------------------
# scheme specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemeSpec:
    """Coefficients of an integration scheme in the common stage form.

    ``b`` weights the propagated solution, ``b_emb`` the embedded
    companion used for error estimation (None for plain implicit Euler,
    which is error-controlled by step doubling instead). ``order_low`` is
    the order governing the step size exponent 1/(order_low + 1).
    """

    name: str
    kind: str  # 'explicit' | 'rosenbrock' | 'fully-implicit'
    a: np.ndarray
    b: np.ndarray
    b_emb: np.ndarray | None
    gamma: np.ndarray | None
    order_low: int
    order_high: int
    fsal: bool = False

    @property
    def stages(self):
        return len(self.b)

    @property
    def c(self):
        return self.a.sum(axis=1)

    @property
    def gbar(self):
        return self.gamma.sum(axis=1) if self.gamma is not None else np.zeros(self.stages)


def ode12():
    """Explicit Euler / Heun pair; Heun's order-2 result is propagated."""
    spec = SchemeSpec(
        name="ode12",
        kind="explicit",
        a=np.array([[0.0, 0.0], [1.0, 0.0]]),
        b=np.array([0.5, 0.5]),
        b_emb=np.array([1.0, 0.0]),
        gamma=None,
        order_low=1,
        order_high=2,
    )
    _validate_scheme(spec)
    return spec


def ode23():
    """Bogacki-Shampine 3(2) pair with FSAL; order 3 is propagated."""
    spec = SchemeSpec(
        name="ode23",
        kind="explicit",
        a=np.array(
            [
                [0.0, 0.0, 0.0, 0.0],
                [0.5, 0.0, 0.0, 0.0],
                [0.0, 0.75, 0.0, 0.0],
                [2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
            ]
        ),
        b=np.array([2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0]),
        b_emb=np.array([7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125]),
        gamma=None,
        order_low=2,
        order_high=3,
        fsal=True,
    )
    _validate_scheme(spec)
    return spec


def ode23s():
    """Shampine-Reichelt linearly implicit 2(3) Rosenbrock scheme."""
    d = 1.0 / (2.0 + np.sqrt(2.0))
    e32 = 6.0 + np.sqrt(2.0)
    spec = SchemeSpec(
        name="ode23s",
        kind="rosenbrock",
        a=np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        b=np.array([0.0, 1.0, 0.0]),
        # propagated minus embedded equals the error estimate (k1 - 2 k2 + k3)/6
        b_emb=np.array([-1.0 / 6.0, 4.0 / 3.0, -1.0 / 6.0]),
        gamma=np.array([[d, 0.0, 0.0], [-d, d, 0.0], [(e32 - 2.0) * d, -e32 * d, d]]),
        order_low=2,
        order_high=3,
    )
    _validate_scheme(spec)
    return spec


def implicit_euler():
    """Single-stage backward Euler; adaptive use relies on step doubling."""
    return SchemeSpec(
        name="implicit-euler",
        kind="fully-implicit",
        a=np.array([[1.0]]),
        b=np.array([1.0]),
        b_emb=None,
        gamma=None,
        order_low=1,
        order_high=1,
    )


SCHEMES = {
    "ode12": ode12,
    "ode23": ode23,
    "ode23s": ode23s,
    "implicit-euler": implicit_euler,
}


class _PolyProblem:
    """dy/dt = q t^(q-1) on one state; used for order validation only."""

    nparams = 1

    def __init__(self, q):
        self.q = q

    def rhs(self, t, y, idx=None):
        return (self.q * t ** (self.q - 1))[:, None] * np.ones_like(y)

    def rhs_and_jac(self, t, y, idx=None):
        f = self.rhs(t, y)
        J = np.zeros(y.shape + (y.shape[-1],))
        q = self.q
        ft = (q * (q - 1) * t ** (q - 2) if q >= 2 else np.zeros_like(t))[:, None] * np.ones_like(y)
        return f, J, ft


def _validate_scheme(spec):
    """Check quadrature order conditions by integrating t^q exactly."""
    for q in range(1, spec.order_low + 1):
        y_high, y_low, _ = embedded_step(spec, _PolyProblem(q), np.zeros(1), np.zeros((1, 1)), np.ones(1))
        if abs(y_high[0, 0] - 1.0) > 1e-12:
            raise ValueError(f"{spec.name}: propagated solution not exact at order {q}")
        if abs(y_high[0, 0] - y_low[0, 0]) > 1e-12:
            raise ValueError(f"{spec.name}: error estimate not zero at order {q}")
    if spec.kind == "explicit":
        c = spec.c
        for q in range(1, spec.order_high + 1):
            if abs(spec.b @ c ** (q - 1) - 1.0 / q) > 1e-13:
                raise ValueError(f"{spec.name}: quadrature condition of order {q} violated")
        if spec.fsal and not np.allclose(spec.a[-1], spec.b):
            raise ValueError(f"{spec.name}: FSAL requires the last stage row to equal b")


# ---------------------------------------------------------------------------
# step controller
# ---------------------------------------------------------------------------


@dataclass
class StepController:
    """Classical embedded-pair step size control.

    Accept when the scaled error is <= 1; the next step size is
    h * clip(safety * err**(-1/(order_low+1)), min_factor, max_factor).
    Until the first acceptance, rejected attempts simply halve h. The
    controller operates on plain floats only and is never differentiated.
    """

    atol: float = 1e-6
    rtol: float = 1e-3
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    max_substeps: int = 10000
    newton_tol: float = 1e-10


@dataclass
class IntegrationResult:
    a: np.ndarray
    da: np.ndarray | None
    substeps: np.ndarray
    rejected: np.ndarray
    steps: list | None = None


# ---------------------------------------------------------------------------
# material step problem: strain ramp around a law
# ---------------------------------------------------------------------------


class MaterialStepProblem:
    """Evolution problem of one loading step for a batch of voxels.

    The strain is interpolated linearly over the step, so the sensitivity
    of eps(t) to the step-end strain is (t/dt) I. All methods accept a
    compacted index subset ``idx`` selecting active voxels.
    """

    nparams = 6

    def __init__(self, ops, eps_n, eps_np1, dt):
        self.ops = ops
        self.m = ops.m
        eps_n = np.asarray(eps_n, dtype=float)
        eps_np1 = np.asarray(eps_np1, dtype=float)
        self.batch = eps_n.shape[0]
        self.dt = np.broadcast_to(np.asarray(dt, dtype=float), (self.batch,))
        self.eps_n = eps_n
        self.eps_np1 = eps_np1
        self.deps = eps_np1 - eps_n
        self.epsdot = self.deps / self.dt[:, None]

    def _sel(self, arr, idx):
        return arr if idx is None else arr[idx]

    def _ramp(self, t, idx):
        r = t / self._sel(self.dt, idx)
        return np.minimum(r, 1.0)

    def _eps_comps(self, t, idx):
        r = self._ramp(t, idx)
        en = self._sel(self.eps_n, idx)
        de = self._sel(self.deps, idx)
        return [en[:, i] + r * de[:, i] for i in range(6)]

    def _eps_dual_comps(self, t, idx):
        """Strain payloads carrying d eps(t)/d eps_np1 = ramp * I."""
        r = self._ramp(t, idx)
        en = self._sel(self.eps_n, idx)
        de = self._sel(self.deps, idx)
        k = len(r)
        comps = []
        for i in range(6):
            dot = np.zeros((6, k))
            dot[i] = r
            comps.append(Dual1(en[:, i] + r * de[:, i], dot))
        return comps

    @staticmethod
    def _state_comps(y):
        return [y[:, i] for i in range(y.shape[1])]

    @staticmethod
    def _state_dual_comps(y, ydot):
        return [Dual1(y[:, i], np.moveaxis(ydot[:, i, :], -1, 0)) for i in range(y.shape[1])]

    def rhs(self, t, y, idx=None):
        f = self.ops.rhs_generic(self._eps_comps(t, idx), self._state_comps(y))
        return np.stack([np.asarray(value_of(c), dtype=float) for c in f], axis=-1)

    def rhs_and_jac(self, t, y, idx=None):
        """(f, df/da, df/dt) at interpolated strain."""
        eps = np.stack(self._eps_comps(t, idx), axis=-1)
        f, dfda, dfde = self.ops.rhs_and_jacobians(eps, y)
        ft = np.einsum("kmi,ki->km", dfde, self._sel(self.epsdot, idx))
        return f, dfda, ft

    def rhs_dual(self, t, y, ydot, idx=None):
        """f and its tangent d f/d a . ydot + d f/d eps_np1 (width 6)."""
        f = self.ops.rhs_generic(self._eps_dual_comps(t, idx), self._state_dual_comps(y, ydot))
        k = y.shape[0]
        vals = np.stack([np.asarray(value_of(c), dtype=float) for c in f], axis=-1)
        dots = np.stack([self.ops._dot_of(c, 6, (k,)) for c in f], axis=0)  # (m, 6, k)
        return vals, np.moveaxis(dots, (0, 1, 2), (1, 2, 0))

    def jac_dir2(self, t, y, da, v_a, v_t, idx=None):
        """Directional derivative of the Jacobian action (Rosenbrock only).

        Returns d/d eps_np1 [ df/da . v_a + df/dt . v_t ] evaluated at
        (t, y) with the state sensitivity ``da`` as chained inner seed;
        shape (k, m, 6). Requires hand-coded partials on the law.
        """
        from .ad import Dual2

        r = self._ramp(t, idx)
        en = self._sel(self.eps_n, idx)
        de = self._sel(self.deps, idx)
        epsdot = self._sel(self.epsdot, idx)
        dt = self._sel(self.dt, idx)
        k = len(r)
        eps_pay = []
        for i in range(6):
            d2 = np.zeros((6, k))
            d2[i] = r
            d12 = np.zeros((6, k))
            d12[i] = v_t / dt
            eps_pay.append(Dual2(en[:, i] + r * de[:, i], epsdot[:, i] * v_t, d2, d12))
        a_pay = [
            Dual2(y[:, i], v_a[:, i], np.moveaxis(da[:, i, :], -1, 0), np.zeros((6, k)))
            for i in range(self.m)
        ]
        f = self.ops.rhs_generic(eps_pay, a_pay)
        out = np.zeros((k, self.m, 6))
        for i, c in enumerate(f):
            if hasattr(c, "d12"):
                out[:, i, :] = np.moveaxis(np.broadcast_to(np.asarray(c.d12, dtype=float), (6, k)), 0, 1)
        return out

    def stress_of(self, t, y, idx=None):
        f = self.ops.stress_generic(self._eps_comps(t, idx), self._state_comps(y))
        return np.stack([np.asarray(value_of(c), dtype=float) for c in f], axis=-1)

    def stress_dual(self, t, y, da, idx=None):
        """Stress and its eps_np1-tangent at interpolated strain."""
        sig = self.ops.stress_generic(self._eps_dual_comps(t, idx), self._state_dual_comps(y, da))
        k = y.shape[0]
        vals = np.stack([np.asarray(value_of(c), dtype=float) for c in sig], axis=-1)
        dots = np.stack([self.ops._dot_of(c, 6, (k,)) for c in sig], axis=0)
        return vals, np.moveaxis(dots, (0, 1, 2), (1, 2, 0))


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def _newton_implicit_euler(problem, t1, h, a0, idx, newton_mode, tol):
    """Masked batched Newton for a - a0 - h f(t1, a) = 0.

    Returns (a, ok, iterations); failed entries are flagged, not raised.
    """
    a = a0.copy()
    k = a.shape[0]
    active = np.ones(k, dtype=bool)
    ok = np.ones(k, dtype=bool)
    res_prev = np.full(k, np.inf)
    growth = np.zeros(k, dtype=np.int64)
    sig_prev = problem.stress_of(t1, a, idx) if newton_mode == "stress" else None
    iters = 0
    eye = np.eye(problem.m)
    for _ in range(50):
        ia = np.flatnonzero(active)
        if ia.size == 0:
            break
        iters += 1
        sub_idx = idx[ia] if idx is not None else ia
        f, J, _ = problem.rhs_and_jac(t1[ia], a[ia], sub_idx)
        F = a[ia] - a0[ia] - h[ia, None] * f
        M = eye - h[ia, None, None] * J
        lu, piv, fac_ok = lu_factor(M, check_singular=False)
        bad = ~fac_ok | ~np.isfinite(F).all(axis=1)
        delta = lu_solve_factored(lu, piv, np.where(bad[:, None], 0.0, F))
        a_new = a[ia] - delta
        res = np.sqrt(np.mean((F / (1.0 + np.abs(a[ia]))) ** 2, axis=1))
        grew = res > res_prev[ia]
        growth[ia] = np.where(grew, growth[ia] + 1, 0)
        res_prev[ia] = res
        if newton_mode == "stress":
            sig_new = problem.stress_of(t1[ia], a_new, sub_idx)
            dsig = np.sqrt(np.mean((sig_new - sig_prev[ia]) ** 2, axis=1))
            ref = np.sqrt(np.mean(sig_new**2, axis=1))
            conv = dsig <= tol * np.maximum(ref, 1e-300)
            sig_prev[ia] = sig_new
        else:
            conv = np.sqrt(np.mean((delta / (1.0 + np.abs(a_new))) ** 2, axis=1)) <= tol
        a[ia] = a_new
        failed = bad | (growth[ia] >= 5)
        ok[ia[failed]] = False
        active[ia[conv | failed]] = False
    ok &= ~active  # leftovers hit the iteration cap
    return a, ok, iters


def implicit_euler_step(problem, a0, h, t0=None, want_tangent=False, da0=None, newton_mode="internal", newton_tol=1e-10):
    """One backward Euler step with optional sensitivity transport.

    Solves a = a0 + h f(t0+h, a) by Newton (initial iterate a0). With
    ``want_tangent`` the sensitivity is recovered from one linear solve
    per strain direction using the converged iteration matrix.
    """
    h = np.broadcast_to(np.asarray(h, dtype=float), (a0.shape[0],))
    t0 = np.zeros_like(h) if t0 is None else t0
    t1 = t0 + h
    a, ok, _ = _newton_implicit_euler(problem, t1, h, a0, None, newton_mode, newton_tol)
    if not np.all(ok):
        raise NewtonDivergenceError(f"{int((~ok).sum())} of {ok.size} voxels failed the implicit Euler solve")
    if not want_tangent:
        return a, None
    da0 = np.zeros((a0.shape[0], problem.m, problem.nparams)) if da0 is None else da0
    _, dfp = problem.rhs_dual(t1, a, np.zeros_like(da0))
    _, J, _ = problem.rhs_and_jac(t1, a)
    M = np.eye(problem.m) - h[:, None, None] * J
    rhs = da0 + h[:, None, None] * dfp
    lu, piv, _ = lu_factor(M, check_singular=True)
    da = lu_solve_factored(lu, piv, rhs)
    return a, da


def _explicit_step(spec, problem, t, y, h, idx, coupled, da, g1=None, gd1=None, g1_mask=None):
    """One explicit embedded step; returns candidates and stage slopes.

    ``g1``/``gd1`` hold first-stage slopes for the voxels flagged in
    ``g1_mask`` (FSAL reuse); the remaining voxels evaluate stage one
    fresh, so a voxel's arithmetic never depends on its batch company.
    """
    s = spec.stages
    a_tab, c = spec.a, spec.c
    k = y.shape[0]
    G = np.zeros((s, k, y.shape[1]))
    Gd = np.zeros((s, k, y.shape[1], problem.nparams)) if coupled else None
    for i in range(s):
        if i == 0 and g1_mask is not None and np.any(g1_mask):
            need = ~g1_mask
            G[0] = g1
            if coupled:
                Gd[0] = gd1
            if np.any(need):
                sub = idx[need] if idx is not None else np.flatnonzero(need)
                if coupled:
                    G[0][need], Gd[0][need] = problem.rhs_dual(t[need], y[need], da[need], sub)
                else:
                    G[0][need] = problem.rhs(t[need], y[need], sub)
            continue
        yi = y.copy()
        for j in range(i):
            if a_tab[i, j] != 0.0:
                yi += (h * a_tab[i, j])[:, None] * G[j]
        ti = t + c[i] * h
        if coupled:
            ydi = da.copy()
            for j in range(i):
                if a_tab[i, j] != 0.0:
                    ydi += (h * a_tab[i, j])[:, None, None] * Gd[j]
            G[i], Gd[i] = problem.rhs_dual(ti, yi, ydi, idx)
        else:
            G[i] = problem.rhs(ti, yi, idx)
    y_high = y + h[:, None] * np.einsum("j,jkm->km", spec.b, G)
    y_low = y + h[:, None] * np.einsum("j,jkm->km", spec.b_emb, G)
    da_high = da_low = None
    if coupled:
        da_high = da + h[:, None, None] * np.einsum("j,jkmp->kmp", spec.b, Gd)
        da_low = da + h[:, None, None] * np.einsum("j,jkmp->kmp", spec.b_emb, Gd)
    ok = np.isfinite(y_high).all(axis=1) & np.isfinite(y_low).all(axis=1)
    g_first = G[0]
    gd_first = Gd[0] if coupled else None
    g_last = G[-1] if spec.fsal else None
    gd_last = Gd[-1] if (spec.fsal and coupled) else None
    return y_high, y_low, da_high, da_low, ok, (g_first, gd_first, g_last, gd_last)


def _rosenbrock_step(spec, problem, t, y, h, idx, coupled, da):
    """One linearly implicit embedded step (Jacobian frozen at y_n)."""
    s = spec.stages
    a_tab, c, gam, gbar = spec.a, spec.c, spec.gamma, spec.gbar
    k, m = y.shape
    f0, J, ft = problem.rhs_and_jac(t, y, idx)
    W = np.eye(m) - (gam[0, 0] * h)[:, None, None] * J
    lu, piv, ok = lu_factor(W, check_singular=False)
    K = np.zeros((s, k, m))
    Kd = np.zeros((s, k, m, problem.nparams)) if coupled else None
    for i in range(s):
        yi = y.copy()
        for j in range(i):
            if a_tab[i, j] != 0.0:
                yi += a_tab[i, j] * K[j]
        ti = t + c[i] * h
        if coupled:
            ydi = da.copy()
            for j in range(i):
                if a_tab[i, j] != 0.0:
                    ydi += a_tab[i, j] * Kd[j]
            fi, fdi = problem.rhs_dual(ti, yi, ydi, idx)
        else:
            fi = f0 if i == 0 else problem.rhs(ti, yi, idx)
        rhs = h[:, None] * fi + (h * gbar[i] * h)[:, None] * ft
        for j in range(i):
            if gam[i, j] != 0.0:
                rhs += gam[i, j] * h[:, None] * np.einsum("kmn,kn->km", J, K[j])
        rhs = np.where(ok[:, None], rhs, 0.0)
        K[i] = lu_solve_factored(lu, piv, rhs)
        if coupled:
            v_a = np.zeros((k, m))
            for j in range(i + 1):
                if gam[i, j] != 0.0:
                    v_a += gam[i, j] * K[j]
            v_t = gbar[i] * h
            jtv = problem.jac_dir2(t, y, da, v_a, v_t, idx)
            rhs_d = h[:, None, None] * fdi + h[:, None, None] * jtv
            for j in range(i):
                if gam[i, j] != 0.0:
                    rhs_d += gam[i, j] * h[:, None, None] * np.einsum("kmn,knp->kmp", J, Kd[j])
            rhs_d = np.where(ok[:, None, None], rhs_d, 0.0)
            Kd[i] = lu_solve_factored(lu, piv, rhs_d)
    y_high = y + np.einsum("j,jkm->km", spec.b, K)
    y_low = y + np.einsum("j,jkm->km", spec.b_emb, K)
    da_high = da_low = None
    if coupled:
        da_high = da + np.einsum("j,jkmp->kmp", spec.b, Kd)
        da_low = da + np.einsum("j,jkmp->kmp", spec.b_emb, Kd)
    ok &= np.isfinite(y_high).all(axis=1) & np.isfinite(y_low).all(axis=1)
    return y_high, y_low, da_high, da_low, ok


def _doubling_step(problem, t, y, h, idx, coupled, da, newton_mode, tol):
    """Implicit Euler candidate pair: one step of h vs two steps of h/2."""
    m = problem.m

    def advance(t0, a0, da0, dt_sub):
        t1 = t0 + dt_sub
        a1, ok, _ = _newton_implicit_euler(problem, t1, dt_sub, a0, idx, newton_mode, tol)
        da1 = None
        if coupled:
            _, dfp = problem.rhs_dual(t1, a1, np.zeros((a1.shape[0], m, problem.nparams)), idx)
            _, J, _ = problem.rhs_and_jac(t1, a1, idx)
            M = np.eye(m) - dt_sub[:, None, None] * J
            lu, piv, fac_ok = lu_factor(M, check_singular=False)
            ok &= fac_ok
            da1 = lu_solve_factored(lu, piv, da0 + dt_sub[:, None, None] * dfp)
        return a1, da1, ok

    da = da if coupled else None
    y_full, da_full, ok1 = advance(t, y, da, h)
    y_half, da_half, ok2 = advance(t, y, da, 0.5 * h)
    y_two, da_two, ok3 = advance(t + 0.5 * h, y_half, da_half, 0.5 * h)
    ok = ok1 & ok2 & ok3
    return y_two, y_full, da_two, da_full, ok


# ---------------------------------------------------------------------------
# error measures
# ---------------------------------------------------------------------------


def _scaled_sq(diff, ref_a, ref_b, atol, rtol):
    sc = atol + rtol * np.maximum(np.abs(ref_a), np.abs(ref_b))
    return (diff / sc) ** 2


def error_norm(
    problem,
    mode,
    t0,
    t1,
    y0,
    y_high,
    y_low,
    da0=None,
    da_high=None,
    da_low=None,
    atol=1e-6,
    rtol=1e-3,
    include_deriv=True,
    idx=None,
):
    """Scaled RMS error of a candidate pair.

    ``internal`` measures the internal-variable components directly;
    ``stress`` maps both candidates (and, when coupled, their sensitivities)
    through the stress relation at the substep-end strain and measures
    those images instead.
    """
    coupled = da_high is not None and include_deriv
    if mode == "internal":
        parts = [_scaled_sq(y_high - y_low, y0, y_high, atol, rtol)]
        count = y_high.shape[1]
        if coupled:
            parts.append(_scaled_sq(da_high - da_low, da0, da_high, atol, rtol).reshape(y_high.shape[0], -1))
            count += da_high.shape[1] * da_high.shape[2]
    elif mode == "stress":
        if coupled:
            sig0, C0 = problem.stress_dual(t0, y0, da0, idx)
            sig_hi, C_hi = problem.stress_dual(t1, y_high, da_high, idx)
            sig_lo, C_lo = problem.stress_dual(t1, y_low, da_low, idx)
        else:
            sig0 = problem.stress_of(t0, y0, idx)
            sig_hi = problem.stress_of(t1, y_high, idx)
            sig_lo = problem.stress_of(t1, y_low, idx)
        parts = [_scaled_sq(sig_hi - sig_lo, sig0, sig_hi, atol, rtol)]
        count = 6
        if coupled:
            parts.append(_scaled_sq(C_hi - C_lo, C0, C_hi, atol, rtol).reshape(sig_hi.shape[0], -1))
            count += 36
    else:
        raise ValueError(f"unknown error measure {mode!r}")
    total = sum(p.sum(axis=1) for p in parts)
    err = np.sqrt(total / count)
    return np.where(np.isfinite(err), err, np.inf)


# ---------------------------------------------------------------------------
# public stepping interfaces
# ---------------------------------------------------------------------------


def embedded_step(spec, problem, t, y, h):
    """One uncoupled candidate step; returns (y_high, y_low, aux)."""
    if spec.kind == "explicit":
        y_high, y_low, _, _, ok, slopes = _explicit_step(spec, problem, t, y, h, None, False, None)
        return y_high, y_low, {"ok": ok, "g_last": slopes[2]}
    if spec.kind == "rosenbrock":
        y_high, y_low, _, _, ok = _rosenbrock_step(spec, problem, t, y, h, None, False, None)
        return y_high, y_low, {"ok": ok}
    raise ValueError(f"embedded_step does not support scheme kind {spec.kind!r}")


def adaptive_integrate(
    spec,
    problem,
    a0,
    coupled=False,
    error_measure="internal",
    controller=None,
    newton_mode="internal",
    record_steps=False,
    include_deriv_in_norm=True,
):
    """Integrate the problem over [0, dt] with per-voxel step control.

    The first attempt uses the full interval; rejected attempts before the
    first acceptance halve the step, afterwards the classical controller
    formula applies to acceptances and rejections alike. In coupled mode
    the sensitivity starts at zero and is advanced by the same scheme.
    """
    ctrl = controller or StepController()
    B = a0.shape[0]
    m = a0.shape[1]
    dt = problem.dt
    t = np.zeros(B)
    h = dt.copy()
    a = a0.copy()
    da = np.zeros((B, m, problem.nparams)) if coupled else None
    done = np.zeros(B, dtype=bool)
    accepted_any = np.zeros(B, dtype=bool)
    substeps = np.zeros(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    steps = [[] for _ in range(B)] if record_steps else None
    g1 = gd1 = None
    g1_valid = np.zeros(B, dtype=bool)
    if spec.fsal:
        g1 = np.zeros((B, m))
        gd1 = np.zeros((B, m, problem.nparams)) if coupled else None

    attempts = 0
    while not np.all(done):
        attempts += 1
        if attempts > ctrl.max_substeps * 4:
            raise IntegrationError("global attempt cap exceeded")
        idx = np.flatnonzero(~done)
        hi = np.minimum(h[idx], dt[idx] - t[idx])
        clipped = hi >= dt[idx] - t[idx] - 1e-15 * dt[idx]
        ti = t[idx]
        yi = a[idx]
        dai = da[idx] if coupled else None

        slopes = None
        if spec.kind == "explicit":
            if spec.fsal:
                y_hi, y_lo, da_hi, da_lo, ok, slopes = _explicit_step(
                    spec, problem, ti, yi, hi, idx, coupled, dai,
                    g1[idx], gd1[idx] if coupled else None, g1_valid[idx],
                )
            else:
                y_hi, y_lo, da_hi, da_lo, ok, slopes = _explicit_step(
                    spec, problem, ti, yi, hi, idx, coupled, dai
                )
        elif spec.kind == "rosenbrock":
            y_hi, y_lo, da_hi, da_lo, ok = _rosenbrock_step(spec, problem, ti, yi, hi, idx, coupled, dai)
        else:
            y_hi, y_lo, da_hi, da_lo, ok = _doubling_step(
                problem, ti, yi, hi, idx, coupled, dai, newton_mode, ctrl.newton_tol
            )

        err = error_norm(
            problem, error_measure, ti, ti + hi, yi, y_hi, y_lo,
            dai, da_hi, da_lo, ctrl.atol, ctrl.rtol, include_deriv_in_norm, idx,
        )
        err = np.where(ok, err, np.inf)
        accept = err <= 1.0

        acc = idx[accept]
        if acc.size:
            t_new = np.where(clipped[accept], dt[acc], t[acc] + hi[accept])
            t[acc] = t_new
            a[acc] = y_hi[accept]
            if coupled:
                da[acc] = da_hi[accept]
            substeps[acc] += 1
            done[acc] = t_new >= dt[acc] * (1.0 - 1e-12)
            accepted_any[acc] = True
        rej = idx[~accept]
        rejected[rej] += 1
        if spec.fsal and slopes is not None:
            g_first, gd_first, g_last, gd_last = slopes
            # accepted: next first stage is the last stage slope (FSAL);
            # rejected: the state is unchanged, so the evaluated first
            # stage slope remains the correct f(t, y).
            g1[acc] = g_last[accept]
            g1[rej] = g_first[~accept]
            g1_valid[idx] = True
            if coupled:
                gd1[acc] = gd_last[accept]
                gd1[rej] = gd_first[~accept]

        if record_steps:
            for pos, b in enumerate(idx):
                steps[b].append((float(hi[pos]), bool(accept[pos])))

        # controller update on the attempted entries
        with np.errstate(divide="ignore", over="ignore"):
            factor = ctrl.safety * err ** (-1.0 / (spec.order_low + 1.0))
        factor = np.where(err == 0.0, ctrl.max_factor, factor)
        factor = np.where(np.isnan(factor), ctrl.min_factor, factor)
        factor = np.clip(factor, ctrl.min_factor, ctrl.max_factor)
        h_next = hi * factor
        # before the first acceptance a rejection just halves the step
        fresh = ~accepted_any[idx] & ~accept
        h_next = np.where(fresh, 0.5 * hi, h_next)
        h[idx] = h_next

        if np.any(substeps + rejected > ctrl.max_substeps):
            raise IntegrationError(f"substep cap {ctrl.max_substeps} exceeded")
        under = ~done & (h < 1e-14 * dt)
        if np.any(under):
            raise IntegrationError(f"step size underflow in {int(under.sum())} voxels")

    return IntegrationResult(a=a, da=da, substeps=substeps, rejected=rejected, steps=steps)


# ---------------------------------------------------------------------------
# frozen-step replays (blackbox differentiation with recorded step sizes)
# ---------------------------------------------------------------------------


def accepted_steps(steps):
    """Extract the accepted step sizes from a recorded attempt list."""
    return [h for h, acc in steps if acc]


def frozen_step_primal(spec, problem, a0, steps_per_voxel, newton_mode="internal", newton_tol=1e-10):
    """Replay an integration with prescribed step sizes, values only."""
    B = a0.shape[0]
    a = a0.copy()
    t = np.zeros(B)
    counts = [len(s) for s in steps_per_voxel]
    for pos in range(max(counts)):
        idx = np.flatnonzero([pos < c for c in counts])
        hi = np.array([steps_per_voxel[b][pos] for b in idx])
        ti = t[idx]
        yi = a[idx]
        if spec.kind == "explicit":
            y_hi = _explicit_step(spec, problem, ti, yi, hi, idx, False, None)[0]
        elif spec.kind == "rosenbrock":
            y_hi = _rosenbrock_step(spec, problem, ti, yi, hi, idx, False, None)[0]
        else:
            y_hi, _, _, _, ok = _doubling_step(problem, ti, yi, hi, idx, False, None, newton_mode, newton_tol)
            if not np.all(ok):
                raise NewtonDivergenceError("implicit replay failed")
        a[idx] = y_hi
        t[idx] = ti + hi
    return a


def frozen_step_blackbox_derivative(spec, problem, a0, steps_per_voxel, newton_mode="internal", newton_tol=1e-10):
    """Replay on forward duals with frozen step sizes.

    Equation solves are treated as elementary operations (implicit
    function theorem); explicit stage updates are plain dual arithmetic.
    Returns (a, da) at the end of the replayed integration.
    """
    B = a0.shape[0]
    m = problem.m
    a = a0.copy()
    da = np.zeros((B, m, problem.nparams))
    t = np.zeros(B)
    counts = [len(s) for s in steps_per_voxel]
    for pos in range(max(counts)):
        idx = np.flatnonzero([pos < c for c in counts])
        hi = np.array([steps_per_voxel[b][pos] for b in idx])
        ti = t[idx]
        yi = a[idx]
        dai = da[idx]
        if spec.kind == "explicit":
            y_hi, _, da_hi, _, ok, _ = _explicit_step(spec, problem, ti, yi, hi, idx, True, dai)
        elif spec.kind == "rosenbrock":
            y_hi, da_hi = _rosenbrock_replay_dual(spec, problem, ti, yi, hi, idx, dai)
        else:
            y_hi, _, da_hi, _, ok = _doubling_step(problem, ti, yi, hi, idx, True, dai, newton_mode, newton_tol)
            if not np.all(ok):
                raise NewtonDivergenceError("implicit replay failed")
        a[idx] = y_hi
        da[idx] = da_hi
        t[idx] = ti + hi
    return a, da


def _rosenbrock_replay_dual(spec, problem, t, y, h, idx, da):
    """Rosenbrock step on duals: dual-valued W with IFT-treated solves.

    Independent of the coupled in-step formulation: the Jacobian and its
    strain sensitivity come from dual-valued nested Jacobians.
    """
    s = spec.stages
    a_tab, c, gam, gbar = spec.a, spec.c, spec.gamma, spec.gbar
    k, m = y.shape
    P = problem.nparams
    f0, J, Jdot, ft, ftdot = _dual_jacobian(problem, t, y, da, idx)
    gh = gam[0, 0] * h
    W = np.eye(m) - gh[:, None, None] * J
    Wdot = -gh[:, None, None, None] * Jdot  # (k, m, m, P)
    lu, piv, _ = lu_factor(W, check_singular=True)
    K = np.zeros((s, k, m))
    Kd = np.zeros((s, k, m, P))
    for i in range(s):
        yi = y.copy()
        ydi = da.copy()
        for j in range(i):
            if a_tab[i, j] != 0.0:
                yi += a_tab[i, j] * K[j]
                ydi += a_tab[i, j] * Kd[j]
        ti = t + c[i] * h
        fi, fdi = problem.rhs_dual(ti, yi, ydi, idx)
        rhs = h[:, None] * fi + (h * gbar[i] * h)[:, None] * ft
        rhs_d = h[:, None, None] * fdi + (h * gbar[i] * h)[:, None, None] * ftdot
        for j in range(i):
            if gam[i, j] != 0.0:
                rhs += gam[i, j] * h[:, None] * np.einsum("kmn,kn->km", J, K[j])
                rhs_d += gam[i, j] * h[:, None, None] * (
                    np.einsum("kmnp,kn->kmp", Jdot, K[j]) + np.einsum("kmn,knp->kmp", J, Kd[j])
                )
        K[i] = lu_solve_factored(lu, piv, rhs)
        # implicit function rule: W Kd = rhs_d - Wdot K
        rhs_d -= np.einsum("kmnp,kn->kmp", Wdot, K[i])
        Kd[i] = lu_solve_factored(lu, piv, rhs_d)
    y_high = y + np.einsum("j,jkm->km", spec.b, K)
    da_high = da + np.einsum("j,jkmp->kmp", spec.b, Kd)
    return y_high, da_high


def _dual_jacobian(problem, t, y, da, idx):
    """Nested Jacobians on dual payloads -> (f, J, dJ, ft, dft)."""
    ops = problem.ops
    eps_pay = problem._eps_dual_comps(t, idx)
    a_pay = problem._state_dual_comps(y, da)
    f_n, dfda_n, dfde_n = ops.rhs_jac_generic(eps_pay, a_pay)
    k = y.shape[0]
    m = problem.m
    P = problem.nparams

    def split(x):
        v = np.broadcast_to(np.asarray(value_of(x), dtype=float), (k,))
        d = ops._dot_of(x, P, (k,))
        return v, np.moveaxis(d, 0, -1)

    f = np.zeros((k, m))
    J = np.zeros((k, m, m))
    Jdot = np.zeros((k, m, m, P))
    dfde = np.zeros((k, m, 6))
    dfde_dot = np.zeros((k, m, 6, P))
    for i in range(m):
        f[:, i], _ = split(f_n[i])
        for j in range(m):
            J[:, i, j], Jdot[:, i, j] = split(dfda_n[i][j])
        for j in range(6):
            dfde[:, i, j], dfde_dot[:, i, j] = split(dfde_n[i][j])
    epsdot = problem._sel(problem.epsdot, idx)
    dt = problem._sel(problem.dt, idx)
    ft = np.einsum("kmi,ki->km", dfde, epsdot)
    # d eps_dot / d eps_np1 = I / dt
    ftdot = np.einsum("kmip,ki->kmp", dfde_dot, epsdot) + dfde / dt[:, None, None]
    return f, J, Jdot, ft, ftdot
