"""Generalized standard materials defined by two potentials.

A law is a free energy density omega(eps, a) plus a force potential
psi(A) over the generalized stresses A = -d omega/d a. The constitutive
equations follow mechanically:

    sigma = d omega / d eps,        a' = d psi / d A (-d omega/d a).

Potentials are written over *component lists* of generic scalar payloads
(floats, batched numpy arrays, dual numbers, reverse-mode nodes), so a
single implementation serves plain evaluation, forward tangents and the
reverse sweeps. :class:`LawOps` binds a law to an evaluation strategy:

* ``automatic``       -- every partial comes from reverse-mode AD sweeps,
                         Jacobians and tangents from tangent-over-adjoint.
* ``semi-automatic``  -- hand-coded partials of the two potentials, still
                         generic over payloads so forward tangents pass
                         through them.

The shipped laws are a linear elastic material and the elasto-viscoplastic
law of Michel and Suquet (J. Comput. Phys. 2016 calibration): linear
kinematic hardening, constant yield stress, Norton-type rate sensitivity.
The latter also carries the classical single-step backward-Euler radial
return with a closed-form consistent tangent (the ``conventional`` route).
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Dual1, RConst, RLeaf, value_of
from .linalg import SHEAR_DUP, isotropic_stiffness, lame_parameters

# deviatoric projector on stress-like Voigt vectors
DEV6 = np.eye(6)
DEV6[:3, :3] -= 1.0 / 3.0


class NewtonError(RuntimeError):
    """Scalar return-mapping Newton failed to converge."""


def _components(arr, n):
    arr = np.asarray(arr, dtype=float)
    return [arr[..., i] for i in range(n)]


def _stack(comps):
    return np.stack([np.asarray(value_of(c), dtype=float) for c in comps], axis=-1)


def _pack_matrix(nested, batch_shape):
    """Nested list of scalar-likes -> array (batch..., rows, cols)."""
    rows = []
    for row in nested:
        cols = [np.broadcast_to(np.asarray(value_of(c), dtype=float), batch_shape) for c in row]
        rows.append(np.stack(cols, axis=-1))
    return np.stack(rows, axis=-2)


def dev_components(s):
    """Deviator of a Voigt 6-list of scalar-likes."""
    p = (s[0] + s[1] + s[2]) * (1.0 / 3.0)
    return [s[0] - p, s[1] - p, s[2] - p, s[3], s[4], s[5]]


def mises_components(s):
    """Guarded von Mises norm of the deviator of a stress-like 6-list.

    Returns ``(norm, deviator)``. The square root is masked so that a
    vanishing deviator yields norm 0 with zero derivatives instead of a
    0/0; the mask decision uses primal values only.
    """
    d = dev_components(s)
    q = 1.5 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + 2.0 * (d[3] * d[3] + d[4] * d[4] + d[5] * d[5]))
    mask = np.where(np.asarray(value_of(q)) > 0.0, 1.0, 0.0)
    norm = ad.sqrt(q + (1.0 - mask)) * mask
    return norm, d


class GsmDefinition:
    """Base class: a material is two potentials over generic scalars."""

    m = 0
    has_hand_partials = False
    has_conventional = False

    def omega(self, eps, a):
        raise NotImplementedError

    def psi(self, A):
        raise NotImplementedError

    def clamp_state(self, a):
        """Project an integrated state back into the admissible set."""
        return a


class LinearElastic(GsmDefinition):
    """Isotropic linear elasticity; no internal variables."""

    m = 0
    has_hand_partials = True

    def __init__(self, E, nu):
        self.E = float(E)
        self.nu = float(nu)
        self.lam, self.mu = lame_parameters(self.E, self.nu)
        self.Ce = isotropic_stiffness(self.E, self.nu)

    def omega(self, eps, a):
        tr = eps[0] + eps[1] + eps[2]
        w = 0.5 * self.lam * tr * tr
        w = w + self.mu * (eps[0] * eps[0] + eps[1] * eps[1] + eps[2] * eps[2])
        w = w + 0.5 * self.mu * (eps[3] * eps[3] + eps[4] * eps[4] + eps[5] * eps[5])
        return w

    def psi(self, A):
        return 0.0

    def hand_stress(self, eps, a):
        tr = eps[0] + eps[1] + eps[2]
        lam, mu = self.lam, self.mu
        return [
            lam * tr + 2.0 * mu * eps[0],
            lam * tr + 2.0 * mu * eps[1],
            lam * tr + 2.0 * mu * eps[2],
            mu * eps[3],
            mu * eps[4],
            mu * eps[5],
        ]

    def hand_gen_stress(self, eps, a):
        return []

    def hand_flow(self, A):
        return []

    def hand_flow_jac(self, A):
        return []

    @property
    def d2w_ee(self):
        return self.Ce

    @property
    def d2w_ae(self):
        return np.zeros((0, 6))

    @property
    def d2w_aa(self):
        return np.zeros((0, 0))


@dataclass(frozen=True)
class MichelSuquetParams:
    """Material constants (SI units: Pa for moduli and stresses, 1/s rate)."""

    E: float
    nu: float
    sigma_Y: float
    H: float
    eps0_dot: float
    sigma_d: float
    n: float

    def __post_init__(self):
        for name in ("E", "nu", "sigma_Y", "H", "eps0_dot", "sigma_d", "n"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.nu >= 0.5:
            raise ValueError("nu must be < 0.5")


#: calibration of the aluminum matrix used throughout the experiments
ALUMINUM_MATRIX = MichelSuquetParams(
    E=55e9, nu=0.33, sigma_Y=25e6, H=1.8e9, eps0_dot=1.0, sigma_d=130e6, n=3.6
)

#: linear elastic fiber material paired with the aluminum matrix
ALUMINA_FIBER = dict(E=300e9, nu=0.25)


def load_michel_suquet_params(path):
    """Read material constants from a plain ``key = value`` file.

    Accepted keys: E, nu, sigma_Y, H, eps0_dot, sigma_d, n. Lines starting
    with ``#`` are comments. Unknown keys are rejected.
    """
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in MichelSuquetParams.__dataclass_fields__:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = float(raw.strip())
    missing = set(MichelSuquetParams.__dataclass_fields__) - set(values)
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    return MichelSuquetParams(**values)


class MichelSuquet(GsmDefinition):
    """Elasto-viscoplastic law with kinematic hardening and Norton flow.

    Internal state a = (eps_vp[0:6], alpha): viscoplastic strain in Voigt
    engineering components plus the equivalent plastic strain.
    """

    m = 7
    has_hand_partials = True
    has_conventional = True

    def __init__(self, params=ALUMINUM_MATRIX):
        self.params = params
        self.lam, self.mu = lame_parameters(params.E, params.nu)
        self.Ce = isotropic_stiffness(params.E, params.nu)
        # kinematic hardening matrix diag(H, H, H, H/2, H/2, H/2)
        self.Hmat = np.diag([params.H] * 3 + [params.H / 2.0] * 3)
        self._d2w_aa = np.zeros((7, 7))
        self._d2w_aa[:6, :6] = self.Ce + (2.0 / 3.0) * self.Hmat
        self._d2w_ae = np.zeros((7, 6))
        self._d2w_ae[:6, :] = -self.Ce

    # -- the two potentials -------------------------------------------------

    def omega(self, eps, a):
        p = self.params
        ee = [eps[i] - a[i] for i in range(6)]
        tr = ee[0] + ee[1] + ee[2]
        w = 0.5 * self.lam * tr * tr
        w = w + self.mu * (ee[0] * ee[0] + ee[1] * ee[1] + ee[2] * ee[2])
        w = w + 0.5 * self.mu * (ee[3] * ee[3] + ee[4] * ee[4] + ee[5] * ee[5])
        w = w + (p.H / 3.0) * (a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
        w = w + (p.H / 6.0) * (a[3] * a[3] + a[4] * a[4] + a[5] * a[5])
        w = w + p.sigma_Y * a[6]
        return w

    def psi(self, A):
        p = self.params
        norm, _ = mises_components(A[:6])
        y = norm + A[6]
        return (p.sigma_d * p.eps0_dot / (p.n + 1.0)) * ad.pos(y * (1.0 / p.sigma_d)) ** (p.n + 1.0)

    def clamp_state(self, a):
        a = np.asarray(a, dtype=float)
        out = a.copy()
        out[..., 6] = np.maximum(out[..., 6], 0.0)
        return out

    # -- hand-coded partials (semi-automatic route) -------------------------

    def hand_stress(self, eps, a):
        lam, mu = self.lam, self.mu
        ee = [eps[i] - a[i] for i in range(6)]
        tr = ee[0] + ee[1] + ee[2]
        return [
            lam * tr + 2.0 * mu * ee[0],
            lam * tr + 2.0 * mu * ee[1],
            lam * tr + 2.0 * mu * ee[2],
            mu * ee[3],
            mu * ee[4],
            mu * ee[5],
        ]

    def hand_gen_stress(self, eps, a):
        p = self.params
        sig = self.hand_stress(eps, a)
        kin = 2.0 * p.H / 3.0
        A = [
            sig[0] - kin * a[0],
            sig[1] - kin * a[1],
            sig[2] - kin * a[2],
            sig[3] - 0.5 * kin * a[3],
            sig[4] - 0.5 * kin * a[4],
            sig[5] - 0.5 * kin * a[5],
            -p.sigma_Y + 0.0 * a[6],
        ]
        return A

    def _flow_pieces(self, A):
        p = self.params
        norm, d = mises_components(A[:6])
        y = norm + A[6]
        gate = np.where(np.asarray(value_of(y)) > 0.0, 1.0, 0.0)
        denom = norm + (1.0 - gate)
        gdot = p.eps0_dot * ad.pos(y * (1.0 / p.sigma_d)) ** p.n
        direction = [1.5 * SHEAR_DUP[i] * d[i] / denom * gate for i in range(6)]
        return gdot, direction, y, norm, denom, gate

    def hand_flow(self, A):
        gdot, direction, *_ = self._flow_pieces(A)
        return [gdot * direction[i] for i in range(6)] + [gdot]

    def hand_flow_jac(self, A):
        """Hessian of psi as a nested 7x7 list of scalar-likes."""
        p = self.params
        gdot, P, y, norm, denom, gate = self._flow_pieces(A)
        gprime = (p.eps0_dot * p.n / p.sigma_d) * ad.pos(y * (1.0 / p.sigma_d)) ** (p.n - 1.0)
        rows = []
        for i in range(6):
            row = []
            for j in range(6):
                curv = (1.5 * SHEAR_DUP[i] * DEV6[i, j] - P[i] * P[j]) / denom * gate
                row.append(gprime * P[i] * P[j] + gdot * curv)
            row.append(gprime * P[i])
            rows.append(row)
        rows.append([gprime * P[j] for j in range(6)] + [gprime])
        return rows

    @property
    def d2w_ee(self):
        return self.Ce

    @property
    def d2w_ae(self):
        return self._d2w_ae

    @property
    def d2w_aa(self):
        return self._d2w_aa

    # -- conventional single-step backward Euler (radial return) ------------

    def conventional_step(self, eps_n, a_n, eps_np1, h, want_tangent):
        """One backward-Euler step reduced to a scalar Newton solve.

        Returns ``(sigma, a_new, C)`` with ``C = None`` unless requested.
        All arguments may carry leading batch axes; ``h`` broadcasts.
        """
        p = self.params
        mu = self.mu
        eps_np1 = np.asarray(eps_np1, dtype=float)
        a_n = np.asarray(a_n, dtype=float)
        squeeze = eps_np1.ndim == 1
        if squeeze:
            eps_np1 = eps_np1[None]
            a_n = np.broadcast_to(a_n, (1, 7))
        batch = eps_np1.shape[:-1]
        h = np.broadcast_to(np.asarray(h, dtype=float), batch)

        evp = a_n[..., :6]
        A_tr = _stack(self.hand_gen_stress(_components(eps_np1, 6), _components(a_n, 7)))
        s_tr = A_tr[..., :6] @ DEV6.T
        q = 1.5 * np.einsum("...i,i,...i->...", s_tr, SHEAR_DUP, s_tr)
        N_tr = np.sqrt(np.maximum(q, 0.0))
        y_tr = N_tr - p.sigma_Y
        k_eff = 3.0 * mu + p.H
        plastic = (y_tr > 0.0) & (h > 0.0)

        dgam = np.zeros(batch)
        if np.any(plastic):
            idx = np.nonzero(plastic)
            yt = y_tr[idx]
            hp = h[idx]
            hi = np.maximum(yt / k_eff * (1.0 - 1e-15), 0.0)
            x = np.zeros_like(yt)
            scale = np.maximum(hi, 1e-30)
            for it in range(50):
                ye = yt - k_eff * x
                g = hp * p.eps0_dot * (ye / p.sigma_d) ** p.n
                r = x - g
                rp = 1.0 + k_eff * hp * p.eps0_dot * p.n / p.sigma_d * (ye / p.sigma_d) ** (p.n - 1.0)
                step = r / rp
                x = np.clip(x - step, 0.0, hi)
                if np.max(np.abs(step) / scale) < 1e-14:
                    break
            else:
                raise NewtonError(f"radial return stalled, max |step| {np.max(np.abs(step)):.3e}")
            dgam[idx] = x

        safeN = np.where(plastic, N_tr, 1.0)
        P_tr = 1.5 * SHEAR_DUP * s_tr / safeN[..., None] * plastic[..., None]
        a_new = a_n.copy()
        a_new[..., :6] += dgam[..., None] * P_tr
        a_new[..., 6] += dgam
        sigma = _stack(self.hand_stress(_components(eps_np1, 6), _components(a_new, 7)))

        C = None
        if want_tangent:
            C = np.broadcast_to(self.Ce, batch + (6, 6)).copy()
            if np.any(plastic):
                ye = y_tr - k_eff * dgam
                gp = h * p.eps0_dot * p.n / p.sigma_d * np.where(plastic, ye / p.sigma_d, 0.0) ** (p.n - 1.0)
                beta = gp / (1.0 + k_eff * gp)
                n_sig = 1.5 * s_tr / safeN[..., None]
                dev_strain = DEV6.copy()
                dev_strain[3:, 3:] = 0.5 * np.eye(3)
                coeff1 = 4.0 * mu * mu * (beta - dgam / safeN) * plastic
                coeff2 = 6.0 * mu * mu * (dgam / safeN) * plastic
                C -= coeff1[..., None, None] * n_sig[..., :, None] * n_sig[..., None, :]
                C -= coeff2[..., None, None] * dev_strain
        if squeeze:
            sigma = sigma[0]
            a_new = a_new[0]
            C = None if C is None else C[0]
        return sigma, a_new, C


# ---------------------------------------------------------------------------
# strategy-bound operations
# ---------------------------------------------------------------------------


class LawOps:
    """Uniform evaluation surface of a law under a chosen strategy.

    All array methods accept arbitrary leading batch shapes with the
    component axis trailing; the ``*_generic`` methods work on component
    lists of any scalar payload (so forward duals flow through).
    """

    def __init__(self, law, strategy):
        if strategy not in ("automatic", "semi-automatic"):
            raise ValueError(f"unsupported strategy {strategy!r}")
        if strategy == "semi-automatic" and not law.has_hand_partials:
            raise ValueError("law does not ship hand-coded partials")
        self.law = law
        self.strategy = strategy
        self.m = law.m

    # -- generic payload operations -----------------------------------------

    def stress_generic(self, eps, a):
        if self.strategy == "semi-automatic":
            return self.law.hand_stress(eps, a)
        leaves = [RLeaf(p) for p in eps]
        consts = [RConst(p) for p in a]
        root = ad._wrap(self.law.omega(leaves, consts))
        root.v()
        root.back(1.0)
        return [leaf.adjoint() for leaf in leaves]

    def gen_stress_generic(self, eps, a):
        if self.strategy == "semi-automatic":
            return self.law.hand_gen_stress(eps, a)
        consts = [RConst(p) for p in eps]
        leaves = [RLeaf(p) for p in a]
        root = ad._wrap(self.law.omega(consts, leaves))
        root.v()
        root.back(1.0)
        return [-leaf.adjoint() for leaf in leaves]

    def flow_generic(self, A):
        if self.strategy == "semi-automatic":
            return self.law.hand_flow(A)
        leaves = [RLeaf(p) for p in A]
        root = ad._wrap(self.law.psi(leaves))
        root.v()
        root.back(1.0)
        return [leaf.adjoint() for leaf in leaves]

    def rhs_generic(self, eps, a):
        return self.flow_generic(self.gen_stress_generic(eps, a))

    def rhs_jac_generic(self, eps, a):
        """Evolution RHS plus nested Jacobians (semi-automatic only)."""
        if self.strategy != "semi-automatic":
            raise ValueError("nested Jacobians require hand-coded partials")
        A = self.law.hand_gen_stress(eps, a)
        f = self.law.hand_flow(A)
        psi2 = self.law.hand_flow_jac(A)
        m = self.m
        w_aa = self.law.d2w_aa
        w_ae = self.law.d2w_ae
        dfda = [
            [-sum(psi2[i][j] * w_aa[j, k] for j in range(m) if w_aa[j, k] != 0.0) for k in range(m)]
            for i in range(m)
        ]
        dfde = [
            [-sum(psi2[i][j] * w_ae[j, k] for j in range(m) if w_ae[j, k] != 0.0) for k in range(6)]
            for i in range(m)
        ]
        return f, dfda, dfde

    # -- array operations -----------------------------------------------------

    def stress(self, eps, a):
        return _stack(self.stress_generic(_components(eps, 6), _components(a, self.m)))

    def gen_stress(self, eps, a):
        return _stack(self.gen_stress_generic(_components(eps, 6), _components(a, self.m)))

    def rhs(self, eps, a):
        return _stack(self.rhs_generic(_components(eps, 6), _components(a, self.m)))

    def rhs_and_jacobians(self, eps, a):
        """RHS with d f/d a and d f/d eps, shape (..., m, m) and (..., m, 6)."""
        eps = np.asarray(eps, dtype=float)
        a = np.asarray(a, dtype=float)
        m = self.m
        batch = eps.shape[:-1]
        if self.strategy == "semi-automatic":
            f, dfda, dfde = self.rhs_jac_generic(_components(eps, 6), _components(a, m))
            return _stack(f), _pack_matrix(dfda, batch), _pack_matrix(dfde, batch)
        width = 6 + m
        eps_pay = []
        for i in range(6):
            dot = np.zeros((width,) + batch)
            dot[i] = 1.0
            eps_pay.append(Dual1(eps[..., i], dot))
        a_pay = []
        for k in range(m):
            dot = np.zeros((width,) + batch)
            dot[6 + k] = 1.0
            a_pay.append(Dual1(a[..., k], dot))
        f = self.rhs_generic(eps_pay, a_pay)
        fval = _stack(f)
        dots = np.stack([self._dot_of(fi, width, batch) for fi in f], axis=0)
        moved = np.moveaxis(dots, (0, 1), (-2, -1))  # (batch..., m, width)
        return fval, moved[..., 6:], moved[..., :6]

    def stress_and_tangent(self, eps, a, da_deps):
        """Stress and consistent tangent C = d2w/de2 + d2w/dade . da/de."""
        eps = np.asarray(eps, dtype=float)
        a = np.asarray(a, dtype=float)
        m = self.m
        batch = eps.shape[:-1]
        if self.strategy == "semi-automatic":
            sig = self.stress(eps, a)
            C = np.broadcast_to(self.law.d2w_ee, batch + (6, 6)).copy()
            if m:
                C += np.einsum("ki,...kj->...ij", self.law.d2w_ae, da_deps)
            return sig, C
        eps_pay = []
        for i in range(6):
            dot = np.zeros((6,) + batch)
            dot[i] = 1.0
            eps_pay.append(Dual1(eps[..., i], dot))
        a_pay = [Dual1(a[..., k], np.moveaxis(da_deps[..., k, :], -1, 0)) for k in range(m)]
        leaves = [RLeaf(p) for p in eps_pay]
        consts = [RConst(p) for p in a_pay]
        root = ad._wrap(self.law.omega(leaves, consts))
        root.v()
        root.back(1.0)
        sig = []
        C_rows = []
        for leaf in leaves:
            adj = leaf.adjoint()
            sig.append(value_of(adj))
            C_rows.append(self._dot_of(adj, 6, batch))
        sigma = _stack(sig)
        C = np.moveaxis(np.stack(C_rows, axis=0), (0, 1), (-2, -1))
        return sigma, C

    def elastic_tangent(self, eps, a):
        """Second strain derivative of omega (exact tangent when a is frozen)."""
        eps = np.asarray(eps, dtype=float)
        batch = eps.shape[:-1]
        if self.strategy == "semi-automatic":
            return np.broadcast_to(self.law.d2w_ee, batch + (6, 6)).copy()
        da = np.zeros(batch + (self.m, 6))
        return self.stress_and_tangent(eps, np.asarray(a, dtype=float), da)[1]

    @staticmethod
    def _dot_of(x, width, batch):
        if isinstance(x, Dual1):
            return np.broadcast_to(np.asarray(x.dot, dtype=float), (width,) + batch)
        return np.zeros((width,) + batch)


# ---------------------------------------------------------------------------
# module-level constitutive operations
# ---------------------------------------------------------------------------


def _ops_for(law, strategy):
    if strategy == "conventional":
        strategy = "semi-automatic"
    return LawOps(law, strategy)


def stress(law, eps, a, strategy="automatic"):
    """Stress sigma = d omega/d eps at (eps, a)."""
    return _ops_for(law, strategy).stress(eps, a)


def generalized_stress(law, eps, a, strategy="automatic"):
    """Generalized stresses A = -d omega/d a at (eps, a)."""
    return _ops_for(law, strategy).gen_stress(eps, a)


def evolution_rhs(law, eps, a, strategy="automatic"):
    """Evolution right-hand side f(eps, a) = d psi/d A(-d omega/d a)."""
    return _ops_for(law, strategy).rhs(eps, a)


def rhs_jacobian(law, eps, a, strategy="automatic"):
    """Jacobian d f/d a of the evolution right-hand side."""
    return _ops_for(law, strategy).rhs_and_jacobians(eps, a)[1]


def rhs_strain_jacobian(law, eps, a, strategy="automatic"):
    """Jacobian d f/d eps of the evolution right-hand side."""
    return _ops_for(law, strategy).rhs_and_jacobians(eps, a)[2]


def conventional_evaluate(law, eps_n, a_n, eps_np1, h, want_tangent=False):
    """Material-specific single-step evaluation (radial return)."""
    if not law.has_conventional:
        raise ValueError("law has no conventional evaluation routine")
    return law.conventional_step(eps_n, a_n, eps_np1, h, want_tangent)
