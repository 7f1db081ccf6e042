"""FFT-based homogenization on periodic voxel grids (basic scheme).

Fixed-point iteration eps <- eps - Gamma0 (sigma(eps) - C_ref : eps) with
the continuous-frequency Green operator Gamma0 of an isotropic reference
material applied in Fourier space. Convergence is judged by a stress
equilibrium residual (divergence proxy in Fourier space) relative to the
mean stress. Mixed uniaxial boundary conditions (one mean strain
component prescribed, zero mean stress elsewhere) are enforced by a
fixed-point update of the free mean-strain components interleaved with
the basic-scheme iteration.

Field layout is component-first: strain and stress fields have shape
(6, Nx, Ny, Nz) with Voigt components (xx, yy, zz, yz, xz, xy).
"""

import json
from dataclasses import dataclass

import numpy as np

from .evaluator import evaluate_arrays
from .gsm import LawOps
from .linalg import SHEAR_DUP

# Voigt index -> tensor index pairs
_VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


class SolverError(RuntimeError):
    """Basic scheme failed to converge; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class ReferenceMaterial:
    """Isotropic reference stiffness defining the preconditioner."""

    lam: float
    mu: float

    def matrix(self):
        C = np.zeros((6, 6))
        C[:3, :3] = self.lam
        C[0, 0] = C[1, 1] = C[2, 2] = self.lam + 2.0 * self.mu
        C[3, 3] = C[4, 4] = C[5, 5] = self.mu
        return C


@dataclass
class LoadingPath:
    """Piecewise-linear uniaxial tension-compression history.

    The axial strain ramps from 0 to ``eps_max`` at ``rate``, then back
    down through zero to ``eps_min``. The path is discretized into
    ``steps`` equidistant loading steps.
    """

    rate: float = 1.4e-3
    eps_max: float = 3.58454e-3
    eps_min: float = -3.48441e-3
    steps: int = 80
    mixed_bc: bool = True

    @property
    def total_time(self):
        return (self.eps_max + (self.eps_max - self.eps_min)) / self.rate

    def times(self):
        return np.linspace(0.0, self.total_time, self.steps + 1)

    def eps_xx(self, t):
        t = np.asarray(t, dtype=float)
        t_turn = self.eps_max / self.rate
        return np.where(t <= t_turn, self.rate * t, self.eps_max - self.rate * (t - t_turn))


# ---------------------------------------------------------------------------
# grids and geometry
# ---------------------------------------------------------------------------


class VoxelGrid:
    """Periodic voxel grid with per-voxel material ids and internal state."""

    def __init__(self, material_ids, materials):
        self.material_ids = np.asarray(material_ids)
        self.dims = self.material_ids.shape
        if len(self.dims) != 3:
            raise ValueError("material_ids must be a 3d array")
        self.materials = list(materials)
        ids_flat = self.material_ids.reshape(-1)
        present = np.unique(ids_flat)
        if present.max() >= len(self.materials):
            raise ValueError("material id exceeds material table")
        self.voxel_index = [np.flatnonzero(ids_flat == mid) for mid in range(len(self.materials))]
        self.state = [np.zeros((len(idx), law.m)) for idx, law in zip(self.voxel_index, self.materials)]

    @property
    def n_voxels(self):
        return self.material_ids.size

    def reset_state(self):
        for arr in self.state:
            arr[:] = 0.0


def toy_mmc_grid(n=16, matrix_law=None, fiber_law=None, volume_fraction=0.10, seed=2024):
    """Desk-scale stand-in microstructure: one tilted spherocylindrical fiber.

    The fiber axis direction and position are drawn from the seeded RNG;
    the radius is adjusted so the voxelized volume fraction comes close
    to the requested value.
    """
    from .gsm import ALUMINA_FIBER, LinearElastic, MichelSuquet

    rng = np.random.default_rng(seed)
    center = 0.5 * n + rng.uniform(-0.05 * n, 0.05 * n, size=3)
    axis = np.array([1.0, 0.0, 0.0]) + rng.uniform(-0.3, 0.3, size=3)
    axis /= np.linalg.norm(axis)
    half_len = 0.34 * n
    coords = np.stack(np.meshgrid(*[np.arange(n) + 0.5] * 3, indexing="ij"), axis=-1)
    rel = coords - center
    s = np.clip(rel @ axis, -half_len, half_len)
    closest = rel - s[..., None] * axis
    dist = np.linalg.norm(closest, axis=-1)

    target = volume_fraction * n**3
    lo, hi = 0.5, 0.5 * n
    for _ in range(60):
        r = 0.5 * (lo + hi)
        if np.count_nonzero(dist <= r) < target:
            lo = r
        else:
            hi = r
    ids = (dist <= 0.5 * (lo + hi)).astype(np.uint8)
    matrix_law = matrix_law or MichelSuquet()
    fiber_law = fiber_law or LinearElastic(**ALUMINA_FIBER)
    return VoxelGrid(ids, [matrix_law, fiber_law])


def save_geometry(path, material_ids, material_names):
    """Write a raw little-endian voxel id file plus a JSON sidecar."""
    ids = np.asarray(material_ids)
    dtype = "u1" if ids.max() < 256 else "u2"
    ids.astype("<" + dtype).tofile(path)
    sidecar = {
        "dims": list(ids.shape),
        "dtype": dtype,
        "byte_order": "little",
        "materials": list(material_names),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)


def load_geometry(path):
    """Read a raw voxel id file with its JSON sidecar; returns (ids, names)."""
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    dims = tuple(sidecar["dims"])
    dtype = "<" + sidecar["dtype"]
    ids = np.fromfile(path, dtype=dtype).reshape(dims)
    return ids, sidecar["materials"]


# ---------------------------------------------------------------------------
# Green operator
# ---------------------------------------------------------------------------


class GreenOperator:
    """Periodic Green operator of an isotropic reference, applied via FFT.

    ``apply(tau)`` returns the additive strain correction -Gamma0 tau, so
    that for a constant field the correction vanishes and for
    tau = C_ref : e with a compatible zero-mean strain e it returns -e.
    Matrices depend on the frequency direction only, so integer frequency
    grids suffice.
    """

    def __init__(self, dims, ref):
        self.dims = tuple(dims)
        self.ref = ref
        nx, ny, nz = self.dims
        fx = np.fft.fftfreq(nx, 1.0 / nx)
        fy = np.fft.fftfreq(ny, 1.0 / ny)
        fz = np.fft.rfftfreq(nz, 1.0 / nz)
        G = self._assemble(fx, fy, fz)
        # A Nyquist bin aliases +N/2 and -N/2, so the directional operator
        # is ill-defined there (and breaks the evenness the half-spectrum
        # application needs). Use the classical convention Gamma = C_ref^-1
        # on those bins: the fixed point then carries zero stress in the
        # unresolved checkerboard modes and the contraction bound survives.
        nyq = (
            (np.abs(np.abs(fx[:, None, None]) - nx / 2.0) < 1e-9)
            | (np.abs(np.abs(fy[None, :, None]) - ny / 2.0) < 1e-9)
            | (np.abs(np.abs(fz[None, None, :]) - nz / 2.0) < 1e-9)
        )
        if np.any(nyq):
            G[:, :, nyq] = np.linalg.inv(ref.matrix())[:, :, None]
        G[:, :, 0, 0, 0] = 0.0
        self._G = G

    def _assemble(self, fx, fy, fz):
        xi = np.stack(np.meshgrid(fx, fy, fz, indexing="ij"), axis=0)
        norm = np.sqrt((xi**2).sum(axis=0))
        norm[0, 0, 0] = 1.0
        n = xi / norm
        lam, mu = self.ref.lam, self.ref.mu
        c1 = 1.0 / (4.0 * mu)
        c2 = (lam + mu) / (mu * (lam + 2.0 * mu))
        G = np.zeros((6, 6) + n.shape[1:])
        for p, (k, h) in enumerate(_VOIGT_PAIRS):
            wr = 1.0 if p < 3 else 2.0
            for q, (i, j) in enumerate(_VOIGT_PAIRS):
                wc = 1.0 if q < 3 else 2.0
                term = (
                    (k == i) * n[h] * n[j]
                    + (h == i) * n[k] * n[j]
                    + (k == j) * n[h] * n[i]
                    + (h == j) * n[k] * n[i]
                ) * c1 - c2 * n[i] * n[j] * n[k] * n[h]
                G[p, q] = wr * wc * term
        return G

    def apply(self, tau):
        """Additive strain correction -Gamma0 tau for a (6, ...) field."""
        tau_hat = np.fft.rfftn(tau, axes=(1, 2, 3))
        corr_hat = -np.einsum("pqxyz,qxyz->pxyz", self._G, tau_hat)
        return np.fft.irfftn(corr_hat, s=self.dims, axes=(1, 2, 3))


def green_apply(tau, ref):
    """One-shot Green operator application (see :class:`GreenOperator`)."""
    return GreenOperator(tau.shape[1:], ref).apply(tau)


def equilibrium_residual(sig_field):
    """Divergence proxy: RMS of the Fourier traction misfit over mean stress."""
    dims = sig_field.shape[1:]
    nx, ny, nz = dims
    sig_hat = np.fft.rfftn(sig_field, axes=(1, 2, 3))
    fx = np.fft.fftfreq(nx, 1.0 / nx)
    fy = np.fft.fftfreq(ny, 1.0 / ny)
    fz = np.fft.rfftfreq(nz, 1.0 / nz)
    xi = np.stack(np.meshgrid(fx, fy, fz, indexing="ij"), axis=0)
    norm = np.sqrt((xi**2).sum(axis=0))
    norm[0, 0, 0] = 1.0
    n = xi / norm
    t0 = n[0] * sig_hat[0] + n[1] * sig_hat[5] + n[2] * sig_hat[4]
    t1 = n[0] * sig_hat[5] + n[1] * sig_hat[1] + n[2] * sig_hat[3]
    t2 = n[0] * sig_hat[4] + n[1] * sig_hat[3] + n[2] * sig_hat[2]
    sq = np.abs(t0) ** 2 + np.abs(t1) ** 2 + np.abs(t2) ** 2
    sq[0, 0, 0] = 0.0
    # double the interior rfft frequencies to account for the missing half
    w = np.full(sq.shape, 2.0)
    w[..., 0] = 1.0
    if nz % 2 == 0:
        w[..., -1] = 1.0
    ntot = nx * ny * nz
    fluct = np.sqrt((w * sq).sum() / ntot**2)
    sig_bar = sig_field.mean(axis=(1, 2, 3))
    ref = np.sqrt(np.einsum("i,i,i->", sig_bar, SHEAR_DUP, sig_bar))
    return fluct / max(ref, 1e-300)


def apply_isotropic(ref, eps_field):
    """C_ref : eps for a (6, ...) engineering-strain field."""
    lam, mu = ref.lam, ref.mu
    out = np.empty_like(eps_field)
    tr = eps_field[0] + eps_field[1] + eps_field[2]
    out[0] = lam * tr + 2.0 * mu * eps_field[0]
    out[1] = lam * tr + 2.0 * mu * eps_field[1]
    out[2] = lam * tr + 2.0 * mu * eps_field[2]
    out[3] = mu * eps_field[3]
    out[4] = mu * eps_field[4]
    out[5] = mu * eps_field[5]
    return out


# ---------------------------------------------------------------------------
# reference material from a tangent field
# ---------------------------------------------------------------------------

_MANDEL = np.diag([1.0, 1.0, 1.0, np.sqrt(2.0), np.sqrt(2.0), np.sqrt(2.0)])
_VOL = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]) / np.sqrt(3.0)


def _dev_basis():
    basis = []
    for e in np.eye(6):
        v = e - (e @ _VOL) * _VOL
        for b in basis:
            v -= (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            basis.append(v / nv)
    return np.stack(basis[:5], axis=1)  # (6, 5)


_DEV_BASIS = _dev_basis()


def reference_update(C_field):
    """Isotropic reference bracketing the tangent field's spectra.

    Tangents are symmetrized and transformed to the orthonormal tensor
    basis; the bulk and shear moduli of the reference are the arithmetic
    means of the extreme per-voxel bounds on the volumetric/deviatoric
    blocks.
    """
    C = np.asarray(C_field, dtype=float)
    if not np.all(np.isfinite(C)):
        raise ValueError("tangent field contains non-finite entries")
    C = C.reshape(-1, 6, 6)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    Chat = np.einsum("ij,bjk,kl->bil", _MANDEL, C, _MANDEL)
    kappa = np.einsum("i,bij,j->b", _VOL, Chat, _VOL) / 3.0
    Cdev = np.einsum("ip,bij,jq->bpq", _DEV_BASIS, Chat, _DEV_BASIS)
    ev = np.linalg.eigvalsh(Cdev)
    mu_min = ev[:, 0] / 2.0
    mu_max = ev[:, -1] / 2.0
    mu_ref = 0.5 * (mu_min.min() + mu_max.max())
    kappa_ref = 0.5 * (kappa.min() + kappa.max())
    lam_ref = kappa_ref - 2.0 * mu_ref / 3.0
    return ReferenceMaterial(lam=float(lam_ref), mu=float(mu_ref))


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------


@dataclass
class StepInfo:
    iterations: int
    residual: float
    mean_substeps: float
    history: list


class Homogenizer:
    """Basic-scheme solver owning the grid state over a loading history."""

    def __init__(self, grid, cfg, threads=1, tol=1e-5, max_iterations=5000):
        self.grid = grid
        self.cfg = cfg
        self.threads = threads
        self.tol = tol
        self.max_iterations = max_iterations
        self.eps_n = np.zeros((6,) + grid.dims)
        self.ebar_n = np.zeros(6)
        self._pending_state = None
        self._green = None
        self.reference = self.elastic_reference()

    # -- reference handling --------------------------------------------------

    def elastic_tangent_field(self):
        N = self.grid.n_voxels
        C = np.zeros((N, 6, 6))
        zero6 = np.zeros((1, 6))
        for law, idx in zip(self.grid.materials, self.grid.voxel_index):
            if len(idx) == 0:
                continue
            strategy = "semi-automatic" if law.has_hand_partials else "automatic"
            ops = LawOps(law, strategy)
            Ce = ops.elastic_tangent(zero6, np.zeros((1, law.m)))[0]
            C[idx] = Ce
        return C

    def elastic_reference(self):
        return reference_update(self.elastic_tangent_field())

    def set_reference(self, ref):
        self.reference = ref
        self._green = None

    def _green_op(self):
        if self._green is None or self._green.ref != self.reference:
            self._green = GreenOperator(self.grid.dims, self.reference)
        return self._green

    # -- material sweeps ------------------------------------------------------

    def evaluate_field(self, eps_np1_field, dt, want_tangent=False):
        """One material law evaluation per voxel, restarting from a_n.

        Returns (sigma_field, C_voxels or None, state list, mean substeps).
        """
        dims = self.grid.dims
        sigma = np.zeros((6,) + dims)
        sig_flat = sigma.reshape(6, -1)
        eps_n_flat = self.eps_n.reshape(6, -1)
        eps_flat = eps_np1_field.reshape(6, -1)
        C_all = np.zeros((self.grid.n_voxels, 6, 6)) if want_tangent else None
        new_state = []
        total_sub = 0
        for law, idx, a_n in zip(self.grid.materials, self.grid.voxel_index, self.grid.state):
            if len(idx) == 0:
                new_state.append(a_n.copy())
                continue
            r = evaluate_arrays(
                law,
                self.cfg,
                eps_n_flat[:, idx].T,
                a_n,
                eps_flat[:, idx].T,
                dt,
                want_tangent=want_tangent,
                threads=self.threads,
            )
            sig_flat[:, idx] = r.sigma.T
            if want_tangent:
                C_all[idx] = r.C
            new_state.append(r.a)
            total_sub += int(r.substeps.sum())
        return sigma, C_all, new_state, total_sub / self.grid.n_voxels

    # -- one loading step ------------------------------------------------------

    def solve_step(self, ebar_target, dt, free_mask=None):
        """Converge the strain field for one loading step.

        ``ebar_target`` prescribes the mean strain; components flagged in
        ``free_mask`` are traction-free instead (zero mean stress) and
        their mean strain is updated by the reference-material rule.
        """
        grid = self.grid
        green = self._green_op()
        ref = self.reference
        free = np.zeros(6, dtype=bool) if free_mask is None else np.asarray(free_mask)
        ebar = ebar_target.copy()
        ebar[free] = self.ebar_n[free]  # warm start of the free components

        eps = self.eps_n + (ebar - self.ebar_n)[:, None, None, None]
        Cref_free = ref.matrix()[np.ix_(free, free)] if np.any(free) else None

        history = []
        info = None
        sigma = None
        for it in range(1, self.max_iterations + 1):
            sigma, _, state, mean_sub = self.evaluate_field(eps, dt, want_tangent=False)
            sig_bar = sigma.mean(axis=(1, 2, 3))
            res = equilibrium_residual(sigma)
            sig_scale = max(np.sqrt(np.einsum("i,i,i->", sig_bar, SHEAR_DUP, sig_bar)), 1e-300)
            res_bc = 0.0
            if np.any(free):
                res_bc = np.linalg.norm(sig_bar[free]) / sig_scale
            history.append(max(res, res_bc))
            if res < self.tol and res_bc < self.tol:
                info = StepInfo(iterations=it, residual=history[-1], mean_substeps=mean_sub, history=history)
                self._pending_state = state
                break
            # Lippmann-Schwinger update: the new fluctuation is -Gamma0 tau
            # and the zero frequency is pinned to the (possibly updated)
            # macroscopic strain
            fluct = green.apply(sigma - apply_isotropic(ref, eps))
            if np.any(free):
                dbar = np.linalg.solve(Cref_free, -sig_bar[free])
                ebar[free] += dbar
            eps = ebar[:, None, None, None] + fluct
        if info is None:
            raise SolverError(
                f"basic scheme did not converge in {self.max_iterations} iterations "
                f"(last residual {history[-1]:.3e})",
                history,
            )
        return eps, sigma, info

    def commit_step(self, eps, ebar):
        self.eps_n = eps
        self.ebar_n = ebar
        if self._pending_state is not None:
            for arr, new in zip(self.grid.state, self._pending_state):
                arr[:] = new
            self._pending_state = None

    # -- loading path ------------------------------------------------------------


def run_loading_path(grid, path, cfg, update_reference=True, threads=1, tol=1e-5, max_iterations=5000):
    """March the loading path; returns one record dict per loading step.

    Per step: converge the basic scheme under mixed (or full strain)
    boundary conditions, commit the internal variables, then evaluate the
    consistent tangent field of the completed step to record effective
    tangent components and, when requested, to update the reference
    material for the next step.
    """
    hom = Homogenizer(grid, cfg, threads=threads, tol=tol, max_iterations=max_iterations)
    times = path.times()
    eps_targets = path.eps_xx(times)
    free = np.array([False, True, True, True, True, True]) if path.mixed_bc else np.zeros(6, dtype=bool)
    records = []
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        ebar_target = np.zeros(6)
        ebar_target[0] = eps_targets[k]
        eps, sigma, info = hom.solve_step(ebar_target, dt, free_mask=free)
        ebar = eps.mean(axis=(1, 2, 3))
        sig_bar = sigma.mean(axis=(1, 2, 3))
        C11 = C12 = float("nan")
        if update_reference:
            # consistent tangent of the completed step, from committed state
            _, C_vox, _, _ = hom.evaluate_field(eps, dt, want_tangent=True)
            C_bar = C_vox.mean(axis=0)
            C11, C12 = float(C_bar[0, 0]), float(C_bar[0, 1])
            hom.commit_step(eps, ebar)
            hom.set_reference(reference_update(C_vox))
        else:
            hom.commit_step(eps, ebar)
        records.append(
            {
                "step": k,
                "time": float(times[k]),
                "eps_xx": float(ebar[0]),
                "sig": sig_bar.copy(),
                "C11": C11,
                "C12": C12,
                "iterations": info.iterations,
                "mean_substeps": info.mean_substeps,
            }
        )
    return records
