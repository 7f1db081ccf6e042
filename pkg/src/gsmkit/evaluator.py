"""Material law evaluation: strategy dispatch, tangents, batched sweeps.

``evaluate`` runs one request; ``evaluate_arrays`` is the struct-of-arrays
fast path over a homogeneous batch (with chunked thread-pool execution);
``evaluate_batch`` stages heterogeneous request lists into per-material
contiguous arrays, runs the chunks, and scatters results back in request
order. Batch results are bitwise identical to sequential evaluation and
independent of thread count and chunk size: chunk boundaries depend only
on the request order, and every per-voxel computation is elementwise.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gsm import LawOps, conventional_evaluate
from .odeint import (
    SCHEMES,
    MaterialStepProblem,
    StepController,
    adaptive_integrate,
    implicit_euler_step,
)

STRATEGIES = ("conventional", "automatic", "semi-automatic")
INTEGRATORS = ("implicit-euler", "ode12", "ode23", "ode23s")
ERROR_MEASURES = ("internal", "stress")


class ConfigError(ValueError):
    """Invalid strategy/integrator/law combination."""


@dataclass
class StrategyConfig:
    """Evaluation strategy, integrator and error-control selection.

    The Rosenbrock integrator needs the Jacobian of an expression that
    already contains first derivatives of the potentials, which exceeds
    the built-in second-order AD; ode23s therefore requires hand-coded
    partials and rejects the fully automatic strategy outright.
    """

    strategy: str = "automatic"
    integrator: str = "ode23"
    error_measure: str = "internal"
    atol: float = 1e-6
    rtol: float = 1e-3
    newton_mode: str | None = None
    max_substeps: int = 10000
    chunk_size: int = 4096
    record_steps: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.error_measure not in ERROR_MEASURES:
            raise ConfigError(f"unknown error measure {self.error_measure!r}")
        if self.integrator == "ode23s" and self.strategy == "automatic":
            raise ConfigError("ode23s needs hand-coded partials; use the semi-automatic strategy")
        if self.strategy == "conventional" and self.integrator != "implicit-euler":
            raise ConfigError("the conventional route is a single implicit Euler step")
        if self.newton_mode is not None and self.newton_mode not in ERROR_MEASURES:
            raise ConfigError(f"unknown newton mode {self.newton_mode!r}")

    @property
    def resolved_newton_mode(self):
        return self.newton_mode if self.newton_mode is not None else self.error_measure

    def controller(self):
        return StepController(atol=self.atol, rtol=self.rtol, max_substeps=self.max_substeps)


@dataclass
class EvalRequest:
    """Inputs of one material law evaluation at a quadrature point."""

    eps_n: np.ndarray
    a_n: np.ndarray
    eps_np1: np.ndarray
    dt: float
    want_tangent: bool = False

    def __post_init__(self):
        self.eps_n = np.asarray(self.eps_n, dtype=float)
        self.a_n = np.asarray(self.a_n, dtype=float)
        self.eps_np1 = np.asarray(self.eps_np1, dtype=float)
        if self.dt < 0.0:
            raise ValueError("dt must be >= 0")


@dataclass
class EvalResult:
    sigma: np.ndarray
    a: np.ndarray
    C: np.ndarray | None
    substeps: int
    rejected: int
    steps: list | None = None


@dataclass
class _ArrayResult:
    sigma: np.ndarray
    a: np.ndarray
    C: np.ndarray | None
    substeps: np.ndarray
    rejected: np.ndarray
    steps: list | None


def _validate_for_law(law, cfg):
    if cfg.strategy == "conventional" and not law.has_conventional:
        raise ConfigError("law has no conventional evaluation routine")
    if cfg.strategy == "semi-automatic" and not law.has_hand_partials:
        raise ConfigError("law has no hand-coded partials")
    if cfg.integrator == "ode23s" and not law.has_hand_partials:
        raise ConfigError("ode23s requires hand-coded partials")


def _evaluate_chunk(law, cfg, eps_n, a_n, eps_np1, dt, want_tangent):
    """Evaluate one homogeneous contiguous chunk (no threading)."""
    B = eps_np1.shape[0]
    m = law.m
    ops_strategy = "semi-automatic" if cfg.strategy == "conventional" else cfg.strategy
    ops = LawOps(law, ops_strategy)
    substeps = np.ones(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    steps = [[(float(t), True)] for t in dt] if cfg.record_steps else None

    if m == 0:
        a = a_n.copy()
        if want_tangent:
            sigma, C = ops.stress_and_tangent(eps_np1, a, np.zeros((B, 0, 6)))
        else:
            sigma, C = ops.stress(eps_np1, a), None
        return _ArrayResult(sigma, a, C, substeps, rejected, steps)

    frozen = dt == 0.0
    if np.all(frozen):
        a = a_n.copy()
        if want_tangent:
            sigma = ops.stress(eps_np1, a)
            C = ops.elastic_tangent(eps_np1, a)
        else:
            sigma, C = ops.stress(eps_np1, a), None
        return _ArrayResult(sigma, a, C, substeps, rejected, steps)
    if np.any(frozen):
        # split the rare mixed case and recombine
        izero = np.flatnonzero(frozen)
        ipos = np.flatnonzero(~frozen)
        rz = _evaluate_chunk(law, cfg, eps_n[izero], a_n[izero], eps_np1[izero], dt[izero], want_tangent)
        rp = _evaluate_chunk(law, cfg, eps_n[ipos], a_n[ipos], eps_np1[ipos], dt[ipos], want_tangent)
        sigma = np.zeros((B, 6))
        a = np.zeros((B, m))
        C = np.zeros((B, 6, 6)) if want_tangent else None
        for ind, part in ((izero, rz), (ipos, rp)):
            sigma[ind] = part.sigma
            a[ind] = part.a
            if want_tangent:
                C[ind] = part.C
            substeps[ind] = part.substeps
            rejected[ind] = part.rejected
            if cfg.record_steps:
                for pos, b in enumerate(ind):
                    steps[b] = part.steps[pos]
        return _ArrayResult(sigma, a, C, substeps, rejected, steps)

    if cfg.strategy == "conventional":
        sigma, a, C = conventional_evaluate(law, eps_n, a_n, eps_np1, dt, want_tangent)
        return _ArrayResult(sigma, a, C, substeps, rejected, steps)

    problem = MaterialStepProblem(ops, eps_n, eps_np1, dt)
    if cfg.integrator == "implicit-euler":
        a, da = implicit_euler_step(
            problem, a_n, dt, want_tangent=want_tangent, newton_mode=cfg.resolved_newton_mode
        )
    else:
        spec = SCHEMES[cfg.integrator]()
        res = adaptive_integrate(
            spec,
            problem,
            a_n,
            coupled=want_tangent,
            error_measure=cfg.error_measure,
            controller=cfg.controller(),
            newton_mode=cfg.resolved_newton_mode,
            record_steps=cfg.record_steps,
        )
        a, da = res.a, res.da
        substeps = res.substeps
        rejected = res.rejected
        if cfg.record_steps:
            steps = res.steps
    a = law.clamp_state(a)
    if want_tangent:
        sigma, C = ops.stress_and_tangent(eps_np1, a, da)
    else:
        sigma, C = ops.stress(eps_np1, a), None
    return _ArrayResult(sigma, a, C, substeps, rejected, steps)


def evaluate_arrays(law, cfg, eps_n, a_n, eps_np1, dt, want_tangent=False, threads=1):
    """Struct-of-arrays evaluation of a homogeneous batch.

    Work is cut into ``cfg.chunk_size`` chunks processed by a thread
    pool; results land in preallocated disjoint slices, so the output is
    independent of the thread count.
    """
    _validate_for_law(law, cfg)
    eps_n = np.ascontiguousarray(eps_n, dtype=float)
    a_n = np.ascontiguousarray(a_n, dtype=float)
    eps_np1 = np.ascontiguousarray(eps_np1, dtype=float)
    B = eps_np1.shape[0]
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (B,)).copy()
    m = law.m

    sigma = np.zeros((B, 6))
    a_out = np.zeros((B, m))
    C = np.zeros((B, 6, 6)) if want_tangent else None
    substeps = np.zeros(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    steps = [None] * B if cfg.record_steps else None

    spans = [(lo, min(lo + cfg.chunk_size, B)) for lo in range(0, B, cfg.chunk_size)]

    def run(span):
        lo, hi = span
        r = _evaluate_chunk(law, cfg, eps_n[lo:hi], a_n[lo:hi], eps_np1[lo:hi], dt[lo:hi], want_tangent)
        sigma[lo:hi] = r.sigma
        a_out[lo:hi] = r.a
        if want_tangent:
            C[lo:hi] = r.C
        substeps[lo:hi] = r.substeps
        rejected[lo:hi] = r.rejected
        if cfg.record_steps:
            steps[lo:hi] = r.steps

    if threads <= 1 or len(spans) == 1:
        for span in spans:
            run(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, spans))
    return _ArrayResult(sigma, a_out, C, substeps, rejected, steps)


def evaluate(law, cfg, req):
    """Evaluate a single request; see :class:`EvalRequest`."""
    r = evaluate_arrays(
        law,
        cfg,
        req.eps_n[None],
        req.a_n[None] if law.m else np.zeros((1, 0)),
        req.eps_np1[None],
        np.array([req.dt]),
        want_tangent=req.want_tangent,
    )
    return EvalResult(
        sigma=r.sigma[0],
        a=r.a[0],
        C=None if r.C is None else r.C[0],
        substeps=int(r.substeps[0]),
        rejected=int(r.rejected[0]),
        steps=r.steps[0] if r.steps is not None else None,
    )


def evaluate_batch(laws, cfg, requests, threads=1, material_ids=None):
    """Evaluate a request list, grouped by material, chunked, threaded.

    ``laws`` is a single law (applied to all requests) or a sequence
    indexed by ``material_ids``. Returns ``(results, errors)`` where
    ``errors`` maps request indices to error strings; failed requests
    leave ``None`` in the results list, everything else completes.
    """
    n = len(requests)
    results = [None] * n
    errors = {}
    if n == 0:
        return results, errors
    if material_ids is None:
        groups = {0: np.arange(n)}
        law_of = {0: laws}
    else:
        material_ids = np.asarray(material_ids)
        groups = {int(mid): np.flatnonzero(material_ids == mid) for mid in np.unique(material_ids)}
        law_of = {int(mid): laws[int(mid)] for mid in groups}

    for mid, idx in groups.items():
        law = law_of[mid]
        m = law.m
        # contiguous struct-of-arrays staging of the group
        eps_n = np.stack([requests[i].eps_n for i in idx])
        a_n = np.stack([requests[i].a_n for i in idx]) if m else np.zeros((len(idx), 0))
        eps_np1 = np.stack([requests[i].eps_np1 for i in idx])
        dt = np.array([requests[i].dt for i in idx])
        want = bool(requests[idx[0]].want_tangent)
        if any(bool(requests[i].want_tangent) != want for i in idx):
            raise ConfigError("mixed want_tangent flags within one material group")
        try:
            r = evaluate_arrays(law, cfg, eps_n, a_n, eps_np1, dt, want, threads)
        except Exception:
            # isolate per-request failures on the slow path
            for pos, i in enumerate(idx):
                try:
                    results[i] = evaluate(law, cfg, requests[i])
                except Exception as exc:  # noqa: BLE001 - reported per index
                    errors[int(i)] = f"{type(exc).__name__}: {exc}"
            continue
        for pos, i in enumerate(idx):
            results[i] = EvalResult(
                sigma=r.sigma[pos],
                a=r.a[pos],
                C=None if r.C is None else r.C[pos],
                substeps=int(r.substeps[pos]),
                rejected=int(r.rejected[pos]),
                steps=r.steps[pos] if r.steps is not None else None,
            )
    return results, errors
