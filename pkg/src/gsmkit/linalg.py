"""Small dense linear algebra and Voigt tensor utilities.

Conventions used throughout the package:

* Voigt component order is (xx, yy, zz, yz, xz, xy).
* Strain-like vectors carry engineering shear (gamma = 2*eps_shear),
  stress-like vectors carry the plain tensor shear components.
* All routines accept arbitrary leading batch axes; the Voigt axis and
  matrix axes are trailing.
"""

import numpy as np

VOIGT_COMPONENTS = ("xx", "yy", "zz", "yz", "xz", "xy")

# duplication weights of the shear entries in a stress-like contraction
SHEAR_DUP = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when an LU pivot falls below the singularity threshold."""


class EigenvalueError(np.linalg.LinAlgError):
    """Raised when the eigenvalue iteration fails to converge."""


def dev(v):
    """Deviatoric part of a Voigt 6-vector (batched on leading axes)."""
    v = np.asarray(v, dtype=float)
    out = v.copy()
    p = (v[..., 0] + v[..., 1] + v[..., 2]) / 3.0
    out[..., 0] -= p
    out[..., 1] -= p
    out[..., 2] -= p
    return out


def mises_dev_norm(s):
    """Von Mises norm sqrt(3/2 dev(s):dev(s)) of a stress-like Voigt vector.

    The tensor double contraction counts each shear component twice.
    """
    d = dev(s)
    q = np.einsum("...i,i,...i->...", d, SHEAR_DUP, d)
    return np.sqrt(1.5 * q)


def lame_parameters(E, nu):
    """Lame pair (lambda, mu) from Young's modulus and Poisson's ratio."""
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def isotropic_stiffness(E, nu):
    """6x6 isotropic stiffness for engineering-shear Voigt strain vectors."""
    lam, mu = lame_parameters(E, nu)
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[0, 0] = C[1, 1] = C[2, 2] = lam + 2.0 * mu
    C[3, 3] = C[4, 4] = C[5, 5] = mu
    return C


def _as_batched(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 2:
        return A[None, :, :], True
    if A.ndim == 3:
        return A, False
    raise ValueError(f"expected (n,n) or (B,n,n) matrix, got shape {A.shape}")


def lu_factor(A, check_singular=True):
    """Batched LU factorization with partial pivoting.

    Returns ``(lu, piv, ok)`` where ``lu`` stores L (unit diagonal, below)
    and U (on and above the diagonal), ``piv[b, k]`` is the row swapped
    into position k at step k, and ``ok`` flags batch entries whose pivots
    all stayed above ``1e-14 * max|A|``. With ``check_singular`` a failed
    entry raises :class:`SingularMatrixError` instead.
    """
    lu, squeeze = _as_batched(A)
    lu = lu.copy()
    B, n, _ = lu.shape
    piv = np.zeros((B, n), dtype=np.int64)
    scale = np.max(np.abs(lu), axis=(1, 2))
    ok = scale > 0.0
    bi = np.arange(B)
    for k in range(n):
        p = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        piv[:, k] = p
        rowk = lu[bi, k].copy()
        lu[bi, k] = lu[bi, p]
        lu[bi, p] = rowk
        pivot = lu[:, k, k]
        ok &= np.abs(pivot) >= 1e-14 * scale
        if k < n - 1:
            safe = np.where(pivot == 0.0, 1.0, pivot)
            lu[:, k + 1 :, k] /= safe[:, None]
            lu[:, k + 1 :, k + 1 :] -= lu[:, k + 1 :, k : k + 1] * lu[:, k : k + 1, k + 1 :]
    if check_singular and not np.all(ok):
        raise SingularMatrixError("pivot below 1e-14 * max|A|")
    if squeeze:
        return lu[0], piv[0], bool(ok[0])
    return lu, piv, ok


def lu_solve_factored(lu, piv, b):
    """Solve with a factorization from :func:`lu_factor`.

    ``b`` may be a vector (..., n) or a block of right-hand sides
    (..., n, k) matching the batch shape of ``lu``.
    """
    squeeze_batch = lu.ndim == 2
    if squeeze_batch:
        lu = lu[None]
        piv = piv[None]
        b = np.asarray(b)[None]
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 2
    x = (b[..., None] if vec else b).copy()
    B, n, _ = lu.shape
    bi = np.arange(B)
    for k in range(n):
        p = piv[:, k]
        rowk = x[bi, k].copy()
        x[bi, k] = x[bi, p]
        x[bi, p] = rowk
    # forward substitution (L has unit diagonal)
    for k in range(1, n):
        x[:, k] -= np.einsum("bj,bjr->br", lu[:, k, :k], x[:, :k])
    # back substitution
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            x[:, k] -= np.einsum("bj,bjr->br", lu[:, k, k + 1 :], x[:, k + 1 :])
        x[:, k] /= lu[:, k, k, None]
    if vec:
        x = x[..., 0]
    if squeeze_batch:
        x = x[0]
    return x


def lu_solve(A, b):
    """Solve A x = b by partially pivoted LU (batched).

    Raises :class:`SingularMatrixError` when a pivot magnitude drops
    below ``1e-14 * max|A|``.
    """
    lu, piv, _ = lu_factor(A, check_singular=True)
    return lu_solve_factored(lu, piv, b)


def eig_real_parts(A):
    """Real parts of all eigenvalues of a small (m <= 16) dense matrix.

    Backed by LAPACK QR iteration; intended for property tests, not for
    hot paths.
    """
    A = np.asarray(A, dtype=float)
    if A.shape[-1] > 16:
        raise ValueError("eig_real_parts is limited to m <= 16")
    try:
        w = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise EigenvalueError(str(exc)) from exc
    return np.real(w)
