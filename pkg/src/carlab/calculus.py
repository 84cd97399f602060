"""Difference, averaging and quadrature operators on the primal/dual meshes.

Primal functions are arrays of length N + 2 (boundary values included) or N
(interior only); dual functions have length N + 1 (indices 1/2 .. N + 1/2).
The identity checks at the bottom are exact only on uniform meshes.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh1D

__all__ = [
    "tau_plus",
    "tau_minus",
    "diff_D",
    "diff_Dbar",
    "avg_tilde",
    "avg_bar",
    "integrate_primal",
    "integrate_dual",
    "inner_primal",
    "inner_dual",
    "norm_primal",
    "norm_dual",
    "leibniz_residual",
    "product_average_residual",
    "double_average_residual",
    "ibp_residual",
    "NonUniformMeshError",
]


class NonUniformMeshError(ValueError):
    """Raised when a constant-step identity is requested on a non-uniform mesh."""


def _full(mesh: Mesh1D, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    N = mesh.n_interior
    if u.shape[-1] == N + 2:
        return u
    if u.shape[-1] == N:
        pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
        return np.pad(u, pad)
    raise ValueError(f"primal function has length {u.shape[-1]}, expected {N} or {N + 2}")


def _dual(mesh: Mesh1D, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != mesh.n_interior + 1:
        raise ValueError(f"dual function has length {g.shape[-1]}, expected {mesh.n_interior + 1}")
    return g


def tau_plus(mesh: Mesh1D, u) -> np.ndarray:
    """(tau+ u)_{i+1/2} = u_{i+1}."""
    return _full(mesh, u)[..., 1:]


def tau_minus(mesh: Mesh1D, u) -> np.ndarray:
    return _full(mesh, u)[..., :-1]


def diff_D(mesh: Mesh1D, u) -> np.ndarray:
    """(Du)_{i+1/2} = (u_{i+1} - u_i) / h_{i+1/2}; interior-only input gets zero boundary."""
    u = _full(mesh, u)
    return np.diff(u, axis=-1) / mesh.primal_steps


def diff_Dbar(mesh: Mesh1D, g) -> np.ndarray:
    """(Dbar g)_i = (g_{i+1/2} - g_{i-1/2}) / h_i on interior nodes."""
    g = _dual(mesh, g)
    return np.diff(g, axis=-1) / mesh.dual_steps


def avg_tilde(mesh: Mesh1D, u) -> np.ndarray:
    u = _full(mesh, u)
    return 0.5 * (u[..., 1:] + u[..., :-1])


def avg_bar(mesh: Mesh1D, g) -> np.ndarray:
    g = _dual(mesh, g)
    return 0.5 * (g[..., 1:] + g[..., :-1])


def _interior(mesh: Mesh1D, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] == mesh.n_interior + 2:
        return u[..., 1:-1]
    if u.shape[-1] == mesh.n_interior:
        return u
    raise ValueError(f"primal function has length {u.shape[-1]}")


def integrate_primal(mesh: Mesh1D, u) -> np.ndarray | float:
    """sum_{i=1}^{N} h_i u_i (boundary values never contribute)."""
    return _interior(mesh, u) @ mesh.dual_steps


def integrate_dual(mesh: Mesh1D, g) -> np.ndarray | float:
    return _dual(mesh, g) @ mesh.primal_steps


def inner_primal(mesh: Mesh1D, u, w):
    return integrate_primal(mesh, _interior(mesh, u) * _interior(mesh, w))


def inner_dual(mesh: Mesh1D, g, k):
    return integrate_dual(mesh, _dual(mesh, g) * _dual(mesh, k))


def norm_primal(mesh: Mesh1D, u):
    return np.sqrt(inner_primal(mesh, u, u))


def norm_dual(mesh: Mesh1D, g):
    return np.sqrt(inner_dual(mesh, g, g))


def _require_uniform(mesh: Mesh1D):
    if not mesh.is_uniform:
        raise NonUniformMeshError(
            "constant-step identity requested on a non-uniform mesh; "
            "transfer the functions to the uniform preimage first (mesh.transfer_to_uniform)"
        )


def _rel(lhs, rhs, *terms) -> float:
    scale = max(float(np.max(np.abs(t))) if np.size(t) else 0.0 for t in (lhs, rhs, *terms))
    res = float(np.max(np.abs(np.asarray(lhs) - np.asarray(rhs)))) if np.size(lhs) else 0.0
    return res / scale if scale > 0 else res


def leibniz_residual(mesh: Mesh1D, u, w) -> float:
    """Relative residual of D(uw) = Du * w~ + u~ * Dw."""
    u, w = _full(mesh, u), _full(mesh, w)
    lhs = diff_D(mesh, u * w)
    a, b = diff_D(mesh, u) * avg_tilde(mesh, w), avg_tilde(mesh, u) * diff_D(mesh, w)
    return _rel(lhs, a + b, a, b)


def product_average_residual(mesh: Mesh1D, u, w) -> float:
    """Relative residual of (uw)~ = u~ w~ + (h^2/4) Du Dw."""
    _require_uniform(mesh)
    u, w = _full(mesh, u), _full(mesh, w)
    h = mesh.primal_steps[0]
    lhs = avg_tilde(mesh, u * w)
    a = avg_tilde(mesh, u) * avg_tilde(mesh, w)
    b = 0.25 * h * h * diff_D(mesh, u) * diff_D(mesh, w)
    return _rel(lhs, a + b, a, b)


def double_average_residual(mesh: Mesh1D, u) -> float:
    """Relative residual of bar(u~) = u + (h^2/4) Dbar D u on interior nodes."""
    _require_uniform(mesh)
    u = _full(mesh, u)
    h = mesh.primal_steps[0]
    lhs = avg_bar(mesh, avg_tilde(mesh, u))
    b = 0.25 * h * h * diff_Dbar(mesh, diff_D(mesh, u))
    return _rel(lhs, u[..., 1:-1] + b, u[..., 1:-1], b)


def ibp_residual(mesh: Mesh1D, f, g, relative: bool = False) -> tuple[float, float]:
    """Residuals of the two summation-by-parts formulas.

    1. int f Dbar g = -int (Df) g + f_{N+1} g_{N+1/2} - f_0 g_{1/2}
    2. int f gbar   =  int f~ g - (h/2) f_{N+1} g_{N+1/2} - (h/2) f_0 g_{1/2}

    With ``relative`` each residual is divided by the sum of the absolute
    values of all summands entering that formula.
    """
    _require_uniform(mesh)
    f = _full(mesh, f)
    g = _dual(mesh, g)
    h = mesh.primal_steps[0]
    hd, hp = mesh.dual_steps, mesh.primal_steps
    bnd_hi = f[..., -1] * g[..., -1]
    bnd_lo = f[..., 0] * g[..., 0]
    t1 = f[..., 1:-1] * diff_Dbar(mesh, g)
    t2 = diff_D(mesh, f) * g
    lhs1 = t1 @ hd
    rhs1 = -(t2 @ hp) + bnd_hi - bnd_lo
    t3 = f[..., 1:-1] * avg_bar(mesh, g)
    t4 = avg_tilde(mesh, f) * g
    lhs2 = t3 @ hd
    rhs2 = t4 @ hp - 0.5 * h * bnd_hi - 0.5 * h * bnd_lo
    r1, r2 = np.abs(lhs1 - rhs1), np.abs(lhs2 - rhs2)
    if relative:
        s1 = np.abs(t1) @ hd + np.abs(t2) @ hp + np.abs(bnd_hi) + np.abs(bnd_lo)
        s2 = np.abs(t3) @ hd + np.abs(t4) @ hp + 0.5 * h * (np.abs(bnd_hi) + np.abs(bnd_lo))
        r1 = np.where(s1 > 0, r1 / np.where(s1 > 0, s1, 1.0), 0.0)
        r2 = np.where(s2 > 0, r2 / np.where(s2 > 0, s2, 1.0), 0.0)
    return float(np.max(r1)), float(np.max(r2))
