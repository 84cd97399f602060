"""The semi-discrete transmission operator A = -Dbar(c_d D .) and its time evolution.

Time stepping uses piecewise-constant (per step) sources and potentials.  The
backward solver is the exact discrete adjoint of the forward one in the
h_i-weighted inner product, so for every step k

    (y_{k+1}, q_{k+1}) - (y_k, q_k) = dt (f_k, p_k)

where p_k is the adjoint value attached to step k (the Crank-Nicolson
half-step value, or q_k for implicit Euler).
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal, lu_factor, lu_solve
from scipy.linalg.lapack import dgttrf, dgttrs

from .calculus import diff_D, diff_Dbar
from .mesh import Mesh1D

__all__ = [
    "Coefficient",
    "SemiDiscreteOperator",
    "Trajectory",
    "AdjointTrajectory",
    "JumpMismatchError",
    "SingularSystemError",
    "OverflowGuardError",
    "assemble",
    "flux_jump_residual",
    "solve_forward",
    "solve_adjoint",
    "interval_potential",
    "transmission_residual_v",
    "smooth_trajectory",
    "SCHEMES",
]

SCHEMES = ("cn", "ie")
OVERFLOW_GUARD = 1e12


class JumpMismatchError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


class OverflowGuardError(RuntimeError):
    def __init__(self, step: int, t: float, value: float):
        super().__init__(f"|y|_inf = {value:.3e} exceeded the overflow guard at step {step} (t={t:.6g})")
        self.step, self.t, self.value = step, t, value


_ALLOWED_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh,
    "arctan": np.arctan, "pi": np.pi, "e": np.e,
}


def parse_expression(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile an expression in x (numpy syntax, whitelisted names only)."""
    tree = ast.parse(text, mode="eval")
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id != "x" and node.id not in _ALLOWED_FUNCS:
            raise ValueError(f"unknown name {node.id!r} in expression {text!r}")
        if isinstance(node, (ast.Attribute, ast.Subscript, ast.Lambda)):
            raise ValueError(f"unsupported construct in expression {text!r}")
    code = compile(tree, "<coefficient>", "eval")
    env = {"__builtins__": {}, **_ALLOWED_FUNCS}

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(eval(code, env, {"x": x}), dtype=float), x.shape).copy()

    return f


@dataclass(frozen=True)
class Coefficient:
    """Diffusion coefficient c1 on [0, a], c2 on [a, L], both positive."""

    c1: Callable
    c2: Callable
    a: float
    L: float = 1.0
    label: str = ""
    c_min: float = field(init=False)
    c_max: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.a < self.L:
            raise ValueError("jump must lie inside the domain")
        xl = np.linspace(0.0, self.a, 2001)
        xr = np.linspace(self.a, self.L, 2001)
        vals = np.concatenate([self.c1(xl), self.c2(xr)])
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficient is not finite on the domain")
        object.__setattr__(self, "c_min", float(vals.min()))
        object.__setattr__(self, "c_max", float(vals.max()))
        if self.c_min <= 0:
            raise ValueError(f"coefficient must be positive, min sampled value {self.c_min}")

    @classmethod
    def piecewise_constant(cls, c_left: float, c_right: float, a: float, L: float = 1.0):
        cl, cr = float(c_left), float(c_right)
        return cls(lambda x: np.full(np.shape(x), cl), lambda x: np.full(np.shape(x), cr),
                   float(a), L, label=f"({cl:g},{cr:g})")

    @classmethod
    def from_expressions(cls, c1: str, c2: str, a: float, L: float = 1.0):
        return cls(parse_expression(c1), parse_expression(c2), float(a), L, label=f"({c1};{c2})")

    @classmethod
    def from_spec(cls, c1, c2, a: float, L: float = 1.0):
        """Numbers give a piecewise-constant coefficient, strings are expressions in x."""
        if isinstance(c1, str) or isinstance(c2, str):
            return cls.from_expressions(str(c1), str(c2), a, L)
        return cls.piecewise_constant(c1, c2, a, L)

    @property
    def c_minus(self) -> float:
        return float(self.c1(np.array([self.a]))[0])

    @property
    def c_plus(self) -> float:
        return float(self.c2(np.array([self.a]))[0])

    def __call__(self, x, side: str = "left"):
        x = np.asarray(x, dtype=float)
        left = (x < self.a) | ((x == self.a) & (side == "left"))
        return np.where(left, self.c1(x), self.c2(x))

    def on_dual(self, mesh: Mesh1D) -> np.ndarray:
        xd = mesh.dual_points
        right = mesh.dual_side() > 0
        return np.where(right, self.c2(xd), self.c1(xd))


@dataclass(frozen=True)
class SemiDiscreteOperator:
    mesh: Mesh1D
    coefficient: Coefficient
    c_dual: np.ndarray
    lower: np.ndarray  # A[i+1, i]
    diag: np.ndarray
    upper: np.ndarray  # A[i, i+1]

    @property
    def size(self) -> int:
        return self.diag.size

    def apply(self, u) -> np.ndarray:
        """A u on interior nodes; u may include (zero) boundary values."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1] == self.size + 2:
            return -diff_Dbar(self.mesh, self.c_dual * diff_D(self.mesh, u))
        out = self.diag * u
        out[..., :-1] += self.upper * u[..., 1:]
        out[..., 1:] += self.lower * u[..., :-1]
        return out

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)

    def symmetric_bands(self):
        """Bands of H^{1/2} A H^{-1/2}, H = diag(h_i)."""
        hd = self.mesh.dual_steps
        return self.diag.copy(), self.upper * np.sqrt(hd[:-1] / hd[1:])

    def eigen(self, select=None):
        """Eigenvalues (ascending) and H-orthonormal eigenvectors of A."""
        d, e = self.symmetric_bands()
        if select is None:
            w, v = eigh_tridiagonal(d, e)
        else:
            w, v = eigh_tridiagonal(d, e, select="i", select_range=select)
        return w, v / np.sqrt(self.mesh.dual_steps)[:, None]

    def eigenvalues(self) -> np.ndarray:
        d, e = self.symmetric_bands()
        return eigh_tridiagonal(d, e, eigvals_only=True)


def assemble(mesh: Mesh1D, c: Coefficient) -> SemiDiscreteOperator:
    if not math.isclose(mesh.a, c.a, rel_tol=1e-12, abs_tol=1e-14):
        raise JumpMismatchError(f"mesh jump node at {mesh.a!r} but coefficient jumps at {c.a!r}")
    if not math.isclose(mesh.L, c.L, rel_tol=1e-12):
        raise JumpMismatchError("mesh and coefficient domains differ")
    cd = c.on_dual(mesh)
    hp, hd = mesh.primal_steps, mesh.dual_steps
    w = cd / hp  # c_{i+1/2}/h_{i+1/2}, i = 0..N
    diag = (w[1:] + w[:-1]) / hd
    upper = -w[1:-1] / hd[:-1]
    lower = -w[1:-1] / hd[1:]
    cd.setflags(write=False)
    return SemiDiscreteOperator(mesh, c, cd, lower, diag, upper)


def flux_jump_residual(u, op: SemiDiscreteOperator) -> float:
    """(c_d Du)_{k+1/2} - (c_d Du)_{k-1/2} - h_k (Dbar(c_d Du))_k at the jump node k."""
    mesh = op.mesh
    flux = op.c_dual * diff_D(mesh, u)
    k = mesh.jump_index
    lhs = flux[k] - flux[k - 1]
    rhs = mesh.dual_steps[k - 1] * diff_Dbar(mesh, flux)[k - 1]
    return float(lhs - rhs)


def _pad(u: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
    return np.pad(u, pad)


@dataclass
class Trajectory:
    """States y(t_k) with zero Dirichlet values; controls are per step."""

    mesh: Mesh1D
    t: np.ndarray
    states: np.ndarray  # (K+1, N+2)
    control: np.ndarray | None = None  # (K, N) interior, per step
    scheme: str = "cn"

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def interior(self) -> np.ndarray:
        return self.states[:, 1:-1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def header(self) -> list[str]:
        return ["t"] + [f"x_{i}" for i in range(self.states.shape[1])]

    def to_csv(self, path) -> None:
        data = np.column_stack([self.t, self.states])
        np.savetxt(path, data, delimiter=",", header=",".join(self.header()), comments="", fmt="%.17g")

    def dump_binary(self, path) -> None:
        """Float64 little-endian, column-major (t column first, then each node)."""
        data = np.column_stack([self.t, self.states]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(data.tobytes(order="F"))


@dataclass
class AdjointTrajectory(Trajectory):
    # p[k] is the adjoint value paired with step k in the duality identity
    observation: np.ndarray | None = None  # (K, N)


def interval_potential(potential, K: int, N: int, scheme: str) -> np.ndarray | None:
    """Per-step potential of shape (K, N) (or None for zero).

    Accepts a scalar, an (N,) array, a per-step (K, N) array, or node values
    (K+1, N), which are averaged (cn) or taken at t_{k+1} (ie).
    """
    if potential is None:
        return None
    p = np.asarray(potential, dtype=float)
    if p.ndim == 0:
        return None if p == 0 else np.full((K, N), float(p))
    if p.shape == (N,):
        return np.broadcast_to(p, (K, N))
    if p.shape == (K, N):
        return p
    if p.shape == (K + 1, N):
        return 0.5 * (p[1:] + p[:-1]) if scheme == "cn" else p[1:]
    raise ValueError(f"potential of shape {p.shape} does not fit K={K}, N={N}")


class _Stepper:
    """Factorised (I + w dt (A + diag a)) for both schemes, cached per potential row."""

    def __init__(self, op: SemiDiscreteOperator, dt: float, scheme: str):
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.op, self.dt, self.scheme = op, dt, scheme
        self.w = 0.5 * dt if scheme == "cn" else dt
        self._key = None
        self._lu = None

    def _factor(self, a_row):
        key = None if a_row is None else a_row.tobytes()
        if self._lu is not None and key == self._key:
            return self._lu
        op, w = self.op, self.w
        d = 1.0 + w * (op.diag if a_row is None else op.diag + a_row)
        dl, du = w * op.lower, w * op.upper
        if d.size < 3:
            # the LAPACK wrapper needs n >= 3 (second superdiagonal workspace)
            M = np.diag(d) + np.diag(du, 1) + np.diag(dl, -1)
            if np.any(np.abs(np.diag(np.linalg.qr(M)[1])) < 1e-300):
                raise SingularSystemError("step matrix is singular")
            lu = ("dense", lu_factor(M))
        else:
            lu = dgttrf(dl, d, du)
            if lu[-1] != 0 or not np.all(np.isfinite(lu[1])) or np.any(lu[1] == 0):
                raise SingularSystemError("tridiagonal step matrix is singular")
        self._key, self._lu = key, lu
        return lu

    def solve(self, a_row, rhs):
        lu = self._factor(a_row)
        if isinstance(lu[0], str):
            return lu_solve(lu[1], rhs)
        dl, d, du, du2, ipiv, _ = lu
        x, info = dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0:
            raise SingularSystemError(f"dgttrs failed with info={info}")
        return x

    def explicit(self, a_row, u):
        """(I - w (A + a)) u for cn; identity for ie."""
        if self.scheme == "ie":
            return u.copy()
        Au = self.op.apply(u)
        if a_row is not None:
            Au = Au + a_row * u
        return u - self.w * Au


def _time_grid(T: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one time step")
    return np.linspace(0.0, T, steps + 1)


def solve_forward(op: SemiDiscreteOperator, y0, T: float, steps: int, *, source=None,
                  potential=None, g: Callable | None = None, G: Callable | None = None,
                  scheme: str = "cn", picard: int = 1,
                  guard: float = OVERFLOW_GUARD) -> Trajectory:
    """y' + A y + a y + G(y) = f on [0, T] with y(0) = y0 and zero Dirichlet data.

    ``source`` is per step, shape (K, N) (interior).  The nonlinearity is given
    either as g (G(y) = y g(y)) or as G directly (then g(y) = G(y)/y with
    g(0) taken as 0).  It is frozen as a potential over each step: the first
    evaluation lags at y_k, further Picard passes use the step average.
    """
    N = op.size
    t = _time_grid(T, steps)
    dt = float(t[1] - t[0])
    y0 = np.asarray(y0, dtype=float)
    y = (y0[1:-1] if y0.shape[-1] == N + 2 else y0).copy()
    if y.shape != (N,):
        raise ValueError(f"initial state has shape {y0.shape}, expected ({N},) or ({N + 2},)")
    if source is not None:
        source = np.asarray(source, dtype=float)
        if source.shape != (steps, N):
            raise ValueError(f"source must have shape ({steps}, {N})")
    if not 1 <= picard <= 5:
        raise ValueError("picard iterations must be between 1 and 5")
    if g is None and G is not None:
        def g(v, _G=G):
            with np.errstate(divide="ignore", invalid="ignore"):
                out = _G(v) / v
            return np.where(v == 0, 0.0, out)
    pot = interval_potential(potential, steps, N, scheme)
    stepper = _Stepper(op, dt, scheme)
    out = np.zeros((steps + 1, N + 2))
    out[0, 1:-1] = y
    for k in range(steps):
        base = None if pot is None else pot[k]
        f = 0.0 if source is None else dt * source[k]
        if g is None:
            y_new = stepper.solve(base, stepper.explicit(base, y) + f)
        else:
            ref = y
            for _ in range(picard):
                a_row = g(ref) if base is None else base + g(ref)
                y_new = stepper.solve(a_row, stepper.explicit(a_row, y) + f)
                ref = 0.5 * (y + y_new) if scheme == "cn" else y_new
        peak = float(np.max(np.abs(y_new))) if N else 0.0
        if not peak <= guard:
            raise OverflowGuardError(k + 1, float(t[k + 1]), peak)
        y = y_new
        out[k + 1, 1:-1] = y
    return Trajectory(op.mesh, t, out, None if source is None else source.copy(), scheme)


def solve_adjoint(op: SemiDiscreteOperator, qT, T: float, steps: int, *, potential=None,
                  scheme: str = "cn", guard: float = OVERFLOW_GUARD) -> AdjointTrajectory:
    """Backward problem -q' + A q + a q = 0, q(T) = qT, discretised as the exact adjoint
    of solve_forward with the same scheme, step count and per-step potential."""
    N = op.size
    t = _time_grid(T, steps)
    dt = float(t[1] - t[0])
    qT = np.asarray(qT, dtype=float)
    q = (qT[1:-1] if qT.shape[-1] == N + 2 else qT).copy()
    if q.shape != (N,):
        raise ValueError(f"final state has shape {qT.shape}, expected ({N},) or ({N + 2},)")
    pot = interval_potential(potential, steps, N, scheme)
    stepper = _Stepper(op, dt, scheme)
    out = np.zeros((steps + 1, N + 2))
    obs = np.zeros((steps, N))
    out[-1, 1:-1] = q
    for k in range(steps - 1, -1, -1):
        a_row = None if pot is None else pot[k]
        # A + a is self-adjoint in the h-weighted product, so the same factor serves
        z = stepper.solve(a_row, q)
        q = 2.0 * z - q if scheme == "cn" else z
        peak = float(np.max(np.abs(q))) if N else 0.0
        if not peak <= guard:
            raise OverflowGuardError(k, float(t[k]), peak)
        obs[k] = z
        out[k, 1:-1] = q
    return AdjointTrajectory(op.mesh, t, out, None, scheme, observation=obs)


def smooth_trajectory(mesh: Mesh1D, t=(0.0, 0.5, 1.0)) -> Trajectory:
    """Default smooth test trajectory u(t, x) = (1 + t) sin(pi x / L) sampled on the nodes."""
    t = np.asarray(t, dtype=float)
    states = np.outer(1.0 + t, np.sin(np.pi * mesh.nodes / mesh.L))
    states[:, [0, -1]] = 0.0
    return Trajectory(mesh, t, states)


@dataclass(frozen=True)
class TransmissionReport:
    t: np.ndarray
    residual: np.ndarray
    normalized: np.ndarray

    @property
    def max_normalized(self) -> float:
        return float(np.max(self.normalized)) if self.normalized.size else 0.0


def transmission_residual_v(traj: Trajectory, op: SemiDiscreteOperator, psi, params,
                            times=None) -> TransmissionReport:
    """Residual of the discrete flux relation for v = r u at the jump node.

    R = [c_d D v]_a - lambda s [c e^{lambda psi} psi']_a v_k - h_k (r f)_k with
    f = Dbar(c_d D u), normalised by s(|v_k| + |c_d D v|_{k-1/2}/s + h_k |r f|_k).
    Weights are rescaled by a common factor per time (the ratio is invariant).
    """
    from .weights import phi_of, theta

    mesh = op.mesh
    k = mesh.jump_index
    c = op.coefficient
    idx = np.arange(traj.t.size) if times is None else np.asarray(times)
    x = mesh.nodes
    ph = phi_of(psi.psi(x), params.lam, params.K)
    ph[k] = phi_of(psi.psi(np.array([mesh.a]), side="left"), params.lam, params.K)[0]
    expo = math.exp(params.lam * float(psi.psi(np.array([mesh.a]))[0]))
    bl, br = psi.slopes_at_jump
    jump_coef = params.lam * expo * (c.c_plus * br - c.c_minus * bl)
    hk = mesh.dual_steps[k - 1]
    res, nrm = [], []
    for j in idx:
        s = params.tau * float(theta(traj.t[j], params.T, params.alpha))
        logr = s * ph
        r = np.exp(logr - logr.max())
        u = traj.states[j]
        v = r * u
        f = diff_Dbar(mesh, op.c_dual * diff_D(mesh, u))
        flux_v = op.c_dual * diff_D(mesh, v)
        rf = r[k] * f[k - 1]
        R = (flux_v[k] - flux_v[k - 1]) - s * jump_coef * v[k] - hk * rf
        scale = s * (abs(v[k]) + abs(flux_v[k - 1]) / s + hk * abs(rf))
        res.append(R)
        nrm.append(abs(R) / scale if scale > 0 else 0.0)
    return TransmissionReport(traj.t[idx], np.array(res), np.array(nrm))
