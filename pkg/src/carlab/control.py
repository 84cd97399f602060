"""Penalised HUM controls, observability and decay studies, semilinear fixed point."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.stats import linregress

from .mesh import Mesh1D
from .operator import (
    OverflowGuardError,
    SemiDiscreteOperator,
    Trajectory,
    interval_potential,
    solve_adjoint,
    solve_forward,
)

__all__ = [
    "ControlProblem",
    "ControlResult",
    "CGFailure",
    "FixedPointFailure",
    "auto_eps",
    "hum_control",
    "dense_gramian",
    "dense_hum",
    "ObservabilityReport",
    "observability_samples",
    "random_potential",
    "observability_study",
    "DecayReport",
    "decay_study",
    "SemilinearSpec",
    "semilinear_control",
    "RESULT_FIELDS",
]

RESULT_FIELDS = ["h", "eps", "norm_y0", "norm_v", "norm_yT", "cg_iters", "converged"]

# eps(h) = exp(-C1 / h) with eps(1/60) = 1e-4
AUTO_C1 = math.log(1e4) / 60.0


def auto_eps(h: float, C1: float = AUTO_C1) -> float:
    return math.exp(-C1 / h)


class CGFailure(RuntimeError):
    def __init__(self, message, history):
        super().__init__(f"{message}; last relative residuals: {history[-5:]}")
        self.history = history


class FixedPointFailure(RuntimeError):
    def __init__(self, message, history):
        super().__init__(f"{message}; last increments: {history[-5:]}")
        self.history = history


@dataclass(frozen=True)
class ControlProblem:
    """Controlled system y' + A y + a y = 1_omega v on (0, T), discretised with `steps` steps."""

    op: SemiDiscreteOperator
    omega: tuple
    T: float = 1.0
    steps: int = 1000
    scheme: str = "cn"
    potential: np.ndarray | None = None  # per step (K, N), or anything interval_potential accepts

    def __post_init__(self):
        lo, hi = self.omega
        if not (0.0 <= lo < hi <= self.mesh.L):
            raise ValueError(f"omega={self.omega} must be a non-empty subinterval of (0, L)")
        if not self.mask.any():
            raise ValueError(f"omega={self.omega} contains no interior node")
        pot = interval_potential(self.potential, self.steps, self.op.size, self.scheme)
        object.__setattr__(self, "potential", pot)

    @property
    def mesh(self) -> Mesh1D:
        return self.op.mesh

    @property
    def mask(self) -> np.ndarray:
        return self.mesh.node_mask(self.omega)

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def weights(self) -> np.ndarray:
        return self.mesh.dual_steps

    def inner(self, u, w) -> float:
        return float(np.sum(self.weights * u * w))

    def norm(self, u) -> float:
        return math.sqrt(max(self.inner(u, u), 0.0))

    def adjoint(self, qT):
        return solve_adjoint(self.op, qT, self.T, self.steps, potential=self.potential, scheme=self.scheme)

    def forward(self, y0, v=None, **kw) -> Trajectory:
        return solve_forward(self.op, y0, self.T, self.steps, source=v, potential=self.potential,
                             scheme=self.scheme, **kw)

    def control_from(self, qT) -> np.ndarray:
        """v_k = 1_omega p_k from the adjoint started at qT."""
        return self.adjoint(qT).observation * self.mask

    def gramian(self, qT) -> np.ndarray:
        v = self.control_from(qT)
        return self.forward(np.zeros(self.op.size), v).final[1:-1]

    def free_final(self, y0) -> np.ndarray:
        return self.forward(y0).final[1:-1]

    def observation_norm2(self, adj) -> float:
        """sum_k dt |1_omega p_k|^2 (the observation term matched to the duality identity)."""
        p = adj.observation * self.mask
        return float(self.dt * np.sum((p * p) @ self.weights))

    def control_norm(self, v) -> float:
        return math.sqrt(float(self.dt * np.sum((v * v) @ self.weights)))


@dataclass
class ControlResult:
    v: np.ndarray  # (K, N) per step, zero outside omega
    trajectory: Trajectory
    qT: np.ndarray
    eps: float
    norm_v: float
    norm_yT: float
    norm_y0: float
    cg_iters: int
    grad_rel: float  # |(L + eps) qT + Phi y0| / |Phi y0|
    converged: bool
    J: float
    residual_history: list = field(default_factory=list)  # CG update norms, then final gradient

    @property
    def certificate(self) -> bool:
        """|y(T)|^2 <= 2 eps |J*| (J* is negative at the optimum)."""
        return self.norm_yT**2 <= 2.0 * self.eps * abs(self.J) * (1 + 1e-8) + 1e-300

    @property
    def h(self) -> float:
        return self.trajectory.mesh.h

    def row(self) -> dict:
        return {"h": self.h, "eps": self.eps, "norm_y0": self.norm_y0, "norm_v": self.norm_v,
                "norm_yT": self.norm_yT, "cg_iters": self.cg_iters, "converged": int(self.converged)}


def _functional(prob: ControlProblem, qT, y0) -> float:
    """J(qT) = 1/2 sum dt |1_omega p|^2 + eps/2 |qT|^2 + (y0, q(0)) without the eps part."""
    adj = prob.adjoint(qT)
    return 0.5 * prob.observation_norm2(adj) + prob.inner(y0, adj.states[0, 1:-1])


def hum_control(prob: ControlProblem, y0, eps="auto", *, rtol: float = 1e-10,
                maxiter: int | None = None) -> ControlResult:
    """Minimise J_eps(qT) = 1/2 |q|^2_{omega x (0,T)} + eps/2 |qT|^2 + (y0, q(0)).

    The optimality system (L + eps) qT = -Phi y0 is solved by conjugate gradients in
    the h-weighted inner product (variables scaled by H^{1/2}); L is the Gramian.
    """
    N = prob.op.size
    y0 = np.asarray(y0, dtype=float)
    y0 = y0[1:-1] if y0.shape[-1] == N + 2 else y0
    h = prob.mesh.h
    eps = auto_eps(h) if eps == "auto" else float(eps)
    if not eps > 0:
        raise ValueError("eps must be positive")
    maxiter = 10 * N if maxiter is None else maxiter
    sq = np.sqrt(prob.weights)
    b = prob.free_final(y0)
    norm_b = prob.norm(b)
    history: list = []
    iters = 0
    if norm_b == 0.0:
        qT = np.zeros(N)
        grad_rel = 0.0
        converged = True
    else:
        def mv(w):
            q = w / sq
            return sq * (prob.gramian(q) + eps * q)

        A = LinearOperator((N, N), matvec=mv, dtype=float)
        rhs = -sq * b

        prev = np.zeros(N)

        def cb(xk):
            # scipy does not expose the residual; keep the size of each update instead
            nonlocal iters, prev
            iters += 1
            history.append(float(np.linalg.norm(xk - prev)))
            prev = xk.copy()

        w, info = cg(A, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, callback=cb)
        qT = w / sq
        grad = prob.gramian(qT) + eps * qT + b
        grad_rel = prob.norm(grad) / norm_b
        history.append(grad_rel)
        converged = info == 0
        if info < 0 or not np.all(np.isfinite(qT)):
            raise CGFailure("conjugate gradient broke down", history)
        # info > 0: iteration cap hit; accept only if the true residual is still tiny
        if info > 0 and grad_rel > 10 * rtol:
            raise CGFailure(f"no convergence in {maxiter} iterations (rel. gradient {grad_rel:.3e})", history)
    v = prob.control_from(qT)
    traj = prob.forward(y0, v)
    J = _functional(prob, qT, y0) + 0.5 * eps * prob.inner(qT, qT)
    return ControlResult(
        v=v, trajectory=traj, qT=qT, eps=eps, norm_v=prob.control_norm(v),
        norm_yT=prob.norm(traj.final[1:-1]), norm_y0=prob.norm(y0), cg_iters=iters,
        grad_rel=grad_rel, converged=converged, J=J, residual_history=history,
    )


def dense_gramian(prob: ControlProblem) -> np.ndarray:
    """Matrix of L, one column per unit vector."""
    N = prob.op.size
    return np.column_stack([prob.gramian(e) for e in np.eye(N)])


def dense_hum(prob: ControlProblem, y0, eps: float) -> np.ndarray:
    """Minimiser of the assembled quadratic form 1/2 q.H(L+eps)q + q.H Phi y0 by a direct solve."""
    N = prob.op.size
    y0 = np.asarray(y0, dtype=float)
    y0 = y0[1:-1] if y0.shape[-1] == N + 2 else y0
    H = np.diag(prob.weights)
    Lm = dense_gramian(prob)
    Phi = np.column_stack([prob.free_final(e) for e in np.eye(N)])
    Q = H @ (Lm + eps * np.eye(N))
    Q = 0.5 * (Q + Q.T)
    return np.linalg.solve(Q, -H @ Phi @ y0)


def random_potential(x, seed: int = 0, amplitude: float = 1.0, modes: int = 4) -> np.ndarray:
    """Seeded smooth potential sum_j b_j sin(j pi x), |b_j| <= amplitude / j, sampled at x.

    The draw depends on the seed only, so the same function is seen on every mesh.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    b = rng.uniform(-amplitude, amplitude, modes) / np.arange(1, modes + 1)
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * np.outer(x, np.arange(1, modes + 1))) @ b


# ---------------------------------------------------------------- observability

@dataclass
class ObservabilityReport:
    hs: np.ndarray
    samples: list  # per h: array (S, 3) of |q(0)|^2, |q|^2_omega, |q(T)|^2
    C_obs: float
    additive: np.ndarray  # A(h)
    slope: float
    intercept: float
    r2: float
    sharp_C: np.ndarray  # smallest C with A = 0 over the samples, per h

    def to_dict(self) -> dict:
        return {"h": self.hs.tolist(), "C_obs": self.C_obs, "A": self.additive.tolist(),
                "slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "sharp_C": self.sharp_C.tolist()}


def observability_samples(prob: ControlProblem, n_random: int, n_high: int, rng) -> np.ndarray:
    """(|q(0)|^2, |q|^2_omega, |q(T)|^2) for random unit qT and the top eigenvectors."""
    N = prob.op.size
    qs = []
    for _ in range(n_random):
        q = rng.standard_normal(N)
        qs.append(q / prob.norm(q))
    if n_high:
        k = min(n_high, N)
        _, vecs = prob.op.eigen(select=(N - k, N - 1))
        qs.extend(vecs.T)
    out = []
    for q in qs:
        adj = prob.adjoint(q)
        out.append((prob.norm(adj.states[0, 1:-1]) ** 2, prob.observation_norm2(adj), prob.norm(q) ** 2))
    return np.array(out)


def _fit(hs, values):
    if len(hs) < 3:
        raise ValueError("need at least three mesh sizes for the exponential fit")
    if np.any(values <= 0):
        return math.nan, math.nan, math.nan
    fit = linregress(1.0 / np.asarray(hs), np.log(values))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def observability_study(make_problem: Callable[[int], ControlProblem], scales, *, n_random: int = 20,
                        n_high: int = 5, C_obs: float | None = None, seed: int = 0) -> ObservabilityReport:
    """Sample the weak observability inequality |q(0)|^2 <= C |q|^2_omega + A(h) |q(T)|^2.

    C_obs defaults to the largest ratio |q(0)|^2 / |q|^2_omega over the random
    samples of the coarsest mesh; A(h) is the smallest additive coefficient that
    makes the inequality hold for every sample at that mesh size.
    """
    scales = list(scales)
    hs, samples, n_rand = [], [], []
    for i, s in enumerate(scales):
        prob = make_problem(s)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        hs.append(prob.mesh.h)
        samples.append(observability_samples(prob, n_random, n_high, rng))
        n_rand.append(n_random)
    if C_obs is None:
        S0 = samples[0][:n_random]
        C_obs = float(np.max(S0[:, 0] / S0[:, 1]))
    A = np.array([max(0.0, float(np.max((S[:, 0] - C_obs * S[:, 1]) / S[:, 2]))) for S in samples])
    sharp = np.array([float(np.max(S[:, 0] / S[:, 1])) for S in samples])
    slope, icpt, r2 = _fit(hs, A) if len(hs) >= 3 else (math.nan, math.nan, math.nan)
    return ObservabilityReport(np.array(hs), samples, C_obs, A, slope, icpt, r2, sharp)


# ---------------------------------------------------------------- decay

@dataclass
class DecayReport:
    results: list
    slope: float
    intercept: float
    r2: float
    ratio_v: float  # max/min of |v| / |y0| over h

    @property
    def hs(self):
        return np.array([r.h for r in self.results])

    def to_dict(self) -> dict:
        return {"h": self.hs.tolist(), "slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "ratio_v": self.ratio_v,
                "yT_over_y0": [r.norm_yT / r.norm_y0 for r in self.results],
                "v_over_y0": [r.norm_v / r.norm_y0 for r in self.results]}


def _decay_fit(results):
    hs = np.array([r.h for r in results])
    dec = np.array([r.norm_yT / r.norm_y0 for r in results])
    vr = np.array([r.norm_v / r.norm_y0 for r in results])
    if len(results) < 2:
        return math.nan, math.nan, math.nan, 1.0
    fit = linregress(1.0 / hs, np.log(dec))
    r2 = float(fit.rvalue**2) if len(results) > 2 else 1.0
    return float(fit.slope), float(fit.intercept), r2, float(vr.max() / vr.min())


def decay_study(make_problem: Callable[[int], ControlProblem], scales, y0_fn: Callable,
                eps="auto", C1: float = AUTO_C1) -> DecayReport:
    """hum_control with eps = exp(-C1/h) over the meshes; fit log(|y(T)|/|y0|) against 1/h."""
    results = []
    for s in scales:
        prob = make_problem(s)
        e = auto_eps(prob.mesh.h, C1) if eps == "auto" else eps
        results.append(hum_control(prob, y0_fn(prob.mesh.interior), e))
    return DecayReport(results, *_decay_fit(results))


# ---------------------------------------------------------------- semilinear

@dataclass(frozen=True)
class SemilinearSpec:
    """G(x) = x g(x) with g bounded, or |g(x)| <= K ln^r(e + |x|) with 0 <= r < 3/2."""

    g: Callable
    growth: str = "bounded"
    r: float = 0.0
    K: float = 1.0
    bound: float | None = None  # sup |g| for the bounded class
    label: str = ""

    def __post_init__(self):
        if self.growth not in ("bounded", "log"):
            raise ValueError("growth must be 'bounded' or 'log'")
        if self.growth == "log" and not 0 <= self.r < 1.5:
            raise ValueError(f"log-growth exponent must satisfy 0 <= r < 3/2, got {self.r}")
        x = np.linspace(-50, 50, 2001)
        gx = np.asarray(self.g(x), dtype=float)
        if not np.all(np.isfinite(gx)):
            raise ValueError("g is not finite on the sample range")
        if self.growth == "log" and np.any(np.abs(gx) > self.K * np.log(np.e + np.abs(x)) ** self.r * (1 + 1e-12)):
            raise ValueError("g violates the declared log-growth bound")
        if self.growth == "bounded" and self.bound is not None and np.any(np.abs(gx) > self.bound):
            raise ValueError("g exceeds its declared bound")

    @classmethod
    def sine(cls):
        return cls(np.sin, "bounded", bound=1.0, label="sin")

    @classmethod
    def log_growth(cls, r: float = 1.2, K: float = 1.0):
        return cls(lambda x: K * np.log(np.e + np.abs(x)) ** r, "log", r=r, K=K, label=f"ln^{r}")

    @classmethod
    def zero(cls):
        return cls(lambda x: np.zeros_like(np.asarray(x, dtype=float)), "bounded", bound=0.0, label="zero")


def frozen_potential(traj: Trajectory, g: Callable, picard: int = 1) -> np.ndarray:
    """Per-step potential a_k = g(y) matching the forward solver's treatment of G."""
    y = traj.interior
    ref = y[:-1] if picard == 1 else (0.5 * (y[1:] + y[:-1]) if traj.scheme == "cn" else y[1:])
    return np.asarray(g(ref), dtype=float)


@dataclass
class SemilinearResult:
    control: ControlResult
    iterations: int
    converged: bool
    increments: list

    def __getattr__(self, name):
        return getattr(self.control, name)


def semilinear_control(prob: ControlProblem, y0, spec: SemilinearSpec, eps="auto", *,
                       tol: float = 1e-8, maxiter: int = 50, M: float | None = None,
                       picard: int = 1, raise_on_failure: bool = True) -> SemilinearResult:
    """Picard iteration on the frozen potential a = g(y).

    Each pass solves the linear penalised HUM problem with potential g(y_k) and
    then the full semilinear forward problem with that control.  After ten
    non-decreasing increments the update is damped by 1/2.
    """
    N = prob.op.size
    y0 = np.asarray(y0, dtype=float)
    y0 = y0[1:-1] if y0.shape[-1] == N + 2 else y0
    if spec.growth == "log" and M is not None and prob.norm(y0) > M:
        raise ValueError(f"|y0| = {prob.norm(y0):.3g} exceeds the configured bound M = {M}")
    base = prob.potential
    y = prob.forward(y0, g=spec.g, picard=picard)
    increments: list = []
    bad = 0
    damp = 1.0
    result = None
    for it in range(1, maxiter + 1):
        a = frozen_potential(y, spec.g, picard)
        pot = a if base is None else base + a
        lin = ControlProblem(prob.op, prob.omega, prob.T, prob.steps, prob.scheme, pot)
        result = hum_control(lin, y0, eps)
        try:
            y_new = prob.forward(y0, result.v, g=spec.g, picard=picard)
        except OverflowGuardError as exc:
            raise FixedPointFailure(f"overflow at iteration {it}: {exc}", increments) from exc
        if damp < 1.0:
            y_new = Trajectory(y.mesh, y.t, damp * y_new.states + (1 - damp) * y.states, y_new.control, y.scheme)
        diff = float(np.sqrt(np.sum((y_new.states - y.states) ** 2)))
        ref = float(np.sqrt(np.sum(y.states**2)))
        inc = diff / ref if ref > 0 else diff
        if increments and inc >= increments[-1]:
            bad += 1
            if bad >= 10:
                damp = 0.5
        increments.append(inc)
        y = y_new
        if inc <= tol:
            # report the state actually reached by the semilinear dynamics
            result.trajectory = y
            result.norm_yT = prob.norm(y.final[1:-1])
            return SemilinearResult(result, it, True, increments)
    if raise_on_failure:
        raise FixedPointFailure(f"fixed point did not converge in {maxiter} iterations", increments)
    return SemilinearResult(result, maxiter, False, increments)
