"""Carleman weight functions with a slope jump at the coefficient interface."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "TraceMatrix",
    "WeightPsi",
    "CarlemanParams",
    "WeightEval",
    "PsiConstructionError",
    "trace_matrix",
    "min_eig_sym2",
    "slope_grid_search",
    "construct_psi",
    "smooth_psi",
    "theta",
    "dtheta",
    "evaluate_weights",
    "weight_scaling_spotcheck",
    "weight_report",
    "phi_of",
]


class PsiConstructionError(RuntimeError):
    def __init__(self, message: str, best_alpha0: float, best_slopes):
        super().__init__(f"{message} (best alpha0 found: {best_alpha0:.6g} at slopes {best_slopes})")
        self.best_alpha0 = best_alpha0
        self.best_slopes = best_slopes


def min_eig_sym2(a11, a12, a22):
    """Smallest eigenvalue of [[a11, a12], [a12, a22]] (vectorised)."""
    a11, a12, a22 = np.asarray(a11), np.asarray(a12), np.asarray(a22)
    mean = 0.5 * (a11 + a22)
    rad = np.hypot(0.5 * (a11 - a22), a12)
    return mean - rad


@dataclass(frozen=True)
class TraceMatrix:
    a11: float
    a12: float
    a22: float

    @property
    def a21(self) -> float:
        return self.a12

    def as_array(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a12, self.a22]])

    @property
    def min_eig(self) -> float:
        return float(min_eig_sym2(self.a11, self.a12, self.a22))

    def to_dict(self) -> dict:
        return {"a11": self.a11, "a12": self.a12, "a22": self.a22}


def _trace_entries(b1, b2, c_minus, c_plus):
    # b1 = psi'(a-), b2 = psi'(a+); jump brackets [f*]_a = f(a+) - f(a-)
    flux_jump = c_plus * b2 - c_minus * b1
    a11 = b2 - b1
    a12 = flux_jump * b2
    a22 = flux_jump**2 * b2 + (c_plus**2 * b2**3 - c_minus**2 * b1**3)
    return a11, a12, a22


def trace_matrix(slopes, c_values) -> TraceMatrix:
    b1, b2 = (float(s) for s in slopes)
    cm, cp = (float(c) for c in c_values)
    if not all(math.isfinite(v) for v in (b1, b2, cm, cp)):
        raise ValueError("trace matrix inputs must be finite")
    if b1 == 0 or b2 == 0:
        raise ValueError("slopes at the jump must be nonzero")
    return TraceMatrix(*(float(v) for v in _trace_entries(b1, b2, cm, cp)))


@dataclass(frozen=True)
class SlopeSearch:
    best_slopes: tuple
    best_alpha0: float
    grid: np.ndarray
    alpha0: np.ndarray


def slope_grid_search(c_values, bound: float = 10.0, points: int = 401) -> SlopeSearch:
    """lambda_min of the trace matrix over a points x points grid on [-bound, bound]^2."""
    g = np.linspace(-bound, bound, points)
    b1, b2 = np.meshgrid(g, g, indexing="ij")
    lam = min_eig_sym2(*_trace_entries(b1, b2, *c_values))
    lam = np.where((b1 == 0) | (b2 == 0), -np.inf, lam)
    i, j = np.unravel_index(np.argmax(lam), lam.shape)
    return SlopeSearch((float(g[i]), float(g[j])), float(lam[i, j]), g, lam)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def _smoothstep_d(t):
    inside = (t > 0) & (t < 1)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * t * t * (1.0 - t) ** 2, 0.0)


def _smoothstep_int(t):
    # antiderivative of the smoothstep vanishing at 0, extended linearly past 1
    tc = np.clip(t, 0.0, 1.0)
    return tc**4 * (2.5 - 3.0 * tc + tc * tc) + np.clip(t - 1.0, 0.0, None)


@dataclass(frozen=True)
class WeightPsi:
    """psi = beta1*x on [0, a]; on [a, L] psi' goes smoothly from beta2 to -gamma
    across a band inside omega, so psi has a single critical point there.

    psi(L) = 0 exactly because the right branch is integrated from L.
    """

    beta1: float
    beta2: float
    a: float
    L: float
    omega: tuple
    band: tuple
    c_values: tuple
    gamma: float = field(init=False)
    x_star: float = field(init=False)
    matrix: TraceMatrix = field(init=False)
    alpha0: float = field(init=False)
    sup: float = field(init=False)

    def __post_init__(self):
        lo, hi = self.band
        w = hi - lo
        # int_a^L S = (L - hi) + w/2
        integral_s = (self.L - hi) + 0.5 * w
        gamma = (self.beta2 * (self.L - self.a) + self.beta1 * self.a) / integral_s - self.beta2
        if gamma <= 0:
            raise ValueError("slope configuration cannot bring psi back to zero at L")
        object.__setattr__(self, "gamma", float(gamma))
        target = self.beta2 / (self.beta2 + gamma)
        t_star = brentq(lambda t: float(_smoothstep(t)) - target, 0.0, 1.0, xtol=1e-15)
        object.__setattr__(self, "x_star", lo + w * t_star)
        mat = trace_matrix((self.beta1, self.beta2), self.c_values)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "alpha0", mat.min_eig)
        object.__setattr__(self, "sup", float(self.psi(np.array([self.x_star]))[0]))

    @property
    def slopes_at_jump(self) -> tuple:
        return (self.beta1, self.beta2)

    def _t(self, x):
        lo, hi = self.band
        return (x - lo) / (hi - lo)

    def _right(self, x):
        lo, hi = self.band
        w = hi - lo
        tot = self.beta2 + self.gamma
        s_int = w * (_smoothstep_int(self._t(self.L)) - _smoothstep_int(self._t(x)))
        return -(self.beta2 * (self.L - x) - tot * s_int)

    def psi(self, x, side: str = "left") -> np.ndarray:
        """side picks the branch at x == a (the values agree to roundoff)."""
        x = np.asarray(x, dtype=float)
        left = (x < self.a) | ((x == self.a) & (side == "left"))
        return np.where(left, self.beta1 * x, self._right(x))

    def dpsi(self, x, side: str = "left") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        left = (x < self.a) | ((x == self.a) & (side == "left"))
        right = self.beta2 - (self.beta2 + self.gamma) * _smoothstep(self._t(x))
        return np.where(left, self.beta1, right)

    def d2psi(self, x, side: str = "left") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        left = (x < self.a) | ((x == self.a) & (side == "left"))
        lo, hi = self.band
        right = -(self.beta2 + self.gamma) * _smoothstep_d(self._t(x)) / (hi - lo)
        return np.where(left, 0.0, right)

    def on_dual(self, mesh, fn: str = "psi") -> np.ndarray:
        """Evaluate psi (or dpsi/d2psi) at dual points with the branch of each side."""
        f = getattr(self, fn)
        xd = mesh.dual_points
        right = mesh.dual_side() > 0
        return np.where(right, f(xd, side="right"), f(xd, side="left"))

    def to_dict(self) -> dict:
        return {
            "slopes": [self.beta1, self.beta2],
            "alpha0": self.alpha0,
            "matrix": self.matrix.to_dict(),
            "gamma": self.gamma,
            "x_star": self.x_star,
            "sup_psi": self.sup,
            "omega": list(self.omega),
        }


def _band_for(omega):
    lo, hi = omega
    w = hi - lo
    return (lo + 0.25 * w, hi - 0.25 * w)


def construct_psi(coefficient, omega, target_alpha0: float = 0.1, bound: float = 10.0,
                  points: int = 401) -> WeightPsi:
    """Build psi for the coefficient's jump with lambda_min(trace matrix) >= target_alpha0.

    The grid search only considers slope pairs compatible with the shape
    (psi increasing away from both boundary points, so beta1, beta2 > 0).  Among the
    feasible grid pairs the one of smallest magnitude is kept and then shrunk
    along its ray by bisection until lambda_min sits just above the target.
    """
    a, L = coefficient.a, coefficient.L
    lo, hi = omega
    if not (a < lo < hi < L):
        raise ValueError(f"omega={omega} must be a non-empty interval strictly inside (a, L) = ({a}, {L})")
    if target_alpha0 <= 0:
        raise ValueError("target_alpha0 must be positive")
    cv = (coefficient.c_minus, coefficient.c_plus)
    search = slope_grid_search(cv, bound, points)
    b1, b2 = np.meshgrid(search.grid, search.grid, indexing="ij")
    ok = (b1 > 0) & (b2 > 0) & (search.alpha0 >= target_alpha0)
    admissible = np.where((b1 > 0) & (b2 > 0), search.alpha0, -np.inf)
    if not ok.any():
        k = np.unravel_index(np.argmax(admissible), admissible.shape)
        raise PsiConstructionError(
            f"no admissible slope pair reaches alpha0 >= {target_alpha0}",
            float(admissible[k]), (float(b1[k]), float(b2[k])),
        )
    size = np.where(ok, np.maximum(b1, b2), np.inf)
    k = np.unravel_index(np.argmin(size), size.shape)
    base = np.array([b1[k], b2[k]])

    def lam(kappa):
        return float(min_eig_sym2(*_trace_entries(*(kappa * base), *cv)))

    lo_k, hi_k = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo_k + hi_k)
        if lam(mid) >= target_alpha0:
            hi_k = mid
        else:
            lo_k = mid
    beta1, beta2 = (float(v) for v in hi_k * base)
    psi = WeightPsi(beta1=beta1, beta2=beta2, a=a, L=L, omega=tuple(omega),
                    band=_band_for(omega), c_values=cv)
    if not psi.alpha0 >= target_alpha0:
        raise PsiConstructionError("refinement lost feasibility", psi.alpha0, (beta1, beta2))
    return psi


def smooth_psi(a: float, L: float, omega, slope: float = 1.0, c_value: float = 1.0) -> WeightPsi:
    """Degenerate weight with equal slopes at a (smooth-coefficient case, no trace condition)."""
    return WeightPsi(beta1=slope, beta2=slope, a=a, L=L, omega=tuple(omega),
                     band=_band_for(omega), c_values=(c_value, c_value))


def theta(t, T: float, alpha: float):
    """theta(t) = 1 / ((t + alpha)(T + alpha - t)) on [0, T]."""
    if not 0 < alpha < T:
        raise ValueError(f"alpha must lie in (0, T), got alpha={alpha}, T={T}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError("theta is only defined on [0, T]")
    return 1.0 / ((t + alpha) * (T + alpha - t))


def dtheta(t, T: float, alpha: float):
    th = theta(t, T, alpha)
    return (2.0 * np.asarray(t, dtype=float) - T) * th * th


@dataclass(frozen=True)
class CarlemanParams:
    lam: float
    K: float
    tau: float
    alpha: float
    T: float

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not 0 < self.alpha < self.T:
            raise ValueError("alpha must lie in (0, T)")
        if self.tau <= 0 or self.lam <= 0:
            raise ValueError("tau and lambda must be positive")

    @classmethod
    def default(cls, psi: WeightPsi, lam=1.0, tau=2.0, alpha=0.5, T=1.0, K_offset=1.0):
        return cls(lam=lam, K=psi.sup + K_offset, tau=tau, alpha=alpha, T=T)

    def tau_min(self, tau0: float = 1.0) -> float:
        return tau0 * (self.T + self.T**2)

    def admissible(self, h: float, tau0: float = 1.0, eps0: float = 0.1) -> bool:
        return self.tau >= self.tau_min(tau0) and self.tau * h / (self.alpha * self.T) <= eps0


@dataclass(frozen=True)
class WeightEval:
    phi: np.ndarray    # on the spatial sample points
    theta: np.ndarray  # on the time grid
    s: np.ndarray
    log_r: np.ndarray  # s(t) * phi(x), shape (nt, nx)

    @property
    def r(self) -> np.ndarray:
        return np.exp(self.log_r)

    @property
    def rho(self) -> np.ndarray:
        return np.exp(-self.log_r)


def phi_of(psi_values, lam: float, K: float):
    return np.exp(lam * np.asarray(psi_values)) - math.exp(lam * K)


def evaluate_weights(psi: WeightPsi, params: CarlemanParams, x, t) -> WeightEval:
    """phi, theta, s and log r = s * phi on x (tensor) t."""
    if not params.K > psi.sup:
        raise ValueError(f"K={params.K} must exceed sup psi = {psi.sup} so that phi < 0")
    ph = phi_of(psi.psi(x), params.lam, params.K)
    th = theta(t, params.T, params.alpha)
    s = params.tau * th
    return WeightEval(phi=ph, theta=th, s=s, log_r=np.outer(s, ph))


def weight_report(psi: WeightPsi, params: CarlemanParams) -> dict:
    """{slopes, alpha0, lambda, K, matrix} for the JSON weight report."""
    return {"slopes": [psi.beta1, psi.beta2], "alpha0": psi.alpha0, "lambda": params.lam,
            "K": params.K, "matrix": psi.matrix.to_dict()}


@dataclass(frozen=True)
class SpotCheck:
    h: np.ndarray
    deviation: np.ndarray
    order: np.ndarray


def weight_scaling_spotcheck(psi: WeightPsi, params: CarlemanParams, meshes, t: float | None = None):
    """Compare r_i (D rho)_{i+1/2} with -s lambda phi psi' at dual points outside omega.

    Returns max relative deviation per mesh and the observed orders between
    consecutive meshes (expected ~1: the deviation is s|phi'|h/2 to leading order).
    """
    t = 0.5 * params.T if t is None else t
    s = params.tau * float(theta(t, params.T, params.alpha))
    hs, dev = [], []
    for mesh in meshes:
        x = mesh.nodes
        ph = phi_of(psi.psi(x), params.lam, params.K)
        ph_r = phi_of(psi.psi(x, side="right"), params.lam, params.K)
        # r_i * rho_{i+1} on each interval, using the branch of the interval's side
        right = mesh.dual_side() > 0
        left_val = np.where(right, ph_r[:-1], ph[:-1])
        ratio_num = np.expm1(-s * (ph[1:] - left_val)) / mesh.primal_steps
        xd = mesh.dual_points
        dp = psi.on_dual(mesh, "dpsi")
        phid = np.exp(params.lam * psi.on_dual(mesh, "psi"))
        expected = -s * params.lam * phid * dp
        lo, hi = psi.omega
        keep = (xd < lo) | (xd > hi)
        rel = np.abs(ratio_num[keep] / expected[keep] - 1.0)
        hs.append(mesh.h)
        dev.append(float(rel.max()))
    hs, dev = np.array(hs), np.array(dev)
    order = np.log(dev[:-1] / dev[1:]) / np.log(hs[:-1] / hs[1:]) if len(hs) > 1 else np.array([])
    return SpotCheck(hs, dev, order)
