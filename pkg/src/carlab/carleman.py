"""Evaluate both sides of the semi-discrete Carleman estimate on given trajectories.

All weighted terms are computed with e^{s phi - m} where m = max s phi over the
space-time grid; every term is then off by the common factor e^{2m}
(reported as ``log_scale``), which cancels in fitted_C and keeps the large-lambda
weights representable.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid

from .calculus import diff_D
from .mesh import Mesh1D
from .operator import Coefficient, SemiDiscreteOperator, assemble
from .weights import CarlemanParams, WeightPsi, phi_of, theta

__all__ = [
    "CarlemanSetup",
    "CarlemanReport",
    "EmptyObservationError",
    "time_derivative",
    "apply_P",
    "lhs",
    "rhs",
    "verify",
    "builtin_family",
    "SweepConfig",
    "SweepResult",
    "constant_sweep",
    "build_mesh",
    "CSV_FIELDS",
]

CSV_FIELDS = ["h", "tau", "lambda", "alpha", "T", "lhs1", "lhs2", "lhs3",
              "rhs1", "rhs2", "rhs3", "rhs4", "fitted_C", "admissible"]


class EmptyObservationError(ValueError):
    pass


@dataclass(frozen=True)
class CarlemanSetup:
    op: SemiDiscreteOperator
    psi: WeightPsi
    omega: tuple

    @property
    def mesh(self) -> Mesh1D:
        return self.op.mesh

    def omega_mask(self) -> np.ndarray:
        mask = self.mesh.node_mask(self.omega)
        if not mask.any():
            raise EmptyObservationError(f"omega={self.omega} contains no interior mesh node")
        return mask


def time_derivative(states, t) -> np.ndarray:
    """Centered differences in time, one-sided at the two ends."""
    return np.gradient(np.asarray(states, dtype=float), np.asarray(t, dtype=float), axis=0, edge_order=1)


def apply_P(states, t, op: SemiDiscreteOperator) -> np.ndarray:
    """P u = -d_t u + A u on interior nodes, shape (K+1, N)."""
    states = np.asarray(states, dtype=float)
    return -time_derivative(states, t)[:, 1:-1] + op.apply(states)


@dataclass(frozen=True)
class _Weights:
    s: np.ndarray
    theta: np.ndarray
    log_node: np.ndarray  # (K+1, N+2), shifted
    log_dual: np.ndarray  # (K+1, N+1), shifted
    shift: float


def _weights(setup: CarlemanSetup, params: CarlemanParams, t) -> _Weights:
    psi, mesh = setup.psi, setup.mesh
    if not params.K > psi.sup:
        raise ValueError(f"K={params.K} must exceed sup psi = {psi.sup}")
    th = theta(t, params.T, params.alpha)
    s = params.tau * th
    ph_n = phi_of(psi.psi(mesh.nodes), params.lam, params.K)
    ph_d = phi_of(psi.on_dual(mesh, "psi"), params.lam, params.K)
    ln, ld = np.outer(s, ph_n), np.outer(s, ph_d)
    shift = float(max(ln.max(), ld.max()))
    return _Weights(s, th, ln - shift, ld - shift, shift)


def _check_traj(states, mesh: Mesh1D, t):
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != mesh.n_interior + 2 or states.shape[0] != np.size(t):
        raise ValueError(f"trajectory of shape {states.shape} does not match mesh/time grid")
    return states


def _lhs(states, t, setup, params, w: _Weights):
    mesh = setup.mesh
    hd, hp = mesh.dual_steps, mesh.primal_steps
    tau = params.tau
    rn = np.exp(w.log_node[:, 1:-1])
    rd = np.exp(w.log_dual)
    ut = time_derivative(states, t)[:, 1:-1]
    du = diff_D(mesh, states)
    u = states[:, 1:-1]
    l1 = trapezoid(((rn * ut) ** 2 @ hd) / w.theta, t) / tau
    l2 = tau * trapezoid(w.theta * ((rd * du) ** 2 @ hp), t)
    l3 = tau**3 * trapezoid(w.theta**3 * ((rn * u) ** 2 @ hd), t)
    return np.array([l1, l2, l3])


def _rhs(states, t, setup, params, w: _Weights, Pu=None):
    mesh = setup.mesh
    hd = mesh.dual_steps
    mask = setup.omega_mask()
    rn = np.exp(w.log_node[:, 1:-1])
    u = states[:, 1:-1]
    Pu = apply_P(states, t, setup.op) if Pu is None else np.asarray(Pu, dtype=float)
    r1 = trapezoid((rn * Pu) ** 2 @ hd, t)
    r2 = params.tau**3 * trapezoid(w.theta**3 * ((rn * u) ** 2 @ (hd * mask)), t)
    h2 = mesh.h**-2
    r3 = h2 * float((rn[0] * u[0]) ** 2 @ hd)
    r4 = h2 * float((rn[-1] * u[-1]) ** 2 @ hd)
    return np.array([r1, r2, r3, r4])


def lhs(states, t, setup: CarlemanSetup, params: CarlemanParams):
    """(tau^-1 |theta^-1/2 r d_t u|^2, tau |theta^1/2 r Du|^2, tau^3 |theta^3/2 r u|^2) and log_scale."""
    states = _check_traj(states, setup.mesh, t)
    w = _weights(setup, params, t)
    return _lhs(states, t, setup, params, w), 2.0 * w.shift


def rhs(states, t, setup: CarlemanSetup, params: CarlemanParams, Pu=None):
    """(|r P u|^2, tau^3 |theta^3/2 r u|^2 on omega, h^-2 |r u(0)|^2, h^-2 |r u(T)|^2) and log_scale."""
    states = _check_traj(states, setup.mesh, t)
    w = _weights(setup, params, t)
    return _rhs(states, t, setup, params, w, Pu), 2.0 * w.shift


@dataclass(frozen=True)
class CarlemanReport:
    lhs_terms: tuple
    rhs_terms: tuple
    fitted_C: float
    log_scale: float
    tau: float
    lam: float
    h: float
    alpha: float
    T: float
    admissible: bool
    flags: tuple = ()

    def row(self) -> dict:
        return {"h": self.h, "tau": self.tau, "lambda": self.lam, "alpha": self.alpha, "T": self.T,
                "lhs1": self.lhs_terms[0], "lhs2": self.lhs_terms[1], "lhs3": self.lhs_terms[2],
                "rhs1": self.rhs_terms[0], "rhs2": self.rhs_terms[1], "rhs3": self.rhs_terms[2],
                "rhs4": self.rhs_terms[3], "fitted_C": self.fitted_C, "admissible": int(self.admissible)}


def verify(states, t, setup: CarlemanSetup, params: CarlemanParams, *, tau0: float = 1.0,
           eps0: float = 0.1) -> CarlemanReport:
    """Both sides plus fitted_C = sum(lhs)/sum(rhs); admissibility is flagged, never enforced."""
    states = _check_traj(states, setup.mesh, t)
    if not (math.isclose(t[0], 0.0, abs_tol=1e-14) and math.isclose(t[-1], params.T, rel_tol=1e-12)):
        raise ValueError("time grid must span [0, T]")
    w = _weights(setup, params, t)
    L = _lhs(states, t, setup, params, w)
    R = _rhs(states, t, setup, params, w)
    h = setup.mesh.h
    flags = []
    if params.tau < params.tau_min(tau0):
        flags.append("tau below tau0 (T + T^2)")
    if params.tau * h / (params.alpha * params.T) > eps0:
        flags.append("tau h / (alpha T) above eps0")
    total = R.sum()
    C = float(L.sum() / total) if total > 0 else (0.0 if L.sum() == 0 else math.inf)
    return CarlemanReport(tuple(map(float, L)), tuple(map(float, R)), C, 2.0 * w.shift,
                          params.tau, params.lam, h, params.alpha, params.T, not flags, tuple(flags))


# ---------------------------------------------------------------- test functions

def _bump(z):
    out = np.zeros_like(z)
    inside = np.abs(z) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - z[inside] ** 2))
    return out


def builtin_family(setup: CarlemanSetup, t, kinds=("bump", "eigen", "trig"), seed: int = 0,
                window: bool = True) -> dict:
    """Built-in test trajectories with zero Dirichlet data, keyed by name.

    bump   compact space-time bump centred on the interface (outside omega)
    eigen  backward evolution exp(mu_1 (t - T)) v_1 of the ground mode (P u = 0)
    trig   seeded sum of sin(j pi x / L) times trigonometric time factors

    With ``window`` the last two are multiplied by sin^2(pi t / T): the t = 0, T
    trace terms carry h^-2 and otherwise dominate the right-hand side.
    """
    mesh = setup.mesh
    t = np.asarray(t, dtype=float)
    T, L = float(t[-1]), mesh.L
    x = mesh.nodes
    win = np.sin(np.pi * t / T) ** 2 if window else np.ones_like(t)
    out = {}
    for kind in kinds:
        if kind == "bump":
            lo = setup.omega[0]
            w = 0.9 * min(mesh.a, lo - mesh.a) if lo > mesh.a else 0.9 * mesh.a
            w = min(w, 0.9 * mesh.a, 0.9 * (L - mesh.a))
            space = _bump((x - mesh.a) / w)
            time = _bump(2.0 * t / T - 1.0)
            out[kind] = np.outer(time, space)
        elif kind == "eigen":
            mu, v = setup.op.eigen(select=(0, 0))
            v = v[:, 0] / np.sqrt(np.sum(mesh.dual_steps * v[:, 0] ** 2))
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            u = np.zeros((t.size, x.size))
            u[:, 1:-1] = np.outer(np.exp(mu[0] * (t - T)) * win, v)
            out[kind] = u
        elif kind == "trig":
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
            J, M = 6, 3
            coef = rng.standard_normal((J, 2 * M + 1)) / np.arange(1, J + 1)[:, None] ** 2
            sx = np.sin(np.pi * np.outer(np.arange(1, J + 1), x) / L)
            sx[:, [0, -1]] = 0.0
            basis_t = [np.ones_like(t)]
            for k in range(1, M + 1):
                basis_t += [np.cos(2 * np.pi * k * t / T), np.sin(2 * np.pi * k * t / T)]
            tt = np.array(basis_t)
            out[kind] = win[:, None] * ((coef @ tt).T @ sx)
        else:
            raise ValueError(f"unknown test function kind {kind!r}")
    return out


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepConfig:
    a: str = "1/3"
    map: str = "identity"  # identity | quadratic | cubic
    map_kappa: float = 1.0
    c_values: tuple = (1.0, 2.0)
    omega: tuple = (0.5, 0.9)
    scales: tuple = (20, 40, 80)  # h = 1/60, 1/120, 1/240 for a = 1/3
    taus: tuple = (2.0, 3.0, 4.0, 6.0, 8.0)
    lams: tuple = (1.0, 2.0, 4.0)
    alpha: float = 0.5
    T: float = 1.0
    K_offset: float = 1.0
    tau0: float = 1.0
    eps0: float = 0.1
    target_alpha0: float = 0.1
    time_steps: int = 400
    kinds: tuple = ("bump", "eigen", "trig")
    window: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("scales", "taus", "lams", "kinds"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"sweep grid '{name}' is empty")


@dataclass
class SweepResult:
    rows: list  # best (max fitted_C) report per cell, in grid order
    detail: list  # (cell index, kind, report) for every test function
    config: SweepConfig

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        wr.writeheader()
        for rep in self.rows:
            wr.writerow({k: _fmt(v) for k, v in rep.row().items()})
        return buf.getvalue()

    def uniformity(self, admissible_only: bool = True) -> list[dict]:
        """max/min of fitted_C over h at each fixed (tau, lambda)."""
        groups: dict = {}
        for rep in self.rows:
            if admissible_only and not rep.admissible:
                continue
            groups.setdefault((rep.tau, rep.lam), []).append(rep)
        out = []
        for (tau, lam), reps in sorted(groups.items()):
            cs = np.array([r.fitted_C for r in reps])
            out.append({"tau": tau, "lambda": lam, "n_h": len(reps),
                        "hs": [r.h for r in reps], "max_C": float(cs.max()), "min_C": float(cs.min()),
                        "ratio": float(cs.max() / cs.min()) if cs.min() > 0 else math.inf})
        return out

    def global_C(self) -> float:
        return max(r.fitted_C for r in self.rows)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def build_mesh(a, scale: int, kind: str = "identity", kappa: float = 1.0) -> Mesh1D:
    from .mesh import build_from_map, build_piecewise_uniform, cubic_map, quadratic_map

    if kind == "identity":
        return build_piecewise_uniform(a, scale)
    maps = {"quadratic": quadratic_map, "cubic": cubic_map}
    if kind not in maps:
        raise ValueError(f"unknown mesh map {kind!r} (identity, quadratic, cubic)")
    return build_from_map(maps[kind](a, kappa), scale)


def _build_setup(cfg: SweepConfig, scale: int) -> CarlemanSetup:
    from .weights import construct_psi

    mesh = build_mesh(cfg.a, scale, cfg.map, cfg.map_kappa)
    c = Coefficient.from_spec(*cfg.c_values, mesh.a, mesh.L)
    psi = construct_psi(c, cfg.omega, cfg.target_alpha0)
    return CarlemanSetup(assemble(mesh, c), psi, tuple(cfg.omega))


def _cell(args):
    cfg, scale, tau, lam = args
    setup = _build_setup(cfg, scale)
    t = np.linspace(0.0, cfg.T, cfg.time_steps + 1)
    params = CarlemanParams(lam=lam, K=setup.psi.sup + cfg.K_offset, tau=tau, alpha=cfg.alpha, T=cfg.T)
    fam = builtin_family(setup, t, cfg.kinds, cfg.seed, cfg.window)
    reps = [(k, verify(u, t, setup, params, tau0=cfg.tau0, eps0=cfg.eps0)) for k, u in fam.items()]
    return reps


def constant_sweep(cfg: SweepConfig, jobs: int = 1) -> SweepResult:
    cells = [(cfg, s, tau, lam) for s in cfg.scales for tau in cfg.taus for lam in cfg.lams]
    if not cells:
        raise ValueError("empty sweep grid")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell, cells))
    else:
        results = [_cell(c) for c in cells]
    rows, detail = [], []
    for i, reps in enumerate(results):
        best = max(reps, key=lambda kr: kr[1].fitted_C)[1]
        rows.append(best)
        detail.extend((i, k, r) for k, r in reps)
    return SweepResult(rows, detail, cfg)


def config_dict(cfg: SweepConfig) -> dict:
    return asdict(cfg)
