"""Primal/dual meshes on (0, L) with a node pinned at the coefficient jump.

Node layout (N = n + m + 1 interior nodes)::

    x_0 = 0 < x_1 < ... < x_{n+1} = a' < ... < x_{N} < x_{N+1} = L

Primal steps h_{i+1/2} = x_{i+1} - x_i live on the dual mesh (N + 1 values),
dual steps h_i = (h_{i+1/2} + h_{i-1/2}) / 2 live on interior nodes (N values).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

__all__ = [
    "Mesh1D",
    "MeshMap",
    "ZetaPair",
    "as_fraction",
    "build_piecewise_uniform",
    "build_from_map",
    "compute_zeta",
    "transfer_to_uniform",
    "transfer_from_uniform",
    "sample",
    "identity_map",
    "quadratic_map",
    "cubic_map",
]


def as_fraction(a) -> Fraction:
    """Parse a jump location given as Fraction, "p/q" string or (p, q) pair.

    A (p, q) pair must already be in lowest terms.
    """
    if isinstance(a, Fraction):
        frac = a
    elif isinstance(a, str):
        try:
            frac = Fraction(a.strip())
        except ValueError as exc:
            raise ValueError(f"cannot parse jump location {a!r} as p/q") from exc
        if "/" in a:
            p, q = (int(s) for s in a.split("/"))
            if math.gcd(p, q) != 1:
                raise ValueError(f"jump location {a!r} is not reduced (gcd={math.gcd(p, q)})")
    elif isinstance(a, (tuple, list)) and len(a) == 2:
        p, q = int(a[0]), int(a[1])
        if q <= 0:
            raise ValueError(f"denominator must be positive, got {q}")
        if math.gcd(p, q) != 1:
            raise ValueError(f"jump location {p}/{q} is not reduced (gcd={math.gcd(p, q)})")
        frac = Fraction(p, q)
    elif isinstance(a, int):
        frac = Fraction(a)
    else:
        raise TypeError(f"unsupported jump location type {type(a).__name__}")
    if not 0 < frac < 1:
        raise ValueError(f"jump location must lie in (0, 1), got {frac}")
    return frac


@dataclass(frozen=True)
class Mesh1D:
    nodes: np.ndarray
    jump_index: int
    n: int
    m: int
    # step of the uniform preimage; equals h for piecewise-uniform meshes
    reference_h: float

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("a mesh needs at least one interior node")
        if nodes.size != self.n + self.m + 3:
            raise ValueError(
                f"node count {nodes.size} inconsistent with n={self.n}, m={self.m}"
            )
        if self.jump_index != self.n + 1:
            raise ValueError("jump node must sit at index n + 1")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        if nodes[0] != 0.0:
            raise ValueError("mesh must start at 0")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def L(self) -> float:
        return float(self.nodes[-1])

    @property
    def a(self) -> float:
        return float(self.nodes[self.jump_index])

    @property
    def n_interior(self) -> int:
        return self.nodes.size - 2

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def primal_steps(self) -> np.ndarray:
        """h_{i+1/2}, i = 0..N."""
        return np.diff(self.nodes)

    @property
    def dual_points(self) -> np.ndarray:
        """x_{i+1/2}, i = 0..N."""
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @property
    def dual_steps(self) -> np.ndarray:
        """h_i on interior nodes, i = 1..N."""
        hp = self.primal_steps
        return 0.5 * (hp[1:] + hp[:-1])

    @property
    def h(self) -> float:
        return float(self.primal_steps.max())

    @property
    def is_uniform(self) -> bool:
        hp = self.primal_steps
        return bool(np.allclose(hp, hp[0], rtol=1e-12, atol=0.0))

    def dual_side(self) -> np.ndarray:
        """+1 for dual points right of the jump, -1 for those left of it."""
        return np.where(np.arange(self.n_interior + 1) >= self.jump_index, 1, -1)

    def node_mask(self, interval) -> np.ndarray:
        """Interior nodes strictly inside the open interval."""
        lo, hi = interval
        x = self.interior
        return (x > lo) & (x < hi)

    def to_json(self) -> str:
        return json.dumps(
            {
                "nodes": self.nodes.tolist(),
                "jump_index": self.jump_index,
                "L": self.L,
                "reference_h": self.reference_h,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Mesh1D":
        data = json.loads(text)
        nodes = np.asarray(data["nodes"], dtype=float)
        k = int(data["jump_index"])
        n = k - 1
        m = nodes.size - 3 - n
        ref = data.get("reference_h", float(np.diff(nodes).max()))
        mesh = cls(nodes=nodes, jump_index=k, n=n, m=m, reference_h=float(ref))
        if not math.isclose(mesh.L, float(data["L"]), rel_tol=0, abs_tol=0):
            raise ValueError("serialized L does not match the last node")
        return mesh


def build_piecewise_uniform(a, scale: int, L: float = 1.0) -> Mesh1D:
    """Uniform mesh of step L/(q*scale) with a node exactly at a = p/q.

    >>> build_piecewise_uniform("1/3", 3).nodes.size
    10
    """
    frac = as_fraction(a)
    if int(scale) != scale or scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale!r}")
    scale = int(scale)
    p, q = frac.numerator, frac.denominator
    total = q * scale
    i = np.arange(total + 1)
    if L == 1.0:
        nodes = i / total
    else:
        nodes = L * i / total
    n = p * scale - 1
    m = (q - p) * scale - 1
    return Mesh1D(nodes=nodes, jump_index=n + 1, n=n, m=m, reference_h=float(L) / total)


@dataclass(frozen=True)
class MeshMap:
    """Smooth increasing map from (0, 1) onto (0, L), affine on [a - delta, a + delta].

    Derivative bounds are sampled on 10^4 points and padded by 10%.
    """

    theta: Callable[[np.ndarray], np.ndarray]
    dtheta: Callable[[np.ndarray], np.ndarray]
    d2theta: Callable[[np.ndarray], np.ndarray]
    a: Fraction
    delta: float
    L: float = 1.0
    name: str = "map"
    inf_dtheta: float = field(init=False)
    sup_dtheta: float = field(init=False)
    sup_d2theta: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "a", as_fraction(self.a))
        xs = np.linspace(0.0, 1.0, 10_001)
        d1 = np.asarray(self.dtheta(xs), dtype=float)
        d2 = np.asarray(self.d2theta(xs), dtype=float)
        if d1.min() <= 0:
            raise ValueError(f"map {self.name!r} is not strictly increasing (min theta' = {d1.min():.3g})")
        object.__setattr__(self, "inf_dtheta", 0.9 * float(d1.min()))
        object.__setattr__(self, "sup_dtheta", 1.1 * float(d1.max()))
        object.__setattr__(self, "sup_d2theta", 1.1 * float(np.abs(d2).max()))
        if abs(float(self.theta(np.array([0.0]))[0])) > 1e-14:
            raise ValueError("theta(0) must be 0")
        if abs(float(self.theta(np.array([1.0]))[0]) - self.L) > 1e-12 * max(1.0, self.L):
            raise ValueError("theta(1) must equal L")
        a = float(self.a)
        win = np.linspace(a - self.delta, a + self.delta, 101)
        if np.abs(self.d2theta(win)).max() > 1e-12:
            raise ValueError("theta must be affine on the window around a")

    @property
    def a_prime(self) -> float:
        return float(self.theta(np.array([float(self.a)]))[0])


def identity_map(a, L: float = 1.0) -> MeshMap:
    frac = as_fraction(a)
    return MeshMap(
        theta=lambda x: L * np.asarray(x, dtype=float),
        dtheta=lambda x: np.full_like(np.asarray(x, dtype=float), L),
        d2theta=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        a=frac,
        delta=min(frac, 1 - frac) / 4,
        L=L,
        name="identity",
    )


def _window_map(a, kappa, delta, L, power, name):
    # raw(x) = x + kappa * ((x - a - d)_+^p - (a - d - x)_+^p); affine on [a-d, a+d]
    frac = as_fraction(a)
    af = float(frac)
    d = float(min(frac, 1 - frac) / 4) if delta is None else float(delta)
    sgn = -1.0

    def raw(x):
        x = np.asarray(x, dtype=float)
        r = np.clip(x - af - d, 0.0, None)
        lft = np.clip(af - d - x, 0.0, None)
        return x + kappa * (r**power + sgn * lft**power)

    def raw1(x):
        x = np.asarray(x, dtype=float)
        r = np.clip(x - af - d, 0.0, None)
        lft = np.clip(af - d - x, 0.0, None)
        return 1.0 + kappa * power * (r ** (power - 1) - sgn * lft ** (power - 1))

    def raw2(x):
        x = np.asarray(x, dtype=float)
        r = np.clip(x - af - d, 0.0, None)
        lft = np.clip(af - d - x, 0.0, None)
        c = kappa * power * (power - 1)
        return c * (r ** (power - 2) * (r > 0) + sgn * lft ** (power - 2) * (lft > 0))

    r0 = float(raw(0.0))
    span = float(raw(1.0)) - r0
    scale = L / span

    def theta(x):
        x = np.asarray(x, dtype=float)
        out = scale * (raw(x) - r0)
        return np.where(x == 1.0, L, np.where(x == 0.0, 0.0, out))

    return MeshMap(
        theta=theta,
        dtheta=lambda x: scale * raw1(x),
        d2theta=lambda x: scale * raw2(x),
        a=frac,
        delta=d,
        L=L,
        name=name,
    )


def quadratic_map(a, kappa: float = 1.0, delta=None, L: float = 1.0) -> MeshMap:
    """x -> x + kappa*(x - a - delta)_+^2 - ... (C^1, piecewise-constant second derivative)."""
    return _window_map(a, kappa, delta, L, 2, f"quadratic({kappa:g})")


def cubic_map(a, kappa: float = 1.0, delta=None, L: float = 1.0) -> MeshMap:
    """C^2 variant with cubic growth away from the affine window."""
    return _window_map(a, kappa, delta, L, 3, f"cubic({kappa:g})")


def build_from_map(theta_map: MeshMap, scale: int) -> Mesh1D:
    base = build_piecewise_uniform(theta_map.a, scale)
    x = theta_map.theta(base.nodes)
    x = np.asarray(x, dtype=float).copy()
    x[0] = 0.0
    x[-1] = theta_map.L
    x[base.jump_index] = theta_map.a_prime
    if np.any(np.diff(x) <= 0):
        raise ValueError(f"map {theta_map.name!r} is not increasing on the sampled nodes")
    return Mesh1D(nodes=x, jump_index=base.jump_index, n=base.n, m=base.m,
                  reference_h=base.reference_h)


@dataclass(frozen=True)
class ZetaPair:
    zeta: np.ndarray      # on the dual mesh, N + 1 values
    zeta_bar: np.ndarray  # on interior nodes, N values


def compute_zeta(mesh: Mesh1D, reference_h: float | None = None) -> ZetaPair:
    h = mesh.reference_h if reference_h is None else float(reference_h)
    if not h > 0:
        raise ValueError("reference_h must be positive")
    return ZetaPair(zeta=mesh.primal_steps / h, zeta_bar=mesh.dual_steps / h)


def _check_counts(source: Mesh1D, target: Mesh1D, values: np.ndarray):
    if source.nodes.size != target.nodes.size or source.jump_index != target.jump_index:
        raise ValueError(
            f"meshes do not share node layout ({source.nodes.size} vs {target.nodes.size} nodes)"
        )
    if values.shape[-1] not in (source.nodes.size, source.n_interior, source.n_interior + 1):
        raise ValueError(f"values of length {values.shape[-1]} do not live on this mesh")


def transfer_to_uniform(values, mesh: Mesh1D, uniform: Mesh1D) -> np.ndarray:
    """Q: reinterpret nodal (or dual) values of ``mesh`` on the uniform preimage."""
    values = np.asarray(values, dtype=float)
    _check_counts(mesh, uniform, values)
    return values.copy()


def transfer_from_uniform(values, uniform: Mesh1D, mesh: Mesh1D) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    _check_counts(uniform, mesh, values)
    return values.copy()


def sample(f: Callable, mesh: Mesh1D) -> np.ndarray:
    """Pi_M f: sample f on every node including the two boundary nodes."""
    return np.asarray(f(mesh.nodes), dtype=float)
