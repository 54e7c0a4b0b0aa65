"""Virtual springs, dampers and inerters.

Sign convention, used everywhere in the package: a two-terminal element sees
the extension ``z = x_a - x_b - rest_offset`` and produces the element force
``F = dV/dz`` (springs) or a dissipative ``F(z, zdot)`` (dampers).  The force
acting on terminal ``a`` is ``-F`` and on terminal ``b`` is ``+F``, so in joint
space ``u_a = -J_a^T F`` and ``u_b = +J_b^T F``.

Law parameters may be numbers or parameter names; names are looked up in the
``params`` mapping produced by :class:`~vmtune.parameters.ParameterMap`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .mechlib import Body, ContractError, Mechanism, PointAttachment

__all__ = [
    "LinearSpring",
    "TanhSpring",
    "PowerSpring",
    "LinearDamper",
    "SaturatingDamper",
    "LocalizedDamper",
    "Terminal",
    "InterfaceComponent",
    "Inerter",
    "JointDamper",
    "ConstantForce",
    "spring_potential",
    "spring_force",
    "damper_force",
    "damper_window",
    "map_force_to_joints",
    "assemble_inertance",
    "component_from_dict",
    "component_to_dict",
]


def _val(v, params: Mapping | None):
    if isinstance(v, str):
        if params is None or v not in params:
            raise KeyError(f"unbound parameter {v!r}")
        return params[v]
    return v


def _check_positive(name, v):
    if not isinstance(v, str) and not v > 0:
        raise ValueError(f"{name} must be > 0, got {v!r}")


# springs -----------------------------------------------------------------------

@dataclass(frozen=True)
class LinearSpring:
    k: float | str

    def __post_init__(self):
        _check_positive("k", self.k)


@dataclass(frozen=True)
class TanhSpring:
    """Saturating spring: ``|F| = sigma tanh(k |z| / sigma)`` never exceeds sigma."""

    k: float | str
    sigma: float | str

    def __post_init__(self):
        _check_positive("k", self.k)
        _check_positive("sigma", self.sigma)


@dataclass(frozen=True)
class PowerSpring:
    """``V = k (z.z)^p / (2p)``."""

    k: float | str
    p: float

    def __post_init__(self):
        _check_positive("k", self.k)
        if not self.p > 1:
            raise ValueError(f"power-law exponent must be > 1, got {self.p!r}")


def spring_potential(law, z, params: Mapping | None = None):
    zz = ad.dot(z, z)
    k = _val(law.k, params)
    if isinstance(law, LinearSpring):
        return 0.5 * k * zz
    if isinstance(law, TanhSpring):
        s = _val(law.sigma, params)
        return (s * s / k) * ad.log_cosh_sq(k * k * zz / (s * s))
    if isinstance(law, PowerSpring):
        return k * _safe_pow(zz, law.p) / (2.0 * law.p)
    raise TypeError(f"not a spring law: {law!r}")


def spring_force(law, z, params: Mapping | None = None):
    k = _val(law.k, params)
    if isinstance(law, LinearSpring):
        return k * z
    zz = ad.dot(z, z)
    if isinstance(law, TanhSpring):
        s = _val(law.sigma, params)
        # sigma tanh(x) z/|z| with x = k|z|/sigma, written as k z tanh(x)/x
        return (k * ad.tanh_over_x(k * k * zz / (s * s))) * z
    if isinstance(law, PowerSpring):
        return (k * _safe_pow(zz, law.p - 1.0)) * z
    raise TypeError(f"not a spring law: {law!r}")


def _safe_pow(s, e):
    """``s**e`` for s >= 0 with value and tangent 0 at s = 0."""
    pos = ad.primal(s) > 0
    safe = ad.where(pos, s, 1.0)
    return ad.where(pos, ad.exp(e * ad.log(safe)), 0.0 * s)


# dampers -----------------------------------------------------------------------

@dataclass(frozen=True)
class LinearDamper:
    c: float | str

    def __post_init__(self):
        if not isinstance(self.c, str) and not self.c >= 0:
            raise ValueError(f"c must be >= 0, got {self.c!r}")


@dataclass(frozen=True)
class SaturatingDamper:
    """``F = sigma tanh(c |zd| / sigma) zd / |zd|``."""

    c: float | str
    sigma: float | str

    def __post_init__(self):
        if not isinstance(self.c, str) and not self.c >= 0:
            raise ValueError(f"c must be >= 0, got {self.c!r}")
        _check_positive("sigma", self.sigma)


@dataclass(frozen=True)
class LocalizedDamper:
    """Linear damper scaled by a smooth radial window around ``center``.

    ``mu(z) = (1 - tanh((|z - center| - radius) / smoothness)) / 2``
    """

    c: float | str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.1
    smoothness: float = 0.01

    def __post_init__(self):
        if not isinstance(self.c, str) and not self.c >= 0:
            raise ValueError(f"c must be >= 0, got {self.c!r}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.radius < 0 or not self.smoothness > 0:
            raise ValueError("window radius must be >= 0 and smoothness > 0")


def damper_window(law: LocalizedDamper, z):
    d = ad.norm(z - np.asarray(law.center))
    return 0.5 * (1.0 - ad.tanh((d - law.radius) / law.smoothness))


def damper_force(law, z, zd, params: Mapping | None = None):
    c = _val(law.c, params)
    if isinstance(law, LinearDamper):
        return c * zd
    if isinstance(law, SaturatingDamper):
        s = _val(law.sigma, params)
        return (c * ad.tanh_over_x(c * c * ad.dot(zd, zd) / (s * s))) * zd
    if isinstance(law, LocalizedDamper):
        return (c * damper_window(law, z)) * zd
    raise TypeError(f"not a damper law: {law!r}")


# elements ----------------------------------------------------------------------

SIDES = ("robot", "virtual", "reference")


@dataclass(frozen=True)
class Terminal:
    """A point on the robot or on the virtual mechanism (body 0 = ground).

    Side ``reference`` denotes the moving target ``offset + r(t)`` driven by the
    reference channel; its body index must be 0.
    """

    side: str
    point: PointAttachment

    def __post_init__(self):
        if self.side not in SIDES:
            raise ContractError(f"terminal side must be one of {SIDES}, got {self.side!r}")

    @property
    def grounded(self) -> bool:
        return self.point.body == 0

    @classmethod
    def ground(cls, offset=(0.0, 0.0, 0.0)) -> "Terminal":
        return cls("robot", PointAttachment(0, offset))


@dataclass(frozen=True)
class InterfaceComponent:
    """Spring and/or damper between terminals ``a`` and ``b``."""

    a: Terminal
    b: Terminal
    spring: object = None
    damper: object = None
    rest_offset: tuple = (0.0, 0.0, 0.0)
    name: str = ""

    def __post_init__(self):
        if self.spring is None and self.damper is None:
            raise ContractError("an interface component needs a spring, a damper or both")
        object.__setattr__(self, "rest_offset", tuple(float(v) for v in self.rest_offset))

    def force(self, z, zd, params=None):
        F = 0.0
        if self.spring is not None:
            F = F + spring_force(self.spring, z, params)
        if self.damper is not None:
            F = F + damper_force(self.damper, z, zd, params)
        return F

    def potential(self, z, params=None):
        if self.spring is None:
            return 0.0
        return spring_potential(self.spring, z, params)

    def dissipation(self, z, zd, params=None):
        if self.damper is None:
            return 0.0
        return ad.dot(damper_force(self.damper, z, zd, params), zd)


@dataclass(frozen=True)
class Inerter:
    """Linear inerter ``F = m zdd``; only ground-anchored inerters on the virtual side are supported."""

    m: float
    a: Terminal
    b: Terminal = Terminal.ground()

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"inertance must be > 0, got {self.m!r}")


@dataclass(frozen=True)
class JointDamper:
    """Viscous damper acting on one joint coordinate: ``u_j = -c qd_j``."""

    side: str
    joint: int  # 1-based body index carried by the joint
    c: float | str
    name: str = ""

    def __post_init__(self):
        if self.side not in ("robot", "virtual"):
            raise ContractError(f"joint damper side must be 'robot' or 'virtual', got {self.side!r}")
        if self.joint < 1:
            raise ContractError("joint index is 1-based")


@dataclass(frozen=True)
class ConstantForce:
    """A constant world-frame force applied at a terminal (potential ``-F.x``)."""

    a: Terminal
    force: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "force", tuple(float(v) for v in self.force))


def map_force_to_joints(J_a, J_b, F):
    """Joint forces of an element force ``F``: ``(-J_a^T F, +J_b^T F)``."""
    return -ad.matmul(ad.transpose(J_a), F), ad.matmul(ad.transpose(J_b), F)


def assemble_inertance(inerters, virtual: Mechanism) -> Mechanism:
    """Fold ground-anchored inerters into the virtual mechanism as point masses.

    Because a grounded inerter behaves as a point mass that gravity does not
    act on, the virtual mechanism must be gravity free.
    """
    inerters = list(inerters)
    if not inerters:
        return virtual
    if virtual.has_gravity:
        raise ContractError("inerters are folded in as point masses; the virtual mechanism must have zero gravity")
    bodies = list(virtual.bodies)
    for ie in inerters:
        ends = [t for t in (ie.a, ie.b) if not t.grounded]
        if any(t.side == "robot" for t in ends):
            raise ContractError("inerters may not be attached to robot bodies: robot accelerations are not available")
        if len(ends) != 1:
            raise ContractError("only inerters with exactly one grounded terminal are supported")
        pt = ends[0].point
        if pt.body > virtual.n:
            raise ContractError(f"inerter body {pt.body} out of range")
        bodies[pt.body - 1] = _add_point_mass(bodies[pt.body - 1], ie.m, np.asarray(pt.offset))
    return virtual.with_bodies(bodies)


def _add_point_mass(body: Body, m: float, x: np.ndarray) -> Body:
    M = body.mass + m
    c0 = np.asarray(body.com)
    c = (body.mass * c0 + m * x) / M

    def shift(mass, r):
        return mass * (r @ r * np.eye(3) - np.outer(r, r))

    I = np.asarray(body.inertia) + shift(body.mass, c0 - c) + shift(m, x - c)
    I = 0.5 * (I + I.T)
    return Body(M, tuple(c), tuple(map(tuple, I)), body.name)


# serialization -----------------------------------------------------------------

def _law_to_dict(law) -> dict:
    if isinstance(law, LinearSpring):
        return {"law": "linear", "k": law.k}
    if isinstance(law, TanhSpring):
        return {"law": "tanh", "k": law.k, "sigma": law.sigma}
    if isinstance(law, PowerSpring):
        return {"law": "power", "k": law.k, "p": law.p}
    if isinstance(law, LinearDamper):
        return {"law": "linear", "c": law.c}
    if isinstance(law, SaturatingDamper):
        return {"law": "saturating", "c": law.c, "sigma": law.sigma}
    if isinstance(law, LocalizedDamper):
        return {"law": "localized", "c": law.c, "center": list(law.center), "radius": law.radius,
                "smoothness": law.smoothness}
    raise TypeError(law)


def _spring_from_dict(d):
    kind = d.get("law", "linear")
    if kind == "linear":
        return LinearSpring(d["k"])
    if kind == "tanh":
        return TanhSpring(d["k"], d["sigma"])
    if kind == "power":
        return PowerSpring(d["k"], d["p"])
    raise ContractError(f"unknown spring law {kind!r}")


def _damper_from_dict(d):
    kind = d.get("law", "linear")
    if kind == "linear":
        return LinearDamper(d["c"])
    if kind == "saturating":
        return SaturatingDamper(d["c"], d["sigma"])
    if kind == "localized":
        return LocalizedDamper(d["c"], tuple(d.get("center", (0, 0, 0))), d.get("radius", 0.1), d.get("smoothness", 0.01))
    raise ContractError(f"unknown damper law {kind!r}")


def _terminal_to_dict(t: Terminal) -> dict:
    return {"mech": t.side, "body": t.point.body, "offset": list(t.point.offset)}


def _terminal_from_dict(d) -> Terminal:
    if d is None or d == "ground":
        return Terminal.ground()
    return Terminal(d.get("mech", "robot"), PointAttachment(int(d["body"]), tuple(d.get("offset", (0, 0, 0)))))


def component_to_dict(c) -> dict:
    if isinstance(c, InterfaceComponent):
        out = {"type": "interface", "name": c.name, "a": _terminal_to_dict(c.a), "b": _terminal_to_dict(c.b),
               "rest_offset": list(c.rest_offset)}
        if c.spring is not None:
            out["spring"] = _law_to_dict(c.spring)
        if c.damper is not None:
            out["damper"] = _law_to_dict(c.damper)
        return out
    if isinstance(c, Inerter):
        return {"type": "inerter", "m": c.m, "a": _terminal_to_dict(c.a), "b": _terminal_to_dict(c.b)}
    if isinstance(c, JointDamper):
        return {"type": "joint_damper", "name": c.name, "mech": c.side, "joint": c.joint, "c": c.c}
    if isinstance(c, ConstantForce):
        return {"type": "constant_force", "name": c.name, "a": _terminal_to_dict(c.a), "force": list(c.force)}
    raise TypeError(c)


def component_from_dict(d: dict):
    """Parse one component entry.

    Besides the canonical ``interface`` form, the shorthand ``{"type": "spring",
    "law": ..., "k": ...}`` and ``{"type": "damper", ...}`` entries are accepted.
    """
    try:
        kind = d["type"]
        if kind in ("interface", "spring", "damper"):
            spring = damper = None
            if kind == "spring":
                spring = _spring_from_dict(d)
            elif kind == "damper":
                damper = _damper_from_dict(d)
            else:
                spring = _spring_from_dict(d["spring"]) if "spring" in d else None
                damper = _damper_from_dict(d["damper"]) if "damper" in d else None
            return InterfaceComponent(_terminal_from_dict(d.get("a")), _terminal_from_dict(d.get("b")), spring, damper,
                                      tuple(d.get("rest_offset", (0, 0, 0))), d.get("name", ""))
        if kind == "inerter":
            return Inerter(float(d["m"]), _terminal_from_dict(d["a"]), _terminal_from_dict(d.get("b")))
        if kind == "joint_damper":
            return JointDamper(d.get("mech", "robot"), int(d["joint"]), d["c"], d.get("name", ""))
        if kind == "constant_force":
            return ConstantForce(_terminal_from_dict(d["a"]), tuple(d["force"]), d.get("name", ""))
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed component {d!r}: {exc!r}") from exc
    raise ContractError(f"unknown component type {kind!r}")
