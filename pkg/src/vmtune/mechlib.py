"""Kinematic trees of rigid bodies.

Bodies are numbered from 1 in tree order; index 0 is the fixed world.  Every
body hangs from its parent through exactly one 1-DOF joint, so ``q[i - 1]`` is
the coordinate of the joint that carries body ``i``.

Dynamics are computed with spatial vectors expressed in the world frame and
taken about the world origin.  A spatial motion is ``(omega, v_O)`` and a
spatial force is ``(n_O, f)``.  In that frame the joint motion subspaces,
composite inertias and force sums need no coordinate transforms, which keeps
the code short and lets every routine run on plain arrays or on
:class:`~vmtune.autodiff.Dual` values alike.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import jax.numpy as jnp

from . import autodiff as ad

__all__ = [
    "ContractError",
    "SingularMassMatrixError",
    "Joint",
    "Body",
    "Mechanism",
    "PointAttachment",
    "Transform",
    "rpy_matrix",
    "forward_kinematics",
    "point_position",
    "point_velocity",
    "point_jacobian",
    "mass_matrix",
    "inverse_dynamics",
    "forward_dynamics",
    "mechanical_energy",
    "kinetic_energy",
    "potential_energy",
    "mechanism_from_dict",
    "mechanism_to_dict",
    "load_mechanism",
]

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class SingularMassMatrixError(ArithmeticError):
    """The mass matrix is (numerically) singular at the given configuration."""


def rpy_matrix(rpy: Sequence[float]) -> np.ndarray:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` (URDF convention)."""
    r, p, y = (float(v) for v in rpy)
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _skew(a) -> np.ndarray:
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ContractError(f"{name} must be a finite 3-vector, got {v!r}")
    return a


@dataclass(frozen=True)
class Joint:
    """A 1-DOF joint.

    ``origin_xyz``/``origin_rpy`` place the joint frame in the parent body
    frame; ``axis`` is expressed in the joint frame, which coincides with the
    child body frame at zero joint coordinate.
    """

    kind: str
    axis: tuple
    parent: int
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ContractError(f"joint kind must be 'revolute' or 'prismatic', got {self.kind!r}")
        axis = _vec3(self.axis, "joint axis")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ContractError(f"joint axis must have unit length, got |axis| = {np.linalg.norm(axis)!r}")
        object.__setattr__(self, "axis", tuple(axis.tolist()))
        object.__setattr__(self, "origin_xyz", tuple(_vec3(self.origin_xyz, "origin xyz").tolist()))
        object.__setattr__(self, "origin_rpy", tuple(_vec3(self.origin_rpy, "origin rpy").tolist()))
        if int(self.parent) != self.parent or self.parent < 0:
            raise ContractError(f"parent must be a non-negative body index, got {self.parent!r}")


@dataclass(frozen=True)
class Body:
    """Rigid body: mass, centre of mass and inertia about the centre of mass."""

    mass: float = 0.0
    com: tuple = (0.0, 0.0, 0.0)
    inertia: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    name: str = ""

    def __post_init__(self):
        if not np.isfinite(self.mass) or self.mass < 0:
            raise ContractError(f"body mass must be >= 0, got {self.mass!r}")
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", tuple(_vec3(self.com, "com").tolist()))
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3):
            raise ContractError("inertia must be a 3x3 matrix")
        if np.max(np.abs(inertia - inertia.T)) > 1e-12:
            raise ContractError("inertia must be symmetric")
        ev = np.linalg.eigvalsh(inertia)
        scale = max(1.0, float(np.max(np.abs(ev))))
        if ev[0] < -1e-12 * scale:
            raise ContractError(f"inertia must be positive semidefinite, eigenvalues {ev}")
        tol = 1e-12 * scale
        if ev[0] + ev[1] < ev[2] - tol:
            raise ContractError(f"principal moments violate the triangle inequality: {ev}")
        object.__setattr__(self, "inertia", tuple(tuple(r) for r in inertia.tolist()))


@dataclass(frozen=True)
class PointAttachment:
    """A point rigidly attached to a body (``body = 0`` is the world)."""

    body: int
    offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if int(self.body) != self.body or self.body < 0:
            raise ContractError(f"attachment body must be a non-negative index, got {self.body!r}")
        object.__setattr__(self, "body", int(self.body))
        object.__setattr__(self, "offset", tuple(_vec3(self.offset, "offset").tolist()))


class Transform(NamedTuple):
    """World pose of a frame: ``x_world = R @ x_local + p``."""

    R: object
    p: object

    def apply(self, x):
        return ad.matmul(self.R, x) + self.p

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = np.asarray(ad.primal(self.R))
        out[:3, 3] = np.asarray(ad.primal(self.p))
        return out


@dataclass(frozen=True, eq=False)
class Mechanism:
    """Immutable kinematic tree; identity hashing keeps it usable as a jit key."""

    bodies: tuple
    joints: tuple
    gravity: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "gravity", tuple(_vec3(self.gravity, "gravity").tolist()))
        if len(self.bodies) != len(self.joints):
            raise ContractError(f"need one joint per body, got {len(self.joints)} joints for {len(self.bodies)} bodies")
        for i, j in enumerate(self.joints, start=1):
            if j.parent >= i:
                raise ContractError(f"joint of body {i} has parent {j.parent}; parents must precede children")
        n = len(self.bodies)
        # constant per-joint data, cached as numpy arrays
        object.__setattr__(self, "_axis", np.array([j.axis for j in self.joints]).reshape(n, 3))
        object.__setattr__(self, "_parent", tuple(j.parent for j in self.joints))
        object.__setattr__(self, "_Ro", tuple(rpy_matrix(j.origin_rpy) for j in self.joints))
        object.__setattr__(self, "_to", tuple(np.array(j.origin_xyz) for j in self.joints))
        object.__setattr__(self, "_revolute", tuple(j.kind == REVOLUTE for j in self.joints))
        anc = []
        for i in range(1, n + 1):
            chain, b = set(), i
            while b != 0:
                chain.add(b)
                b = self.joints[b - 1].parent
            anc.append(frozenset(chain))
        object.__setattr__(self, "_support", tuple(anc))

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def has_gravity(self) -> bool:
        return any(g != 0.0 for g in self.gravity)

    def supports(self, body: int, joint_body: int) -> bool:
        """True when the joint of ``joint_body`` lies on the path root -> ``body``."""
        return body != 0 and joint_body in self._support[body - 1]

    def with_bodies(self, bodies: Sequence[Body]) -> "Mechanism":
        return Mechanism(tuple(bodies), self.joints, self.gravity)

    def with_gravity(self, gravity) -> "Mechanism":
        return Mechanism(self.bodies, self.joints, tuple(gravity))


# kinematics -------------------------------------------------------------------

class _Frames(NamedTuple):
    R: list  # world rotation of body i (index 0 = world)
    p: list  # world origin of body i
    a: list  # world joint axis of body i (index 0 unused)
    o: list  # world joint origin of body i (index 0 unused)


def _check_q(mech: Mechanism, q, name="q"):
    shape = ad.primal(q).shape if ad.is_dual(q) else np.shape(q)
    if tuple(shape) != (mech.n,):
        raise ContractError(f"{name} must have shape ({mech.n},), got {tuple(shape)}")


def _frames(mech: Mechanism, q) -> _Frames:
    _check_q(mech, q)
    eye = np.eye(3)
    R, p, a, o = [eye], [np.zeros(3)], [None], [None]
    for i in range(1, mech.n + 1):
        lam = mech._parent[i - 1]
        axis = mech._axis[i - 1]
        Rj = ad.matmul(R[lam], mech._Ro[i - 1]) if lam else mech._Ro[i - 1]
        oi = ad.matmul(R[lam], mech._to[i - 1]) + p[lam] if lam else mech._to[i - 1]
        ai = ad.matmul(Rj, axis)
        qi = q[i - 1]
        if mech._revolute[i - 1]:
            K = _skew(axis)
            rot = eye + ad.sin(qi) * K + (1.0 - ad.cos(qi)) * (K @ K)
            R.append(ad.matmul(Rj, rot))
            p.append(oi)
        else:
            R.append(Rj)
            p.append(oi + ai * qi)
        a.append(ai)
        o.append(oi)
    return _Frames(R, p, a, o)


def forward_kinematics(mech: Mechanism, q) -> list[Transform]:
    """World transforms of all bodies; entry 0 is the world itself."""
    f = _frames(mech, q)
    return [Transform(R, p) for R, p in zip(f.R, f.p)]


def _check_attachment(mech: Mechanism, att: PointAttachment):
    if att.body > mech.n:
        raise ContractError(f"attachment body {att.body} out of range for a mechanism with {mech.n} bodies")


def _point(f: _Frames, att: PointAttachment):
    return ad.matmul(f.R[att.body], np.asarray(att.offset)) + f.p[att.body]


def point_position(mech: Mechanism, q, att: PointAttachment):
    _check_attachment(mech, att)
    if att.body == 0:
        return jnp.asarray(att.offset)
    return _point(_frames(mech, q), att)


def _jacobian(mech: Mechanism, f: _Frames, att: PointAttachment, x):
    cols = []
    for j in range(1, mech.n + 1):
        if not mech.supports(att.body, j):
            cols.append(np.zeros(3))
        elif mech._revolute[j - 1]:
            cols.append(ad.cross(f.a[j], x - f.o[j]))
        else:
            cols.append(f.a[j])
    if not cols:
        return jnp.zeros((3, 0))
    return ad.stack(cols, axis=1)


def point_jacobian(mech: Mechanism, q, att: PointAttachment):
    """3 x n Jacobian with ``velocity = J @ qd``."""
    _check_attachment(mech, att)
    if att.body == 0:
        _check_q(mech, q)
        return jnp.zeros((3, mech.n))
    f = _frames(mech, q)
    return _jacobian(mech, f, att, _point(f, att))


def point_velocity(mech: Mechanism, q, qd, att: PointAttachment):
    return ad.matmul(point_jacobian(mech, q, att), qd)


# spatial algebra ------------------------------------------------------------------
# motion (w, v) / force (n, f) are pairs of 3-vectors about the world origin.

# Spatial vectors are (angular, linear) pairs of 3-vectors.  ``None`` stands for
# a structurally zero part so that work on it is skipped while tracing.

def _cx(a, b):
    return None if a is None or b is None else ad.cross(a, b)


def _add(a, b):
    if a is None:
        return b
    return a if b is None else a + b


def _sub(a, b):
    if b is None:
        return a
    return -b if a is None else a - b


def _scale(a, s):
    return None if a is None or s is None else a * s


def _crm(m1, m2):
    w1, v1 = m1
    w2, v2 = m2
    return _cx(w1, w2), _add(_cx(w1, v2), _cx(v1, w2))


def _crf(m, fo):
    w, v = m
    n, f = fo
    return _add(_cx(w, n), _cx(v, f)), _cx(w, f)


def _madd(a, b):
    return _add(a[0], b[0]), _add(a[1], b[1])


def _mscale(a, s):
    return _scale(a[0], s), _scale(a[1], s)


def _mdot(m, fo):
    parts = [ad.dot(x, y) for x, y in zip(m, fo) if x is not None and y is not None]
    if not parts:
        return 0.0
    return parts[0] + parts[1] if len(parts) == 2 else parts[0]


class _SpatialInertia(NamedTuple):
    Ibar: object  # rotational inertia about the world origin
    h: object  # first mass moment m * c
    m: object

    def apply(self, mv):
        w, v = mv
        n = _add(None if w is None else ad.matmul(self.Ibar, w), _cx(self.h, v))
        return n, _sub(_scale(v, self.m), _cx(self.h, w))

    def __add__(self, other):
        return _SpatialInertia(self.Ibar + other.Ibar, self.h + other.h, self.m + other.m)


def _body_inertias(mech: Mechanism, f: _Frames) -> list:
    out = [None]
    for i, body in enumerate(mech.bodies, start=1):
        R = f.R[i]
        c = ad.matmul(R, np.asarray(body.com)) + f.p[i]
        Ic = ad.matmul(ad.matmul(R, np.asarray(body.inertia)), R.T)
        m = body.mass
        cc = ad.dot(c, c)
        Ibar = Ic + m * (cc * np.eye(3) - _outer(c, c))
        out.append(_SpatialInertia(Ibar, m * c, m))
    return out


def _outer(a, b):
    return a[:, None] * b[None, :]


def _subspaces(mech: Mechanism, f: _Frames) -> list:
    S = [None]
    for i in range(1, mech.n + 1):
        if mech._revolute[i - 1]:
            S.append((f.a[i], ad.cross(f.o[i], f.a[i])))
        else:
            S.append((None, f.a[i]))
    return S


def mass_matrix(mech: Mechanism, q):
    """Joint-space inertia matrix by the composite-rigid-body algorithm."""
    f = _frames(mech, q)
    return _crba(mech, f, _subspaces(mech, f), _body_inertias(mech, f))


def _crba(mech, f, S, inertias):
    n = mech.n
    Ic = list(inertias)
    for i in range(n, 0, -1):
        lam = mech._parent[i - 1]
        if lam:
            Ic[lam] = Ic[lam] + Ic[i]
    M = [[None] * n for _ in range(n)]
    for i in range(1, n + 1):
        F = Ic[i].apply(S[i])
        M[i - 1][i - 1] = _mdot(S[i], F)
        j = mech._parent[i - 1]
        while j:
            M[i - 1][j - 1] = M[j - 1][i - 1] = _mdot(S[j], F)
            j = mech._parent[j - 1]
    rows = [ad.stack([M[r][c] if M[r][c] is not None else 0.0 for c in range(n)]) for r in range(n)]
    return ad.stack(rows)


def _rnea(mech, f, S, inertias, qd, qdd, gravity=True):
    """Joint forces; ``qd``/``qdd`` may be ``None`` for structurally zero rates."""
    g = np.asarray(mech.gravity) if gravity else np.zeros(3)
    V = [(None, None)]
    A = [(None, -g if np.any(g) else None)]
    F = [None]
    for i in range(1, mech.n + 1):
        lam = mech._parent[i - 1]
        vj = _mscale(S[i], None if qd is None else qd[i - 1])
        Vi = _madd(V[lam], vj)
        Ai = _madd(_madd(A[lam], _mscale(S[i], None if qdd is None else qdd[i - 1])), _crm(Vi, vj))
        V.append(Vi)
        A.append(Ai)
        I = inertias[i]
        F.append(_madd(I.apply(Ai), _crf(Vi, I.apply(Vi))))
    tau = [None] * mech.n
    for i in range(mech.n, 0, -1):
        tau[i - 1] = _mdot(S[i], F[i])
        lam = mech._parent[i - 1]
        if lam:
            F[lam] = _madd(F[lam], F[i])
    if not tau:
        return jnp.zeros(0)
    if all(isinstance(t, float) for t in tau):
        return jnp.zeros(mech.n)
    if any(isinstance(t, float) for t in tau):
        like = next(t for t in tau if not isinstance(t, float))
        tau = [t if not isinstance(t, float) else 0.0 * like for t in tau]
    return ad.stack(tau)


def inverse_dynamics(mech: Mechanism, q, qd, qdd):
    """Joint forces ``u`` with ``M(q) qdd + h(q, qd) = u`` (recursive Newton-Euler)."""
    _check_q(mech, qd, "qd")
    _check_q(mech, qdd, "qdd")
    f = _frames(mech, q)
    return _rnea(mech, f, _subspaces(mech, f), _body_inertias(mech, f), qd, qdd)


def bias_forces(mech: Mechanism, q, qd):
    _check_q(mech, qd, "qd")
    f = _frames(mech, q)
    return _rnea(mech, f, _subspaces(mech, f), _body_inertias(mech, f), qd, None)


def gravity_forces(mech: Mechanism, q):
    f = _frames(mech, q)
    return _rnea(mech, f, _subspaces(mech, f), _body_inertias(mech, f), None, None)


def _check_conditioning(M, q):
    Mp = ad.primal(M)
    if not _is_traced(Mp):
        Mn = np.asarray(Mp)
        cond = np.linalg.cond(Mn) if Mn.size else 1.0
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularMassMatrixError(
                f"mass matrix is singular (condition number {cond:.3g}) at q = {np.asarray(ad.primal(q)).tolist()}"
            )


def _is_traced(x) -> bool:
    import jax

    return isinstance(x, jax.core.Tracer)


def forward_dynamics(mech: Mechanism, q, qd, u, check: bool = True):
    """Joint accelerations under joint forces ``u``.

    With ``check`` (and concrete inputs) a near-singular mass matrix raises
    :class:`SingularMassMatrixError`; inside compiled code a singular matrix
    surfaces as non-finite accelerations instead.
    """
    _check_q(mech, qd, "qd")
    _check_q(mech, u, "u")
    f = _frames(mech, q)
    S = _subspaces(mech, f)
    inertias = _body_inertias(mech, f)
    M = _crba(mech, f, S, inertias)
    if check:
        _check_conditioning(M, q)
    h = _rnea(mech, f, S, inertias, qd, None)
    return ad.solve_spd(M, u - h)


def kinetic_energy(mech: Mechanism, q, qd):
    return 0.5 * ad.dot(qd, ad.matmul(mass_matrix(mech, q), qd))


def potential_energy(mech: Mechanism, q):
    """Gravitational potential ``-sum m g.c`` (zero at the world origin)."""
    if not mech.has_gravity:
        return 0.0 * ad.sum(q)
    f = _frames(mech, q)
    g = np.asarray(mech.gravity)
    V = 0.0
    for i, body in enumerate(mech.bodies, start=1):
        if body.mass:
            c = ad.matmul(f.R[i], np.asarray(body.com)) + f.p[i]
            V = V - body.mass * ad.dot(g, c)
    return V


def mechanical_energy(mech: Mechanism, q, qd):
    return kinetic_energy(mech, q, qd) + potential_energy(mech, q)


# serialization ----------------------------------------------------------------

def _inertia_from6(v) -> tuple:
    if len(v) != 6:
        raise ContractError("inertia needs 6 upper-triangular entries [ixx, ixy, ixz, iyy, iyz, izz]")
    ixx, ixy, ixz, iyy, iyz, izz = (float(x) for x in v)
    return ((ixx, ixy, ixz), (ixy, iyy, iyz), (ixz, iyz, izz))


def _inertia_to6(I) -> list:
    return [I[0][0], I[0][1], I[0][2], I[1][1], I[1][2], I[2][2]]


def mechanism_from_dict(doc: dict) -> Mechanism:
    try:
        bodies = [
            Body(float(b.get("mass", 0.0)), tuple(b.get("com", (0, 0, 0))),
                 _inertia_from6(b.get("inertia", [0] * 6)), str(b.get("name", "")))
            for b in doc["bodies"]
        ]
        joints = []
        for j in doc["joints"]:
            origin = j.get("origin", {})
            joints.append(Joint(j["kind"], tuple(j["axis"]), int(j["parent"]),
                                tuple(origin.get("xyz", (0, 0, 0))), tuple(origin.get("rpy", (0, 0, 0)))))
        return Mechanism(tuple(bodies), tuple(joints), tuple(doc.get("gravity", (0.0, 0.0, -9.81))))
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed mechanism description: {exc!r}") from exc


def mechanism_to_dict(mech: Mechanism) -> dict:
    return {
        "gravity": list(mech.gravity),
        "bodies": [
            {"name": b.name, "mass": b.mass, "com": list(b.com), "inertia": _inertia_to6(b.inertia)}
            for b in mech.bodies
        ],
        "joints": [
            {"kind": j.kind, "axis": list(j.axis), "parent": j.parent,
             "origin": {"xyz": list(j.origin_xyz), "rpy": list(j.origin_rpy)}}
            for j in mech.joints
        ],
    }


def load_mechanism(path) -> Mechanism:
    with open(path, encoding="utf-8") as fh:
        return mechanism_from_dict(json.load(fh))
