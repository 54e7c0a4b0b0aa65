"""Robot + virtual mechanism + interface elements as one ODE.

State layout: ``x = (q_r, qd_r, q_c, qd_c, c_w1, c_y1, c_w2, c_y2)``.

The controller side (interface elements with robot terminals, robot joint
dampers, gravity compensation) sees the measured robot state
``(q_r + n_q, qd_r + n_qd)``.  Disturbance forces act on the true robot
configuration.  The four cost states integrate

* ``c_w1' = w.w``, ``c_y1' = y.y`` for L2-routed scenarios,
* ``tau c_w2' = max(c_w2, |w|) - c_w2`` and likewise for ``y`` for peak-routed ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import jax.numpy as jnp

from . import autodiff as ad
from . import mechlib as ml
from .components import (
    ConstantForce,
    Inerter,
    InterfaceComponent,
    JointDamper,
    Terminal,
    assemble_inertance,
    component_from_dict,
    component_to_dict,
    spring_potential,
)
from .mechlib import ContractError, Mechanism, PointAttachment, Transform
from .parameters import ParameterMap
from .scenarios import Scenario, ToneArrays, tone_arrays

__all__ = [
    "Channel",
    "ExogenousWiring",
    "OutputBlock",
    "PerformanceOutput",
    "ClosedLoopSystem",
    "rhs",
    "rhs_core",
    "signal_at",
    "performance_outputs",
    "gravity_compensation",
    "rcm_error",
    "storage",
    "dissipation",
    "initial_state",
    "system_to_dict",
    "system_from_dict",
    "load_system",
    "SCHEMA",
]

SCHEMA = 1
EPS = 1e-6
TAU = 0.01

CHANNEL_KINDS = ("force", "noise_q", "noise_qd", "reference")
OUTPUT_KINDS = ("q", "qd", "u", "tracking", "rcm")


# wiring ------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    """One block of the exogenous vector and its diagonal weight.

    ``force`` blocks push on ``target`` (a robot point) along ``axis`` when
    given (1 component) or in full 3-D; noise blocks have one entry per robot
    joint; ``reference`` is the 3-D displacement added to reference terminals.
    """

    kind: str
    weight: tuple
    target: Terminal | None = None
    axis: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ContractError(f"channel kind must be one of {CHANNEL_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "weight", tuple(float(v) for v in self.weight))
        if any(v < 0 for v in self.weight):
            raise ContractError("channel weights must be nonnegative")
        if self.kind == "force":
            if self.target is None or self.target.side != "robot":
                raise ContractError("force channels need a robot target point")
        if self.axis is not None:
            object.__setattr__(self, "axis", tuple(float(v) for v in self.axis))

    def dim(self, n_robot: int) -> int:
        if self.kind == "force":
            return 1 if self.axis is not None else 3
        if self.kind == "reference":
            return 3
        return n_robot


@dataclass(frozen=True)
class ExogenousWiring:
    channels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))

    def dim(self, n_robot: int) -> int:
        return sum(c.dim(n_robot) for c in self.channels)

    def slices(self, n_robot: int) -> list:
        out, start = [], 0
        for c in self.channels:
            d = c.dim(n_robot)
            out.append(slice(start, start + d))
            start += d
        return out

    def weights(self, n_robot: int) -> np.ndarray:
        return np.concatenate([np.asarray(c.weight) for c in self.channels]) if self.channels else np.zeros(0)


@dataclass(frozen=True)
class OutputBlock:
    """A raw output and its diagonal weight.

    ``tracking``: robot point ``point`` minus the reference ``reference + r(t)``.
    ``rcm``: port error of the frame of ``point.body`` (shifted by ``point.offset``)
    with respect to the fixed point ``rcm``.
    """

    kind: str
    weight: tuple
    point: PointAttachment | None = None
    reference: tuple | None = None
    rcm: tuple | None = None

    def __post_init__(self):
        if self.kind not in OUTPUT_KINDS:
            raise ContractError(f"output kind must be one of {OUTPUT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "weight", tuple(float(v) for v in self.weight))
        if any(v < 0 for v in self.weight):
            raise ContractError("output weights must be nonnegative")
        if self.kind in ("tracking", "rcm") and self.point is None:
            raise ContractError(f"{self.kind} outputs need a robot point")
        if self.kind == "tracking":
            object.__setattr__(self, "reference", tuple(float(v) for v in (self.reference or (0, 0, 0))))
        if self.kind == "rcm":
            if self.rcm is None:
                raise ContractError("rcm outputs need the port position")
            object.__setattr__(self, "rcm", tuple(float(v) for v in self.rcm))

    def dim(self, n_robot: int) -> int:
        return {"q": n_robot, "qd": n_robot, "u": n_robot, "tracking": 3, "rcm": 2}[self.kind]


@dataclass(frozen=True)
class PerformanceOutput:
    blocks: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def dim(self, n_robot: int) -> int:
        return sum(b.dim(n_robot) for b in self.blocks)


# system -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    robot: Mechanism
    virtual: Mechanism | None
    components: tuple
    wiring: ExogenousWiring
    perf: PerformanceOutput
    params: ParameterMap
    gravity_comp: bool = True
    q0_robot: tuple | None = None
    q0_virtual: tuple | None = None
    tau: float = TAU
    eps: float = EPS
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        nr = self.robot.n
        nc = self.virtual.n if self.virtual is not None else 0
        object.__setattr__(self, "q0_robot", tuple(float(v) for v in (self.q0_robot or np.zeros(nr))))
        object.__setattr__(self, "q0_virtual", tuple(float(v) for v in (self.q0_virtual or np.zeros(nc))))
        if len(self.q0_robot) != nr or len(self.q0_virtual) != nc:
            raise ContractError("initial configurations do not match the mechanisms")
        for ch, sl in zip(self.wiring.channels, self.wiring.slices(nr)):
            if len(ch.weight) != sl.stop - sl.start:
                raise ContractError(f"channel {ch.kind!r} weight has {len(ch.weight)} entries, expected {sl.stop - sl.start}")
            if ch.target is not None:
                self._check_terminal(ch.target)
        for b in self.perf.blocks:
            if len(b.weight) != b.dim(nr):
                raise ContractError(f"output {b.kind!r} weight has {len(b.weight)} entries, expected {b.dim(nr)}")
            if b.point is not None and b.point.body > nr:
                raise ContractError(f"output point body {b.point.body} out of range")
        has_ref = any(c.kind == "reference" for c in self.wiring.channels)
        for c in self.components:
            for t in _terminals(c):
                if t.side == "reference" and not has_ref:
                    raise ContractError("a reference terminal needs a reference channel")
                self._check_terminal(t)
            if isinstance(c, JointDamper):
                n = nr if c.side == "robot" else nc
                if c.joint > n:
                    raise ContractError(f"joint damper index {c.joint} out of range")
        names = set(self.params.names)
        for c in self.components:
            for v in _bound_names(c):
                if v not in names:
                    raise ContractError(f"component parameter {v!r} is not bound in the parameter map")
        if nc and self.virtual is None:
            raise ContractError("virtual configuration without a virtual mechanism")
        # fail early if the virtual mechanism cannot be simulated
        _ = self.virtual_assembled

    def _check_terminal(self, t: Terminal):
        if t.side == "reference":
            if t.point.body != 0:
                raise ContractError("reference terminals must use body 0")
            return
        n = self.robot.n if t.side == "robot" else (self.virtual.n if self.virtual is not None else 0)
        if t.point.body > n:
            raise ContractError(f"terminal body {t.point.body} out of range for the {t.side} mechanism")

    @property
    def n_r(self) -> int:
        return self.robot.n

    @property
    def n_c(self) -> int:
        return self.virtual.n if self.virtual is not None else 0

    @property
    def state_dim(self) -> int:
        return 2 * self.n_r + 2 * self.n_c + 4

    @property
    def w_dim(self) -> int:
        return self.wiring.dim(self.n_r)

    @property
    def y_dim(self) -> int:
        return self.perf.dim(self.n_r)

    @cached_property
    def virtual_assembled(self) -> Mechanism | None:
        if self.virtual is None:
            return None
        inerters = [c for c in self.components if isinstance(c, Inerter)]
        return assemble_inertance(inerters, self.virtual)

    @cached_property
    def _layout(self):
        nr = self.n_r
        sl = dict(zip(range(len(self.wiring.channels)), self.wiring.slices(nr)))
        noise_q = [sl[i] for i, c in enumerate(self.wiring.channels) if c.kind == "noise_q"]
        noise_qd = [sl[i] for i, c in enumerate(self.wiring.channels) if c.kind == "noise_qd"]
        ref = [sl[i] for i, c in enumerate(self.wiring.channels) if c.kind == "reference"]
        forces = [(c, sl[i]) for i, c in enumerate(self.wiring.channels) if c.kind == "force"]
        return noise_q, noise_qd, ref, forces

    def with_params(self, params: ParameterMap, **kw) -> "ClosedLoopSystem":
        return _replace(self, params=params, **kw)


def _replace(sys: ClosedLoopSystem, **kw) -> ClosedLoopSystem:
    fields = dict(robot=sys.robot, virtual=sys.virtual, components=sys.components, wiring=sys.wiring, perf=sys.perf,
                  params=sys.params, gravity_comp=sys.gravity_comp, q0_robot=sys.q0_robot, q0_virtual=sys.q0_virtual,
                  tau=sys.tau, eps=sys.eps, name=sys.name, metadata=dict(sys.metadata))
    fields.update(kw)
    return ClosedLoopSystem(**fields)


def _terminals(c):
    if isinstance(c, InterfaceComponent):
        return (c.a, c.b)
    if isinstance(c, Inerter):
        return (c.a, c.b)
    if isinstance(c, ConstantForce):
        return (c.a,)
    return ()


def _bound_names(c):
    laws = []
    if isinstance(c, InterfaceComponent):
        laws = [c.spring, c.damper]
    elif isinstance(c, JointDamper):
        return [c.c] if isinstance(c.c, str) else []
    out = []
    for law in laws:
        if law is None:
            continue
        for v in vars(law).values():
            if isinstance(v, str):
                out.append(v)
    return out


# evaluation --------------------------------------------------------------------

class _Eval(NamedTuple):
    qdd_r: object
    qdd_c: object
    u_ctrl: object
    y: object


class _Point(NamedTuple):
    x: object
    v: object
    J: object  # None for points without joint dependence
    side: str


def _zeros(n):
    return jnp.zeros(n)


def _split(sys: ClosedLoopSystem, x):
    nr, nc = sys.n_r, sys.n_c
    q = x[:nr]
    qd = x[nr:2 * nr]
    qc = x[2 * nr:2 * nr + nc]
    qdc = x[2 * nr + nc:2 * nr + 2 * nc]
    c = x[2 * nr + 2 * nc:]
    return q, qd, qc, qdc, c


def _signals(sys: ClosedLoopSystem, w, wd):
    """Weighted physical signals: (n_q, n_qd, r, rdot, [(channel, value)])."""
    nr = sys.n_r
    W = sys.wiring.weights(nr)
    pw = w * W if W.size else w
    noise_q, noise_qd, ref, forces = sys._layout
    nq = _sum_blocks(pw, noise_q)
    nqd = _sum_blocks(pw, noise_qd)
    r = _sum_blocks(pw, ref)
    rd = _sum_blocks(wd * W, ref) if ref else None
    fvals = [(ch, pw[sl]) for ch, sl in forces]
    return nq, nqd, r, rd, fvals


def _sum_blocks(v, slices):
    if not slices:
        return None
    out = v[slices[0]]
    for sl in slices[1:]:
        out = out + v[sl]
    return out


class _Kin:
    """Lazily computed frames for one mechanism configuration."""

    def __init__(self, mech, q, qd):
        self.mech, self.q, self.qd = mech, q, qd
        self._f = None

    @property
    def frames(self):
        if self._f is None:
            self._f = ml._frames(self.mech, self.q)
        return self._f

    def point(self, att: PointAttachment, side: str, need_J=True) -> _Point:
        if att.body == 0:
            return _Point(jnp.asarray(att.offset), _zeros(3), None, side)
        f = self.frames
        x = ml._point(f, att)
        J = ml._jacobian(self.mech, f, att, x)
        return _Point(x, ad.matmul(J, self.qd), J, side)


def _terminal_point(t: Terminal, kin_r: _Kin, kin_c: _Kin | None, r, rd) -> _Point:
    if t.side == "reference":
        off = jnp.asarray(t.point.offset)
        return _Point(off + r, rd, None, "reference")
    if t.side == "robot":
        return kin_r.point(t.point, "robot")
    return kin_c.point(t.point, "virtual")


def _evaluate(sys: ClosedLoopSystem, x, w, wd, params, want_acc=True) -> _Eval:
    robot = sys.robot
    virtual = sys.virtual_assembled
    nr, nc = sys.n_r, sys.n_c
    q, qd, qc, qdc, _ = _split(sys, x)
    nq, nqd, r, rd, fvals = _signals(sys, w, wd)

    kin_true = _Kin(robot, q, qd)
    if nq is None and nqd is None:
        kin_meas = kin_true
        q_m, qd_m = q, qd
    else:
        q_m = q + nq if nq is not None else q
        qd_m = qd + nqd if nqd is not None else qd
        kin_meas = _Kin(robot, q_m, qd_m)
    kin_c = _Kin(virtual, qc, qdc) if nc else None

    u_r = _zeros(nr)
    u_c = _zeros(nc)

    def add(side, J, F):
        nonlocal u_r, u_c
        tau = ad.matmul(ad.transpose(J), F)
        if side == "robot":
            u_r = u_r + tau
        elif side == "virtual":
            u_c = u_c + tau

    for comp in sys.components:
        if isinstance(comp, InterfaceComponent):
            a = _terminal_point(comp.a, kin_meas, kin_c, r, rd)
            b = _terminal_point(comp.b, kin_meas, kin_c, r, rd)
            z = a.x - b.x - np.asarray(comp.rest_offset)
            zd = a.v - b.v
            F = comp.force(z, zd, params)
            if a.J is not None:
                add(a.side, a.J, -F)
            if b.J is not None:
                add(b.side, b.J, F)
        elif isinstance(comp, JointDamper):
            c = params[comp.c] if isinstance(comp.c, str) else comp.c
            j = comp.joint - 1
            if comp.side == "robot":
                e = np.eye(nr)[j]
                u_r = u_r - e * (c * qd_m[j])
            else:
                e = np.eye(nc)[j]
                u_c = u_c - e * (c * qdc[j])
        elif isinstance(comp, ConstantForce):
            a = _terminal_point(comp.a, kin_meas, kin_c, r, rd)
            if a.J is not None:
                add(a.side, a.J, np.asarray(comp.force))

    f_true = kin_true.frames
    S = ml._subspaces(robot, f_true)
    inert = ml._body_inertias(robot, f_true)
    if sys.gravity_comp and robot.has_gravity:
        if kin_meas is kin_true:
            g_comp = ml._rnea(robot, f_true, S, inert, None, None)
        else:
            fm = kin_meas.frames
            g_comp = ml._rnea(robot, fm, ml._subspaces(robot, fm), ml._body_inertias(robot, fm), None, None)
        u_ctrl = u_r + g_comp
    else:
        u_ctrl = u_r

    u_dist = _zeros(nr)
    for ch, val in fvals:
        F = val[0] * np.asarray(ch.axis) if ch.axis is not None else val
        p = kin_true.point(ch.target.point, "robot")
        if p.J is not None:
            u_dist = u_dist + ad.matmul(ad.transpose(p.J), F)

    y = _outputs(sys, kin_true, qd, u_ctrl, r)

    if not want_acc:
        return _Eval(None, None, u_ctrl, y)
    M = ml._crba(robot, f_true, S, inert)
    h = ml._rnea(robot, f_true, S, inert, qd, None)
    qdd_r = ad.solve_spd(M, u_ctrl + u_dist - h)
    if nc:
        fc = kin_c.frames
        Sc = ml._subspaces(virtual, fc)
        Ic = ml._body_inertias(virtual, fc)
        Mc = ml._crba(virtual, fc, Sc, Ic)
        hc = ml._rnea(virtual, fc, Sc, Ic, qdc, None)
        qdd_c = ad.solve_spd(Mc, u_c - hc)
    else:
        qdd_c = _zeros(0)
    return _Eval(qdd_r, qdd_c, u_ctrl, y)


def _outputs(sys, kin: _Kin, qd, u_ctrl, r):
    parts = []
    for b in sys.perf.blocks:
        W = np.asarray(b.weight)
        if b.kind == "q":
            raw = kin.q
        elif b.kind == "qd":
            raw = qd
        elif b.kind == "u":
            raw = u_ctrl
        elif b.kind == "tracking":
            x = ml._point(kin.frames, b.point) if b.point.body else jnp.asarray(b.point.offset)
            ref = np.asarray(b.reference)
            raw = x - (ref + r if r is not None else ref)
        else:
            f = kin.frames
            R = f.R[b.point.body]
            p = ml._point(f, b.point)
            raw = rcm_error(Transform(R, p), np.asarray(b.rcm))
        parts.append(raw * W)
    if not parts:
        return _zeros(0)
    return ad.concatenate(parts)


def rcm_error(frame: Transform, rcm):
    """First two coordinates of the port position in the instrument frame."""
    d = np.asarray(rcm) - frame.p
    local = ad.matmul(ad.transpose(frame.R), d)
    return local[:2]


def rhs_core(sys: ClosedLoopSystem, x, w, wd, route, params, slots=(True, True)):
    """State derivative for given signal values ``w``, ``wd = dw/dt`` and routing weights.

    ``slots`` statically switches off cost slots that no scenario in a batch uses.
    """
    ev = _evaluate(sys, x, w, wd, params)
    nr, nc = sys.n_r, sys.n_c
    _, qd, _, qdc, c = _split(sys, x)
    m1, m2 = route[0], route[1]
    rates = [0.0 * m1] * 4
    if slots[0]:
        rates[0] = m1 * ad.dot(w, w)
        rates[1] = m1 * ad.dot(ev.y, ev.y)
    if slots[1]:
        cw2, cy2 = c[2], c[3]
        rates[2] = m2 * (ad.maximum(cw2, ad.norm(w)) - cw2) / sys.tau
        rates[3] = m2 * (ad.maximum(cy2, ad.norm(ev.y)) - cy2) / sys.tau
    return ad.concatenate([qd, ev.qdd_r, qdc, ev.qdd_c, ad.stack(rates)])


def _as_tones(sys, scenario) -> ToneArrays:
    if isinstance(scenario, ToneArrays):
        return scenario
    if scenario is None:
        return tone_arrays(Scenario.zero(sys.w_dim))
    if scenario.dim != sys.w_dim:
        raise ContractError(f"scenario has dimension {scenario.dim}, the system expects {sys.w_dim}")
    return tone_arrays(scenario)


def signal_at(tones: ToneArrays, t):
    """``(w, dw/dt)`` of a tone set at time ``t``."""
    arg = tones.omega * t + tones.phase
    s = ad.sin(arg)
    c = ad.cos(arg)
    w = ad.matmul(s, tones.amp)
    wd = ad.matmul(c * tones.omega, tones.amp)
    return w, wd


def _check_state(sys, x):
    if ad.primal(x).shape != (sys.state_dim,):
        raise ContractError(f"state must have shape ({sys.state_dim},), got {ad.primal(x).shape}")


def rhs(sys: ClosedLoopSystem, x, t, theta, scenario=None):
    """``xdot = f(x, t; theta, w)`` of the closed loop."""
    _check_state(sys, x)
    tones = _as_tones(sys, scenario)
    w, wd = signal_at(tones, t)
    return rhs_core(sys, x, w, wd, tones.route, sys.params.apply(theta))


def performance_outputs(sys: ClosedLoopSystem, x, t, theta, scenario=None):
    """Weighted outputs routed to the L2 slot ``y1`` and the peak slot ``y2``."""
    _check_state(sys, x)
    tones = _as_tones(sys, scenario)
    w, wd = signal_at(tones, t)
    ev = _evaluate(sys, x, w, wd, sys.params.apply(theta), want_acc=False)
    return tones.route[0] * ev.y, tones.route[1] * ev.y


def control_torque(sys: ClosedLoopSystem, x, t, theta, scenario=None):
    tones = _as_tones(sys, scenario)
    w, wd = signal_at(tones, t)
    return _evaluate(sys, x, w, wd, sys.params.apply(theta), want_acc=False).u_ctrl


def gravity_compensation(sys: ClosedLoopSystem, q_r):
    """Torques that hold the robot against gravity at ``q_r``."""
    return ml.gravity_forces(sys.robot, q_r)


def initial_state(sys: ClosedLoopSystem, q_r=None, qd_r=None, q_c=None, qd_c=None) -> jnp.ndarray:
    nr, nc = sys.n_r, sys.n_c
    parts = [
        np.asarray(sys.q0_robot if q_r is None else q_r, dtype=float),
        np.zeros(nr) if qd_r is None else np.asarray(qd_r, dtype=float),
        np.asarray(sys.q0_virtual if q_c is None else q_c, dtype=float),
        np.zeros(nc) if qd_c is None else np.asarray(qd_c, dtype=float),
        np.zeros(4),
    ]
    return jnp.asarray(np.concatenate(parts))


def storage(sys: ClosedLoopSystem, x, theta):
    """Energy stored in the interconnection (zero exogenous input).

    Robot kinetic energy (plus gravity potential when it is not compensated),
    virtual kinetic energy, spring potentials and constant-force potentials.
    """
    params = sys.params.apply(theta)
    q, qd, qc, qdc, _ = _split(sys, x)
    E = ml.kinetic_energy(sys.robot, q, qd)
    if not sys.gravity_comp:
        E = E + ml.potential_energy(sys.robot, q)
    kin_r = _Kin(sys.robot, q, qd)
    kin_c = None
    if sys.n_c:
        virtual = sys.virtual_assembled
        E = E + ml.mechanical_energy(virtual, qc, qdc)
        kin_c = _Kin(virtual, qc, qdc)
    zero = _zeros(3)
    for comp in sys.components:
        if isinstance(comp, InterfaceComponent) and comp.spring is not None:
            a = _terminal_point(comp.a, kin_r, kin_c, zero, zero)
            b = _terminal_point(comp.b, kin_r, kin_c, zero, zero)
            E = E + spring_potential(comp.spring, a.x - b.x - np.asarray(comp.rest_offset), params)
        elif isinstance(comp, ConstantForce):
            a = _terminal_point(comp.a, kin_r, kin_c, zero, zero)
            E = E - ad.dot(np.asarray(comp.force), a.x)
    return E


def dissipation(sys: ClosedLoopSystem, x, theta):
    """Total damper power ``sum F.zdot >= 0`` at zero exogenous input."""
    params = sys.params.apply(theta)
    q, qd, qc, qdc, _ = _split(sys, x)
    kin_r = _Kin(sys.robot, q, qd)
    kin_c = _Kin(sys.virtual_assembled, qc, qdc) if sys.n_c else None
    zero = _zeros(3)
    P = 0.0
    for comp in sys.components:
        if isinstance(comp, InterfaceComponent) and comp.damper is not None:
            a = _terminal_point(comp.a, kin_r, kin_c, zero, zero)
            b = _terminal_point(comp.b, kin_r, kin_c, zero, zero)
            P = P + comp.dissipation(a.x - b.x - np.asarray(comp.rest_offset), a.v - b.v, params)
        elif isinstance(comp, JointDamper):
            c = params[comp.c] if isinstance(comp.c, str) else comp.c
            v = qd[comp.joint - 1] if comp.side == "robot" else qdc[comp.joint - 1]
            P = P + c * v * v
    return P


# serialization ----------------------------------------------------------------

def _terminal_dict(t):
    return None if t is None else component_to_dict(ConstantForce(t, (0, 0, 0)))["a"]


def _point_dict(p):
    return None if p is None else {"body": p.body, "offset": list(p.offset)}


def system_to_dict(sys: ClosedLoopSystem) -> dict:
    return {
        "schema": SCHEMA,
        "name": sys.name,
        "robot": ml.mechanism_to_dict(sys.robot),
        "virtual": ml.mechanism_to_dict(sys.virtual) if sys.virtual is not None else None,
        "components": [component_to_dict(c) for c in sys.components],
        "gravity_comp": sys.gravity_comp,
        "wiring": {
            "channels": [
                {"kind": c.kind, "weight": list(c.weight), "target": _terminal_dict(c.target),
                 "axis": list(c.axis) if c.axis is not None else None, "name": c.name}
                for c in sys.wiring.channels
            ]
        },
        "performance": {
            "blocks": [
                {"kind": b.kind, "weight": list(b.weight), "point": _point_dict(b.point),
                 "reference": list(b.reference) if b.reference is not None else None,
                 "rcm": list(b.rcm) if b.rcm is not None else None}
                for b in sys.perf.blocks
            ]
        },
        "parameters": sys.params.to_dict(),
        "initial": {"q_robot": list(sys.q0_robot), "q_virtual": list(sys.q0_virtual)},
        "tau": sys.tau,
        "eps": sys.eps,
        "metadata": sys.metadata,
    }


def _terminal_from(d):
    if d is None:
        return None
    return component_from_dict({"type": "constant_force", "a": d, "force": [0, 0, 0]}).a


def _point_from(d):
    return None if d is None else PointAttachment(int(d["body"]), tuple(d.get("offset", (0, 0, 0))))


def system_from_dict(doc: dict) -> ClosedLoopSystem:
    if doc.get("schema") != SCHEMA:
        raise ContractError(f"unsupported system schema {doc.get('schema')!r}; expected {SCHEMA}")
    try:
        channels = tuple(
            Channel(c["kind"], tuple(c["weight"]), _terminal_from(c.get("target")),
                    tuple(c["axis"]) if c.get("axis") is not None else None, c.get("name", ""))
            for c in doc["wiring"]["channels"]
        )
        blocks = tuple(
            OutputBlock(b["kind"], tuple(b["weight"]), _point_from(b.get("point")),
                        tuple(b["reference"]) if b.get("reference") is not None else None,
                        tuple(b["rcm"]) if b.get("rcm") is not None else None)
            for b in doc["performance"]["blocks"]
        )
        init = doc.get("initial", {})
        return ClosedLoopSystem(
            robot=ml.mechanism_from_dict(doc["robot"]),
            virtual=ml.mechanism_from_dict(doc["virtual"]) if doc.get("virtual") else None,
            components=tuple(component_from_dict(c) for c in doc["components"]),
            wiring=ExogenousWiring(channels),
            perf=PerformanceOutput(blocks),
            params=ParameterMap.from_dict(doc["parameters"]),
            gravity_comp=bool(doc.get("gravity_comp", True)),
            q0_robot=tuple(init["q_robot"]) if init.get("q_robot") is not None else None,
            q0_virtual=tuple(init["q_virtual"]) if init.get("q_virtual") is not None else None,
            tau=float(doc.get("tau", TAU)),
            eps=float(doc.get("eps", EPS)),
            name=doc.get("name", ""),
            metadata=dict(doc.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"malformed system description: {exc!r}") from exc


def load_system(path) -> ClosedLoopSystem:
    with open(path, encoding="utf-8") as fh:
        return system_from_dict(json.load(fh))
