"""Pre-wired closed-loop systems: PD cart, reaching cart-on-rail, RCM virtual instrument."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mechlib as ml
from .closedloop import Channel, ClosedLoopSystem, ExogenousWiring, OutputBlock, PerformanceOutput
from .components import (
    ConstantForce,
    Inerter,
    InterfaceComponent,
    JointDamper,
    LinearDamper,
    LinearSpring,
    TanhSpring,
    Terminal,
)
from .mechlib import Body, Joint, Mechanism, PointAttachment
from .parameters import ParameterMap, ParamSpec
from .scenarios import Scenario, ScenarioSet, grid_scenarios, surgical_scenarios

__all__ = [
    "ExperimentPreset",
    "build_cart",
    "build_reach",
    "build_rcm",
    "PRESETS",
    "build_preset",
    "CART_WW",
    "CART_WY",
]

CART_WW = (0.01, 0.1, 5.0)  # weights of the cart exogenous channels [n_q, n_qd, d]
CART_WY = (100.0, 0.0, 1.0)  # weights of the cart outputs [q, qd, u]


@dataclass(frozen=True, eq=False)
class ExperimentPreset:
    name: str
    system: ClosedLoopSystem
    theta0: np.ndarray
    scenarios: ScenarioSet
    notes: dict = field(default_factory=dict)
    lr: float = 1.0
    iters: int = 200
    dt: float = 1e-3
    regularize: bool = False


# cart ------------------------------------------------------------------------

def build_cart(m: float = 1.0, param_map: str = "raw", n_scenarios: int = 400, seed: int = 0) -> ExperimentPreset:
    """1-DOF cart under ``u = -k (q + n_q) - b (qd + n_qd)`` and a force ``d``.

    ``param_map="raw"`` tunes ``(k, b)`` directly (clamped at 1e-6 from
    below); ``"log"`` tunes ``(ln k, ln 100 b)``.
    """
    robot = Mechanism((Body(m, name="cart"),), (Joint("prismatic", (1.0, 0.0, 0.0), 0),), (0.0, 0.0, 0.0))
    cart = Terminal("robot", PointAttachment(1))
    ground = Terminal.ground()
    pd = InterfaceComponent(cart, ground, LinearSpring("k"), LinearDamper("b"), name="pd")
    wiring = ExogenousWiring((
        Channel("noise_q", (CART_WW[0],), name="n_q"),
        Channel("noise_qd", (CART_WW[1],), name="n_qd"),
        Channel("force", (CART_WW[2],), target=cart, axis=(1.0, 0.0, 0.0), name="d"),
    ))
    perf = PerformanceOutput((
        OutputBlock("q", (CART_WY[0],)),
        OutputBlock("qd", (CART_WY[1],)),
        OutputBlock("u", (CART_WY[2],)),
    ))
    if param_map == "raw":
        params = ParameterMap((ParamSpec("k", "raw", 1e-6), ParamSpec("b", "raw", 1e-6)))
        theta0 = np.array([100.0, 10.0])
    elif param_map == "log":
        params = ParameterMap((ParamSpec("k", "stiffness"), ParamSpec("b", "damping")))
        theta0 = np.array([np.log(100.0), np.log(100.0 * 10.0)])
    else:
        raise ValueError(f"unknown cart parameter map {param_map!r}")
    system = ClosedLoopSystem(robot, None, (pd,), wiring, perf, params, gravity_comp=False, name="cart",
                              metadata={"cart_mass": m, "cart_mass_note": "assumed; not stated in the source"})
    return ExperimentPreset("cart", system, theta0, grid_scenarios(n_scenarios, seed),
                            notes={"m": m, "param_map": param_map}, lr=1.0, iters=500, dt=1e-3)


# reaching ----------------------------------------------------------------------

REACH_Q0 = (1.69, 1.65)  # elbow-bent pose, tip at about (-1.10, 0.80) with 2 m of rail within reach


def _planar_arm(link: float = 1.0, mass: float = 1.0) -> Mechanism:
    """Two revolute joints about z, unit links with point masses at their ends, gravity along -y."""
    bodies = (Body(mass, (link, 0.0, 0.0), name="link1"), Body(mass, (link, 0.0, 0.0), name="link2"))
    joints = (Joint("revolute", (0.0, 0.0, 1.0), 0), Joint("revolute", (0.0, 0.0, 1.0), 1, (link, 0.0, 0.0)))
    return Mechanism(bodies, joints, (0.0, -9.81, 0.0))


def build_reach(m_c: float = 2.0, c_c: float = 50.0, F_d: float = 25.0, k: float = 500.0, c: float = 50.0,
                saturating: bool = False, sigma: float = 10.0, q0=REACH_Q0, n_scenarios: int = 8,
                seed: int = 0) -> ExperimentPreset:
    """Arm tip tied by a spring-damper to a virtual cart on a rail along +x.

    The cart (mass ``m_c``, drag ``c_c``) is pulled by ``F_d``; with the arm
    following freely it settles at the speed ``F_d / c_c``.  ``saturating``
    swaps the linear spring for a tanh spring whose force is bounded by ``sigma`` (N).
    """
    robot = _planar_arm()
    tip = PointAttachment(2, (1.0, 0.0, 0.0))
    x_tip = np.asarray(ml.point_position(robot, np.asarray(q0, dtype=float), tip))
    rail = Joint("prismatic", (1.0, 0.0, 0.0), 0, tuple(x_tip))
    virtual = Mechanism((Body(m_c, name="cart"),), (rail,), (0.0, 0.0, 0.0))
    ee = Terminal("robot", tip)
    cart = Terminal("virtual", PointAttachment(1))
    spring = TanhSpring("k", sigma) if saturating else LinearSpring("k")
    components = (
        InterfaceComponent(ee, cart, spring, LinearDamper("c"), name="tether"),
        JointDamper("virtual", 1, c_c, name="rail drag"),
        ConstantForce(cart, (F_d, 0.0, 0.0), name="drive"),
    )
    wiring = ExogenousWiring((Channel("force", (1.0, 1.0, 1.0), target=ee, name="d_tip"),))
    perf = PerformanceOutput((OutputBlock("tracking", (1.0, 1.0, 1.0), point=tip, reference=tuple(x_tip)),))
    params = ParameterMap((ParamSpec("k", "stiffness"), ParamSpec("c", "damping")))
    system = ClosedLoopSystem(robot, virtual, components, wiring, perf, params, gravity_comp=True,
                              q0_robot=tuple(q0), name="reach",
                              metadata={"m_c": m_c, "c_c": c_c, "F_d": F_d, "saturating": saturating,
                                        "note": "desk-scale parameters chosen for visibility, not from the source"})
    theta0 = params.inverse([k, c])
    return ExperimentPreset("reach", system, theta0, grid_scenarios(n_scenarios, seed, dim=3),
                            notes={"m_c": m_c, "c_c": c_c, "F_d": F_d, "k": k, "c": c, "q0": list(q0)},
                            lr=1.0, iters=100, dt=1e-3)


# RCM virtual instrument ----------------------------------------------------------

ARM6_Q0 = (0.0, 0.6, 1.2, 0.0, 1.3415926535897931, 0.0)  # flange z points straight down
TOOL_LENGTH = 0.30  # flange to instrument tip
PORT_DEPTH = 0.15  # flange to the remote centre along the instrument
RCM_THETA0 = 6.91

# (mass, com z, principal moments, joint axis, joint offset z along the previous link)
# wrist moments include reflected rotor inertia; without it the J4 damper is stiff for RK4 at dt = 2e-3
_ARM6 = (
    (3.0, 0.05, (0.03, 0.03, 0.02), (0.0, 0.0, 1.0), 0.30),
    (2.5, 0.20, (0.04, 0.04, 0.01), (0.0, 1.0, 0.0), 0.05),
    (2.0, 0.175, (0.025, 0.025, 0.008), (0.0, 1.0, 0.0), 0.40),
    (1.0, 0.05, (0.10, 0.10, 0.08), (0.0, 0.0, 1.0), 0.35),
    (0.7, 0.04, (0.06, 0.06, 0.04), (0.0, 1.0, 0.0), 0.10),
    (0.4, 0.05, (0.03, 0.03, 0.02), (0.0, 0.0, 1.0), 0.08),
)


def desk_arm6() -> Mechanism:
    """Declared 6-DOF desk-scale arm (J1 z, J2 y, J3 y, J4 z, J5 y, J6 z); flange z is the instrument axis."""
    bodies, joints = [], []
    for i, (m, cz, moments, axis, oz) in enumerate(_ARM6):
        bodies.append(Body(m, (0.0, 0.0, cz), np.diag(moments), name=f"link{i + 1}"))
        joints.append(Joint("revolute", axis, i, (0.0, 0.0, oz)))
    return Mechanism(tuple(bodies), tuple(joints), (0.0, 0.0, -9.81))


def build_rcm(q0=ARM6_Q0, saturating: bool = False, sigma: float = 6.0) -> ExperimentPreset:
    """Robot instrument coupled to a virtual instrument pivoting about a fixed port.

    The virtual instrument has three revolute joints (z, y, x) at the remote
    centre and a prismatic joint along its axis; it carries 0.05 I kg m^2 and
    a 1 kg ground inerter at its tip.  Two spring-damper pairs tie the robot
    flange and tip to the matching instrument points, a third pulls the
    instrument tip to the reference, and joint dampers on J1 and J4 arrest
    null-space motion.  All eight gains go through the exp map from
    ``theta = 6.91``.
    """
    robot = desk_arm6()
    q0 = np.asarray(q0, dtype=float)
    fl = ml.forward_kinematics(robot, q0)[6]
    R, p = np.asarray(fl.R), np.asarray(fl.p)
    axis = R[:, 2]
    rcm = p + PORT_DEPTH * axis
    tip_x = p + TOOL_LENGTH * axis
    # virtual instrument frame: x, y as the flange, z along the instrument
    rpy = _rpy_of(R)
    Z = np.eye(3)
    massless = Body(0.0)
    virtual = Mechanism(
        (massless, massless, massless, Body(0.0, inertia=0.05 * np.eye(3), name="instrument")),
        (
            Joint("revolute", tuple(Z[2]), 0, tuple(rcm), rpy),
            Joint("revolute", tuple(Z[1]), 1),
            Joint("revolute", tuple(Z[0]), 2),
            Joint("prismatic", tuple(Z[2]), 3),
        ),
        (0.0, 0.0, 0.0),
    )
    depth0 = TOOL_LENGTH - PORT_DEPTH
    v_tip = Terminal("virtual", PointAttachment(4, (0.0, 0.0, 0.0)))
    v_base = Terminal("virtual", PointAttachment(4, (0.0, 0.0, -TOOL_LENGTH)))
    r_tip = Terminal("robot", PointAttachment(6, (0.0, 0.0, TOOL_LENGTH)))
    r_base = Terminal("robot", PointAttachment(6))
    ref = Terminal("reference", PointAttachment(0, tuple(tip_x)))

    def spring(name):
        return TanhSpring(name, sigma) if saturating else LinearSpring(name)

    components = (
        InterfaceComponent(v_tip, ref, spring("k_ref"), LinearDamper("c_ref"), name="tip to reference"),
        InterfaceComponent(r_base, v_base, spring("k_base"), LinearDamper("c_base"), name="flange coupling"),
        InterfaceComponent(r_tip, v_tip, spring("k_tip"), LinearDamper("c_tip"), name="tip coupling"),
        JointDamper("robot", 1, "c_j1", name="J1 damper"),
        JointDamper("robot", 4, "c_j4", name="J4 damper"),
        Inerter(1.0, v_tip),
    )
    n = robot.n
    port_point = Terminal("robot", PointAttachment(6, (0.0, 0.0, PORT_DEPTH)))
    wiring = ExogenousWiring((
        Channel("force", (8.0,) * 3, target=r_tip, name="d_ee"),
        Channel("force", (4.0,) * 3, target=port_point, name="d_rcm"),
        Channel("noise_q", (0.002,) * n, name="n_q"),
        Channel("noise_qd", (0.1,) * n, name="n_qd"),
        Channel("reference", (0.05,) * 3, name="r"),
    ))
    perf = PerformanceOutput((
        OutputBlock("tracking", (1.0, 1.0, 1.0), point=r_tip.point, reference=tuple(tip_x)),
        OutputBlock("rcm", (np.sqrt(0.2),) * 2, point=r_base.point, rcm=tuple(rcm)),
    ))
    names = ("k_ref", "c_ref", "k_base", "c_base", "k_tip", "c_tip", "c_j1", "c_j4")
    params = ParameterMap(tuple(ParamSpec(nm, "stiffness" if nm.startswith("k") else "damping") for nm in names))
    system = ClosedLoopSystem(robot, virtual, components, wiring, perf, params, gravity_comp=True,
                              q0_robot=tuple(q0), q0_virtual=(0.0, 0.0, 0.0, depth0), name="rcm",
                              metadata={"rcm": rcm.tolist(), "tool_length": TOOL_LENGTH, "port_depth": PORT_DEPTH,
                                        "note": "declared desk-scale arm; inertial values are not from the source"})
    return ExperimentPreset("rcm", system, np.full(len(names), RCM_THETA0), surgical_scenarios(n),
                            notes={"rcm": rcm.tolist(), "q0": q0.tolist(), "saturating": saturating},
                            lr=1.0, iters=200, dt=2e-3, regularize=True)


def _rpy_of(R: np.ndarray) -> tuple:
    """Roll-pitch-yaw angles with ``rpy_matrix(rpy) == R`` (away from pitch = +-pi/2)."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return (float(roll), float(pitch), float(yaw))


PRESETS = {"cart": build_cart, "reach": build_reach, "rcm": build_rcm}


def build_preset(name: str, **kw) -> ExperimentPreset:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return builder(**kw)
