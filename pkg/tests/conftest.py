import numpy as np
import pytest

import vmtune  # noqa: F401  (enables float64)
from vmtune.mechlib import Body, Joint, Mechanism, PointAttachment


def planar_arm(lengths=(1.0, 1.0), masses=(1.0, 1.0), gravity=(0.0, 0.0, 0.0)):
    """Planar arm in the xy-plane, revolute about z, point masses at the link tips."""
    bodies, joints = [], []
    for i, (l, m) in enumerate(zip(lengths, masses)):
        bodies.append(Body(m, (l, 0.0, 0.0)))
        joints.append(Joint("revolute", (0, 0, 1), i, (lengths[i - 1] if i else 0.0, 0, 0)))
    return Mechanism(tuple(bodies), tuple(joints), gravity)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def random_body(rng):
    R = random_rotation(rng)
    moments = np.sort(rng.uniform(0.05, 1.0, 3))
    moments[2] = min(moments[2], moments[0] + moments[1])
    I = R @ np.diag(moments) @ R.T
    I = 0.5 * (I + I.T)
    return Body(rng.uniform(0.5, 3.0), tuple(rng.normal(scale=0.3, size=3)), tuple(map(tuple, I)))


def random_chain(rng, n=5, tree=False, gravity=(0.0, 0.0, -9.81)):
    bodies, joints = [], []
    for i in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        parent = int(rng.integers(0, i + 1)) if tree else i
        kind = "prismatic" if rng.random() < 0.3 else "revolute"
        joints.append(Joint(kind, tuple(axis), parent, tuple(rng.normal(scale=0.5, size=3)),
                            tuple(rng.uniform(-np.pi, np.pi, 3))))
        bodies.append(random_body(rng))
    return Mechanism(tuple(bodies), tuple(joints), gravity)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tip():
    return PointAttachment(2, (1.0, 0.0, 0.0))


# acceptance criteria report lines, printed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
