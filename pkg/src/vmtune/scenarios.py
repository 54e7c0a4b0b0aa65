"""Exogenous probing signals.

A scenario is a finite sum of tones ``w(t) = sum_i a_i sin(Omega_i t + phi_i)``
over the full exogenous vector ``w``, plus the routing of its cost into the
L2 slot (``w1, y1``), the peak slot (``w2, y2``) or neither (``none``, used
by the zero signal so that free responses cost nothing).  A constant signal
is a tone with ``Omega = 0`` and ``phi = pi/2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import jax.numpy as jnp

from . import autodiff as ad

__all__ = [
    "Tone",
    "Scenario",
    "ScenarioSet",
    "ToneArrays",
    "exp_frequency_grid",
    "sample_unit_directions",
    "grid_scenarios",
    "surgical_scenarios",
    "surgical_channel_layout",
    "adversarial_signal",
    "adversarial_tone",
    "horizon",
    "OMEGA_MIN",
    "OMEGA_MAX",
    "ADVERSARIAL_OMEGA_MIN",
]

OMEGA_MIN = 0.1
OMEGA_MAX = 500.0
ADVERSARIAL_OMEGA_MIN = 0.01
NORMS = ("L2", "Linf", "none")


@dataclass(frozen=True)
class Tone:
    amplitude: tuple
    omega: float
    phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))
        if not self.omega >= 0:
            raise ValueError(f"tone frequency must be >= 0, got {self.omega!r}")


@dataclass(frozen=True)
class Scenario:
    tones: tuple
    dim: int
    norm: str = "L2"
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tones", tuple(self.tones))
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        for t in self.tones:
            if len(t.amplitude) != self.dim:
                raise ValueError(f"tone amplitude has {len(t.amplitude)} entries, expected {self.dim}")

    @classmethod
    def zero(cls, dim: int, label: str = "zero") -> "Scenario":
        return cls((), dim, "none", label)

    @classmethod
    def sinusoid(cls, direction, omega, norm="L2", label="") -> "Scenario":
        d = np.asarray(direction, dtype=float)
        return cls((Tone(tuple(d), float(omega)),), d.size, norm, label)

    @property
    def omega_min(self) -> float | None:
        w = [t.omega for t in self.tones if t.omega > 0 and any(t.amplitude)]
        return min(w) if w else None

    def horizon(self, floor: float = 10.0, periods: float = 4.0) -> float:
        return horizon(self.omega_min, floor, periods)

    def w(self, t):
        """Signal value at time(s) ``t`` (plain floats)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.dim,))
        for tone in self.tones:
            out += np.sin(tone.omega * t + tone.phase)[..., None] * np.asarray(tone.amplitude)
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "dim": self.dim,
            "norm": self.norm,
            "tones": [{"amplitude": list(t.amplitude), "omega": t.omega, "phase": t.phase} for t in self.tones],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        tones = tuple(Tone(tuple(t["amplitude"]), float(t["omega"]), float(t.get("phase", 0.0))) for t in d.get("tones", ()))
        return cls(tones, int(d["dim"]), d.get("norm", "L2"), d.get("label", ""))


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if not self.scenarios:
            raise ValueError("a scenario set must not be empty")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    def extended(self, scenario: Scenario, provenance: dict | None = None) -> "ScenarioSet":
        return ScenarioSet(self.scenarios + (scenario,), provenance or self.provenance)

    def to_dict(self) -> dict:
        return {"schema": 1, "provenance": self.provenance, "scenarios": [s.to_dict() for s in self.scenarios]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSet":
        return cls(tuple(Scenario.from_dict(s) for s in d["scenarios"]), d.get("provenance", {}))


def horizon(omega_min: float | None, floor: float = 10.0, periods: float = 4.0) -> float:
    """``max(floor, periods * 2 pi / omega_min)``; tone-free signals get ``floor``."""
    if omega_min is None or omega_min <= 0:
        return floor
    return max(floor, periods * 2.0 * math.pi / omega_min)


def exp_frequency_grid(N: int, omega_min: float = OMEGA_MIN, omega_max: float = OMEGA_MAX) -> np.ndarray:
    """``omega_min * (omega_max/omega_min)**((i-1)/(N-1))`` for i = 1..N."""
    if N < 2:
        raise ValueError("the frequency grid needs N >= 2")
    i = np.arange(N)
    return omega_min * (omega_max / omega_min) ** (i / (N - 1))


def sample_unit_directions(n: int, dim: int, seed: int) -> np.ndarray:
    """``n`` isotropic unit vectors from a Philox (counter-based) generator."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    out = np.empty((n, dim))
    for i in range(n):
        v = rng.standard_normal(dim)
        while not np.linalg.norm(v) > 1e-12:
            v = rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


def grid_scenarios(N: int, seed: int, dim: int = 3, norm: str = "L2") -> ScenarioSet:
    """Probes ``eta_i sin(Omega_i t)`` on the exponential grid with random unit ``eta_i``."""
    omegas = exp_frequency_grid(N)
    dirs = sample_unit_directions(N, dim, seed)
    scen = tuple(Scenario.sinusoid(d, om, norm, f"grid-{i + 1}") for i, (d, om) in enumerate(zip(dirs, omegas)))
    return ScenarioSet(scen, {"kind": "sampled", "N": N, "seed": seed})


# surgical set -------------------------------------------------------------------

def surgical_channel_layout(n_joints: int) -> dict:
    """Slices of ``w = [d_ee(3), d_rcm(3), n_q(n), n_qd(n), r(3)]``."""
    n = n_joints
    return {
        "d_ee": slice(0, 3),
        "d_rcm": slice(3, 6),
        "n_q": slice(6, 6 + n),
        "n_qd": slice(6 + n, 6 + 2 * n),
        "r": slice(6 + 2 * n, 9 + 2 * n),
    }


_SURGICAL_ROWS = (("n",), ("d",), ("n", "d"), ("r",), ("n", "r"), ("d", "r"), ("n", "d", "r"))


def surgical_scenarios(n_joints: int = 6) -> ScenarioSet:
    """The seven presence combinations of noise ``n``, disturbance ``d`` and reference ``r``.

    ``n_q = n_qd = 1 sin(50 t)/sqrt(n)``, ``d_ee = d_rcm = [1 1 1] sin(2 t)/sqrt(3)``,
    ``r = [1 0 0] sin(3 t)/sqrt(3)``.
    """
    lay = surgical_channel_layout(n_joints)
    dim = 9 + 2 * n_joints

    def amp(pairs):
        a = np.zeros(dim)
        for key, value in pairs:
            a[lay[key]] = value
        return tuple(a)

    noise = Tone(amp([("n_q", 1 / np.sqrt(n_joints)), ("n_qd", 1 / np.sqrt(n_joints))]), 50.0)
    dist = Tone(amp([("d_ee", 1 / np.sqrt(3)), ("d_rcm", 1 / np.sqrt(3))]), 2.0)
    r = np.zeros(dim)
    r[lay["r"].start] = 1 / np.sqrt(3)
    ref = Tone(tuple(r), 3.0)
    tones = {"n": noise, "d": dist, "r": ref}
    scen = tuple(
        Scenario(tuple(tones[c] for c in row), dim, "L2", f"scenario-{i + 1}:{'+'.join(row)}")
        for i, row in enumerate(_SURGICAL_ROWS)
    )
    return ScenarioSet(scen, {"kind": "handcrafted", "name": "surgical", "n_joints": n_joints})


# adversarial parameterization -------------------------------------------------------

def adversarial_tone(omega, lo: float = ADVERSARIAL_OMEGA_MIN, hi: float = OMEGA_MAX):
    """``(amplitude, frequency)`` of ``w(omega)``: frequency ``clip(omega_1)``, direction ``omega_2.. / |omega_2..|``.

    Works on plain arrays and on duals.
    """
    freq = ad.clip(omega[0], lo, hi)
    direction = omega[1:]
    nrm = ad.norm(direction)
    if not _traced(nrm) and not float(ad.primal(nrm)) > 0:
        raise ValueError("adversarial direction must be nonzero")
    return direction / nrm, freq


def _traced(x) -> bool:
    import jax

    return isinstance(ad.primal(x), jax.core.Tracer)


def adversarial_signal(omega, norm: str = "L2", label: str = "adversarial",
                       lo: float = ADVERSARIAL_OMEGA_MIN, hi: float = OMEGA_MAX) -> Scenario:
    omega = np.asarray(ad.primal(omega), dtype=float)
    a, f = adversarial_tone(jnp.asarray(omega), lo, hi)
    return Scenario.sinusoid(np.asarray(a), float(f), norm, label)


# array form used by the simulator -------------------------------------------------------

class ToneArrays(NamedTuple):
    amp: object  # (n_tones, dim)
    omega: object  # (n_tones,)
    phase: object  # (n_tones,)
    route: object  # (2,) weights of the L2 and peak slots


def tone_arrays(scenario: Scenario, n_tones: int | None = None) -> ToneArrays:
    n = max(1, len(scenario.tones)) if n_tones is None else n_tones
    if len(scenario.tones) > n:
        raise ValueError("scenario has more tones than the requested padding")
    amp = np.zeros((n, scenario.dim))
    om = np.zeros(n)
    ph = np.zeros(n)
    for i, t in enumerate(scenario.tones):
        amp[i] = t.amplitude
        om[i] = t.omega
        ph[i] = t.phase
    route = {"L2": [1.0, 0.0], "Linf": [0.0, 1.0], "none": [0.0, 0.0]}[scenario.norm]
    return ToneArrays(jnp.asarray(amp), jnp.asarray(om), jnp.asarray(ph), jnp.asarray(route, dtype=float))


def stack_tone_arrays(scenarios: Sequence[Scenario]) -> ToneArrays:
    n = max(1, max(len(s.tones) for s in scenarios))
    parts = [tone_arrays(s, n) for s in scenarios]
    return ToneArrays(*(jnp.stack(x) for x in zip(*parts)))
