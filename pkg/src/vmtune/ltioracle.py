"""Frequency-sweep ground truth for the PD cart.

The weighted cart loop is linear, so its L2 gain is ``sup_w sigma_max(G(jw))``
with ``G(s) = C (sI - A)^-1 B + D``.  We evaluate it on a dense log grid and
polish the peak by golden-section search; the best fixed-structure ``(k, b)``
comes from a coarse grid followed by nested bounded 1-D searches.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import optimize

__all__ = [
    "StateSpace",
    "UnstableSystemError",
    "cart_closed_loop",
    "frequency_response",
    "sigma_max",
    "gain_curve",
    "hinf_gain",
    "directional_gain",
    "oracle_optimum",
    "gain_curve_csv",
    "write_gain_csv",
]

GRID = (1e-3, 1e4, 2000)


class UnstableSystemError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (self.A, self.B, self.C, self.D))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n or D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"inconsistent dimensions A{A.shape} B{B.shape} C{C.shape} D{D.shape}")
        for name, M in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, M)

    @property
    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    @property
    def is_stable(self) -> bool:
        return bool(np.all(self.poles.real < 0))

    def transformed(self, T) -> "StateSpace":
        """Same input-output map in coordinates ``x = T z``."""
        T = np.asarray(T, dtype=float)
        Ti = np.linalg.inv(T)
        return StateSpace(Ti @ self.A @ T, Ti @ self.B, self.C @ T, self.D)


def cart_closed_loop(k: float, b: float, m: float = 1.0, W_w=(0.01, 0.1, 5.0), W_y=(100.0, 0.0, 1.0)) -> StateSpace:
    """Weighted cart under ``u = -k (q + n_q) - b (qd + n_qd)``.

    Inputs are the raw channels ``[n_q, n_qd, d]`` (scaled by ``W_w``), outputs
    ``W_y [q, qd, u]``; state ``[q, qd]``.
    """
    if not (k > 0 and b > 0 and m > 0):
        raise ValueError(f"need k, b, m > 0, got k={k!r}, b={b!r}, m={m!r}")
    wq, wqd, wd = W_w
    A = np.array([[0.0, 1.0], [-k / m, -b / m]])
    B = np.array([[0.0, 0.0, 0.0], [-k * wq / m, -b * wqd / m, wd / m]])
    C = np.array([[1.0, 0.0], [0.0, 1.0], [-k, -b]])
    D = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-k * wq, -b * wqd, 0.0]])
    Wy = np.diag(W_y)
    return StateSpace(A, B, Wy @ C, Wy @ D)


def frequency_response(ss: StateSpace, omega) -> np.ndarray:
    """``G(j omega)`` stacked along the leading axis."""
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    n = ss.A.shape[0]
    M = 1j * om[:, None, None] * np.eye(n) - ss.A
    X = np.linalg.solve(M, np.broadcast_to(ss.B, (om.size,) + ss.B.shape).astype(complex))
    return ss.C @ X + ss.D


def sigma_max(G) -> np.ndarray:
    """Largest singular value from the top eigenvalue of ``G^H G``."""
    GhG = np.conj(np.swapaxes(G, -1, -2)) @ G
    ev = np.linalg.eigvalsh(GhG)[..., -1]
    return np.sqrt(np.maximum(ev, 0.0))


def gain_curve(ss: StateSpace, omega) -> np.ndarray:
    return sigma_max(frequency_response(ss, omega))


def _require_stable(ss: StateSpace):
    if not ss.is_stable:
        raise UnstableSystemError(f"A is not Hurwitz (poles {ss.poles}); the gain is unbounded")


def hinf_gain(ss: StateSpace, grid=None) -> tuple[float, float]:
    """``(sup_w sigma_max(G(jw)), w_peak)`` over a log grid, polished by golden section."""
    _require_stable(ss)
    om = np.geomspace(*GRID) if grid is None else np.asarray(grid, dtype=float)
    s = gain_curve(ss, om)
    i = int(np.argmax(s))
    if i == 0 or i == om.size - 1:
        return float(s[i]), float(om[i])
    # search in log-frequency between the neighbours of the best grid point
    f = lambda u: -float(gain_curve(ss, np.exp(u))[0])
    lo, mid, hi = np.log(om[i - 1]), np.log(om[i]), np.log(om[i + 1])
    if not (f(mid) < f(lo) and f(mid) < f(hi)):
        return float(s[i]), float(om[i])
    res = optimize.minimize_scalar(f, bracket=(lo, mid, hi), method="golden", tol=1e-10)
    if -res.fun >= s[i]:
        return float(-res.fun), float(np.exp(res.x))
    return float(s[i]), float(om[i])


def directional_gain(ss: StateSpace, omega: float, direction) -> float:
    """``|G(j omega) eta| / |eta|``: steady-state RMS ratio for the input ``eta sin(omega t)``."""
    eta = np.asarray(direction, dtype=float)
    G = frequency_response(ss, omega)[0]
    return float(np.linalg.norm(G @ eta) / np.linalg.norm(eta))


def oracle_optimum(m: float = 1.0, W_w=(0.01, 0.1, 5.0), W_y=(100.0, 0.0, 1.0),
                   k_range=(10.0, 1000.0), b_range=(1.0, 200.0), grid: int = 25) -> tuple[float, float, float]:
    """Fixed-structure ``(k*, b*, gain*)`` minimizing the closed-loop gain.

    A ``grid x grid`` log grid locates the basin; nested bounded searches over
    ``log b`` (outer) and ``log k`` (inner) polish it.
    """
    if min(k_range) <= 0 or min(b_range) <= 0:
        raise ValueError("parameter ranges must be positive")

    def gain(k, b):
        ss = cart_closed_loop(k, b, m, W_w, W_y)
        return hinf_gain(ss)[0] if ss.is_stable else np.inf

    ks = np.geomspace(*k_range, grid)
    bs = np.geomspace(*b_range, grid)
    vals = np.array([[gain(k, b) for k in ks] for b in bs])
    ib, ik = np.unravel_index(np.argmin(vals), vals.shape)

    def span(arr, i):
        return np.log(arr[max(i - 1, 0)]), np.log(arr[min(i + 1, arr.size - 1)])

    k_lo, k_hi = span(ks, ik)

    def best_k(lb):
        r = optimize.minimize_scalar(lambda lk: gain(np.exp(lk), np.exp(lb)), bounds=(k_lo, k_hi),
                                     method="bounded", options={"xatol": 1e-9})
        return r.x, r.fun

    r = optimize.minimize_scalar(lambda lb: best_k(lb)[1], bounds=span(bs, ib), method="bounded",
                                 options={"xatol": 1e-9})
    lk, g = best_k(r.x)
    return float(np.exp(lk)), float(np.exp(r.x)), float(g)


def gain_curve_csv(ss: StateSpace, grid=None) -> str:
    om = np.geomspace(*GRID) if grid is None else np.asarray(grid, dtype=float)
    s = gain_curve(ss, om)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["omega", "sigma_max"])
    for a, b in zip(om, s):
        w.writerow([repr(float(a)), repr(float(b))])
    return buf.getvalue()


def write_gain_csv(path, ss: StateSpace, grid=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(gain_curve_csv(ss, grid))
