"""Min-max tuning of controller parameters.

``tune_sampled`` descends ``max_w L(theta, w)`` over a fixed scenario set with
the gradient of the active (worst) scenario.  ``tune_adversarial`` grows the
set: an inner ADAM ascent over the probe parameters ``omega = [Omega, eta]``
finds a bad sinusoid for the frozen controller, it joins the set, and the
controller takes a few outer descent steps on the enlarged set.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .closedloop import ClosedLoopSystem
from .parameters import ParameterMap, ParamSpec, REG_KNEE, regularization
from .scenarios import (
    ADVERSARIAL_OMEGA_MIN,
    OMEGA_MAX,
    Scenario,
    ScenarioSet,
    adversarial_signal,
    sample_unit_directions,
)
from .sim import SimConfig, adversarial_loss_and_gradient, evaluate_losses, loss_and_gradient

__all__ = [
    "ParameterMap",
    "ParamSpec",
    "regularization",
    "REG_KNEE",
    "OptimizerAbort",
    "AdamState",
    "adam_step",
    "IterationRecord",
    "TuneResult",
    "tune_sampled",
    "tune_adversarial",
    "inner_ascent",
    "cost_landscape",
    "landscape_csv",
]

AGGREGATES = ("max", "sum", "softmax")


class OptimizerAbort(ArithmeticError):
    """Non-finite gradient or cost during tuning."""


@dataclass(frozen=True)
class AdamState:
    alpha: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, alpha: float = 1.0, **kw) -> "AdamState":
        return cls(alpha, np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, theta, grad, maximize: bool = False):
    """One bias-corrected ADAM update; returns ``(theta, state)``."""
    g = np.asarray(grad, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient has shape {g.shape}, optimizer state expects {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise OptimizerAbort(f"non-finite gradient {g.tolist()} at theta = {theta.tolist()} (step {state.t + 1})")
    if maximize:
        g = -g
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    theta = theta - state.alpha * mhat / (np.sqrt(vhat) + state.eps)
    return theta, replace(state, m=m, v=v, t=t)


@dataclass
class IterationRecord:
    iteration: int
    cost: float  # aggregated cost (plus regularization) at theta before the step
    active: int  # index of the worst scenario
    theta: list
    n_scenarios: int


@dataclass
class TuneResult:
    mode: str
    theta_star: np.ndarray
    theta_hat_star: dict
    best_cost: float
    history: list
    final_costs: np.ndarray  # per-scenario losses at theta_star
    scenarios: ScenarioSet
    theta_final: np.ndarray
    wall_clock: float = 0.0
    settings: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)

    @property
    def cost_history(self) -> np.ndarray:
        return np.array([h.cost for h in self.history])

    def to_dict(self, theta_history: bool = False, timing: bool = False) -> dict:
        """JSON-ready form.  Wall-clock is left out unless asked for, so reruns compare byte for byte."""
        d = {
            "schema": 1,
            "mode": self.mode,
            "theta_star": [float(x) for x in self.theta_star],
            "theta_hat_star": {k: float(ad.primal(v)) for k, v in self.theta_hat_star.items()},
            "best_cost": float(self.best_cost),
            "theta_final": [float(x) for x in self.theta_final],
            "cost_history": [float(h.cost) for h in self.history],
            "active_history": [int(h.active) for h in self.history],
            "final_costs": [{"label": s.label, "cost": float(c)} for s, c in zip(self.scenarios, self.final_costs)],
            "scenario_set": self.scenarios.to_dict(),
            "settings": self.settings,
        }
        if self.rounds:
            d["rounds"] = self.rounds
        if theta_history:
            d["theta_history"] = [list(map(float, h.theta)) for h in self.history]
        if timing:
            d["wall_clock"] = float(self.wall_clock)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=1, sort_keys=True)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.theta_star)
        w.writerow(["iter", "cost", "active", "n_scenarios"] + [f"theta_{i + 1}" for i in range(n)])
        for h in self.history:
            w.writerow([h.iteration, repr(float(h.cost)), h.active, h.n_scenarios] + [repr(float(x)) for x in h.theta])
        return buf.getvalue()


def _reg(theta, on: bool):
    if not on:
        return 0.0, np.zeros(len(theta))
    return ad.gradient(regularization, np.asarray(theta, dtype=float))


def _aggregate(losses: np.ndarray, how: str, temperature: float):
    """Aggregated cost and per-scenario weights of its (sub)gradient."""
    if how == "max":
        i = int(np.argmax(losses))  # first index on ties
        w = np.zeros_like(losses)
        w[i] = 1.0
        return float(losses[i]), w
    if how == "sum":
        return float(np.sum(losses)), np.ones_like(losses)
    z = (losses - losses.max()) / temperature
    e = np.exp(z)
    return float(losses.max() + temperature * np.log(e.sum())), e / e.sum()


def _descend(sys, scenarios, theta, state, cfg, regularize, aggregate, temperature, jobs, tag, history, best,
             iters, log):
    """``iters`` outer steps on a fixed set; updates ``history`` and ``best`` in place."""
    scen = list(scenarios)
    for _ in range(iters):
        losses = evaluate_losses(sys, theta, scen, cfg, jobs=jobs)
        agg, weights = _aggregate(losses, aggregate, temperature)
        r, g_reg = _reg(theta, regularize)
        cost = agg + float(r)
        active = int(np.argmax(losses))
        if not np.isfinite(cost):
            raise OptimizerAbort(f"non-finite cost at theta = {theta.tolist()}")
        history.append(IterationRecord(len(history), cost, active, theta.tolist(), len(scen)))
        if cost < best["cost"]:
            best.update(cost=cost, theta=theta.copy(), losses=losses)
        grad = np.array(g_reg, dtype=float)
        for i in np.nonzero(weights > 1e-12)[0]:
            _, g = loss_and_gradient(sys, theta, scen[i], cfg)
            if not np.all(np.isfinite(g)):
                raise OptimizerAbort(f"non-finite gradient in scenario {scen[i].label!r} at theta = {theta.tolist()}")
            grad = grad + weights[i] * g
        if log:
            log(f"{tag}iter {len(history) - 1:4d}  cost {cost:.6f}  active {scen[active].label}  "
                f"theta {np.array2string(theta, precision=5)}")
        theta, state = adam_step(state, theta, grad)
    return theta, state


def _finish(sys, scenarios, theta, cfg, regularize, aggregate, temperature, jobs, best):
    """Score the last iterate too, so ``theta_star`` is the best point visited."""
    losses = evaluate_losses(sys, theta, list(scenarios), cfg, jobs=jobs)
    cost = _aggregate(losses, aggregate, temperature)[0] + float(_reg(theta, regularize)[0])
    if cost < best["cost"]:
        best.update(cost=cost, theta=theta.copy(), losses=losses)


def _settings(lr, iters, cfg, regularize, aggregate, temperature, **extra) -> dict:
    d = {"lr": lr, "iters": iters, "dt": cfg.dt, "T": cfg.T, "regularize": regularize, "aggregate": aggregate}
    if aggregate == "softmax":
        d["temperature"] = temperature
    d.update(extra)
    return d


def tune_sampled(sys: ClosedLoopSystem, scenarios: ScenarioSet, theta0, iters: int = 500, lr: float = 1.0,
                 cfg: SimConfig = SimConfig(), regularize: bool = False, aggregate: str = "max",
                 temperature: float = 0.1, jobs: int = 1, log: Callable | None = None) -> TuneResult:
    """``min_theta max_{w in W} L(theta, w)`` by ADAM on the active scenario's gradient.

    ``aggregate="sum"`` or ``"softmax"`` (with ``temperature``) replace the max.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    if not len(scenarios):
        raise ValueError("the scenario set is empty")
    t0 = time.perf_counter()
    theta = np.asarray(theta0, dtype=float).copy()
    state = AdamState.init(theta.size, lr)
    history: list = []
    best = {"cost": np.inf, "theta": theta.copy(), "losses": None}
    theta = _descend(sys, scenarios, theta, state, cfg, regularize, aggregate, temperature, jobs, "", history,
                     best, iters, log)[0]
    _finish(sys, scenarios, theta, cfg, regularize, aggregate, temperature, jobs, best)
    return TuneResult(
        "sampled", best["theta"], sys.params.apply(best["theta"]), best["cost"], history, best["losses"],
        scenarios, theta, time.perf_counter() - t0,
        _settings(lr, iters, cfg, regularize, aggregate, temperature),
    )


def inner_ascent(sys: ClosedLoopSystem, theta, omega0, iters: int = 500, lr: float = 2.0,
                 cfg: SimConfig = SimConfig(), norm: str = "L2", lo: float = ADVERSARIAL_OMEGA_MIN,
                 hi: float = OMEGA_MAX):
    """ADAM ascent of ``L(theta, w(omega))`` over ``omega`` with the controller frozen.

    Returns ``(omega_best, loss_best, omega_last)``.
    """
    omega = np.asarray(omega0, dtype=float).copy()
    state = AdamState.init(omega.size, lr)
    best_l, best_om = -np.inf, omega.copy()
    for _ in range(iters):
        l, g = adversarial_loss_and_gradient(sys, theta, omega, cfg, norm=norm, lo=lo, hi=hi)
        if l > best_l:
            best_l, best_om = l, omega.copy()
        omega, state = adam_step(state, omega, g, maximize=True)
        omega[0] = np.clip(omega[0], lo, hi)  # keep the frequency coordinate where it has an effect
    l = adversarial_loss_and_gradient(sys, theta, omega, cfg, norm=norm, lo=lo, hi=hi)[0]
    if l > best_l:
        best_l, best_om = l, omega.copy()
    return best_om, float(best_l), omega


def _start_omega(scenarios, losses, dim, rng_seed, k, scale):
    """Start the ascent from the current worst probe, nudged by a seeded direction."""
    worst = scenarios[int(np.argmax(losses))]
    tone = max(worst.tones, key=lambda t: np.linalg.norm(t.amplitude)) if worst.tones else None
    d = sample_unit_directions(1, dim, rng_seed + 7919 * (k + 1))[0]
    if tone is None:
        return np.concatenate([[1.0], scale * d])
    a = np.asarray(tone.amplitude) / (np.linalg.norm(tone.amplitude) or 1.0)
    eta = a + 0.25 * d
    return np.concatenate([[max(tone.omega, ADVERSARIAL_OMEGA_MIN)], scale * eta / np.linalg.norm(eta)])


def tune_adversarial(sys: ClosedLoopSystem, scenarios0: ScenarioSet, theta0, outer_rounds: int = 25,
                     inner_iters: int = 500, outer_iters: int = 20, lr: float = 1.0, inner_lr: float = 2.0,
                     cfg: SimConfig = SimConfig(), regularize: bool = False, aggregate: str = "max",
                     temperature: float = 0.1, tol: float = 1e-4, seed: int = 0, direction_scale: float = 10.0,
                     norm: str = "L2", jobs: int = 1, log: Callable | None = None) -> TuneResult:
    """Alternate worst-probe search and controller descent on the growing set.

    Round ``k``: ascend over ``omega`` for ``inner_iters`` steps with the
    controller frozen, append ``w(omega_bar)``, take ``outer_iters`` descent
    steps.  Stops early when the new probe beats the set's worst cost by
    less than ``tol`` (nothing left to find).
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    t0 = time.perf_counter()
    theta = np.asarray(theta0, dtype=float).copy()
    state = AdamState.init(theta.size, lr)
    history: list = []
    best = {"cost": np.inf, "theta": theta.copy(), "losses": None}
    W = scenarios0
    rounds = []
    if outer_rounds == 0:
        theta, state = _descend(sys, W, theta, state, cfg, regularize, aggregate, temperature, jobs, "", history,
                                best, outer_iters, log)
    for k in range(outer_rounds):
        losses = evaluate_losses(sys, theta, list(W), cfg, jobs=jobs)
        worst = float(np.max(losses))
        om0 = _start_omega(W, losses, W[0].dim, seed, k, direction_scale)
        om, l_new, _ = inner_ascent(sys, theta, om0, inner_iters, inner_lr, cfg, norm)
        gain = l_new - worst
        new = adversarial_signal(om, norm, label=f"adversarial-{k + 1}")
        W = W.extended(new, {**W.provenance, "kind": "adversarial", "round": k + 1})
        rounds.append({"round": k + 1, "omega": [float(x) for x in om], "frequency": new.tones[0].omega,
                       "probe_cost": l_new, "set_worst": worst, "improvement": gain})
        if log:
            log(f"round {k + 1:3d}  probe {l_new:.6f} at {new.tones[0].omega:.4g} rad/s  set worst {worst:.6f}")
        # costs are only comparable on one set, so the best point is taken from the last round
        best = {"cost": np.inf, "theta": theta.copy(), "losses": None}
        theta, state = _descend(sys, W, theta, state, cfg, regularize, aggregate, temperature, jobs,
                                f"round {k + 1:3d} ", history, best, outer_iters, log)
        if gain < tol:
            break
    _finish(sys, W, theta, cfg, regularize, aggregate, temperature, jobs, best)
    return TuneResult(
        "adversarial", best["theta"], sys.params.apply(best["theta"]), best["cost"], history, best["losses"], W,
        theta, time.perf_counter() - t0,
        _settings(lr, outer_iters, cfg, regularize, aggregate, temperature, outer_rounds=outer_rounds,
                  inner_iters=inner_iters, inner_lr=inner_lr, tol=tol, seed=seed, norm=norm),
        rounds,
    )


def cost_landscape(sys: ClosedLoopSystem, scenarios: Sequence[Scenario], k_values, b_values,
                   cfg: SimConfig = SimConfig(), jobs: int = 1) -> np.ndarray:
    """``max_w L`` on a grid of physical ``(k, b)``; rows follow ``b``, columns ``k``."""
    if len(sys.params) != 2:
        raise ValueError("the landscape needs a system with exactly two parameters")
    k_values = np.asarray(k_values, dtype=float)
    b_values = np.asarray(b_values, dtype=float)
    out = np.empty((b_values.size, k_values.size))
    for i, b in enumerate(b_values):
        for j, k in enumerate(k_values):
            theta = sys.params.inverse([k, b])
            out[i, j] = np.max(evaluate_losses(sys, theta, list(scenarios), cfg, jobs=jobs))
    return out


def landscape_csv(k_values, b_values, grid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "b", "cost"])
    for i, b in enumerate(b_values):
        for j, k in enumerate(k_values):
            w.writerow([repr(float(k)), repr(float(b)), repr(float(grid[i, j]))])
    return buf.getvalue()
