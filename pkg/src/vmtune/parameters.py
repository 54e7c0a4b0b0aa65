"""Named controller parameters and the map from optimizer space to physical values.

Components refer to tunable quantities by name.  A :class:`ParameterMap` binds
each name to one slot of the optimizer vector ``theta`` and converts it:

* ``stiffness``: ``exp(theta)``
* ``damping``:   ``exp(theta) / 100``
* ``raw``:       ``theta`` itself, optionally clamped from below
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = ["ParamSpec", "ParameterMap", "KINDS", "REG_KNEE", "regularization"]

KINDS = ("stiffness", "damping", "raw")

REG_KNEE = float(np.log(3000.0))


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str = "raw"
    lower: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"parameter kind must be one of {KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class ParameterMap:
    specs: tuple

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")

    @property
    def names(self) -> tuple:
        return tuple(s.name for s in self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def phi(self, theta):
        """Physical values as a list (entries are duals when ``theta`` is)."""
        out = []
        for i, spec in enumerate(self.specs):
            t = theta[i]
            if spec.kind == "stiffness":
                v = ad.exp(t)
            elif spec.kind == "damping":
                v = ad.exp(t) / 100.0
            else:
                v = t if spec.lower is None else ad.maximum(t, spec.lower)
            out.append(v)
        return out

    def apply(self, theta) -> dict:
        shape = np.shape(ad.primal(theta))
        if shape != (len(self),):
            raise ValueError(f"theta must have shape ({len(self)},), got {shape}")
        return dict(zip(self.names, self.phi(theta)))

    def inverse(self, values) -> np.ndarray:
        """Optimizer coordinates that map to the given physical values."""
        out = []
        for spec, v in zip(self.specs, values):
            if spec.kind == "stiffness":
                out.append(np.log(v))
            elif spec.kind == "damping":
                out.append(np.log(100.0 * v))
            else:
                out.append(float(v))
        return np.asarray(out, dtype=float)

    def to_dict(self) -> list:
        return [{"name": s.name, "kind": s.kind, **({"lower": s.lower} if s.lower is not None else {})}
                for s in self.specs]

    @classmethod
    def from_dict(cls, doc) -> "ParameterMap":
        return cls(tuple(ParamSpec(d["name"], d.get("kind", "raw"), d.get("lower")) for d in doc))


def regularization(theta, knee: float = REG_KNEE):
    """``sum_i max(0, |theta_i| - knee)^2``; the knee sits at ln 3000 by default."""
    excess = ad.maximum(ad.abs(theta) - knee, 0.0)
    return ad.sum(excess * excess)
