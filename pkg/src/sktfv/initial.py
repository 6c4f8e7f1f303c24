"""Named initial-data and potential primitives.

Every primitive maps points of shape (M, d) to values of shape (M,) and can
be rebuilt from a plain dict, which is how run configurations describe data.
1D primitives with kinks expose ``breakpoints`` so cell averages can be
integrated exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def _pts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True, eq=False)
class Constant:
    value: float

    def __call__(self, x):
        return np.full(len(_pts(x)), float(self.value))

    breakpoints = ()


@dataclass(frozen=True, eq=False)
class Bump:
    """amplitude * max(1 - k^2 |x - center|^2, 0), k = 8 by default."""

    center: tuple
    amplitude: float = 1.0
    k: float = 8.0

    def __call__(self, x):
        p = _pts(x)
        c = np.asarray(self.center, dtype=float).reshape(1, -1)
        r2 = ((p[:, : c.shape[1]] - c) ** 2).sum(axis=1)
        return self.amplitude * np.maximum(1.0 - self.k**2 * r2, 0.0)

    @property
    def breakpoints(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        return (c[0] - 1 / self.k, c[0] + 1 / self.k) if len(c) == 1 else ()


@dataclass(frozen=True, eq=False)
class Gaussian:
    """amplitude * exp(-rate |x - center|^2)."""

    center: tuple
    amplitude: float = 1.0
    rate: float = 1.0

    def __call__(self, x):
        p = _pts(x)
        c = np.asarray(self.center, dtype=float).reshape(1, -1)
        return self.amplitude * np.exp(-self.rate * ((p[:, : c.shape[1]] - c) ** 2).sum(axis=1))

    breakpoints = ()


@dataclass(frozen=True, eq=False)
class IndicatorRectangle:
    """value on the open box x_range x y_range (an interval in 1D), 0 elsewhere."""

    x_range: tuple
    y_range: tuple | None = None
    value: float = 1.0

    def __call__(self, x):
        p = _pts(x)
        inside = (p[:, 0] > self.x_range[0]) & (p[:, 0] < self.x_range[1])
        if self.y_range is not None:
            inside &= (p[:, 1] > self.y_range[0]) & (p[:, 1] < self.y_range[1])
        return np.where(inside, float(self.value), 0.0)

    @property
    def breakpoints(self):
        return tuple(self.x_range) if self.y_range is None else ()


@dataclass(frozen=True, eq=False)
class Sum:
    terms: tuple = field(default_factory=tuple)

    def __call__(self, x):
        out = np.zeros(len(_pts(x)))
        for t in self.terms:
            out = out + t(x)
        return out

    @property
    def breakpoints(self):
        return tuple(b for t in self.terms for b in getattr(t, "breakpoints", ()))


_TYPES = {
    "constant": Constant,
    "bump": Bump,
    "gaussian": Gaussian,
    "indicator_rectangle": IndicatorRectangle,
}


def from_spec(spec):
    """Build a primitive from a number, a dict with ``type`` or a list (summed)."""
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    if isinstance(spec, (list, tuple)):
        return Sum(tuple(from_spec(s) for s in spec))
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError(f"cannot interpret initial-data spec {spec!r}")
    kw = {k: v for k, v in spec.items() if k != "type"}
    kind = spec["type"]
    if kind == "sum":
        return Sum(tuple(from_spec(s) for s in kw.get("terms", [])))
    if kind not in _TYPES:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_TYPES) + ['sum']}")
    for key in ("center", "x_range", "y_range"):
        if kw.get(key) is not None:
            kw[key] = tuple(np.atleast_1d(np.asarray(kw[key], dtype=float)).tolist())
    try:
        return _TYPES[kind](**kw)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {kind!r}: {exc}") from None


def to_spec(prim) -> dict:
    if isinstance(prim, Sum):
        return {"type": "sum", "terms": [to_spec(t) for t in prim.terms]}
    name = {v: k for k, v in _TYPES.items()}[type(prim)]
    return {"type": name, **{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(prim).items()}}
