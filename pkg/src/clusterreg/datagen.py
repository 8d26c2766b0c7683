"""Engineered clustered-and-warped curves with known ground truth.

Each curve is ``y_i(t) = c_i + a_i f_k(mu_i(t)) + eps`` with one of four
shapes ``f_k``, the last being a flat noise cluster. Warps are monotone
cubic B-spline maps with one interior knot at the middle of the window.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Curve, Dataset
from .splines import identity_phi, make_knots, spline_eval


def _f1(t):
    return np.cos(t / 4) + np.sin(t / 4)


def _f2(t):
    return np.cos(t / 8)


def _f3(t):
    return np.sin(t / 2)


def _f4(t):
    return np.zeros_like(t)


SHAPES = (_f1, _f2, _f3, _f4)


def true_shape(k, t):
    """Value of shape ``k`` (1-based, 1..4) at times ``t``."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= len(SHAPES):
        raise ValueError(f"shape index must be an integer in 1..{len(SHAPES)}, got {k!r}")
    return SHAPES[k - 1](np.asarray(t, dtype=float))


@dataclass
class SimSpec:
    """Settings of the engineered-data generator.

    ``warp_scale`` is the standard deviation of each increment of the
    first-order random walk on ``phi - phi0``; draws violating ordering or
    leaving ``[t_1 - delta, t_n + delta]`` are rejected.
    """

    sizes: tuple = (12, 11, 11, 11)
    times: tuple = tuple(np.linspace(0.0, 20.0, 21).tolist())
    noise_sd: float = 0.3
    level_sd: float = 0.3
    amplitude_sd: float = 0.3
    warp_scale: float = 0.5
    warp_interior: tuple = (10.0,)
    delta: float = 0.0
    seed: int = 0
    max_rejections: int = 10_000

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.times = tuple(float(t) for t in self.times)
        self.warp_interior = tuple(float(t) for t in self.warp_interior)
        if len(self.sizes) != len(SHAPES) or min(self.sizes) < 0 or sum(self.sizes) == 0:
            raise ValueError(f"sizes must give {len(SHAPES)} nonnegative cluster sizes")
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        for name in ("noise_sd", "level_sd", "amplitude_sd", "warp_scale", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be positive")

    @property
    def warp_knots(self):
        return make_knots((self.times[0], self.times[-1]), list(self.warp_interior))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Truth:
    """Generating parameters; ``labels`` are 0-based shape indices."""

    labels: np.ndarray
    phi: np.ndarray
    c: np.ndarray
    a: np.ndarray
    spec: SimSpec
    ids: list = field(default_factory=list)

    @property
    def K(self):
        return int(np.unique(self.labels).size)

    def warp(self, i, t):
        return spline_eval(self.spec.warp_knots, self.phi[i], t)

    def curve(self, i, t):
        """Noiseless curve i on times ``t``."""
        return self.c[i] + self.a[i] * true_shape(int(self.labels[i]) + 1, self.warp(i, t))

    def curves(self, t):
        return np.array([self.curve(i, t) for i in range(len(self.labels))])

    def to_dict(self):
        return {"labels": self.labels.tolist(), "phi": self.phi.tolist(), "c": self.c.tolist(),
                "a": self.a.tolist(), "ids": list(self.ids), "spec": self.spec.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["labels"], dtype=np.int64), np.asarray(d["phi"], dtype=float),
                   np.asarray(d["c"], dtype=float), np.asarray(d["a"], dtype=float),
                   SimSpec.from_dict(d["spec"]), list(d.get("ids", [])))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _draw_warp(rng, kv, scale, lo, hi, budget):
    phi0 = identity_phi(kv)
    for _ in range(budget):
        phi = phi0 + np.cumsum(scale * rng.standard_normal(phi0.size))
        if np.all(np.diff(phi) > 0) and phi[0] >= lo and phi[-1] <= hi:
            return phi
    raise RuntimeError(f"warp rejection budget of {budget} exhausted; warp_scale too large")


def _draw_amplitude(rng, sd, budget):
    for _ in range(budget):
        a = 1.0 + sd * rng.standard_normal()
        if a > 0:
            return a
    raise RuntimeError(f"amplitude rejection budget of {budget} exhausted")


def simulate(spec=None):
    """Draw one dataset and its generating parameters."""
    spec = spec or SimSpec()
    rng = np.random.default_rng(spec.seed)
    times = np.array(spec.times)
    kv = spec.warp_knots
    lo, hi = times[0] - spec.delta, times[-1] + spec.delta
    labels = np.repeat(np.arange(len(SHAPES)), spec.sizes)
    N = labels.size
    c = spec.level_sd * rng.standard_normal(N)
    a = np.array([_draw_amplitude(rng, spec.amplitude_sd, spec.max_rejections) for _ in range(N)])
    phi = np.array([_draw_warp(rng, kv, spec.warp_scale, lo, hi, spec.max_rejections)
                    for _ in range(N)])
    ids = [f"c{i:03d}" for i in range(N)]
    truth = Truth(labels, phi, c, a, spec, ids)
    noise = spec.noise_sd * rng.standard_normal((N, times.size))
    data = Dataset(Curve(ids[i], times, truth.curve(i, times) + noise[i]) for i in range(N))
    return data, truth


def replicate_seeds(base_seed, n):
    """Distinct, reproducible seeds for ``n`` replicate datasets."""
    ss = np.random.SeedSequence(base_seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(n)]
