"""Interpolation coefficient schedules and Bayesian tuning of the Beta prior."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import ConfigError, DomainError, OptimizationError
from .numerics import SeededRng


@dataclass(frozen=True)
class CoefficientSchedule:
    t_values: tuple

    def __post_init__(self):
        t = tuple(float(v) for v in self.t_values)
        object.__setattr__(self, "t_values", t)
        if len(t) < 2:
            raise ConfigError("a schedule needs at least two coefficients")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ConfigError(f"schedule must start at 0 and end at 1, got {t[0]}..{t[-1]}")
        if any(b < a for a, b in zip(t, t[1:])):
            raise ConfigError("schedule must be sorted ascending")

    def __len__(self):
        return len(self.t_values)

    def __iter__(self):
        return iter(self.t_values)

    def __getitem__(self, i):
        return self.t_values[i]


@dataclass(frozen=True)
class BetaPrior:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")


def uniform_schedule(m: int) -> CoefficientSchedule:
    if m < 2:
        raise ConfigError(f"sequence length must be >= 2, got {m}")
    return CoefficientSchedule(tuple(i / (m - 1) for i in range(m)))


def _betacf(x: float, a: float, b: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def beta_cdf(x: float, prior: BetaPrior) -> float:
    """Regularized incomplete beta function I_x(alpha, beta)."""
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"beta_cdf argument {x} outside [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    a, b = prior.alpha, prior.beta
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


def beta_inverse_cdf(p: float, prior: BetaPrior) -> float:
    """Quantile by bisection on the monotone CDF."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability {p} outside [0, 1]")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if beta_cdf(mid, prior) < p:
            lo = mid
        else:
            hi = mid
    # pick whichever bracket end lands closer in probability
    return lo if abs(beta_cdf(lo, prior) - p) <= abs(beta_cdf(hi, prior) - p) else hi


def beta_schedule(m: int, prior: BetaPrior) -> CoefficientSchedule:
    if m < 2:
        raise ConfigError(f"sequence length must be >= 2, got {m}")
    inner = [beta_inverse_cdf(i / (m - 1), prior) for i in range(1, m - 1)]
    return CoefficientSchedule((0.0, *inner, 1.0))


# -- Bayesian optimisation ------------------------------------------------------


def default_init_points(steps: int) -> tuple:
    grid = (0.8 * steps, float(steps), 1.2 * steps)
    return tuple((a, b) for a in grid for b in grid)


@dataclass(frozen=True)
class BoConfig:
    search_range: tuple = (1.0, 30.0)
    init_points: Optional[tuple] = None
    iterations: int = 15
    objective: str = "smoothness"
    seed: int = 0
    steps: int = 25
    candidates: int = 512
    noise: float = 1e-6
    length_scale_fraction: float = 0.2
    refine: bool = True

    def __post_init__(self):
        lo, hi = self.search_range
        if lo < 1e-6 or hi <= lo:
            raise ConfigError(f"invalid search range {self.search_range}")
        if self.objective not in ("smoothness", "consistency"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.init_points is None:
            object.__setattr__(self, "init_points", default_init_points(self.steps))
        for pt in self.init_points:
            if not all(lo <= v <= hi for v in pt):
                raise ConfigError(f"init point {pt} outside search range {self.search_range}")


@dataclass
class BoResult:
    alpha: float
    beta: float
    best_value: float
    trace: list = field(default_factory=list)  # (iteration, alpha, beta, value)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "alpha", "beta", "objective"])
        for row in self.trace:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
        return buf.getvalue()


class GaussianProcess:
    """Zero-mean GP on standardised targets with a squared-exponential kernel."""

    def __init__(self, length_scale: float, noise: float):
        self.length_scale = length_scale
        self.noise = noise

    def kernel(self, a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-0.5 * d2 / self.length_scale**2)

    def fit(self, x, y):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = y.mean()
        self.y_std = y.std() if y.std() > 0 else 1.0
        ys = (y - self.y_mean) / self.y_std
        k = self.kernel(self.x, self.x) + self.noise * np.eye(len(self.x))
        self.chol = np.linalg.cholesky(k)
        self.alpha = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, ys))
        return self

    def predict(self, xs):
        ks = self.kernel(np.asarray(xs, dtype=np.float64), self.x)
        mu = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T)
        var = np.clip(1.0 - (v * v).sum(axis=0), 1e-12, None)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mu, sigma, best, xi: float = 0.0):
    imp = mu - best - xi
    z = imp / sigma
    return imp * norm.cdf(z) + sigma * norm.pdf(z)


def bayes_opt(objective: Callable[[float, float], float], cfg: BoConfig = BoConfig()) -> BoResult:
    """Maximise ``objective(alpha, beta)`` with a GP surrogate and expected improvement.

    All ``init_points`` are evaluated first, then ``cfg.iterations`` points
    chosen by maximising EI over freshly drawn random candidates. With
    ``cfg.refine`` the best candidate is polished by a bounded L-BFGS-B run
    on EI; a random candidate set alone is too coarse to resolve a sharp
    optimum within a 15-step budget.
    """
    lo, hi = cfg.search_range
    rng = SeededRng(cfg.seed)
    gp = GaussianProcess(cfg.length_scale_fraction * (hi - lo), cfg.noise)
    xs, ys, trace = [], [], []

    def evaluate(pt, it):
        val = float(objective(float(pt[0]), float(pt[1])))
        if math.isnan(val):
            raise OptimizationError(pt)
        xs.append((float(pt[0]), float(pt[1])))
        ys.append(val)
        trace.append((it, float(pt[0]), float(pt[1]), val))

    for pt in cfg.init_points:
        evaluate(pt, 0)
    for it in range(1, cfg.iterations + 1):
        gp.fit(xs, ys)
        cand = lo + (hi - lo) * rng.uniform((cfg.candidates, 2))
        mu, sigma = gp.predict(cand)
        best = max(ys)
        ei = expected_improvement(mu, sigma, best)
        x0 = cand[int(np.argmax(ei))]
        if cfg.refine:
            x0 = _refine(gp, x0, best, (lo, hi))
        evaluate(x0, it)

    best = int(np.argmax(ys))
    return BoResult(xs[best][0], xs[best][1], ys[best], trace)


def _refine(gp: GaussianProcess, x0, best, bounds):
    def neg_ei(x):
        mu, sigma = gp.predict(x[None, :])
        return -float(expected_improvement(mu, sigma, best)[0])

    res = minimize(neg_ei, x0, method="L-BFGS-B", bounds=[bounds, bounds])
    if res.success or res.fun < neg_ei(x0):
        x = np.clip(res.x, *bounds)
        if neg_ei(x) <= neg_ei(x0):
            return x
    return x0


def grid_search(objective, search_range: Sequence[float] = (1.0, 30.0), step: float = 0.25):
    """Exhaustive search on a regular grid; returns ``(alpha, beta, value)``."""
    lo, hi = search_range
    axis = np.arange(lo, hi + step / 2, step)
    best = (None, None, -math.inf)
    for a in axis:
        for b in axis:
            v = objective(float(a), float(b))
            if v > best[2]:
                best = (float(a), float(b), float(v))
    return best
