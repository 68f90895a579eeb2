"""Domain types: marginal distributions, cost functions, flow configuration.

Marginals are probability measures on R^d, either analytic (with a density,
a log-density gradient and a sampler) or empirical (a bag of sample points).
All objects here are immutable after construction and safe to share between
threads; samplers take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [low_i, high_i] in R^d."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or low.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not np.all(np.isfinite(low)) or not np.all(np.isfinite(high)):
            raise ValueError("box bounds must be finite")
        if np.any(high <= low):
            raise ValueError("box must have positive extent along every axis")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.size

    @property
    def widths(self) -> np.ndarray:
        return self.high - self.low

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x >= self.low) & (x <= self.high), axis=1)

    def union(self, other: "Box") -> "Box":
        return Box(np.minimum(self.low, other.low), np.maximum(self.high, other.high))

    def padded(self, fraction: float) -> "Box":
        pad = fraction * self.widths
        return Box(self.low - pad, self.high + pad)


def _as_points(x) -> tuple[np.ndarray, bool]:
    """Coerce to an (n, d) array; report whether the input was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


@dataclass(frozen=True)
class Marginal:
    """A probability measure on R^d.

    For analytic marginals, ``density_at`` and ``grad_log_density`` accept a
    single point (d,) or a batch (n, d). Empirical marginals carry only raw
    samples; any density view of them comes from a fitted histogram.
    """

    kind: str  # "analytic" | "empirical"
    dim: int
    support_box: Box
    _density: Callable | None = field(default=None, repr=False)
    _grad_log: Callable | None = field(default=None, repr=False)
    _sampler: Callable | None = field(default=None, repr=False)
    samples: np.ndarray | None = None

    def density_at(self, x):
        if self._density is None:
            raise ValueError(
                "empirical marginal has no analytic density; fit a histogram "
                "from its samples instead"
            )
        pts, single = _as_points(x)
        out = self._density(pts)
        return float(out[0]) if single else out

    def grad_log_density(self, x):
        if self._grad_log is None:
            raise ValueError("marginal does not provide a log-density gradient")
        pts, single = _as_points(x)
        out = self._grad_log(pts)
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._sampler is not None:
            return self._sampler(n, rng)
        if self.samples is not None:
            idx = rng.integers(0, len(self.samples), size=n)
            return self.samples[idx].copy()
        raise ValueError("marginal has neither a sampler nor samples")


@dataclass(frozen=True)
class CostFunction:
    """Transport cost c(x, y) >= 0 with gradients in both arguments.

    ``evaluate``, ``grad_x`` and ``grad_y`` are vectorized over paired rows of
    (n, d_x) and (n, d_y) arrays.
    """

    evaluate: Callable
    grad_x: Callable
    grad_y: Callable
    name: str


def quadratic_cost() -> CostFunction:
    """Squared Euclidean cost |x - y|^2."""

    def evaluate(x, y):
        x, sx = _as_points(x)
        y, _ = _as_points(y)
        out = ((x - y) ** 2).sum(axis=1)
        return float(out[0]) if sx else out

    def grad_x(x, y):
        x, sx = _as_points(x)
        y, _ = _as_points(y)
        out = 2.0 * (x - y)
        return out[0] if sx else out

    def grad_y(x, y):
        x, sx = _as_points(x)
        y, _ = _as_points(y)
        out = 2.0 * (y - x)
        return out[0] if sx else out

    return CostFunction(evaluate=evaluate, grad_x=grad_x, grad_y=grad_y, name="quadratic")


def make_gaussian(mean, covariance) -> Marginal:
    """Analytic Gaussian marginal N(mean, covariance).

    The covariance must be symmetric positive definite. The support box is
    mean +/- 6 standard deviations (largest eigenvalue) per axis, which holds
    all but ~1e-9 of the mass.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
    d = mean.size
    if covariance.shape != (d, d):
        raise ValueError(f"covariance must be {d}x{d}, got {covariance.shape}")
    if not np.allclose(covariance, covariance.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    eigvals = np.linalg.eigvalsh(covariance)
    if eigvals.min() <= 0:
        raise ValueError(
            f"covariance is not positive definite (min eigenvalue {eigvals.min():.3e})"
        )

    cov_inv = np.linalg.inv(covariance)
    _, logdet = np.linalg.slogdet(covariance)
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + logdet)
    chol = np.linalg.cholesky(covariance)
    sigma_max = float(np.sqrt(eigvals.max()))
    box = Box(mean - 6.0 * sigma_max, mean + 6.0 * sigma_max)

    def density(pts):
        z = pts - mean
        quad = np.einsum("ni,ij,nj->n", z, cov_inv, z)
        return np.exp(log_norm - 0.5 * quad)

    def grad_log(pts):
        return -(pts - mean) @ cov_inv.T

    def sampler(n, rng):
        z = rng.standard_normal((n, d))
        return z @ chol.T + mean

    return Marginal(
        kind="analytic",
        dim=d,
        support_box=box,
        _density=density,
        _grad_log=grad_log,
        _sampler=sampler,
    )


def make_mixture(components: Sequence[tuple[float, Marginal]]) -> Marginal:
    """Finite mixture of analytic marginals with positive weights summing to 1."""
    if not components:
        raise ValueError("mixture needs at least one component")
    weights = np.array([w for w, _ in components], dtype=float)
    parts = [m for _, m in components]
    if np.any(weights <= 0):
        raise ValueError("mixture weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"mixture weights must sum to 1, got {weights.sum()!r}")
    d = parts[0].dim
    for m in parts:
        if m.kind != "analytic":
            raise ValueError("mixture components must be analytic marginals")
        if m.dim != d:
            raise ValueError("mixture components must share one dimension")

    box = parts[0].support_box
    for m in parts[1:]:
        box = box.union(m.support_box)

    def density(pts):
        acc = np.zeros(len(pts))
        for w, m in zip(weights, parts):
            acc += w * m._density(pts)
        return acc

    def grad_log(pts):
        num = np.zeros((len(pts), d))
        den = np.zeros(len(pts))
        for w, m in zip(weights, parts):
            p = w * m._density(pts)
            num += p[:, None] * m._grad_log(pts)
            den += p
        return num / np.maximum(den, 1e-300)[:, None]

    def sampler(n, rng):
        choice = rng.choice(len(parts), size=n, p=weights)
        out = np.empty((n, d))
        for i, m in enumerate(parts):
            mask = choice == i
            k = int(mask.sum())
            if k:
                out[mask] = m.sample(k, rng)
        return out

    return Marginal(
        kind="analytic",
        dim=d,
        support_box=box,
        _density=density,
        _grad_log=grad_log,
        _sampler=sampler,
    )


def _ring_radial_constant(ring_radius: float, ring_width: float) -> float:
    """Normalizer of exp(-(|x|-r)^2 / (2 s^2)) over R^2, by radial quadrature."""
    from numpy.polynomial.legendre import leggauss

    lo = max(0.0, ring_radius - 12.0 * ring_width)
    hi = ring_radius + 12.0 * ring_width
    u, w = leggauss(400)
    u = 0.5 * (hi - lo) * u + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * w
    radial = np.exp(-((u - ring_radius) ** 2) / (2.0 * ring_width**2)) * u
    return float(2.0 * np.pi * (w @ radial))


def make_ring_peak(
    ring_radius: float = 1.0,
    ring_width: float = 0.15,
    peak_weight: float = 0.3,
    peak_std: float = 0.2,
) -> Marginal:
    """Planar density: a Gaussian ridge on the circle |x| = r plus a central peak.

    density(x) = w N(x; 0, s_p^2 I) + (1 - w) Z_r^{-1} exp(-(|x| - r)^2 / (2 s_r^2))
    """
    if ring_radius <= 0 or ring_width <= 0 or peak_std <= 0:
        raise ValueError("ring radius, ring width and peak std must be positive")
    if not 0.0 < peak_weight < 1.0:
        raise ValueError("peak weight must lie in (0, 1)")

    r, s_r, w_p, s_p = ring_radius, ring_width, peak_weight, peak_std
    z_ring = _ring_radial_constant(r, s_r)
    peak_norm = 1.0 / (2.0 * np.pi * s_p**2)
    extent = max(r + 6.0 * s_r, 6.0 * s_p)
    box = Box(np.array([-extent, -extent]), np.array([extent, extent]))
    u_hi = r + 12.0 * s_r

    def _peak(pts):
        return peak_norm * np.exp(-(pts**2).sum(axis=1) / (2.0 * s_p**2))

    def _ring(pts):
        radii = np.sqrt((pts**2).sum(axis=1))
        return np.exp(-((radii - r) ** 2) / (2.0 * s_r**2)) / z_ring

    def density(pts):
        return w_p * _peak(pts) + (1.0 - w_p) * _ring(pts)

    def grad_log(pts):
        radii = np.sqrt((pts**2).sum(axis=1))
        safe = np.maximum(radii, 1e-12)
        peak = w_p * _peak(pts)
        ring = (1.0 - w_p) * _ring(pts)
        grad_peak = peak[:, None] * (-pts / s_p**2)
        grad_ring = ring[:, None] * (-((radii - r) / s_r**2) / safe)[:, None] * pts
        total = np.maximum(peak + ring, 1e-300)
        return (grad_peak + grad_ring) / total[:, None]

    def _sample_radius(n, rng):
        # Rejection on the radius law f(u) ~ u exp(-(u-r)^2 / (2 s_r^2)), u in [0, u_hi].
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 64)
            u = rng.normal(r, s_r, size=m)
            keep = (u > 0.0) & (u < u_hi)
            u = u[keep]
            accept = rng.random(u.size) < u / u_hi
            u = u[accept]
            take = min(u.size, n - filled)
            out[filled : filled + take] = u[:take]
            filled += take
        return out

    def sampler(n, rng):
        from_peak = rng.random(n) < w_p
        out = np.empty((n, 2))
        k = int(from_peak.sum())
        if k:
            out[from_peak] = rng.standard_normal((k, 2)) * s_p
        m = n - k
        if m:
            radii = _sample_radius(m, rng)
            theta = rng.random(m) * 2.0 * np.pi
            out[~from_peak] = np.column_stack([radii * np.cos(theta), radii * np.sin(theta)])
        return out

    return Marginal(
        kind="analytic",
        dim=2,
        support_box=box,
        _density=density,
        _grad_log=grad_log,
        _sampler=sampler,
    )


def make_empirical(samples) -> Marginal:
    """Empirical marginal from raw sample points (n, d)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        raise ValueError("empirical marginal needs at least 2 samples")
    if not np.all(np.isfinite(samples)):
        raise ValueError("empirical samples must have finite coordinates")
    lo, hi = samples.min(axis=0), samples.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    box = Box(lo - 0.05 * span, hi + 0.05 * span)
    return Marginal(kind="empirical", dim=samples.shape[1], support_box=box, samples=samples)


def load_empirical_csv(path) -> Marginal:
    """Load an empirical marginal from CSV: one point per row, no header."""
    samples = np.loadtxt(path, delimiter=",", ndmin=2)
    return make_empirical(samples)


_VARIANTS = ("forward", "reverse")


@dataclass(frozen=True)
class FlowConfig:
    """Hyperparameters of the particle min-max flow.

    One solver step advances particle time by ``dt`` and the penalty weight's
    time by ``beta * dt``; ``noise_std_coeff`` scales the per-step particle
    noise std ``noise_std_coeff * sqrt(dt)``. ``eta_var`` is the variance of
    the pairing perturbation used at initialization.
    """

    n_pairs: int = 1000
    dt: float = 5e-4
    beta: float = 0.05
    steps: int = 2000
    noise_std_coeff: float = 0.02
    lambda0: float = 0.1
    eta_var: float = 1e-4
    kl_variant_x: str = "forward"
    kl_variant_y: str = "forward"
    bins_per_dim: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.noise_std_coeff < 0:
            raise ValueError("noise_std_coeff must be >= 0")
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.eta_var < 0:
            raise ValueError("eta_var must be >= 0")
        if self.bins_per_dim < 2:
            raise ValueError("bins_per_dim must be >= 2")
        if self.kl_variant_x not in _VARIANTS or self.kl_variant_y not in _VARIANTS:
            raise ValueError(f"kl variants must be one of {_VARIANTS}")
