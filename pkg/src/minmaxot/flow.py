"""Particle min-max dynamics: paired-family initialization, the explicit
Euler-Maruyama particle step, the penalty ascent step, and the run loop.

Two families of particle pairs represent the coupling: family 1 freezes its
x side on source samples and moves the y side; family 2 freezes its y side
on target samples and moves the x side. Pooling the x (resp. y) coordinates
of both families gives the flowing first (resp. second) marginal.

The drift's density references are histogram estimates fitted from samples
of the inputs on the same grid as the flowing marginals; ratios of two
same-grid histograms stay bounded where data exists, which keeps the
finite-difference drift stable. Per-step drift displacement is capped at one
bin width per axis and particles are clamped to the (fixed) estimation box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import (
    HistogramDensity,
    fit_histogram,
    grad_log_ratio_forward,
    grad_log_ratio_reverse,
    grid_centers,
    kl_estimate,
    l2_error,
)
from .model import Box, CostFunction, FlowConfig, Marginal
from .oracle import empirical_coupling_cost

# Input-sample multiple used for the drift's reference histograms.
REF_SAMPLE_FACTOR = 8
BOX_PAD_FRACTION = 0.1


class FlowDivergedError(RuntimeError):
    """A particle update produced a non-finite coordinate."""

    def __init__(self, message: str, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class ParticleSystem:
    """Four particle families and the current penalty weight.

    x1/y1 is the family with frozen source points, x2/y2 the family with
    frozen target points; ``lam`` is the penalty weight, non-decreasing over
    the run.
    """

    x1: np.ndarray
    y1: np.ndarray
    x2: np.ndarray
    y2: np.ndarray
    lam: float
    step_index: int = 0

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(
            x1=self.x1.copy(),
            y1=self.y1.copy(),
            x2=self.x2.copy(),
            y2=self.y2.copy(),
            lam=self.lam,
            step_index=self.step_index,
        )

    @property
    def n_pairs(self) -> int:
        return len(self.x1)

    def pooled_x(self) -> np.ndarray:
        return np.vstack([self.x1, self.x2])

    def pooled_y(self) -> np.ndarray:
        return np.vstack([self.y1, self.y2])


@dataclass
class Trajectory:
    """Per-step scalar diagnostics plus optional particle snapshots."""

    t: np.ndarray
    lam: np.ndarray
    kl1: np.ndarray
    kl2: np.ndarray
    cost: np.ndarray
    l2_mu: np.ndarray
    l2_nu: np.ndarray
    snapshots: dict[int, ParticleSystem] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def final_row(self) -> dict[str, float]:
        return {
            "t": float(self.t[-1]),
            "lambda": float(self.lam[-1]),
            "kl1": float(self.kl1[-1]),
            "kl2": float(self.kl2[-1]),
            "cost": float(self.cost[-1]),
            "l2_mu": float(self.l2_mu[-1]),
            "l2_nu": float(self.l2_nu[-1]),
        }


@dataclass
class TrajectoryRecorder:
    """Collects trajectory rows; ``snapshot_steps`` marks states to copy."""

    snapshot_steps: tuple[int, ...] = ()

    def __post_init__(self):
        self._rows: list[tuple] = []
        self._snapshots: dict[int, ParticleSystem] = {}

    def record(self, t: float, ps: ParticleSystem, kl1, kl2, cost, l2_mu, l2_nu):
        self._rows.append((t, ps.lam, kl1, kl2, cost, l2_mu, l2_nu))
        if ps.step_index in self.snapshot_steps:
            self._snapshots[ps.step_index] = ps.copy()

    def build(self) -> Trajectory:
        rows = np.array(self._rows, dtype=float).reshape(-1, 7)
        return Trajectory(
            t=rows[:, 0],
            lam=rows[:, 1],
            kl1=rows[:, 2],
            kl2=rows[:, 3],
            cost=rows[:, 4],
            l2_mu=rows[:, 5],
            l2_nu=rows[:, 6],
            snapshots=self._snapshots,
        )


def method_preset(which: str) -> tuple[str, str]:
    """Divergence variants (for the mobile x family, the mobile y family).

    I uses the standard divergence on both mobile families, II the reversed
    one on both, III reverses only the family flowing toward the source.
    """
    presets = {
        "I": ("forward", "forward"),
        "II": ("reverse", "reverse"),
        "III": ("reverse", "forward"),
    }
    if which not in presets:
        raise ValueError(f"unknown method {which!r}; expected one of I, II, III")
    return presets[which]


def init_particles(mu: Marginal, nu: Marginal, cfg: FlowConfig, rng: np.random.Generator) -> ParticleSystem:
    """Draw paired particles: y1 = x1 + xi and x2 = y2 + xi' with xi ~ N(0, eta I).

    The pairing correlates the two sides at start, which keeps the initial
    coupling cost near zero for translation-like costs.
    """
    if mu.dim != nu.dim:
        raise ValueError(
            f"paired initialization requires equal dimensions, got {mu.dim} and {nu.dim}"
        )
    n = cfg.n_pairs
    scale = np.sqrt(cfg.eta_var)
    x1 = mu.sample(n, rng)
    y1 = x1 + scale * rng.standard_normal((n, mu.dim))
    y2 = nu.sample(n, rng)
    x2 = y2 + scale * rng.standard_normal((n, nu.dim))
    return ParticleSystem(x1=x1, y1=y1, x2=x2, y2=y2, lam=cfg.lambda0, step_index=0)


def _drift_estimator(variant: str):
    return grad_log_ratio_forward if variant == "forward" else grad_log_ratio_reverse


def step_particles(
    ps: ParticleSystem,
    mu: Marginal,
    nu: Marginal,
    cost: CostFunction,
    cfg: FlowConfig,
    rho1: HistogramDensity,
    rho2: HistogramDensity,
    rng: np.random.Generator,
    mu_ref=None,
    nu_ref=None,
) -> ParticleSystem:
    """One explicit Euler-Maruyama update of the mobile families.

    ``rho1`` and ``rho2`` must be fitted from the current pooled marginals.
    ``mu_ref``/``nu_ref`` override the drift's reference densities (anything
    with ``density_at``); by default the marginals themselves are used. The
    frozen families are returned untouched, bit for bit.
    """
    mu_ref = mu if mu_ref is None else mu_ref
    nu_ref = nu if nu_ref is None else nu_ref
    dt = cfg.dt
    noise_std = cfg.noise_std_coeff * np.sqrt(dt)

    g_x = _drift_estimator(cfg.kl_variant_x)(rho1, mu_ref, ps.x2, rng)
    g_y = _drift_estimator(cfg.kl_variant_y)(rho2, nu_ref, ps.y1, rng)

    move_x = dt * (-cost.grad_x(ps.x2, ps.y2) - ps.lam * g_x)
    move_y = dt * (-cost.grad_y(ps.x1, ps.y1) - ps.lam * g_y)
    # Cap the drift displacement at one bin width per axis: the histogram
    # cannot resolve a ratio beyond its own grid, and floored cells would
    # otherwise fling boundary particles arbitrarily far in one step.
    np.clip(move_x, -rho1.bin_widths, rho1.bin_widths, out=move_x)
    np.clip(move_y, -rho2.bin_widths, rho2.bin_widths, out=move_y)

    n = ps.n_pairs
    x2 = ps.x2 + move_x + noise_std * rng.standard_normal((n, mu.dim))
    y1 = ps.y1 + move_y + noise_std * rng.standard_normal((n, nu.dim))
    np.clip(x2, rho1.box.low, rho1.box.high, out=x2)
    np.clip(y1, rho2.box.low, rho2.box.high, out=y1)

    for name, arr in (("x2", x2), ("y1", y1)):
        finite = np.isfinite(arr).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise FlowDivergedError(
                f"non-finite coordinate for particle {bad} of mobile family {name} "
                f"at step {ps.step_index}"
            )

    return ParticleSystem(
        x1=ps.x1, y1=y1, x2=x2, y2=ps.y2, lam=ps.lam, step_index=ps.step_index + 1
    )


def step_lambda(ps: ParticleSystem, kl1: float, kl2: float, cfg: FlowConfig) -> ParticleSystem:
    """Penalty ascent: lam += (beta * dt) * (kl1 + kl2).

    One solver step advances particle time by dt and penalty time by
    beta * dt, reproducing the relative rates of the two-timescale system.
    """
    if kl1 < 0 or kl2 < 0:
        raise ValueError("KL estimates must be clamped nonnegative")
    return ParticleSystem(
        x1=ps.x1,
        y1=ps.y1,
        x2=ps.x2,
        y2=ps.y2,
        lam=ps.lam + cfg.beta * cfg.dt * (kl1 + kl2),
        step_index=ps.step_index,
    )


def _padded_hull(arrays: list[np.ndarray]) -> Box:
    stacked = np.vstack(arrays)
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = BOX_PAD_FRACTION * span
    return Box(lo - pad, hi + pad)


def _reference_samples(marginal: Marginal, n: int, rng: np.random.Generator) -> np.ndarray:
    if marginal.kind == "empirical":
        return marginal.samples
    return marginal.sample(n, rng)


def interpolant(ps: ParticleSystem, s: float) -> np.ndarray:
    """Displacement interpolant points (1 - s) X + s Y over both families."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("interpolation parameter must lie in [0, 1]")
    xs = ps.pooled_x()
    ys = np.vstack([ps.y1, ps.y2])
    return (1.0 - s) * xs + s * ys


def run(
    mu: Marginal,
    nu: Marginal,
    cost: CostFunction,
    cfg: FlowConfig,
    recorder: TrajectoryRecorder | None = None,
) -> Trajectory:
    """Run the full min-max particle flow for ``cfg.steps`` steps.

    Each iteration fits the pooled marginal histograms, records diagnostics
    (KL and squared-L2 against the inputs, coupling cost), then advances the
    particles and the penalty weight. The trajectory holds ``steps + 1`` rows
    (the initial state plus one per step). Deterministic for a fixed config:
    all randomness derives from ``cfg.seed``, independent of thread count.

    On a non-finite update the partial trajectory is attached to the raised
    ``FlowDivergedError``.
    """
    recorder = recorder or TrajectoryRecorder()
    root = np.random.SeedSequence(cfg.seed)
    init_ss, ref_ss, *step_ss = root.spawn(cfg.steps + 2)

    ps = init_particles(mu, nu, cfg, np.random.default_rng(init_ss))

    ref_rng = np.random.default_rng(ref_ss)
    n_ref = REF_SAMPLE_FACTOR * cfg.n_pairs
    mu_samples = _reference_samples(mu, n_ref, ref_rng)
    nu_samples = _reference_samples(nu, n_ref, ref_rng)

    # The estimation boxes cover the input samples (the frozen families, plus
    # the raw samples of empirical marginals) and every position the mobile
    # families can reach, and stay fixed for the whole run.
    box_x = _padded_hull([ps.x1, ps.x2] + ([mu.samples] if mu.kind == "empirical" else []))
    box_y = _padded_hull([ps.y1, ps.y2] + ([nu.samples] if nu.kind == "empirical" else []))
    b = cfg.bins_per_dim
    mu_ref = fit_histogram(mu_samples, box_x, b)
    nu_ref = fit_histogram(nu_samples, box_y, b)

    # Diagnostics compare against the analytic density when there is one,
    # otherwise against the sample-based reference histogram.
    def _center_values(box: Box, marginal: Marginal, ref_hist: HistogramDensity):
        centers = grid_centers(box, b)
        floor = 1e-10 / float(np.prod(box.widths / b))
        if marginal.kind == "analytic":
            return np.maximum(marginal.density_at(centers), floor)
        return np.maximum(ref_hist.density_at(centers), floor)

    q_mu = _center_values(box_x, mu, mu_ref)
    q_nu = _center_values(box_y, nu, nu_ref)

    def _diagnostics(rho1, rho2):
        kl1 = kl_estimate(rho1, mu, ref_center_values=q_mu)
        kl2 = kl_estimate(rho2, nu, ref_center_values=q_nu)
        l2_1 = l2_error(rho1, mu, ref_center_values=q_mu)
        l2_2 = l2_error(rho2, nu, ref_center_values=q_nu)
        return kl1, kl2, l2_1, l2_2

    try:
        for k in range(cfg.steps + 1):
            rho1 = fit_histogram(ps.pooled_x(), box_x, b)
            rho2 = fit_histogram(ps.pooled_y(), box_y, b)
            kl1, kl2, l2_1, l2_2 = _diagnostics(rho1, rho2)
            pair_cost = empirical_coupling_cost(ps, cost)
            recorder.record(k * cfg.dt, ps, kl1, kl2, pair_cost, l2_1, l2_2)
            if k == cfg.steps:
                break
            step_rng = np.random.default_rng(step_ss[k])
            ps = step_particles(
                ps, mu, nu, cost, cfg, rho1, rho2, step_rng, mu_ref=mu_ref, nu_ref=nu_ref
            )
            ps = step_lambda(ps, kl1, kl2, cfg)
    except FlowDivergedError as err:
        err.trajectory = recorder.build()
        raise

    return recorder.build()


def save_trajectory_csv(path, traj: Trajectory) -> None:
    """Write trajectory scalars with full round-trip float formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,lambda,kl1,kl2,cost,l2_mu,l2_nu\n")
        for i in range(len(traj)):
            row = (
                traj.t[i], traj.lam[i], traj.kl1[i], traj.kl2[i],
                traj.cost[i], traj.l2_mu[i], traj.l2_nu[i],
            )
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(
        t=data[:, 0], lam=data[:, 1], kl1=data[:, 2], kl2=data[:, 3],
        cost=data[:, 4], l2_mu=data[:, 5], l2_nu=data[:, 6],
    )


def save_particles_csv(path, ps: ParticleSystem) -> None:
    """Write particle pairs: columns x_1..x_d, y_1..y_d, family in {1, 2}."""
    d = ps.x1.shape[1]
    header = ",".join(
        [f"x_{a + 1}" for a in range(d)] + [f"y_{a + 1}" for a in range(d)] + ["family"]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for fam, xs, ys in ((1, ps.x1, ps.y1), (2, ps.x2, ps.y2)):
            for x, y in zip(xs, ys):
                coords = [repr(float(v)) for v in x] + [repr(float(v)) for v in y]
                fh.write(",".join(coords + [str(fam)]) + "\n")
