"""Linear rewards on bivariate-normal score differences.

With ``delta = z - z'`` standard bivariate normal with correlation ``rho``
and reward ``alpha * z1 + (1 - alpha) * z2``, the label only depends on
which side of the line ``alpha * d1 + (1 - alpha) * d2 = 0`` the
difference falls.  A mis-estimated ``alpha`` can only misclassify points
in the second and fourth quadrants, whose total mass is
``1/2 - arcsin(rho) / pi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import stable_log_sigmoid

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DeltaModel:
    rho: float
    alpha: float = 0.25

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def boundary_slope(self) -> float:
        """Slope of the label boundary in the (d1, d2) plane."""
        if self.alpha == 1.0:
            return -math.inf
        return -self.alpha / (1.0 - self.alpha)


def opposite_sign_probability(rho: float) -> float:
    """P(d1 * d2 < 0) for a standard bivariate normal with correlation ``rho``."""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return 0.5 - math.asin(rho) / math.pi


@dataclass
class DeltaSample:
    deltas: np.ndarray
    quadrant_mass: dict[int, float]

    @property
    def opposite_sign_mass(self) -> float:
        return self.quadrant_mass[2] + self.quadrant_mass[4]


def quadrants(deltas: np.ndarray) -> np.ndarray:
    """Quadrant 1..4 of each row (counter-clockwise from d1 > 0, d2 > 0)."""
    d1, d2 = deltas[:, 0], deltas[:, 1]
    return np.where(d1 >= 0, np.where(d2 >= 0, 1, 4), np.where(d2 >= 0, 2, 3))


def sample_deltas(rho: float, n: int, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    return rng.standard_normal((n, 2)) @ chol.T


def simulate_delta(model: DeltaModel, n: int, seed: int = 0) -> DeltaSample:
    if n <= 0:
        raise ValueError("n must be positive")
    deltas = sample_deltas(model.rho, n, np.random.default_rng(seed))
    q = quadrants(deltas)
    mass = {k: float(np.mean(q == k)) for k in (1, 2, 3, 4)}
    return DeltaSample(deltas, mass)


def label_delta(delta, alpha: float, rng: np.random.Generator) -> int:
    """0 if the first response wins under weight ``alpha``, 1 if the second, coin on the boundary."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    margin = alpha * float(delta[0]) + (1.0 - alpha) * float(delta[1])
    if margin > 0:
        return 0
    if margin < 0:
        return 1
    return int(rng.integers(0, 2))


def label_deltas(deltas: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    margin = alpha * deltas[:, 0] + (1.0 - alpha) * deltas[:, 1]
    coins = rng.integers(0, 2, size=len(margin))
    return np.where(margin > 0, 0, np.where(margin < 0, 1, coins)).astype(np.int64)


def alpha_nll(alpha: float, deltas: np.ndarray, labels: np.ndarray) -> float:
    """BTL negative log-likelihood of the one-parameter linear reward.

    The margin is divided by its root-mean-square over the sample.  Without
    that the fixed-scale reward is pulled toward whichever endpoint has the
    larger norm when labels are noise free, since scaling up a separating
    rule always lowers the loss.  After standardising only the direction of
    the boundary matters, and the whitened problem is symmetric about the
    true direction for every ``rho``.
    """
    margin = alpha * deltas[:, 0] + (1.0 - alpha) * deltas[:, 1]
    rms = math.sqrt(float(np.mean(margin * margin)))
    if rms > 0:
        margin = margin / rms
    sign = np.where(labels == 0, 1.0, -1.0)
    return float(-np.sum(stable_log_sigmoid(sign * margin)))


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the minimum of a unimodal function on [lo, hi] may sit on an endpoint
    return min((lo, x, hi), key=f)


def fit_alpha(deltas: np.ndarray, labels: np.ndarray, tol: float = 1e-6) -> float:
    """Weight in [0, 1] minimising the scale-free BTL NLL of ``alpha * d1 + (1 - alpha) * d2``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    if np.all(labels == labels[0]):
        raise ValueError("all labels identical: likelihood has no interior optimum")
    return golden_section(lambda a: alpha_nll(a, deltas, labels), 0.0, 1.0, tol)


@dataclass
class ShiftResult:
    accuracy: float
    errors_by_quadrant: dict[int, int]
    n: int


def accuracy_under_shift(alpha_hat: float, alpha: float, rho_test: float, n: int, seed: int = 0
                         ) -> ShiftResult:
    """Monte Carlo accuracy of the ``alpha_hat`` rule on ``alpha``-labelled test draws."""
    model = DeltaModel(rho_test, alpha)
    rng = np.random.default_rng(seed)
    deltas = sample_deltas(model.rho, n, rng)
    truth = label_deltas(deltas, alpha, rng)
    pred = label_deltas(deltas, alpha_hat, rng)
    wrong = pred != truth
    q = quadrants(deltas)
    errors = {k: int(np.sum(wrong & (q == k))) for k in (1, 2, 3, 4)}
    return ShiftResult(accuracy=float(1.0 - wrong.mean()), errors_by_quadrant=errors, n=n)


def alpha_replications(rho: float, alpha: float, n: int, reps: int, seed: int = 0) -> np.ndarray:
    """Fitted weights across ``reps`` independent training samples."""
    ss = np.random.SeedSequence([seed, int(round(rho * 1e6)) & 0xFFFFFFFF])
    out = np.empty(reps)
    for i, child in enumerate(ss.spawn(reps)):
        rng = np.random.default_rng(child)
        deltas = sample_deltas(rho, n, rng)
        out[i] = fit_alpha(deltas, label_deltas(deltas, alpha, rng))
    return out


def arcsin_table(rhos, n: int, seed: int = 0, alpha: float = 0.25, reps: int = 20,
                 fit_n: int = 2000) -> list[dict[str, float]]:
    """Closed form vs Monte Carlo per ``rho``, with fitted-weight spread."""
    rows = []
    for i, rho in enumerate(rhos):
        closed = opposite_sign_probability(rho)
        sample = simulate_delta(DeltaModel(rho, alpha), n, seed + i)
        mc = sample.opposite_sign_mass
        se = math.sqrt(closed * (1 - closed) / n)
        fits = alpha_replications(rho, alpha, fit_n, reps, seed)
        rows.append({
            "rho": float(rho),
            "closed_form": closed,
            "monte_carlo": mc,
            "mc_stderr": se,
            "z_score": (mc - closed) / se,
            "alpha_hat_mean": float(fits.mean()),
            "alpha_hat_var": float(fits.var(ddof=1)),
        })
    return rows
