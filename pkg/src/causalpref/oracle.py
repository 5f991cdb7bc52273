"""Exact potential-outcome tables and plug-in estimators on finite worlds.

Here the outcome ``L = 1`` means the *first* response of the triple is
preferred, so that ``E[L(x; y, y')] = sigma(r(x, y) - r(x, y'))`` in a
single-objective world.  (The synthetic datasets use the opposite label
convention; see :mod:`causalpref.btl`.)

A treatment is a prompt with an ordered pair of *distinct* responses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .autodiff import stable_sigmoid
from .btl import invert_to_reward_diff

NORMALIZATION_TOL = 1e-9


def _pair_mask(n_resp: int) -> np.ndarray:
    return ~np.eye(n_resp, dtype=bool)


@dataclass
class FiniteWorld:
    """Finite prompts ``X``, responses ``Y`` and objectives ``C``.

    rewards
        ``(nC, nX, nY)`` table of ``r_c(x, y)``.
    policy
        ``(nC, nX, nY, nY)`` table of ``pi(x, y, y' | c)``; the diagonal
        ``y == y'`` must carry no mass.
    latent_x, latent_t
        optional latent map: ``g^X(x)`` as an ``(nX,)`` integer array and
        ``g^T(x, y)`` as ``(nX, nY)``.
    """

    objective_probs: np.ndarray
    rewards: np.ndarray
    policy: np.ndarray
    latent_x: np.ndarray | None = None
    latent_t: np.ndarray | None = None
    prompts: list[str] | None = None
    responses: list[str] | None = None

    def __post_init__(self):
        self.objective_probs = np.asarray(self.objective_probs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.policy = np.asarray(self.policy, dtype=np.float64)
        n_c, n_x, n_y = self.rewards.shape
        if self.objective_probs.shape != (n_c,):
            raise ValueError("objective_probs must have one entry per objective")
        if self.policy.shape != (n_c, n_x, n_y, n_y):
            raise ValueError(f"policy must have shape {(n_c, n_x, n_y, n_y)}, got {self.policy.shape}")
        if np.any(self.objective_probs < 0) or abs(self.objective_probs.sum() - 1) > NORMALIZATION_TOL:
            raise ValueError("objective probabilities must be non-negative and sum to 1")
        if np.any(self.policy < 0):
            raise ValueError("policy has negative entries")
        sums = self.policy.sum(axis=(1, 2, 3))
        if np.any(np.abs(sums - 1) > NORMALIZATION_TOL):
            raise ValueError(f"policy does not sum to 1 for every objective: {sums}")
        diag = self.policy[:, :, np.arange(n_y), np.arange(n_y)]
        if np.any(diag > 0):
            raise ValueError("policy puts mass on comparing a response with itself")
        if (self.latent_x is None) != (self.latent_t is None):
            raise ValueError("latent map needs both g^X and g^T")
        if self.latent_x is not None:
            self.latent_x = np.asarray(self.latent_x, dtype=np.int64)
            self.latent_t = np.asarray(self.latent_t, dtype=np.int64)
            if self.latent_x.shape != (n_x,) or self.latent_t.shape != (n_x, n_y):
                raise ValueError("latent map shapes do not match the domain")
        if self.prompts is None:
            self.prompts = [f"x{i}" for i in range(n_x)]
        if self.responses is None:
            self.responses = [f"y{i}" for i in range(n_y)]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.rewards.shape

    @property
    def has_latents(self) -> bool:
        return self.latent_x is not None

    def triples(self):
        _, n_x, n_y = self.shape
        for x, y, yp in product(range(n_x), range(n_y), range(n_y)):
            if y != yp:
                yield x, y, yp

    def marginal_policy(self) -> np.ndarray:
        return np.einsum("c,cxyz->xyz", self.objective_probs, self.policy)

    def latent_cell(self, x: int, y: int, yp: int) -> tuple[int, int, int]:
        return int(self.latent_x[x]), int(self.latent_t[x, y]), int(self.latent_t[x, yp])

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FiniteWorld":
        rewards = np.asarray(d["rewards"], dtype=np.float64)
        n_c, n_x, n_y = rewards.shape
        policy = d.get("policy", "uniform")
        if isinstance(policy, str):
            if policy != "uniform":
                raise ValueError(f"unknown policy preset {policy!r}")
            policy = np.broadcast_to(_pair_mask(n_y), (n_c, n_x, n_y, n_y)).astype(np.float64)
            policy /= policy.sum(axis=(1, 2, 3), keepdims=True)
        latent = d.get("latent") or {}
        return cls(
            objective_probs=d.get("objective_probs", [1.0 / n_c] * n_c),
            rewards=rewards,
            policy=policy,
            latent_x=latent.get("g_x"),
            latent_t=latent.get("g_t"),
            prompts=d.get("prompts"),
            responses=d.get("responses"),
        )

    def to_dict(self) -> dict[str, Any]:
        out = {
            "prompts": self.prompts,
            "responses": self.responses,
            "objective_probs": self.objective_probs.tolist(),
            "rewards": self.rewards.tolist(),
            "policy": self.policy.tolist(),
        }
        if self.has_latents:
            out["latent"] = {"g_x": self.latent_x.tolist(), "g_t": self.latent_t.tolist()}
        return out


def load_world(path) -> FiniteWorld:
    return FiniteWorld.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# exact tables


@dataclass
class OutcomeTable:
    expected: np.ndarray  # (nX, nY, nY) E[L(x; y, y')]
    expected_given_c: np.ndarray  # (nC, nX, nY, nY)
    propensity: np.ndarray  # (nX, nY, nY) P(x, y, y')
    propensity_given_c: np.ndarray  # (nC, nX, nY, nY)


def enumerate_potential_outcomes(world: FiniteWorld) -> OutcomeTable:
    """Closed-form ``E[L(x; y, y')]`` overall and per objective."""
    r = world.rewards
    diff = r[:, :, :, None] - r[:, :, None, :]
    given_c = stable_sigmoid(diff)
    expected = np.einsum("c,cxyz->xyz", world.objective_probs, given_c)
    return OutcomeTable(
        expected=expected,
        expected_given_c=given_c,
        propensity=world.marginal_policy(),
        propensity_given_c=world.policy.copy(),
    )


# ---------------------------------------------------------------------------
# simulation and plug-in estimation


@dataclass
class Samples:
    c: np.ndarray
    x: np.ndarray
    y: np.ndarray
    y_prime: np.ndarray
    outcome: np.ndarray

    def __len__(self) -> int:
        return len(self.c)


def simulate(world: FiniteWorld, n: int, seed: int = 0) -> Samples:
    """Draw ``n`` units: ``c ~ P(C)``, treatment ``~ pi(. | c)``, ``L ~ Bernoulli(E[L | c])``."""
    rng = np.random.default_rng(seed)
    n_c, n_x, n_y = world.shape
    c = rng.choice(n_c, size=n, p=world.objective_probs)
    flat = np.empty(n, dtype=np.int64)
    for k in range(n_c):
        idx = np.flatnonzero(c == k)
        p = world.policy[k].reshape(-1)
        flat[idx] = rng.choice(p.size, size=len(idx), p=p / p.sum())
    x, y, yp = np.unravel_index(flat, (n_x, n_y, n_y))
    prob = stable_sigmoid(world.rewards[c, x, y] - world.rewards[c, x, yp])
    outcome = (rng.random(n) < prob).astype(np.int64)
    return Samples(c=c, x=x.astype(np.int64), y=y.astype(np.int64), y_prime=yp.astype(np.int64), outcome=outcome)


Conditioning = tuple[Literal["raw", "latent"], Literal["marginal", "given_c"]]


@dataclass
class EstimateTable:
    """Empirical ``E[L | cell]``; ``mean`` is NaN wherever ``count`` is zero."""

    cells: str
    given_c: bool
    mean: np.ndarray
    count: np.ndarray

    def supported(self) -> np.ndarray:
        return self.count > 0

    def unsupported_cells(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in idx) for idx in np.argwhere(~self.supported())]


def plugin_estimator(samples: Samples, conditioning: Conditioning = ("raw", "marginal"),
                     world: FiniteWorld | None = None, shape: tuple[int, int, int] | None = None
                     ) -> EstimateTable:
    """Cell means of the observed outcome; empty cells are left as NaN.

    Raw cells are ``(x, y, y')``; latent cells are ``(z^X, z^T, z'^T)`` and
    need ``world`` for the latent map.  With ``given_c`` a leading
    objective axis is added.
    """
    kind, by = conditioning
    if kind not in ("raw", "latent") or by not in ("marginal", "given_c"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if world is not None:
        shape = world.shape
    if shape is None:
        raise ValueError("need the world (or its shape) to lay out the table")
    n_c, n_x, n_y = shape
    if kind == "raw":
        keys = (samples.x, samples.y, samples.y_prime)
        dims = (n_x, n_y, n_y)
    else:
        if world is None or not world.has_latents:
            raise ValueError("latent conditioning needs a world with a latent map")
        n_zx = int(world.latent_x.max()) + 1
        n_zt = int(world.latent_t.max()) + 1
        keys = (world.latent_x[samples.x], world.latent_t[samples.x, samples.y],
                world.latent_t[samples.x, samples.y_prime])
        dims = (n_zx, n_zt, n_zt)
    given_c = by == "given_c"
    if given_c:
        keys = (samples.c, *keys)
        dims = (n_c, *dims)
    flat = np.ravel_multi_index(keys, dims)
    size = int(np.prod(dims))
    count = np.bincount(flat, minlength=size).reshape(dims)
    total = np.bincount(flat, weights=samples.outcome, minlength=size).reshape(dims)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return EstimateTable(cells=kind, given_c=given_c, mean=mean, count=count)


def binomial_tolerance(p: float, n: int, k: float = 3.0) -> float:
    """``k`` binomial standard errors at cell size ``n``."""
    if n <= 0:
        return math.inf
    return k * math.sqrt(max(p * (1 - p), 1e-12) / n)


# ---------------------------------------------------------------------------
# identification checks


@dataclass
class CellResult:
    cell: tuple[int, ...]
    truth: float
    estimate: float | None
    count: int
    error: float | None
    tolerance: float
    ok: bool


@dataclass
class VerificationReport:
    status: Literal["pass", "fail", "assumptions violated"]
    violations: list[str] = field(default_factory=list)
    cells: list[CellResult] = field(default_factory=list)
    flagged: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def worst(self) -> CellResult | None:
        scored = [c for c in self.cells if c.error is not None]
        return max(scored, key=lambda c: c.error) if scored else None

    def to_dict(self) -> dict[str, Any]:
        worst = self.worst
        return {
            "status": self.status,
            "violations": self.violations,
            "flagged": [list(f) for f in self.flagged],
            "worst": None if worst is None else worst.__dict__ | {"cell": list(worst.cell)},
            "cells": [c.__dict__ | {"cell": list(c.cell)} for c in self.cells],
        }


def check_positivity(world: FiniteWorld) -> list[str]:
    marginal = world.marginal_policy()
    out = []
    for x, y, yp in world.triples():
        p = marginal[x, y, yp]
        if not 0.0 < p < 1.0:
            out.append(f"positivity violated: P(x={x}, y={y}, y'={yp}) = {p:g}")
    return out


def check_unconfoundedness(world: FiniteWorld, tol: float = 1e-12) -> list[str]:
    """Assignment must not depend on the objective."""
    ref = world.policy[0]
    out = []
    for k in range(1, world.shape[0]):
        gap = float(np.max(np.abs(world.policy[k] - ref)))
        if gap > tol:
            out.append(f"unconfoundedness violated: pi(. | c={k}) differs from pi(. | c=0) by up to {gap:g}")
    return out


def check_latent_sufficiency(world: FiniteWorld) -> list[str]:
    """Rewards must be equal on every pair of texts sharing a latent image."""
    if not world.has_latents:
        return ["no latent map declared"]
    out = []
    n_c, n_x, n_y = world.shape
    seen: dict[tuple[int, int, int], float] = {}
    for k, x, y in product(range(n_c), range(n_x), range(n_y)):
        key = (k, int(world.latent_x[x]), int(world.latent_t[x, y]))
        r = float(world.rewards[k, x, y])
        if key in seen and seen[key] != r:
            out.append(f"latent sufficiency violated: c={k} latent {key[1:]} has rewards {seen[key]} and {r}")
        seen.setdefault(key, r)
    return out


def latent_propensity(world: FiniteWorld) -> np.ndarray:
    n_zx = int(world.latent_x.max()) + 1
    n_zt = int(world.latent_t.max()) + 1
    out = np.zeros((n_zx, n_zt, n_zt))
    marginal = world.marginal_policy()
    for x, y, yp in world.triples():
        out[world.latent_cell(x, y, yp)] += marginal[x, y, yp]
    return out


def _compare(cells_truth, table: EstimateTable, tolerance: float | None) -> list[CellResult]:
    out = []
    for cell, truth, est_cell in cells_truth:
        count = int(table.count[est_cell])
        if count == 0:
            out.append(CellResult(cell, truth, None, 0, None, math.inf, False))
            continue
        est = float(table.mean[est_cell])
        tol = tolerance if tolerance is not None else binomial_tolerance(truth, count)
        err = abs(est - truth)
        out.append(CellResult(cell, truth, est, count, err, tol, err <= tol))
    return out


def verify_prop1(world: FiniteWorld, n: int, tolerance: float | None = None, seed: int = 0
                 ) -> VerificationReport:
    """Plug-in raw-cell means against the enumerated potential outcomes.

    ``tolerance=None`` uses three binomial standard errors per cell.
    """
    violations = check_positivity(world) + check_unconfoundedness(world)
    if violations:
        return VerificationReport("assumptions violated", violations)
    table = enumerate_potential_outcomes(world)
    est = plugin_estimator(simulate(world, n, seed), ("raw", "marginal"), world)
    cells = _compare(((t, float(table.expected[t]), t) for t in world.triples()), est, tolerance)
    return VerificationReport("pass" if all(c.ok for c in cells) else "fail", cells=cells)


def verify_prop2(world: FiniteWorld, n: int, tolerance: float | None = None, seed: int = 0
                 ) -> VerificationReport:
    """Latent-cell means against the enumerated outcome of every raw triple.

    Raw triples need no support of their own: a triple is predicted from
    any observed texts with the same latent structure.  Latent cells with
    zero propensity are flagged and their triples are not scored.
    """
    violations = check_latent_sufficiency(world) + check_unconfoundedness(world)
    if violations:
        return VerificationReport("assumptions violated", violations)
    prop = latent_propensity(world)
    reachable = {world.latent_cell(*t) for t in world.triples()}
    flagged = sorted(cell for cell in reachable if prop[cell] <= 0.0)
    table = enumerate_potential_outcomes(world)
    est = plugin_estimator(simulate(world, n, seed), ("latent", "marginal"), world)
    scored = [
        (t, float(table.expected[t]), world.latent_cell(*t))
        for t in world.triples()
        if world.latent_cell(*t) not in flagged
    ]
    cells = _compare(scored, est, tolerance)
    ok = all(c.ok for c in cells)
    return VerificationReport("pass" if ok else "fail", cells=cells, flagged=flagged)


def latent_prediction(world: FiniteWorld, samples: Samples, triple: tuple[int, int, int]) -> float | None:
    """Estimate ``E[L(x; y, y')]`` from samples sharing the triple's latent cell; ``None`` if unsupported."""
    est = plugin_estimator(samples, ("latent", "marginal"), world)
    cell = world.latent_cell(*triple)
    return None if est.count[cell] == 0 else float(est.mean[cell])


def recover_reward_difference(samples: Samples, triple: tuple[int, int, int],
                              shape: tuple[int, int, int]) -> float:
    """Logit of the observed preference rate for ``triple``."""
    if np.any(samples.c != samples.c[0]):
        raise ValueError("reward differences are recovered in single-objective worlds")
    x, y, yp = triple
    sel = (samples.x == x) & (samples.y == y) & (samples.y_prime == yp)
    if not np.any(sel):
        raise ValueError(f"triple {triple} has no support")
    rate = float(samples.outcome[sel].mean())
    if rate in (0.0, 1.0):
        raise ValueError(f"empirical preference rate is {rate}; logit undefined")
    return invert_to_reward_diff(rate)


# ---------------------------------------------------------------------------
# stock worlds


def micro_world(confounded: bool) -> FiniteWorld:
    """One prompt, responses ``a`` and ``b``; objective 0 prefers ``a`` by 1, objective 1 prefers ``b`` by 1.

    When confounded, objective 0 is only shown ``(a, b)`` and objective 1
    only ``(b, a)``; otherwise both orders are equally likely for everyone.
    """
    rewards = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    policy = np.zeros((2, 1, 2, 2))
    if confounded:
        policy[0, 0, 0, 1] = 1.0
        policy[1, 0, 1, 0] = 1.0
    else:
        policy[:, 0, 0, 1] = 0.5
        policy[:, 0, 1, 0] = 0.5
    return FiniteWorld([0.5, 0.5], rewards, policy, prompts=["x"], responses=["a", "b"])


def randomized_world(n_prompts: int = 3, n_responses: int = 3, n_objectives: int = 2,
                     seed: int = 0, reward_scale: float = 2.0, policy_jitter: float = 0.25) -> FiniteWorld:
    """Random rewards and a random full-support policy over distinct-pair treatments.

    Treatment weights are ``1 + policy_jitter * U(-1, 1)``; the policy is
    shared by every objective, so assignment is unconfounded.
    """
    if not 0.0 <= policy_jitter < 1.0:
        raise ValueError("policy_jitter must lie in [0, 1) to keep full support")
    rng = np.random.default_rng(seed)
    rewards = rng.normal(0.0, reward_scale, size=(n_objectives, n_prompts, n_responses))
    weights = 1.0 + policy_jitter * rng.uniform(-1.0, 1.0, size=(n_prompts, n_responses, n_responses))
    weights *= _pair_mask(n_responses)
    policy = np.broadcast_to(weights, (n_objectives, n_prompts, n_responses, n_responses)).copy()
    policy /= policy.sum(axis=(1, 2, 3), keepdims=True)
    return FiniteWorld(np.full(n_objectives, 1.0 / n_objectives), rewards, policy)


def shared_latent_world(hold_out: tuple[int, int, int] | None = (0, 1, 2)) -> FiniteWorld:
    """One prompt, four responses, two latent treatment levels (``y0, y1 -> 0``; ``y2, y3 -> 1``).

    Reward is 0 at level 0 and 1 at level 1.  ``hold_out`` gets zero
    propensity, yet its latent cell is covered by other raw triples.
    """
    rewards = np.array([[[0.0, 0.0, 1.0, 1.0]]])
    policy = np.ones((1, 1, 4, 4)) * _pair_mask(4)
    if hold_out is not None:
        policy[(0, *hold_out)] = 0.0
    policy /= policy.sum()
    return FiniteWorld([1.0], rewards, policy, latent_x=[0], latent_t=[[0, 0, 1, 1]])
