"""Trend assertions, the acceptance criteria as executable checks, and the battery.

The checks here are plain functions returning :class:`CheckResult` so the
pytest acceptance module, ``cpl oracle`` and :func:`run_full_battery` all
share one implementation.
"""

from __future__ import annotations

import math
import shutil
import tempfile
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import amce, gaussian, oracle
from . import autodiff as ad
from .config import ExperimentConfig, dump_json, load_config
from .models import Variant, RewardModel, build_spec

# ---------------------------------------------------------------------------
# trends


class Direction(str, Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    FLAT = "flat"


@dataclass(frozen=True)
class TrendAssertion:
    """Direction of a metric over a knob.

    For increasing/decreasing series the last value must beat the first by
    at least ``margin``; with ``pairwise`` every consecutive step must
    also move the right way.  ``flat`` passes when the range is within
    ``epsilon``.
    """

    direction: Direction
    margin: float = 0.0
    epsilon: float = 0.0
    pairwise: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.margin < 0 or self.epsilon < 0:
            raise ValueError("margin and epsilon must be >= 0")


@dataclass
class TrendResult:
    passed: bool
    evidence: str
    steps: list[float] = field(default_factory=list)


def assert_trend(series: Sequence[float], assertion: TrendAssertion) -> TrendResult:
    values = list(series)
    if len(values) < 2 or any(v is None or not math.isfinite(float(v)) for v in values):
        raise ValueError(f"incomplete series {values!r}: need >= 2 finite values")
    values = [float(v) for v in values]
    steps = [b - a for a, b in zip(values, values[1:])]
    d = assertion.direction
    if d is Direction.FLAT:
        spread = max(values) - min(values)
        ok = spread <= assertion.epsilon
        return TrendResult(ok, f"range {spread:.4g} {'<=' if ok else '>'} epsilon {assertion.epsilon:g}", steps)
    sign = 1.0 if d is Direction.INCREASING else -1.0
    change = sign * (values[-1] - values[0])
    ok = change >= assertion.margin and change > 0
    detail = f"endpoint change {change:+.4g} vs margin {assertion.margin:g}"
    if assertion.pairwise:
        bad = [i for i, s in enumerate(steps) if sign * s <= 0]
        ok = ok and not bad
        if bad:
            detail += f"; steps {bad} not {d.value}"
    return TrendResult(ok, detail, steps)


# ---------------------------------------------------------------------------
# acceptance criteria


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict[str, Any] = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict[str, Any]]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail, data = fn()
    except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
        ok, detail, data = False, f"raised {type(exc).__name__}: {exc}", {}
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0, data)


def criterion_arcsin(n: int = 1_000_000, seed: int = 0) -> CheckResult:
    def body():
        notes, ok = [], True
        for i, rho in enumerate((-0.9, -0.5, 0.0, 0.5, 0.9)):
            p = gaussian.opposite_sign_probability(rho)
            mc = gaussian.simulate_delta(gaussian.DeltaModel(rho), n, seed + i).opposite_sign_mass
            z = (mc - p) / math.sqrt(p * (1 - p) / n)
            ok &= abs(z) <= 3.0
            notes.append(f"rho={rho:+.1f} z={z:+.2f}")
        ok &= gaussian.opposite_sign_probability(0.0) == 0.5
        p9 = gaussian.opposite_sign_probability(0.9)
        ok &= abs(p9 - 0.1436) <= 0.001
        return ok, f"{', '.join(notes)}; p(0.9)={p9:.5f}", {}

    return _timed("1 arcsin closed form", body)


def criterion_prop1(n: int = 100_000, seeds: Sequence[int] = tuple(range(20)), tol: float = 0.02
                    ) -> CheckResult:
    def body():
        passes = [oracle.verify_prop1(oracle.randomized_world(3, 3, 2, seed=s), n, tol, seed=1000 + s).passed
                  for s in seeds]
        rate = sum(passes) / len(passes)
        micro = oracle.micro_world(True)
        truth = oracle.enumerate_potential_outcomes(micro)
        samples = oracle.simulate(micro, n, seed=7)
        naive = oracle.plugin_estimator(samples, ("raw", "marginal"), micro)
        adjusted = oracle.plugin_estimator(samples, ("raw", "given_c"), micro)
        cell = (0, 0, 1)
        bias = float(naive.mean[cell] - truth.expected[cell])
        sig1 = 1.0 / (1.0 + math.exp(-1.0))
        adj_err = abs(float(adjusted.mean[(0,) + cell]) - sig1)
        ok = rate >= 0.95 and abs(bias - 0.231) <= 0.02 and adj_err < 0.02
        return ok, (f"pass rate {rate:.2f} over {len(passes)} worlds; micro bias {bias:.4f}; "
                    f"|E[L|a,b,C=0]-sigma(1)|={adj_err:.4f}"), {"rate": rate, "bias": bias}

    return _timed("2 plug-in identification oracle", body)


def zero_propensity_latent_world() -> oracle.FiniteWorld:
    """Shared-latent world in which no pair compares latent level 0 against level 1."""
    world = oracle.shared_latent_world(hold_out=None)
    policy = world.policy.copy()
    policy[0, 0, :2, 2:] = 0.0
    policy /= policy.sum()
    return oracle.FiniteWorld(world.objective_probs, world.rewards, policy,
                              latent_x=world.latent_x, latent_t=world.latent_t)


def criterion_prop2(n: int = 100_000, tol: float = 0.02) -> CheckResult:
    def body():
        world = oracle.shared_latent_world(hold_out=(0, 1, 2))
        held = (0, 1, 2)
        samples = oracle.simulate(world, n, seed=3)
        assert not np.any((samples.y == 1) & (samples.y_prime == 2)), "held-out triple was sampled"
        pred = oracle.latent_prediction(world, samples, held)
        truth = float(oracle.enumerate_potential_outcomes(world).expected[held])
        gap = abs(pred - truth)
        gappy = zero_propensity_latent_world()
        rep = oracle.verify_prop2(gappy, n, tol, seed=5)
        cell = gappy.latent_cell(0, 0, 2)
        withheld = oracle.latent_prediction(gappy, oracle.simulate(gappy, n, seed=5), (0, 0, 2)) is None
        scored = {c.cell for c in rep.cells}
        ok = (gap <= tol and cell in rep.flagged and withheld
              and not any(gappy.latent_cell(*t) == cell for t in scored))
        return ok, (f"held-out prediction {pred:.4f} vs {truth:.4f} (gap {gap:.4f}); "
                    f"zero-propensity cell {cell} flagged={cell in rep.flagged}, withheld={withheld}"), {}

    return _timed("3 latent identification oracle", body)


def finite_difference_gradient(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray],
                               h: float = 1e-6) -> list[np.ndarray]:
    out = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = f(xs)
            x[idx] = orig - h
            down = f(xs)
            x[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-8)
    return num / den


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Scalar-valued graphs exercising each differentiable op on random inputs."""
    m, k, n = rng.integers(1, 4, size=3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(m, k))
    w = rng.normal(size=(m, k))
    idx = rng.integers(0, m, size=3)

    def scalar(node):
        # weight the output so every entry's gradient differs
        return ad.total(ad.mul(node, w[: node.shape[0], : node.shape[1]] if node.value.ndim == 2
                               else w[: node.shape[0], 0]))

    return {
        "add": (lambda p: scalar(ad.add(p[0], p[1])), [a, b]),
        "sub": (lambda p: scalar(ad.sub(p[0], p[1])), [a, b]),
        "mul": (lambda p: scalar(ad.mul(p[0], p[1])), [a, b]),
        "neg": (lambda p: scalar(ad.neg(p[0])), [a]),
        "matmul": (lambda p: ad.total(ad.matmul(p[0], p[1])),
                   [rng.normal(size=(m, k)), rng.normal(size=(k, n))]),
        "total": (lambda p: ad.total(ad.tanh(p[0])), [a]),
        "mean": (lambda p: ad.mean(ad.mul(p[0], w)), [a]),
        "column": (lambda p: ad.total(ad.mul(ad.column(p[0], 0), w[:, 0])), [a]),
        "rows": (lambda p: ad.total(ad.tanh(ad.rows(p[0], idx % m))), [a]),
        "stack_rows": (lambda p: ad.total(ad.tanh(ad.stack_rows(p[0], p[1]))), [a, b]),
        "tanh": (lambda p: scalar(ad.tanh(p[0])), [a]),
        "sigmoid": (lambda p: scalar(ad.sigmoid(p[0])), [a]),
        "log_sigmoid": (lambda p: scalar(ad.log_sigmoid(p[0])), [3 * a]),
        "gelu": (lambda p: scalar(ad.gelu(p[0])), [a]),
        "bce_with_logits": (lambda p: ad.bce_with_logits(p[0], (b > 0).astype(float)), [a]),
        "mlp": (lambda p: _mlp_loss(p, rng_seed=int(idx[0])), [rng.normal(size=(3, 4))]),
    }


def _mlp_loss(p, rng_seed: int) -> ad.Node:
    mlp = ad.MLP(ad.MlpSpec((4, 5, 3, 1), seed=rng_seed))
    return ad.total(ad.log_sigmoid(ad.column(mlp(p[0]), 0)))


def gradient_check_once(name: str, rng: np.random.Generator) -> float:
    fn, xs = _op_cases(rng)[name]
    params = [ad.parameter(x.copy()) for x in xs]
    grads = ad.backward(fn(params))
    analytic = [grads[p] for p in params]
    numeric = finite_difference_gradient(lambda v: float(fn([ad.constant(x) for x in v]).value),
                                         [x.copy() for x in xs])
    return max(relative_error(a, b) for a, b in zip(analytic, numeric))


OPS = ("add", "sub", "mul", "neg", "matmul", "total", "mean", "column", "rows", "stack_rows", "tanh",
       "sigmoid", "log_sigmoid", "gelu", "bce_with_logits", "mlp")


def lambda_zero_trunk_match(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    e, e2 = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    c = rng.integers(0, 2, 16)
    ell = rng.integers(0, 2, 16)
    mh = RewardModel(build_spec(Variant.MULTIHEAD, 8, hidden=6, latent=4, seed=seed))
    adv = RewardModel(build_spec(Variant.ADVERSARIAL, 8, hidden=6, latent=4, lam=0.0, seed=seed))
    g_mh = ad.backward(mh.losses(e, e2, c, ell)["total"])
    g_adv = ad.backward(adv.losses(e, e2, c, ell)["total"])
    return all(np.array_equal(g_mh[p], g_adv[q])
               for p, q in zip(mh.trunk.parameters(), adv.trunk.parameters()))


def criterion_gradients(trials: int = 100, seed: int = 0) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = {}
        for _ in range(trials):
            for name in OPS:
                worst[name] = max(worst.get(name, 0.0), gradient_check_once(name, rng))
        bad = {k: v for k, v in worst.items() if v >= 1e-5}
        x = ad.parameter(rng.normal(size=(3, 2)))
        upstream = rng.normal(size=(3, 2))
        reversal_ok = True
        for lam in (0.0, 0.5, 1.0, 2.5):
            g = ad.backward(ad.total(ad.mul(ad.grad_reverse(x, lam), upstream)))[x]
            reversal_ok &= np.array_equal(g, -lam * upstream)
        zero_ok = lambda_zero_trunk_match(seed)
        ok = not bad and reversal_ok and zero_ok
        detail = (f"max rel err {max(worst.values()):.2e} over {trials} trials x {len(OPS)} ops"
                  f"{'; failing ' + str(bad) if bad else ''}; reversal exact={reversal_ok}; "
                  f"lambda=0 trunk bitwise={zero_ok}")
        return ok, detail, {"worst": worst}

    return _timed("4 gradient integrity", body)


def _fresh_dir(out_dir, name: str) -> Path:
    if out_dir is None:
        return Path(tempfile.mkdtemp(prefix=f"cpl-{name}-"))
    path = Path(out_dir) / name
    if path.exists():
        shutil.rmtree(path)
    return path


def check_uf_report(report) -> tuple[bool, str]:
    ood = report.series("base", "ood")
    idr = report.series("base", "id")
    gaps = [a - b for a, b in zip(idr, ood)]
    t_ood = assert_trend(ood, TrendAssertion(Direction.DECREASING, margin=0.03, pairwise=True))
    t_id = assert_trend(idr, TrendAssertion(Direction.FLAT, epsilon=0.03))
    t_gap = assert_trend([gaps[0], gaps[-1]], TrendAssertion(Direction.INCREASING, margin=0.03))
    fmt = lambda xs: "/".join(f"{100 * x:.1f}" for x in xs)  # noqa: E731
    detail = (f"OOD {fmt(ood)} ({t_ood.evidence}); ID {fmt(idr)} ({t_id.evidence}); "
              f"gap {fmt(gaps)} ({t_gap.evidence})")
    return t_ood.passed and t_id.passed and t_gap.passed, detail


def criterion_latent_positivity(cfg: ExperimentConfig | None = None, out_dir=None, jobs: int = 1
                                ) -> CheckResult:
    from .studies import run

    def body():
        c = cfg or load_config(preset="ultrafeedback-desk")
        res = run(c, _fresh_dir(out_dir, "ultrafeedback"), jobs=jobs)
        ok, detail = check_uf_report(res["report"])
        return ok, detail, {"report": res["report"]}

    return _timed("5 latent-positivity trend", body)


def check_confounding_report(report) -> tuple[bool, str]:
    inc = {v: dict(zip(report.knob_values, report.series(v, "inconsistent"))) for v in report.variants}
    notes = []
    a = all(abs(inc[v][1.0] - 0.5) <= 0.06 for v in inc)
    notes.append("(a) rho=1.0 " + "/".join(f"{100 * inc[v][1.0]:.1f}" for v in inc))
    b_adv = inc["adversarial"][0.8] - inc["base"][0.8]
    b_mh = inc["multihead"][0.8] - inc["base"][0.8]
    b = b_adv >= 0.02 and b_mh >= 0.01
    notes.append(f"(b) rho=0.8 adv-base {100 * b_adv:+.1f}, mh-base {100 * b_mh:+.1f}")
    drops = {v: inc[v][0.5] - inc[v][1.0] for v in inc}
    cc = all(d >= 0.04 for d in drops.values())
    notes.append("(c) 0.5 vs 1.0 drop " + "/".join(f"{100 * d:.1f}" for d in drops.values()))
    return a and b and cc, "; ".join(notes)


def criterion_confounding(cfg: ExperimentConfig | None = None, out_dir=None, jobs: int = 1) -> CheckResult:
    from .studies import run

    def body():
        c = cfg or load_config(preset="confounded-desk", overrides={"grid": {"rho": [0.5, 0.8, 1.0]}})
        res = run(c, _fresh_dir(out_dir, "confounded"), jobs=jobs)
        ok, detail = check_confounding_report(res["report"])
        return ok, detail, {"report": res["report"]}

    return _timed("6 confounding trend", body)


def criterion_amce(seed: int = 0) -> CheckResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for n in range(1, 9):
            rewards = [amce.linear_reward(rng.normal(size=n))]
            if n >= 2:
                rewards.append(amce.discretized_nonadditive_reward(-1.0, -1.0, 0.8, 0.3, bits=n - 1))
            for reward in rewards:
                for k in range(n):
                    cfg = amce.AmceConfig(k, n, reward)
                    worst = max(worst, abs(amce.amce_estimate(cfg) - amce.amce_bruteforce(cfg)))
        null = amce.amce_estimate(amce.AmceConfig(1, 3, amce.linear_reward([0.4, 0.0, -1.2])))
        w75 = amce.amce_estimate(amce.AmceConfig(0, 3, amce.linear_reward([0.75, 0.3, -1.2])))
        target = 1.0 / (1.0 + math.exp(-0.75))
        ok = worst <= 1e-12 and null == 0.5 and abs(w75 - target) <= 1e-9
        return ok, f"max |estimate - brute force| {worst:.1e}; null {null!r}; w=0.75 -> {w75:.10f}", {}

    return _timed("7 AMCE equivalence", body)


def criterion_alpha_variance(n: int = 5_000, reps: int = 50, seed: int = 0) -> CheckResult:
    def body():
        v0 = float(np.var(gaussian.alpha_replications(0.0, 0.25, n, reps, seed), ddof=1))
        v9 = float(np.var(gaussian.alpha_replications(0.9, 0.25, n, reps, seed), ddof=1))
        return v9 > v0, f"var(alpha_hat) rho=0.9: {v9:.3e}, rho=0.0: {v0:.3e} (ratio {v9 / v0:.1f})", {}

    return _timed("8 alpha_hat variance inflation", body)


def compare_trees(a, b) -> list[str]:
    """Relative paths whose bytes differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    files_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    files_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    diff = sorted(str(p) for p in files_a ^ files_b)
    diff += sorted(str(p) for p in files_a & files_b if (a / p).read_bytes() != (b / p).read_bytes())
    return diff


def small_study_configs() -> dict[str, ExperimentConfig]:
    """Every study at reduced size; the knobs that matter for determinism are all exercised."""
    tiny = {"splits": {"train": 400, "validation": 100, "test": 300}, "train": {"epochs": 2, "seeds": [0, 1]}}
    return {
        "ultrafeedback": load_config(preset="ultrafeedback-desk",
                                     overrides={**tiny, "grid": {"rho_tr": [0.0, 0.9]},
                                                "output": {"datasets": True}}),
        "confounded": load_config(preset="confounded-desk",
                                  overrides={**tiny, "grid": {"rho": [0.5, 1.0]}, "output": {"datasets": True}}),
        "gaussian": load_config(preset="gaussian", overrides={"grid": {"n_mc": 20_000, "reps": 5}}),
        "oracle": load_config(preset="oracle", overrides={"grid": {"n": 20_000, "seeds": [0, 1, 2]}}),
        "amce": load_config(preset="amce"),
    }


def criterion_determinism(configs: dict[str, ExperimentConfig] | None = None, out_dir=None,
                          jobs: int = 1) -> CheckResult:
    from .studies import run

    def body():
        cfgs = configs or small_study_configs()
        root = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="cpl-det-"))
        notes, ok = [], True
        for name, cfg in cfgs.items():
            first, second = _fresh_dir(root, f"{name}-a"), _fresh_dir(root, f"{name}-b")
            run(cfg, first, jobs=jobs)
            run(cfg, second, jobs=jobs)
            diff = compare_trees(first, second)
            n_files = sum(1 for p in first.rglob("*") if p.is_file())
            ok &= not diff and n_files > 0
            notes.append(f"{name}: {n_files} files" + (f", differing {diff}" if diff else " identical"))
        return ok, "; ".join(notes), {}

    return _timed("9 determinism", body)


# ---------------------------------------------------------------------------
# battery


# design invariants -> the tests that exercise them
INVARIANT_COVERAGE: dict[str, list[str]] = {
    "autodiff: reverse-mode matches finite differences": ["tests/test_autodiff.py::TestGradients"],
    "autodiff: backward deterministic and repeatable": ["tests/test_autodiff.py::TestBackward"],
    "autodiff: identity MLP reproduces input": ["tests/test_autodiff.py::TestMLP"],
    "btl: shift invariance": ["tests/test_btl.py::TestProperties"],
    "btl: nll non-negative": ["tests/test_btl.py::TestProperties"],
    "btl: winner gradient sigma(margin)-1": ["tests/test_btl.py::TestProperties"],
    "worlds: correlation control": ["tests/test_worlds.py::TestUltraFeedback"],
    "worlds: confounding control": ["tests/test_worlds.py::TestConfounded"],
    "worlds: label consistency": ["tests/test_worlds.py::TestLabels"],
    "worlds: aligned factor has larger variance": ["tests/test_worlds.py::TestConfounded"],
    "models: head isolation": ["tests/test_models.py::TestGradients"],
    "models: lambda continuity": ["tests/test_models.py::TestGradients"],
    "models: early stopping keeps best epoch": ["tests/test_models.py::TestTraining"],
    "models: swap symmetry": ["tests/test_models.py::TestTraining"],
    "evaluation: slice partition": ["tests/test_evaluation.py::TestAccuracy"],
    "evaluation: report round trip": ["tests/test_evaluation.py::TestReport"],
    "evaluation: union accuracy is weighted mean": ["tests/test_evaluation.py::TestAccuracy"],
    "oracle: enumeration exact": ["tests/test_oracle.py::TestEnumeration"],
    "oracle: convergence in n": ["tests/test_oracle.py::TestRawIdentification"],
    "oracle: zero-propensity latent cells flagged": ["tests/test_oracle.py::TestLatentIdentification"],
    "oracle: heterogeneity detection": ["tests/test_oracle.py::TestRawIdentification"],
    "gaussian: opposite-sign probability monotone and symmetric": ["tests/test_gaussian.py::TestClosedForm"],
    "gaussian: Monte Carlo within 3 s.e. in >= 95% of trials": ["tests/test_gaussian.py::TestMonteCarlo"],
    "gaussian: fit objective unimodal": ["tests/test_gaussian.py::TestFit"],
    "amce: bounds and swap complement": ["tests/test_amce.py::TestProperties"],
    "amce: density invariance for additive rewards": ["tests/test_amce.py::TestProperties"],
    "amce: monotone in weight": ["tests/test_amce.py::TestProperties"],
    "cli: idempotent reruns": ["tests/test_cli.py::TestRun", "tests/test_acceptance.py"],
    "cli: manifest round trip": ["tests/test_config.py::TestManifest"],
    "suite: deterministic battery": ["tests/test_suite.py::TestBattery"],
}


def battery_checks(budget: str = "desk", out_dir=None, jobs: int = 1) -> list[Callable[[], CheckResult]]:
    if budget not in ("desk", "paper-scale"):
        raise ValueError(f"unknown budget {budget!r}")
    if budget == "desk":
        uf = load_config(preset="ultrafeedback-desk")
        conf = load_config(preset="confounded-desk", overrides={"grid": {"rho": [0.5, 0.8, 1.0]}})
    else:
        uf = load_config(preset="ultrafeedback-paper")
        conf = load_config(preset="confounded-paper", overrides={"grid": {"rho": [0.5, 0.8, 1.0]}})
    work = Path(out_dir) / "work" if out_dir is not None else None
    return [
        criterion_arcsin,
        criterion_prop1,
        criterion_prop2,
        criterion_gradients,
        lambda: criterion_latent_positivity(uf, work, jobs),
        lambda: criterion_confounding(conf, work, jobs),
        criterion_amce,
        criterion_alpha_variance,
        lambda: criterion_determinism(out_dir=None if work is None else work / "determinism", jobs=jobs),
    ]


def junit_xml(results: Sequence[CheckResult], suite_name: str = "causalpref-battery") -> str:
    suite = ET.Element("testsuite", name=suite_name, tests=str(len(results)),
                       failures=str(sum(not r.passed for r in results)),
                       time=f"{sum(r.seconds for r in results):.3f}")
    for r in results:
        case = ET.SubElement(suite, "testcase", classname="acceptance", name=r.name, time=f"{r.seconds:.3f}")
        if not r.passed:
            ET.SubElement(case, "failure", message=r.detail).text = r.detail
        else:
            ET.SubElement(case, "system-out").text = r.detail
    ET.indent(suite)
    return ET.tostring(suite, encoding="unicode") + "\n"


def text_report(results: Sequence[CheckResult]) -> str:
    lines = [r.line() for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"


def _battery_one(args: tuple[int, str, Any, int]) -> CheckResult:
    number, budget, out_dir, jobs = args
    return battery_checks(budget, out_dir, jobs)[number - 1]()


def run_full_battery(budget: str = "desk", out_dir=None, jobs: int = 1,
                     only: Sequence[int] | None = None) -> tuple[bool, list[CheckResult]]:
    """Run the acceptance checks and write JUnit XML, a text report and the coverage map.

    With ``jobs > 1`` the checks themselves run in a process pool (each
    owns its seeds and its output subdirectory); results come back in
    check order.
    """
    n_checks = len(battery_checks(budget, out_dir, jobs))
    chosen = list(range(1, n_checks + 1)) if only is None else list(only)
    for i in chosen:
        if not 1 <= i <= n_checks:
            raise ValueError(f"no check numbered {i}")
    if jobs > 1 and len(chosen) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_battery_one, [(i, budget, out_dir, 1) for i in chosen]))
    else:
        results = [_battery_one((i, budget, out_dir, jobs)) for i in chosen]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "battery.xml").write_text(junit_xml(results))
        (out / "battery.txt").write_text(text_report(results))
        (out / "coverage.json").write_text(dump_json(INVARIANT_COVERAGE))
    return all(r.passed for r in results), results
