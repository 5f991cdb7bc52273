"""Study runners behind ``cpl run``.

Each runner takes a resolved :class:`~causalpref.config.ExperimentConfig`
and an output directory and writes reports, plot-ready CSVs, checkpoints
and (optionally) figures.  Training cells are independent and can be
spread over a process pool; results are gathered in grid order so the
outputs do not depend on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import amce as amce_mod
from . import gaussian, oracle
from .config import ExperimentConfig, build_manifest, dump_json
from .evaluation import SeedRun, consistency_report, id_ood_report
from .models import RewardModel, TrainConfig, build_spec, train
from .worlds import (
    ConfoundedWorld,
    EmbeddingConfig,
    UltraFeedbackWorld,
    sample_confounded_world,
    sample_ultrafeedback_world,
    save_dataset,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Runtime failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def derive_seed(root: int, *names: str | int) -> int:
    """63-bit seed for a named purpose under the root seed."""
    words = [int(root)] + [int(hashlib.sha256(str(n).encode()).hexdigest()[:8], 16) for n in names]
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def _embedding(world: dict[str, Any]) -> EmbeddingConfig:
    return EmbeddingConfig(dim=world["dim"], n_nuisance=world["n_nuisance"],
                           type_gain=world["type_gain"], noise=world["noise"])


def uf_world(cfg: ExperimentConfig) -> UltraFeedbackWorld:
    w = cfg.section("world")
    return UltraFeedbackWorld(alpha=w["alpha"], embedding=_embedding(w), btl_noise=w["btl_noise"],
                              seed=w["seed"])


def confounded_world(cfg: ExperimentConfig) -> ConfoundedWorld:
    w = cfg.section("world")
    return ConfoundedWorld(latent_corr=w["latent_corr"], sigma_aligned=w["sigma_aligned"],
                           sigma_off=w["sigma_off"], embedding=_embedding(w),
                           btl_noise=w["btl_noise"], seed=w["seed"])


def _train_cfg(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.section("train")
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seeds=tuple(t["seeds"]))


def _spec(cfg: ExperimentConfig, variant: str, rep_seed: int, input_dim: int):
    m = cfg.section("model")
    lam = m.get("adversarial", {}).get("lam", 1.0) if variant == "adversarial" else None
    return build_spec(variant, input_dim, hidden=m["hidden"], latent=m["latent"], lam=lam,
                      seed=derive_seed(cfg.seed, "init", rep_seed))


# ---------------------------------------------------------------------------
# datasets per cell (regenerated on demand; generation is cheap and deterministic)


def uf_data(cfg: ExperimentConfig, rho_tr: float, rep_seed: int) -> dict[str, Any]:
    world = uf_world(cfg)
    sizes = cfg.section("splits")
    ds = derive_seed(cfg.seed, "data", rep_seed)
    alpha = world.alpha
    return {
        "train": sample_ultrafeedback_world(sizes["train"], rho_tr, alpha, ds, world, "train"),
        "validation": sample_ultrafeedback_world(sizes["validation"], rho_tr, alpha, ds, world, "validation"),
        "id": sample_ultrafeedback_world(sizes["test"], rho_tr, alpha, ds, world, "test-id"),
        "ood": sample_ultrafeedback_world(sizes["test"], cfg.section("grid")["rho_ood"], alpha, ds, world,
                                          "test-ood"),
    }


def confounded_data(cfg: ExperimentConfig, rho: float, rep_seed: int, need_train: bool = True
                    ) -> dict[str, Any]:
    world = confounded_world(cfg)
    sizes = cfg.section("splits")
    ds = derive_seed(cfg.seed, "data", rep_seed)
    out = {"test": sample_confounded_world(sizes["test"], cfg.section("grid")["rho_test"], ds, world, "test")}
    if need_train:
        out["train"] = sample_confounded_world(sizes["train"], rho, ds, world, "train")
        out["validation"] = sample_confounded_world(sizes["validation"], rho, ds, world, "validation")
    return out


def _train_cell(args: tuple[ExperimentConfig, str, float, str, int]):
    cfg, study, knob, variant, rep_seed = args
    data = uf_data(cfg, knob, rep_seed) if study == "ultrafeedback" else confounded_data(cfg, knob, rep_seed)
    spec = _spec(cfg, variant, rep_seed, data["train"].dim)
    result = train(spec, {"train": data["train"], "validation": data["validation"]}, _train_cfg(cfg),
                   seed=derive_seed(cfg.seed, "batches", rep_seed))
    return result.model.get_weights(), result.to_dict()


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def train_grid(cfg: ExperimentConfig, knobs: Iterable[float], jobs: int = 1
               ) -> dict[tuple[float, str, int], tuple[list[np.ndarray], dict[str, Any]]]:
    """Train every (knob, variant, seed) cell of a model study."""
    variants = cfg.section("model")["variants"]
    cells = [(cfg, cfg.study, float(k), v, s) for k in knobs for v in variants
             for s in cfg.section("train")["seeds"]]
    results = _map(_train_cell, cells, jobs)
    return {(c[2], c[3], c[4]): res for c, res in zip(cells, results)}


# ---------------------------------------------------------------------------
# file helpers


class OutputWriter:
    """Tracks every file written so the manifest can list content hashes."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel: str) -> None:
        self.files[rel] = hashlib.sha256(self.path(rel).read_bytes()).hexdigest()

    def text(self, rel: str, content: str) -> Path:
        p = self.path(rel)
        p.write_text(content)
        self.record(rel)
        return p

    def csv(self, rel: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return self.text(rel, buf.getvalue())


def _checkpoint(out: OutputWriter, cfg: ExperimentConfig, knob_name: str, knob: float, variant: str,
                rep_seed: int, weights, history: dict[str, Any]) -> None:
    spec = _spec(cfg, variant, rep_seed, _input_dim(cfg))
    model = RewardModel(spec)
    model.set_weights(weights)
    rel = f"checkpoints/{variant}_{knob_name}{knob:g}_seed{rep_seed}.cplw"
    model.save(out.path(rel), extra={"seed": rep_seed, knob_name: knob, "train": history})
    out.record(rel)
    out.record(rel + ".json")


def _input_dim(cfg: ExperimentConfig) -> int:
    return cfg.section("world")["dim"]


def _rebuild(cfg: ExperimentConfig, variant: str, rep_seed: int, weights) -> RewardModel:
    model = RewardModel(_spec(cfg, variant, rep_seed, _input_dim(cfg)))
    model.set_weights(weights)
    return model


# ---------------------------------------------------------------------------
# studies


def knob_values(cfg: ExperimentConfig) -> tuple[str, list[float]]:
    name = "rho_tr" if cfg.study == "ultrafeedback" else "rho"
    return name, [float(k) for k in cfg.section("grid")[name]]


def load_trained(cfg: ExperimentConfig, root) -> dict[tuple[float, str, int], tuple[list[np.ndarray], dict]]:
    """Read the checkpoints a ``train`` stage wrote, keyed like :func:`train_grid`."""
    name, knobs = knob_values(cfg)
    out = {}
    for k in knobs:
        for v in cfg.section("model")["variants"]:
            for r in cfg.section("train")["seeds"]:
                path = Path(root) / f"checkpoints/{v}_{name}{k:g}_seed{r}.cplw"
                if not path.is_file():
                    raise FileNotFoundError(f"missing checkpoint {path}")
                sidecar = json.loads(path.with_suffix(".cplw.json").read_text())
                out[(k, v, r)] = (RewardModel.load(path).get_weights(), sidecar.get("train", {}))
    return out


def run_training(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> dict[str, Any]:
    """Train every cell and write checkpoints only."""
    name, knobs = knob_values(cfg)
    trained = train_grid(cfg, knobs, jobs)
    for (k, v, r), (weights, history) in trained.items():
        _checkpoint(out, cfg, name, k, v, r, weights, history)
    return {"trained": trained}


def run_generate(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> dict[str, Any]:
    """Write every dataset of a model study as JSONL."""
    name, knobs = knob_values(cfg)
    written = []
    for r in cfg.section("train")["seeds"]:
        for k in knobs:
            data = uf_data(cfg, k, r) if cfg.study == "ultrafeedback" else confounded_data(cfg, k, r)
            for split, d in data.items():
                if cfg.study == "confounded" and split == "test":
                    if k != knobs[0]:
                        continue
                    rel = f"datasets/seed{r}_test.jsonl"
                else:
                    rel = f"datasets/{name}{k:g}_seed{r}_{split}.jsonl"
                save_dataset(d, out.path(rel))
                out.record(rel)
                written.append(rel)
    return {"datasets": written}


def run_ultrafeedback(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1, trained=None
                      ) -> dict[str, Any]:
    grid = cfg.section("grid")
    knobs = [float(k) for k in grid["rho_tr"]]
    trained = trained if trained is not None else train_grid(cfg, knobs, jobs)
    runs = {}
    for k in knobs:
        runs[k] = []
        for r in cfg.section("train")["seeds"]:
            data = uf_data(cfg, k, r)
            weights, history = trained[(k, "base", r)]
            runs[k].append(SeedRun(r, _rebuild(cfg, "base", r, weights), {"id": data["id"], "ood": data["ood"]}))
            if cfg.section("output")["datasets"]:
                for split, d in data.items():
                    rel = f"datasets/rho_tr{k:g}_seed{r}_{split}.jsonl"
                    save_dataset(d, out.path(rel))
                    out.record(rel)
            if cfg.section("output")["checkpoints"]:
                _checkpoint(out, cfg, "rho_tr", k, "base", r, weights, history)
    report = id_ood_report(runs, metadata={"study": "ultrafeedback", "rho_ood": grid["rho_ood"],
                                           "config_hash": cfg.hash()})
    for p in report.write(out.root / "reports"):
        out.record(str(p.relative_to(out.root)))
    rows = []
    for k in knobs:
        id_m, id_se, _ = report.cell("base", k, "id")
        ood_m, ood_se, _ = report.cell("base", k, "ood")
        rows.append((k, id_m, id_se, ood_m, ood_se, id_m - ood_m))
    out.csv("plots/id_ood.csv", ("rho_tr", "id", "id_stderr", "ood", "ood_stderr", "gap"), rows)
    out.text("reports/id_ood.txt", report.table() + "\n")
    if cfg.section("output")["figures"]:
        from .plotting import plot_id_ood

        plot_id_ood(rows, out.path("plots/id_ood.png"))
        out.record("plots/id_ood.png")
    return {"report": report}


def run_confounded(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1, trained=None
                   ) -> dict[str, Any]:
    knobs = [float(k) for k in cfg.section("grid")["rho"]]
    variants = cfg.section("model")["variants"]
    trained = trained if trained is not None else train_grid(cfg, knobs, jobs)
    seeds = cfg.section("train")["seeds"]
    tests = {r: confounded_data(cfg, knobs[0], r, need_train=False)["test"] for r in seeds}
    runs = {}
    for k in knobs:
        for v in variants:
            runs[(k, v)] = []
            for r in seeds:
                weights, history = trained[(k, v, r)]
                runs[(k, v)].append(SeedRun(r, _rebuild(cfg, v, r, weights), {"test": tests[r]}))
                if cfg.section("output")["checkpoints"]:
                    _checkpoint(out, cfg, "rho", k, v, r, weights, history)
    if cfg.section("output")["datasets"]:
        for r in seeds:
            for k in knobs:
                for split, d in confounded_data(cfg, k, r).items():
                    if split == "test" and k != knobs[0]:
                        continue
                    rel = (f"datasets/seed{r}_test.jsonl" if split == "test"
                           else f"datasets/rho{k:g}_seed{r}_{split}.jsonl")
                    save_dataset(d, out.path(rel))
                    out.record(rel)
    report = consistency_report(runs, metadata={"study": "confounded",
                                                "rho_test": cfg.section("grid")["rho_test"],
                                                "config_hash": cfg.hash()})
    for p in report.write(out.root / "reports"):
        out.record(str(p.relative_to(out.root)))
    rows = []
    for v, k, s, mean, se, n in report.aggregated():
        rows.append((v, k, s, mean, se, n))
    out.csv("plots/consistency.csv", ("variant", "rho", "slice", "accuracy", "stderr", "seeds"), rows)
    out.text("reports/consistency.txt", report.table() + "\n")
    if cfg.section("output")["figures"]:
        from .plotting import plot_consistency

        plot_consistency(report, out.path("plots/consistency.png"))
        out.record("plots/consistency.png")
    return {"report": report}


GAUSSIAN_COLUMNS = ("rho", "closed_form", "monte_carlo", "mc_stderr", "z_score", "alpha_hat_mean",
                    "alpha_hat_var")


def run_gaussian(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> dict[str, Any]:
    g = cfg.section("grid")
    rows = gaussian.arcsin_table(g["rhos"], g["n_mc"], seed=cfg.seed, alpha=g["alpha"], reps=g["reps"],
                                 fit_n=g["fit_n"])
    out.csv("tables/arcsin.csv", GAUSSIAN_COLUMNS, [[r[c] for c in GAUSSIAN_COLUMNS] for r in rows])
    shift = []
    for i, rho in enumerate(g["rhos"]):
        res = gaussian.accuracy_under_shift(g["alpha_hat"], g["alpha"], rho, g["n_shift"],
                                            seed=derive_seed(cfg.seed, "shift", i))
        e = res.errors_by_quadrant
        shift.append((rho, g["alpha_hat"], g["alpha"], res.accuracy, e[1], e[2], e[3], e[4]))
    out.csv("tables/shift.csv", ("rho_test", "alpha_hat", "alpha", "accuracy", "errors_q1", "errors_q2",
                                 "errors_q3", "errors_q4"), shift)
    if cfg.section("output")["figures"]:
        from .plotting import plot_arcsin, plot_delta_plane

        plot_arcsin(rows, out.path("plots/arcsin.png"))
        out.record("plots/arcsin.png")
        deltas = gaussian.simulate_delta(gaussian.DeltaModel(-0.8, g["alpha"]), 2000, cfg.seed).deltas
        plot_delta_plane(deltas, g["alpha"], g["alpha_hat"], out.path("plots/delta_plane.png"))
        out.record("plots/delta_plane.png")
    return {"rows": rows, "shift": shift}


def _prop1_one(args):
    world, n, tol, seed = args
    rep = oracle.verify_prop1(world, n, tol, seed=seed)
    worst = rep.worst
    return rep.passed, (worst.error if worst else 0.0)


def run_oracle(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> dict[str, Any]:
    g = cfg.section("grid")
    rows = []
    items = []
    for s in g["seeds"]:
        if g["world_file"]:
            world = oracle.load_world(g["world_file"])
        else:
            world = oracle.randomized_world(g["n_prompts"], g["n_responses"], g["n_objectives"],
                                            seed=derive_seed(cfg.seed, "world", s))
        items.append((world, g["n"], g["tolerance"], derive_seed(cfg.seed, "prop1", s)))
    for s, (passed, gap) in zip(g["seeds"], _map(_prop1_one, items, jobs)):
        rows.append((s, passed, gap))
    out.csv("tables/prop1.csv", ("seed", "passed", "worst_gap"), rows)
    summary: dict[str, Any] = {"prop1_pass_rate": sum(r[1] for r in rows) / len(rows)}

    truth = oracle.enumerate_potential_outcomes(oracle.micro_world(True))
    samples = oracle.simulate(oracle.micro_world(True), g["n"], derive_seed(cfg.seed, "micro"))
    naive = oracle.plugin_estimator(samples, ("raw", "marginal"), oracle.micro_world(True))
    adjusted = oracle.plugin_estimator(samples, ("raw", "given_c"), oracle.micro_world(True))
    cell = (0, 0, 1)
    summary["micro_world"] = {
        "true_marginal": float(truth.expected[cell]),
        "naive_estimate": float(naive.mean[cell]),
        "bias": float(naive.mean[cell] - truth.expected[cell]),
        "given_c0_estimate": float(adjusted.mean[(0,) + cell]),
        "given_c0_truth": float(truth.expected_given_c[(0,) + cell]),
    }
    latent = oracle.shared_latent_world()
    rep2 = oracle.verify_prop2(latent, g["n"], g["tolerance"], seed=derive_seed(cfg.seed, "prop2"))
    held = (0, 1, 2)
    pred = oracle.latent_prediction(latent, oracle.simulate(latent, g["n"], derive_seed(cfg.seed, "prop2")), held)
    summary["prop2"] = {"status": rep2.status, "passed": rep2.passed,
                        "held_out_triple": list(held),
                        "held_out_prediction": pred,
                        "held_out_truth": float(oracle.enumerate_potential_outcomes(latent).expected[held]),
                        "flagged": [list(map(int, f)) for f in rep2.flagged]}
    out.text("reports/oracle.json", dump_json(summary))
    if cfg.section("output")["figures"]:
        from .plotting import plot_prop1

        plot_prop1(rows, g["tolerance"], out.path("plots/prop1.png"))
        out.record("plots/prop1.png")
    return summary


def run_amce(cfg: ExperimentConfig, out: OutputWriter, jobs: int = 1) -> dict[str, Any]:
    g = cfg.section("grid")
    if g["reward"] == "linear":
        reward = amce_mod.linear_reward(g["weights"])
        n_comp = len(g["weights"])
    else:
        reward = amce_mod.discretized_nonadditive_reward(*g["beta"][:2], *g["gamma"][:2], bits=g["bits"])
        n_comp = 1 + g["bits"]
    samples = None
    if g["density"] == "empirical":
        rng = np.random.default_rng(derive_seed(cfg.seed, "amce-samples"))
        samples = amce_mod.empirical_samples(rng.integers(0, 2, (g["n_samples"], n_comp)),
                                             rng.integers(0, 2, (g["n_samples"], n_comp)))
    rows = amce_mod.amce_table(n_comp, reward, g["density"], samples)
    amce_mod.write_amce_csv(rows, out.path("tables/amce.csv"))
    out.record("tables/amce.csv")
    out.text("tables/amce_meta.json", dump_json({"note": amce_mod.AMCE_NOTE, "reward": g["reward"],
                                                 "density": g["density"], "n_components": n_comp}))
    if cfg.section("output")["figures"]:
        from .plotting import plot_amce

        plot_amce(rows, out.path("plots/amce.png"))
        out.record("plots/amce.png")
    return {"rows": rows}


RUNNERS = {
    "ultrafeedback": run_ultrafeedback,
    "confounded": run_confounded,
    "gaussian": run_gaussian,
    "oracle": run_oracle,
    "amce": run_amce,
}


MODEL_STUDIES = ("ultrafeedback", "confounded")


def run(cfg: ExperimentConfig, out_dir, jobs: int = 1, figures: bool | None = None,
        stage: str = "run", checkpoints_from=None) -> dict[str, Any]:
    """Run a study (or one stage of a model study) and write its manifest last.

    ``stage`` is ``run`` (everything), ``generate`` (datasets only),
    ``train`` (checkpoints only) or ``eval`` (reports from the checkpoints
    under ``checkpoints_from``).
    """
    if stage not in ("run", "generate", "train", "eval"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage != "run" and cfg.study not in MODEL_STUDIES:
        raise ValueError(f"stage {stage!r} applies to the model studies {MODEL_STUDIES}, not {cfg.study!r}")
    if figures is not None and "output" in cfg.data:
        cfg.data["output"]["figures"] = bool(figures)
    out = OutputWriter(out_dir)
    t0 = time.perf_counter()
    label = cfg.study if stage == "run" else f"{stage}:{cfg.study}"
    try:
        if stage == "generate":
            result = run_generate(cfg, out, jobs)
        elif stage == "train":
            result = run_training(cfg, out, jobs)
        elif stage == "eval":
            trained = load_trained(cfg, checkpoints_from if checkpoints_from is not None else out_dir)
            if checkpoints_from is not None:
                cfg.data["output"]["checkpoints"] = False
            result = RUNNERS[cfg.study](cfg, out, jobs, trained=trained)
        else:
            result = RUNNERS[cfg.study](cfg, out, jobs)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1 by the CLI
        raise StageError(label, exc) from exc
    log.info("%s study finished in %.1fs", cfg.study, time.perf_counter() - t0)
    manifest = build_manifest(cfg, out.files)
    (out.root / "manifest.json").write_text(dump_json(manifest))
    result["manifest"] = manifest
    result["out"] = out.root
    return result
