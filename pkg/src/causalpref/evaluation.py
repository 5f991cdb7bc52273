"""Accuracy over test slices and the two study report layouts.

Everything is kept as fractions; :meth:`ExperimentReport.table` converts to
percentages for display only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .worlds import PreferenceDataset

STDERR_NOTE = ("mean of per-seed accuracies; +/- is the sample standard deviation across "
               "seeds divided by sqrt(#seeds); per-seed stderr is sqrt(p(1-p)/n)")

# published reference accuracies for the two study grids, in percent
REFERENCE_ID_OOD = {
    "rho_tr": (0.0, 0.3, 0.6, 0.9),
    "id": (69.3, 68.3, 67.8, 67.6),
    "ood": (64.5, 62.0, 59.7, 57.8),
}
REFERENCE_INCONSISTENT = {
    0.5: {"base": 60.0, "multihead": 62.9, "adversarial": 63.7},
    0.6: {"base": 59.6, "multihead": 62.4, "adversarial": 63.0},
    0.7: {"base": 58.4, "multihead": 60.6, "adversarial": 62.3},
    0.8: {"base": 56.7, "multihead": 58.6, "adversarial": 61.3},
    0.9: {"base": 55.9, "multihead": 56.3, "adversarial": 58.9},
    1.0: {"base": 54.9, "multihead": 53.8, "adversarial": 53.5},
}


@dataclass(frozen=True)
class SliceSpec:
    """Named vectorised predicate over a dataset's columns."""

    name: str
    predicate: Callable[[PreferenceDataset], np.ndarray]

    def mask(self, data: PreferenceDataset) -> np.ndarray:
        m = np.asarray(self.predicate(data), dtype=bool)
        if m.shape != (len(data),):
            raise ValueError(f"slice {self.name!r} must return one flag per example")
        return m

    def select(self, data: PreferenceDataset) -> PreferenceDataset:
        return data.subset(np.flatnonzero(self.mask(data)))


ALL = SliceSpec("all", lambda d: np.ones(len(d), dtype=bool))
CONSISTENT = SliceSpec("consistent", lambda d: d.t == d.c)
INCONSISTENT = SliceSpec("inconsistent", lambda d: d.t != d.c)


@dataclass(frozen=True)
class Accuracy:
    mean: float
    stderr: float
    n: int


def score_differences(model, data: PreferenceDataset, chunk: int = 4096) -> np.ndarray:
    """``r(e, c) - r(e', c)`` for every comparison.

    ``model`` is anything with ``reward(e, c)``, or a callable taking the
    dataset and returning the differences (e.g. a ground-truth oracle).
    """
    if hasattr(model, "reward"):
        out = np.empty(len(data))
        for start in range(0, len(data), chunk):
            sl = slice(start, start + chunk)
            out[sl] = model.reward(data.e[sl], data.c[sl]) - model.reward(data.e_prime[sl], data.c[sl])
        return out
    return np.asarray(model(data), dtype=np.float64)


def oracle_scorer(world) -> Callable[[PreferenceDataset], np.ndarray]:
    """Ground-truth score differences from stored latents."""

    def diffs(data: PreferenceDataset) -> np.ndarray:
        if not data.has_latents:
            raise ValueError("oracle scoring needs ground-truth latents")
        return world.reward(data.z, data.c) - world.reward(data.z_prime, data.c)

    return diffs


def accuracy(model, data: PreferenceDataset, slc: SliceSpec = ALL) -> Accuracy:
    """Fraction of comparisons where ``[r(e,c) < r(e',c)]`` equals the label."""
    part = slc.select(data)
    n = len(part)
    if n == 0:
        raise ValueError(f"slice {slc.name!r} is empty")
    pred = (score_differences(model, part) < 0).astype(np.int64)
    p = float(np.mean(pred == part.ell))
    return Accuracy(p, math.sqrt(p * (1.0 - p) / n), n)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample-std / sqrt(k) over per-seed values (stderr 0 for one seed)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class CellRecord:
    variant: str
    knob: float
    slice: str
    seed: int
    accuracy: float
    stderr: float
    n: int


PER_SEED_COLUMNS = ("variant", "knob", "slice", "seed", "accuracy", "stderr", "n")
AGGREGATE_COLUMNS = ("variant", "knob", "slice", "mean", "stderr", "seeds")


@dataclass
class ExperimentReport:
    """Per-seed accuracy records plus the grid of cells they must cover."""

    name: str
    knob: str
    variants: list[str]
    knob_values: list[float]
    slices: list[str]
    records: list[CellRecord] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.metadata.setdefault("stderr_convention", STDERR_NOTE)
        self.metadata.setdefault("units", "fractions")

    def declared_cells(self) -> list[tuple[str, float, str]]:
        return [(v, k, s) for v in self.variants for k in self.knob_values for s in self.slices]

    def validate(self) -> None:
        have = {(r.variant, r.knob, r.slice) for r in self.records}
        missing = [c for c in self.declared_cells() if c not in have]
        if missing:
            raise ValueError(f"report {self.name!r} missing cells: {missing}")
        for r in self.records:
            if not 0.0 <= r.accuracy <= 1.0 or r.stderr < 0:
                raise ValueError(f"invalid record {r}")

    def cell(self, variant: str, knob: float, slc: str) -> tuple[float, float, int]:
        values = [r.accuracy for r in self.records
                  if r.variant == variant and r.knob == knob and r.slice == slc]
        if not values:
            raise KeyError((variant, knob, slc))
        mean, se = aggregate(values)
        return mean, se, len(values)

    def series(self, variant: str, slc: str) -> list[float]:
        return [self.cell(variant, k, slc)[0] for k in self.knob_values]

    def aggregated(self) -> list[tuple[str, float, str, float, float, int]]:
        return [(v, k, s, *self.cell(v, k, s)) for v, k, s in self.declared_cells()]

    # -- serialisation --------------------------------------------------

    def per_seed_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PER_SEED_COLUMNS)
        for r in self.records:
            w.writerow([r.variant, repr(r.knob), r.slice, r.seed, repr(r.accuracy), repr(r.stderr), r.n])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for v, k, s, mean, se, n in self.aggregated():
            w.writerow([v, repr(k), s, repr(mean), repr(se), n])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "knob": self.knob,
            "variants": self.variants,
            "knob_values": self.knob_values,
            "slices": self.slices,
            "records": [[r.variant, r.knob, r.slice, r.seed, r.accuracy, r.stderr, r.n]
                        for r in self.records],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentReport":
        records = [CellRecord(v, float(k), s, int(seed), float(a), float(se), int(n))
                   for v, k, s, seed, a, se, n in d["records"]]
        return cls(d["name"], d["knob"], list(d["variants"]), [float(k) for k in d["knob_values"]],
                   list(d["slices"]), records, dict(d.get("metadata", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_per_seed_csv(cls, text: str, name: str, knob: str,
                          metadata: Mapping[str, Any] | None = None) -> "ExperimentReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        records = [CellRecord(r["variant"], float(r["knob"]), r["slice"], int(r["seed"]),
                              float(r["accuracy"]), float(r["stderr"]), int(r["n"])) for r in rows]
        uniq = lambda xs: list(dict.fromkeys(xs))  # noqa: E731
        return cls(name, knob, uniq(r.variant for r in records), uniq(r.knob for r in records),
                   uniq(r.slice for r in records), records, dict(metadata or {}))

    def write(self, out_dir, stem: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        paths = [out / f"{stem}.json", out / f"{stem}_per_seed.csv", out / f"{stem}.csv"]
        paths[0].write_text(self.to_json())
        paths[1].write_text(self.per_seed_csv())
        paths[2].write_text(self.aggregate_csv())
        return paths

    def table(self) -> str:
        """Plain-text table in percent, one row per (variant, slice)."""
        head = f"{'variant':<12} {'slice':<13}" + "".join(f"{self.knob}={k:<8g}" for k in self.knob_values)
        lines = [head]
        for v in self.variants:
            for s in self.slices:
                cells = []
                for k in self.knob_values:
                    mean, se, _ = self.cell(v, k, s)
                    cells.append(f"{100 * mean:5.1f}±{100 * se:<4.1f}".ljust(len(self.knob) + 9))
                lines.append(f"{v:<12} {s:<13}" + "".join(cells))
        return "\n".join(lines)


@dataclass
class SeedRun:
    """A trained model for one seed plus the test sets it is scored on."""

    seed: int
    model: Any
    tests: dict[str, PreferenceDataset]


def _records(variant: str, knob: float, run: SeedRun, slices: Iterable[tuple[str, str, SliceSpec]]
             ) -> list[CellRecord]:
    out = []
    for slice_name, test_key, spec in slices:
        if test_key not in run.tests:
            raise ValueError(f"seed {run.seed} at {knob} lacks test set {test_key!r}")
        acc = accuracy(run.model, run.tests[test_key], spec)
        out.append(CellRecord(variant, float(knob), slice_name, run.seed, acc.mean, acc.stderr, acc.n))
    return out


def id_ood_report(runs: Mapping[float, Sequence[SeedRun]], variant: str = "base",
                  metadata: Mapping[str, Any] | None = None) -> ExperimentReport:
    """ID / OOD accuracy per training correlation.

    Every run needs test sets under the keys ``"id"`` and ``"ood"``.
    """
    if not runs:
        raise ValueError("no training correlations")
    report = ExperimentReport("id_ood", "rho_tr", [variant], [float(k) for k in runs], ["id", "ood"],
                              metadata=dict(metadata or {}))
    for knob, seed_runs in runs.items():
        if not seed_runs:
            raise ValueError(f"no trained models for rho_tr={knob}")
        for run in seed_runs:
            report.records += _records(variant, knob, run, [("id", "id", ALL), ("ood", "ood", ALL)])
    report.validate()
    return report


def consistency_report(runs: Mapping[tuple[float, str], Sequence[SeedRun]],
                       metadata: Mapping[str, Any] | None = None) -> ExperimentReport:
    """Consistent / inconsistent accuracy per (rho_conf, variant); tests under ``"test"``."""
    if not runs:
        raise ValueError("no grid cells")
    knobs = list(dict.fromkeys(float(k) for k, _ in runs))
    variants = list(dict.fromkeys(v for _, v in runs))
    report = ExperimentReport("consistency", "rho", variants, knobs, ["consistent", "inconsistent"],
                              metadata=dict(metadata or {}))
    for knob in knobs:
        for v in variants:
            seed_runs = runs.get((knob, v))
            if not seed_runs:
                raise ValueError(f"missing cell rho={knob}, variant={v}")
            for run in seed_runs:
                report.records += _records(v, knob, run, [("consistent", "test", CONSISTENT),
                                                          ("inconsistent", "test", INCONSISTENT)])
    report.validate()
    return report
