"""Study configuration: TOML files, preset inheritance, validation, manifests.

A config file names a ``study`` and may name a ``preset``; keys in the file
override the preset's (section by section), and presets may themselves
inherit.  Every study has a declarative schema below.  Resolution fills in
defaults so the resolved dict alone describes the run; the manifest stores
it verbatim.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

STUDIES = ("ultrafeedback", "confounded", "gaussian", "oracle", "amce")
VARIANTS = ("base", "multihead", "adversarial")
STUDY_DIR = Path(__file__).resolve().parents[2] / "studies"


class ConfigError(ValueError):
    """Raised with the full list of field-level findings."""

    def __init__(self, findings: list["Finding"]):
        self.findings = findings
        super().__init__("; ".join(str(f) for f in findings if f.level == "error"))


@dataclass(frozen=True)
class Finding:
    level: str  # "error" or "warning"
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.path}: {self.message}"


@dataclass(frozen=True)
class Field:
    default: Any
    kind: str  # int, float, bool, str, floats, ints, strs
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None
    min_len: int = 0


def _f(default, lo=None, hi=None):
    return Field(default, "float", lo, hi)


def _i(default, lo=None, hi=None):
    return Field(default, "int", lo, hi)


_TRAIN = {
    "epochs": _i(10, 1),
    "batch_size": _i(64, 1),
    "lr": _f(1e-4, 0.0),
    "seeds": Field([0, 1, 2], "ints", min_len=1),
}
_MODEL = {
    "hidden": _i(64, 1),
    "latent": _i(16, 1),
}
_EMBED = {
    "dim": _i(64, 1),
    "n_nuisance": _i(8, 0),
    "type_gain": _f(2.0, 0.0),
    "noise": _f(0.1, 0.0),
    "btl_noise": Field(False, "bool"),
    "seed": _i(0, 0),
}
_OUTPUT = {
    "datasets": Field(False, "bool"),
    "checkpoints": Field(True, "bool"),
    "figures": Field(True, "bool"),
}

SCHEMA: dict[str, dict[str, dict[str, Field]]] = {
    "ultrafeedback": {
        "world": {**_EMBED, "alpha": _f(0.25, 0.0, 1.0)},
        "grid": {
            "rho_tr": Field([0.0, 0.3, 0.6, 0.9], "floats", -0.95, 0.95, min_len=1),
            "rho_ood": _f(-0.8, -0.95, 0.95),
        },
        "splits": {"train": _i(10_000, 1), "validation": _i(2_000, 1), "test": _i(10_000, 1)},
        "model": {**_MODEL, "variants": Field(["base"], "strs", choices=VARIANTS, min_len=1)},
        "train": _TRAIN,
        "output": _OUTPUT,
    },
    "confounded": {
        "world": {**_EMBED, "latent_corr": _f(-0.5, -0.99, 0.99), "sigma_aligned": _f(1.0, 0.0),
                  "sigma_off": _f(0.2, 0.0)},
        "grid": {
            "rho": Field([0.5, 0.6, 0.7, 0.8, 0.9, 1.0], "floats", 0.5, 1.0, min_len=1),
            "rho_test": _f(0.5, 0.5, 1.0),
        },
        "splits": {"train": _i(10_000, 1), "validation": _i(2_000, 1), "test": _i(10_000, 1)},
        "model": {**_MODEL, "variants": Field(list(VARIANTS), "strs", choices=VARIANTS, min_len=1)},
        "train": {**_TRAIN, "seeds": Field([0, 1, 2, 3, 4], "ints", min_len=1)},
        "output": _OUTPUT,
    },
    "gaussian": {
        "grid": {
            "rhos": Field([round(-0.95 + 0.1 * i, 2) for i in range(20)], "floats", -0.9999, 0.9999,
                          min_len=1),
            "alpha": _f(0.25, 0.0, 1.0),
            "n_mc": _i(1_000_000, 1),
            "reps": _i(20, 2),
            "fit_n": _i(2_000, 2),
            "alpha_hat": _f(0.4, 0.0, 1.0),
            "n_shift": _i(100_000, 1),
        },
        "output": {"figures": Field(True, "bool")},
    },
    "oracle": {
        "grid": {
            "n": _i(100_000, 1),
            "tolerance": _f(0.02, 0.0),
            "seeds": Field(list(range(20)), "ints", min_len=1),
            "n_prompts": _i(3, 1),
            "n_responses": _i(3, 2),
            "n_objectives": _i(2, 1),
            "world_file": Field("", "str"),
        },
        "output": {"figures": Field(True, "bool")},
    },
    "amce": {
        "grid": {
            "reward": Field("nonadditive", "str", choices=("linear", "nonadditive")),
            "weights": Field([0.75, 0.0, -0.5], "floats"),
            "beta": Field([-1.0, -1.0], "floats", min_len=2),
            "gamma": Field([0.8, 0.3], "floats", min_len=2),
            "bits": _i(3, 1, 15),
            "density": Field("uniform", "str", choices=("uniform", "empirical")),
            "n_samples": _i(5_000, 1),
        },
        "output": {"figures": Field(True, "bool")},
    },
}

# per-variant model subtables; only the adversarial variant reads lam
_VARIANT_FIELDS = {"adversarial": {"lam": _f(1.0, 0.0)}}

# ---------------------------------------------------------------------------
# built-in presets

PRESETS: dict[str, dict[str, Any]] = {
    "ultrafeedback-desk": {
        "study": "ultrafeedback",
        "seed": 0,
        "world": {"noise": 0.2, "seed": 7},
        "train": {"seeds": [0, 1, 2]},
    },
    "ultrafeedback-paper": {
        "preset": "ultrafeedback-desk",
        "model": {"hidden": 512, "latent": 64},
        "splits": {"train": 15_000, "validation": 2_000, "test": 15_000},
    },
    "confounded-desk": {
        "study": "confounded",
        "seed": 0,
        "world": {"latent_corr": 0.0, "type_gain": 8.0, "seed": 11},
        "train": {"seeds": [0, 1, 2]},
        "model": {"adversarial": {"lam": 0.3}},
    },
    "confounded-paper": {
        "preset": "confounded-desk",
        "model": {"hidden": 512, "latent": 512},
        "splits": {"train": 30_000, "validation": 6_000, "test": 46_518},
        "train": {"seeds": [0, 1, 2, 3, 4]},
    },
    "gaussian": {"study": "gaussian", "seed": 0},
    "oracle": {"study": "oracle", "seed": 0},
    "amce": {"study": "amce", "seed": 0},
}

# measured desk throughput (training examples x epochs per second at hidden 64, one core)
_THROUGHPUT = 11_000.0
LONG_RUNNING_SECONDS = 1_800.0


def _merge(base: Mapping[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_toml(path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _preset_source(name: str, base_dir: Path | None) -> dict[str, Any]:
    if name in PRESETS:
        return copy.deepcopy(PRESETS[name])
    for root in (base_dir, STUDY_DIR):
        if root is None:
            continue
        for candidate in (root / name, root / f"{name}.toml"):
            if candidate.is_file():
                return load_toml(candidate)
    raise ConfigError([Finding("error", "preset", f"unknown preset {name!r}")])


def expand_presets(raw: Mapping[str, Any], base_dir: Path | None = None,
                   _seen: tuple[str, ...] = ()) -> tuple[dict[str, Any], list[str]]:
    """Apply ``preset`` inheritance; returns the merged dict and the chain used."""
    raw = dict(raw)
    name = raw.pop("preset", None)
    if name is None:
        return raw, []
    if name in _seen:
        raise ConfigError([Finding("error", "preset", f"cyclic preset chain {' -> '.join(_seen + (name,))}")])
    parent, chain = expand_presets(_preset_source(name, base_dir), base_dir, _seen + (name,))
    return _merge(parent, raw), [name] + chain


def _check_value(path: str, spec: Field, value: Any, findings: list[Finding]) -> Any:
    def err(msg):
        findings.append(Finding("error", path, msg))

    def bounded(x):
        if spec.lo is not None and x < spec.lo or spec.hi is not None and x > spec.hi:
            err(f"value {x!r} outside [{spec.lo}, {spec.hi}]")

    kind = spec.kind
    if kind == "bool":
        if not isinstance(value, bool):
            err(f"expected true/false, got {value!r}")
        return value
    if kind in ("int", "float"):
        ok = isinstance(value, int) if kind == "int" else isinstance(value, (int, float))
        if not ok or isinstance(value, bool):
            err(f"expected {kind}, got {value!r}")
            return value
        if kind == "float" and not math.isfinite(value):
            err("must be finite")
            return value
        bounded(value)
        return float(value) if kind == "float" else int(value)
    if kind == "str":
        if not isinstance(value, str):
            err(f"expected string, got {value!r}")
        elif spec.choices and value not in spec.choices:
            err(f"{value!r} not one of {list(spec.choices)}")
        return value
    # lists
    if not isinstance(value, list):
        err(f"expected a list, got {value!r}")
        return value
    if len(value) < spec.min_len:
        err(f"needs at least {spec.min_len} entries")
    item = {"floats": "float", "ints": "int", "strs": "str"}[kind]
    sub = Field(None, item, spec.lo, spec.hi, spec.choices)
    return [_check_value(f"{path}[{i}]", sub, v, findings) for i, v in enumerate(value)]


def resolve(raw: Mapping[str, Any], base_dir: Path | None = None
            ) -> tuple[dict[str, Any], list[Finding], list[str]]:
    """Expand presets, fill defaults and check every field.

    Returns ``(resolved, findings, preset_chain)``; callers decide whether
    errors are fatal.
    """
    findings: list[Finding] = []
    merged, chain = expand_presets(raw, base_dir)
    study = merged.get("study")
    if study not in STUDIES:
        findings.append(Finding("error", "study", f"{study!r} not one of {list(STUDIES)}"))
        return merged, findings, chain
    out: dict[str, Any] = {"study": study}
    seed = merged.get("seed", 0)
    out["seed"] = _check_value("seed", _i(0, 0), seed, findings)
    if "out" in merged:
        out["out"] = str(merged["out"])
    known = {"study", "seed", "out"} | set(SCHEMA[study])
    for key in merged:
        if key not in known:
            findings.append(Finding("warning", key, "unknown section ignored"))
    for section, fields in SCHEMA[study].items():
        given = merged.get(section, {})
        if not isinstance(given, Mapping):
            findings.append(Finding("error", section, "expected a table"))
            continue
        res = {}
        for key, spec in fields.items():
            value = given.get(key, copy.deepcopy(spec.default))
            res[key] = _check_value(f"{section}.{key}", spec, value, findings)
        for key, value in given.items():
            if key in fields:
                continue
            if section == "model" and key in VARIANTS and isinstance(value, Mapping):
                res[key] = _resolve_variant(key, value, res, findings)
            elif section == "model" and key == "lam":
                findings.append(Finding("warning", "model.lam",
                                        "set lam under [model.adversarial]; top-level value ignored"))
            else:
                findings.append(Finding("warning", f"{section}.{key}", "unknown field ignored"))
        out[section] = res
    if "model" in out:
        for v in VARIANTS:
            if v in out["model"]["variants"] and v in _VARIANT_FIELDS and v not in out["model"]:
                out["model"][v] = {k: f.default for k, f in _VARIANT_FIELDS[v].items()}
        if len(set(out["model"]["variants"])) != len(out["model"]["variants"]):
            findings.append(Finding("error", "model.variants", "variants must be distinct"))
    _cross_checks(out, findings)
    return out, findings, chain


def _resolve_variant(name: str, given: Mapping[str, Any], model: dict[str, Any],
                     findings: list[Finding]) -> dict[str, Any]:
    fields = _VARIANT_FIELDS.get(name, {})
    res = {}
    for key, value in given.items():
        path = f"model.{name}.{key}"
        if key in fields:
            res[key] = _check_value(path, fields[key], value, findings)
        elif key == "lam":
            findings.append(Finding("warning", path, f"lam has no effect on the {name} variant (ignored)"))
        else:
            findings.append(Finding("warning", path, "unknown field ignored"))
    for key, spec in fields.items():
        res.setdefault(key, spec.default)
    return res


def _cross_checks(cfg: dict[str, Any], findings: list[Finding]) -> None:
    study = cfg["study"]
    if study in ("ultrafeedback", "confounded"):
        if len(set(cfg["train"]["seeds"])) != len(cfg["train"]["seeds"]):
            findings.append(Finding("error", "train.seeds", "seeds must be distinct"))
        if study == "ultrafeedback" and cfg["model"]["variants"] != ["base"]:
            findings.append(Finding("warning", "model.variants",
                                    "the latent-positivity study is defined for the base model"))
    if study == "oracle" and cfg["grid"]["n_responses"] < 2:
        findings.append(Finding("error", "grid.n_responses", "need two distinct responses"))
    if study == "amce" and cfg["grid"]["reward"] == "linear" and not cfg["grid"]["weights"]:
        findings.append(Finding("error", "grid.weights", "linear reward needs weights"))


def estimated_seconds(cfg: Mapping[str, Any]) -> float:
    """Rough single-core runtime from measured desk throughput."""
    study = cfg["study"]
    if study in ("ultrafeedback", "confounded"):
        knob = "rho_tr" if study == "ultrafeedback" else "rho"
        runs = len(cfg["grid"][knob]) * len(cfg["model"]["variants"]) * len(cfg["train"]["seeds"])
        width = (cfg["model"]["hidden"] / 64.0) ** 2
        work = cfg["splits"]["train"] * cfg["train"]["epochs"] * width
        return runs * work / _THROUGHPUT
    if study == "gaussian":
        g = cfg["grid"]
        return len(g["rhos"]) * (g["n_mc"] / 5e6 + g["reps"] * g["fit_n"] / 2e5)
    if study == "oracle":
        return len(cfg["grid"]["seeds"]) * cfg["grid"]["n"] / 5e5
    return 1.0


def runtime_class(seconds: float) -> str:
    if seconds >= LONG_RUNNING_SECONDS:
        return "long-running"
    if seconds >= 60:
        return "minutes"
    return "quick"


@dataclass
class ExperimentConfig:
    """A validated, fully resolved study configuration."""

    data: dict[str, Any]
    findings: list[Finding] = field(default_factory=list)
    presets: list[str] = field(default_factory=list)
    source: str | None = None

    @property
    def study(self) -> str:
        return self.data["study"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.level == "warning"]

    def section(self, name: str) -> dict[str, Any]:
        return self.data[name]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        data["seed"] = int(seed)
        return ExperimentConfig(data, list(self.findings), list(self.presets), self.source)

    def canonical_json(self) -> str:
        body = {k: v for k, v in self.data.items() if k != "out"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def estimated_seconds(self) -> float:
        return estimated_seconds(self.data)


def from_mapping(raw: Mapping[str, Any], base_dir: Path | None = None, source: str | None = None
                 ) -> ExperimentConfig:
    data, findings, chain = resolve(raw, base_dir)
    errors = [f for f in findings if f.level == "error"]
    if errors:
        raise ConfigError(findings)
    return ExperimentConfig(data, findings, chain, source)


def load_config(path=None, preset: str | None = None, overrides: Mapping[str, Any] | None = None
                ) -> ExperimentConfig:
    """Load a TOML config (or a bare preset) and validate it.

    ``preset`` supplies a base when the file has none; ``overrides`` are
    merged last.
    """
    raw: dict[str, Any] = {}
    base_dir = None
    if path is not None:
        raw = load_toml(path)
        base_dir = Path(path).resolve().parent
    if preset is not None and "preset" not in raw:
        raw["preset"] = preset
    if not raw:
        raise ConfigError([Finding("error", "config", "no config file or preset given")])
    if overrides:
        raw = _merge(raw, overrides)
    return from_mapping(raw, base_dir, str(path) if path is not None else f"preset:{preset}")


# ---------------------------------------------------------------------------
# manifests


def versions() -> dict[str, str]:
    import numpy
    import scipy

    from . import __version__

    out = {"causalpref": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
           "python": platform.python_version()}
    try:
        import matplotlib

        out["matplotlib"] = matplotlib.__version__
    except ImportError:  # pragma: no cover
        pass
    return out


def build_manifest(cfg: ExperimentConfig, files: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Config hash, seeds, versions and the full resolved config.

    No wall-clock timestamps: reruns must be byte-identical.
    """
    seeds = cfg.data.get("train", {}).get("seeds") or cfg.data.get("grid", {}).get("seeds") or []
    return {
        "config": cfg.data,
        "config_hash": cfg.hash(),
        "presets": cfg.presets,
        "root_seed": cfg.seed,
        "seeds": list(seeds),
        "study": cfg.study,
        "versions": versions(),
        "files": dict(sorted((files or {}).items())),
    }


def config_from_manifest(manifest: Mapping[str, Any]) -> ExperimentConfig:
    cfg = from_mapping(manifest["config"], source="manifest")
    # the resolved config is self-contained; keep the preset chain as provenance
    cfg.presets = list(manifest.get("presets", []))
    return cfg


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
