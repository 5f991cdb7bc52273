import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpref.config import (
    PRESETS,
    STUDY_DIR,
    ConfigError,
    build_manifest,
    config_from_manifest,
    dump_json,
    from_mapping,
    load_config,
    resolve,
    runtime_class,
)


def messages(findings, level):
    return [f"{f.path}: {f.message}" for f in findings if f.level == level]


class TestValidation:
    def test_confounding_rate_out_of_range(self):
        with pytest.raises(ConfigError, match="outside"):
            from_mapping({"study": "confounded", "grid": {"rho": [0.5, 1.2]}})

    def test_lambda_on_multihead_warns(self):
        cfg = from_mapping({"study": "confounded", "model": {"multihead": {"lam": 2.0}}})
        assert any("multihead" in m and "no effect" in m for m in messages(cfg.findings, "warning"))

    def test_top_level_lambda_warns(self):
        cfg = from_mapping({"study": "confounded", "model": {"lam": 2.0}})
        assert messages(cfg.findings, "warning")
        assert cfg.data["model"]["adversarial"]["lam"] == 1.0

    def test_unknown_fields_warn(self):
        cfg = from_mapping({"study": "gaussian", "grid": {"colour": "red"}, "extras": {}})
        warned = messages(cfg.findings, "warning")
        assert any(m.startswith("grid.colour") for m in warned)
        assert any(m.startswith("extras") for m in warned)

    def test_unknown_study(self):
        with pytest.raises(ConfigError):
            from_mapping({"study": "weather"})

    @pytest.mark.parametrize("raw", [
        {"study": "confounded", "train": {"seeds": [1, 1]}},
        {"study": "confounded", "model": {"variants": ["base", "base"]}},
        {"study": "confounded", "model": {"variants": ["tiny"]}},
        {"study": "oracle", "grid": {"n_responses": 1}},
        {"study": "amce", "grid": {"reward": "linear", "weights": []}},
        {"study": "gaussian", "grid": {"rhos": [1.0]}},
        {"study": "gaussian", "grid": {"n_mc": 1.5}},
        {"study": "gaussian", "grid": {"alpha": float("nan")}},
        {"study": "gaussian", "seed": -1},
        {"study": "gaussian", "output": {"figures": "yes"}},
        {"study": "gaussian", "grid": "flat"},
    ])
    def test_errors(self, raw):
        with pytest.raises(ConfigError):
            from_mapping(raw)

    def test_error_lists_every_finding(self):
        _, findings, _ = resolve({"study": "confounded", "grid": {"rho": [0.2]}, "splits": {"train": 0}})
        assert len(messages(findings, "error")) == 2


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_builtin_presets_validate(self, name):
        cfg = load_config(preset=name)
        assert cfg.presets[0] == name

    @pytest.mark.parametrize("path", sorted(STUDY_DIR.glob("*.toml")), ids=lambda p: p.stem)
    def test_shipped_studies_validate(self, path):
        cfg = load_config(path)
        assert not cfg.warnings

    @pytest.mark.parametrize("name", ["ultrafeedback-paper", "confounded-paper"])
    def test_paper_scale_is_long_running(self, name):
        assert runtime_class(load_config(preset=name).estimated_seconds()) == "long-running"

    @pytest.mark.parametrize("name", ["ultrafeedback-desk", "confounded-desk", "gaussian", "oracle", "amce"])
    def test_desk_scale_is_not_long_running(self, name):
        assert runtime_class(load_config(preset=name).estimated_seconds()) != "long-running"

    def test_inheritance_and_override(self):
        cfg = load_config(preset="confounded-paper", overrides={"train": {"epochs": 2}})
        assert cfg.presets == ["confounded-paper", "confounded-desk"]
        assert cfg.data["model"]["hidden"] == 512
        assert cfg.data["world"]["type_gain"] == 8.0
        assert cfg.data["train"]["epochs"] == 2

    def test_cycle_detected(self, tmp_path):
        (tmp_path / "a.toml").write_text('preset = "b"\nstudy = "gaussian"\n')
        (tmp_path / "b.toml").write_text('preset = "a"\n')
        with pytest.raises(ConfigError, match="cyclic"):
            load_config(tmp_path / "a.toml")

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            load_config(preset="nope")

    def test_nothing_given(self):
        with pytest.raises(ConfigError):
            load_config()


class TestManifest:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_round_trip(self, name):
        cfg = load_config(preset=name)
        manifest = build_manifest(cfg, {"b.csv": "00", "a.csv": "11"})
        back = config_from_manifest(json.loads(dump_json(manifest)))
        assert dump_json(build_manifest(back, {"a.csv": "11", "b.csv": "00"})) == dump_json(manifest)

    def test_no_timestamps(self):
        text = dump_json(build_manifest(load_config(preset="gaussian")))
        assert "time" not in text and "date" not in text

    def test_hash_tracks_content(self):
        a = load_config(preset="gaussian")
        assert a.hash() == load_config(preset="gaussian").hash()
        assert a.hash() != a.with_seed(1).hash()
        assert a.with_seed(1).seed == 1

    @given(st.integers(0, 2**31 - 1), st.integers(1, 5))
    def test_seed_and_epochs_survive_round_trip(self, seed, epochs):
        cfg = from_mapping({"study": "confounded", "seed": seed, "train": {"epochs": epochs}})
        back = config_from_manifest(json.loads(dump_json(build_manifest(cfg))))
        assert back.data == cfg.data
