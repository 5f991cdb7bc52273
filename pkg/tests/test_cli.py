import hashlib
import subprocess
import sys

import pytest

from causalpref.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY_CONFOUNDED = """
study = "confounded"
preset = "confounded-desk"
[grid]
rho = [0.8]
[splits]
train = 200
validation = 60
test = 100
[model]
hidden = 8
latent = 4
[train]
epochs = 1
seeds = [0]
"""

TINY_GAUSSIAN = """
study = "gaussian"
[grid]
rhos = [0.0, 0.5]
n_mc = 2000
reps = 2
fit_n = 200
n_shift = 2000
"""

TINY_ORACLE = """
study = "oracle"
[grid]
n = 2000
seeds = [0]
"""


def write(tmp_path, name, text):
    path = tmp_path / f"{name}.toml"
    path.write_text(text)
    return str(path)


def digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestValidate:
    def test_ok(self, capsys):
        assert main(["validate", "--preset", "confounded-desk"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "study: confounded" in out and "config hash" in out and "0 error(s)" in out

    def test_range_error(self, tmp_path, capsys):
        path = write(tmp_path, "bad", 'study = "confounded"\n[grid]\nrho = [1.2]\n')
        assert main(["validate", path]) == EXIT_CONFIG
        assert "grid.rho[0]" in capsys.readouterr().out

    def test_ignored_lambda_is_a_warning(self, tmp_path, capsys):
        path = write(tmp_path, "warn", 'study = "confounded"\n[model.multihead]\nlam = 1.0\n')
        assert main(["validate", path]) == EXIT_OK
        assert "warning" in capsys.readouterr().out

    def test_paper_scale_flagged(self, capsys):
        assert main(["validate", "--preset", "confounded-paper"]) == EXIT_OK
        assert "long-running" in capsys.readouterr().out

    def test_unparseable_file(self, tmp_path):
        path = write(tmp_path, "broken", "study = [")
        assert main(["validate", path]) == EXIT_CONFIG


class TestRun:
    def test_config_error_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, "bad", 'study = "gaussian"\n[grid]\nrhos = [1.5]\n')
        assert main(["run", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "grid.rhos[0]" in capsys.readouterr().err

    def test_study_shorthand_mismatch(self, tmp_path):
        path = write(tmp_path, "g", TINY_GAUSSIAN)
        assert main(["oracle", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_stage_needs_model_study(self, tmp_path):
        path = write(tmp_path, "g", TINY_GAUSSIAN)
        assert main(["train", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_default_out_dir_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CPL_OUT_DIR", str(tmp_path / "runs"))
        path = write(tmp_path, "tiny", TINY_ORACLE)
        assert main(["oracle", path, "--no-figures"]) == EXIT_OK
        assert (tmp_path / "runs" / "tiny" / "manifest.json").exists()

    def test_idempotent_rerun(self, tmp_path):
        path = write(tmp_path, "g", TINY_GAUSSIAN)
        out = tmp_path / "o"
        assert main(["gaussian", path, "--out", str(out)]) == EXIT_OK
        first = digest_tree(out)
        assert any(name.endswith(".png") for name in first)
        assert main(["gaussian", path, "--out", str(out)]) == EXIT_OK
        assert digest_tree(out) == first

    def test_seed_override_changes_outputs(self, tmp_path):
        path = write(tmp_path, "g", TINY_GAUSSIAN)
        main(["gaussian", path, "--out", str(tmp_path / "a"), "--no-figures"])
        main(["gaussian", path, "--out", str(tmp_path / "b"), "--no-figures", "--seed", "5"])
        assert digest_tree(tmp_path / "a") != digest_tree(tmp_path / "b")
        assert not any(n.endswith(".png") for n in digest_tree(tmp_path / "a"))

    def test_amce_preset(self, tmp_path):
        assert main(["amce", "--out", str(tmp_path / "a"), "--no-figures"]) == EXIT_OK
        assert (tmp_path / "a" / "tables" / "amce.csv").exists()


class TestStages:
    def test_train_then_eval_matches_run(self, tmp_path):
        path = write(tmp_path, "tiny", TINY_CONFOUNDED)
        assert main(["run", path, "--out", str(tmp_path / "full"), "--no-figures"]) == EXIT_OK
        assert main(["train", path, "--out", str(tmp_path / "tr"), "--no-figures"]) == EXIT_OK
        assert main(["eval", path, "--checkpoints", str(tmp_path / "tr"), "--out", str(tmp_path / "ev"),
                     "--no-figures"]) == EXIT_OK
        full = (tmp_path / "full" / "reports" / "consistency_per_seed.csv").read_text()
        assert (tmp_path / "ev" / "reports" / "consistency_per_seed.csv").read_text() == full

    def test_missing_checkpoints_name_the_stage(self, tmp_path, capsys):
        path = write(tmp_path, "tiny", TINY_CONFOUNDED)
        code = main(["eval", path, "--checkpoints", str(tmp_path / "nothing"), "--out", str(tmp_path / "ev"),
                     "--no-figures"])
        assert code == EXIT_RUNTIME
        assert "eval" in capsys.readouterr().err

    def test_generate_writes_jsonl(self, tmp_path):
        path = write(tmp_path, "tiny", TINY_CONFOUNDED)
        assert main(["generate", path, "--out", str(tmp_path / "gen")]) == EXIT_OK
        files = list((tmp_path / "gen" / "datasets").glob("*.jsonl"))
        assert files and all(f.stat().st_size > 0 for f in files)


class TestEntryPoint:
    def test_module_help(self):
        res = subprocess.run([sys.executable, "-m", "causalpref.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "validate" in res.stdout

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
