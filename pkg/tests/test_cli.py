import json
import logging
from pathlib import Path

import pytest
from click.testing import CliRunner

from cli import main
from config import GRAM_MAGIC

CONFIGS = Path(__file__).parent.parent / "configs"

NAIVE_FAMILY = {"n": 1, "N": 2, "assignments": {
    "0:0": ["1:0", "1:1"], "1:0": ["2:0", "2:1"], "1:1": ["2:2", "2:3"],
}}


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, [str(arg) for arg in args])


def read(out, kind):
    return json.loads((out / f"{kind}.json").read_text())


class TestConstantsCommands:
    """Commands that need no operator"""

    def test_dim_formula(self, runner, tmp_path):
        """dim-formula writes the table and its CSV"""
        result = invoke(runner, "dim-formula", "--config", CONFIGS / "dim_formula.json", "--out", tmp_path)
        assert result.exit_code == 0
        rows = read(tmp_path, "dim-formula")["rows"]
        unit = [row["N"] for row in rows if row["ratio"] == 1 and row["eta"] == 1]
        assert unit == [127, 168, 209, 250, 291, 332]
        assert (tmp_path / "dim_formula.csv").exists()

    def test_gamlen_gaudet(self, runner, tmp_path):
        """gamlen-gaudet writes both families"""
        result = invoke(runner, "gamlen-gaudet", "--config", CONFIGS / "gamlen_gaudet.json", "--out", tmp_path)
        assert result.exit_code == 0
        bundle = read(tmp_path, "gamlen-gaudet")
        assert bundle["kind"] == "gamlen-gaudet"
        assert bundle["N"] == bundle["xfam"]["N"]

    def test_check_collections(self, runner, tmp_path):
        """Gamlen-Gaudet families pass the collection checks"""
        result = invoke(runner, "check-collections", "--config", CONFIGS / "check_collections.json", "--out", tmp_path)
        assert result.exit_code == 0
        assert read(tmp_path, "collections")["passed"]

    def test_violating_family(self, runner, tmp_path):
        """A failing family still writes its bundle and exits with 2"""
        config = tmp_path / "naive.json"
        config.write_text(json.dumps({"xfam": NAIVE_FAMILY, "yfam": NAIVE_FAMILY}))
        out = tmp_path / "out"
        result = invoke(runner, "check-collections", "--config", config, "--out", out)
        assert result.exit_code == 2
        bundle = read(out, "collections")
        assert not bundle["passed"]
        assert bundle["smallest_kappa"]["x"] == "inf"

    def test_norm(self, runner, tmp_path):
        """Block norms come out at one with a dual lower bound below"""
        result = invoke(runner, "norm", "--config", CONFIGS / "norm_block.json", "--out", tmp_path)
        assert result.exit_code == 0
        for entry in read(tmp_path, "norm")["results"]:
            assert entry["norm"] == pytest.approx(1.0)
            assert entry["dual_lower"] <= entry["norm"] + 1e-12


class TestOperatorCommands:
    """Commands driven by a test operator"""

    def test_moments_identity(self, runner, tmp_path):
        """The identity has vanishing second moments"""
        result = invoke(runner, "moments", "--config", CONFIGS / "moments_identity.json", "--out", tmp_path)
        assert result.exit_code == 0
        reports = read(tmp_path, "moments")["reports"]
        assert reports
        assert all(report["second_moment"] == 0.0 for report in reports)

    def test_generate_operator(self, runner, tmp_path):
        """generate-operator writes the binary dump and the JSON bundle"""
        result = invoke(runner, "generate-operator", "--config", CONFIGS / "generate_operator.json", "--out", tmp_path)
        assert result.exit_code == 0
        assert (tmp_path / "operator.bin").read_bytes()[:4] == GRAM_MAGIC
        assert read(tmp_path, "operator")["kind"] == "operator"

    def test_sweep_plot_data(self, runner, tmp_path):
        """sweep writes one plot point per m0"""
        result = invoke(runner, "sweep", "--config", CONFIGS / "sweep.json", "--set", "runs=2",
                        "--set", "max_attempts=5", "--out", tmp_path, "--plot-data")
        assert result.exit_code == 0
        lines = (tmp_path / "acceptance_vs_m0.csv").read_text().splitlines()
        assert len(lines) == 4
        assert [p["m0"] for p in read(tmp_path, "sweep")["points"]] == [0, 1, 2]


class TestFactorizeCommands:
    """Factorization, verification and rendering"""

    def test_factorize_then_verify(self, runner, tmp_path):
        """A factorization bundle verifies and renders"""
        result = invoke(runner, "factorize", "--config", CONFIGS / "factorize_diagonal.json", "--out", tmp_path)
        assert result.exit_code == 0
        bundle = read(tmp_path, "factorization")
        assert bundle["residual"] <= 1e-12
        assert bundle["verification"]["passed"]

        checked = tmp_path / "checked"
        result = invoke(runner, "verify", "--bundle", tmp_path / "factorization.json", "--out", checked)
        assert result.exit_code == 0
        assert read(checked, "verification")["passed"]

        rendered = tmp_path / "rendered"
        result = invoke(runner, "render", "--bundle", tmp_path / "factorization.json", "--out", rendered)
        assert result.exit_code == 0
        assert (rendered / "summary.txt").read_text().startswith("kind: factorization")

    def test_seeded_and_thread_independent(self, runner, tmp_path):
        """Bundles depend on the seed only, not on the thread count"""
        bundles = []
        for k, threads in enumerate([1, 1, 4]):
            out = tmp_path / str(k)
            result = invoke(runner, "factorize", "--config", CONFIGS / "factorize_diagonal.json",
                            "--threads", threads, "--out", out)
            assert result.exit_code == 0
            bundle = read(out, "factorization")
            bundle.pop("metadata")
            bundles.append(bundle)
        assert bundles[0] == bundles[1] == bundles[2]

    def test_signs_not_found(self, runner, tmp_path):
        """An exhausted sign search exits with 3"""
        result = invoke(runner, "factorize", "--config", CONFIGS / "factorize_noise.json",
                        "--set", "params.eta0=0", "--set", "params.max_attempts=2", "--out", tmp_path)
        assert result.exit_code == 3


class TestErrors:
    """Configuration problems exit with code 4"""

    def test_render_empty_bundle(self, runner, tmp_path):
        """Rendering an empty bundle is refused"""
        empty = tmp_path / "empty.json"
        empty.write_text("{}")
        assert invoke(runner, "render", "--bundle", empty).exit_code == 4

    def test_unreadable_bundle(self, runner, tmp_path):
        """Missing or broken bundle files are configuration errors"""
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        assert invoke(runner, "verify", "--bundle", tmp_path / "absent.json").exit_code == 4
        assert invoke(runner, "render", "--bundle", broken).exit_code == 4

    def test_bad_json_config(self, runner, tmp_path):
        """Unparseable config files are rejected"""
        config = tmp_path / "bad.json"
        config.write_text("{")
        assert invoke(runner, "dim-formula", "--config", config).exit_code == 4

    def test_invalid_parameters(self, runner, tmp_path):
        """Out-of-range parameters fail validation"""
        result = invoke(runner, "dim-formula", "--set", "ratios=[0.5]", "--out", tmp_path)
        assert result.exit_code == 4

    def test_malformed_family(self, runner, tmp_path):
        """A non-numeric resolution in a family is a configuration error"""
        config = tmp_path / "malformed.json"
        config.write_text(json.dumps({"xfam": dict(NAIVE_FAMILY, n="one"), "yfam": NAIVE_FAMILY}))
        result = invoke(runner, "check-collections", "--config", config)
        assert result.exit_code == 4
        assert not isinstance(result.exception, ValueError)

    def test_unknown_option(self, runner):
        """Unknown options are usage errors"""
        assert invoke(runner, "dim-formula", "--no-such-option").exit_code == 4

    def test_plot_data_needs_out(self, runner):
        """--plot-data without --out is refused"""
        assert invoke(runner, "dim-formula", "--plot-data").exit_code == 4
