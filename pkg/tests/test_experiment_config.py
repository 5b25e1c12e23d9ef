import json

import numpy as np
import pytest

from errors import ConfigError
from experiment_config import (
    ConfigResolver,
    DimFormulaConfig,
    FactorizeConfig,
    MomentsConfig,
    OperatorSource,
    OperatorSpec,
    ReferenceSource,
    load_config,
    load_operator,
    merge,
    parse_override,
    read_operator,
    validate,
)
from haar_space import EUCLIDEAN, ExponentPair
from operators import OperatorMatrix


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


class TestConfigResolver:
    """References resolved from the environment, files and literals"""

    def test_environment_reference(self, monkeypatch):
        """env: references read the environment"""
        monkeypatch.setenv("HARDY_TEST_SEED", "17")
        assert ConfigResolver().resolve_reference("env:HARDY_TEST_SEED") == "17"

    def test_missing_environment_variable(self, monkeypatch):
        """An unset variable is a configuration error"""
        monkeypatch.delenv("HARDY_TEST_MISSING", raising=False)
        with pytest.raises(ConfigError):
            ConfigResolver().resolve_reference("env:HARDY_TEST_MISSING")

    def test_literal_and_plain_values(self):
        """literal: strips its prefix and plain values pass through"""
        resolver = ConfigResolver()
        assert resolver.resolve_reference("literal:env:NOT_RESOLVED") == "env:NOT_RESOLVED"
        assert resolver.resolve_reference("plain") == "plain"
        assert resolver.resolve_reference(3) == 3

    def test_reference_prefixes(self):
        """Only known prefixes are split off; other colons stay in the value"""
        assert ReferenceSource.split("env:HOME") == (ReferenceSource.ENVIRONMENT, "HOME")
        assert ReferenceSource.split("file:a:b.json") == (ReferenceSource.FILE, "a:b.json")
        assert ReferenceSource.split("http://example.org") is None
        assert ReferenceSource.split("plain") is None
        assert ConfigResolver().resolve_reference("ratio:2") == "ratio:2"

    def test_file_reference_is_relative(self, tmp_path):
        """file: paths resolve against the base directory"""
        write_json(tmp_path / "element.json", {"resolution": 0, "coefficients": [1.0]})
        resolved = ConfigResolver(tmp_path).resolve_dict({"element": "file:element.json"})
        assert resolved == {"element": {"resolution": 0, "coefficients": [1.0]}}

    def test_nested_file_references(self, tmp_path):
        """References inside a referenced file resolve against that file"""
        nested = tmp_path / "nested"
        nested.mkdir()
        write_json(nested / "inner.json", {"value": 2})
        write_json(nested / "outer.json", {"inner": "file:inner.json", "items": ["literal:x", "file:inner.json"]})
        resolved = ConfigResolver(tmp_path).resolve_value("file:nested/outer.json")
        assert resolved == {"inner": {"value": 2}, "items": ["x", {"value": 2}]}

    def test_missing_or_invalid_file(self, tmp_path):
        """Missing or broken referenced files are configuration errors"""
        (tmp_path / "broken.json").write_text("{not json")
        resolver = ConfigResolver(tmp_path)
        with pytest.raises(ConfigError):
            resolver.resolve_reference("file:absent.json")
        with pytest.raises(ConfigError):
            resolver.resolve_reference("file:broken.json")


class TestOverrides:
    """Flag overrides merged into the file config"""

    def test_parse_override(self):
        """Dotted keys build nested dictionaries with JSON values"""
        assert parse_override("params.eta0=0.25") == {"params": {"eta0": 0.25}}
        assert parse_override("operator.source=identity") == {"operator": {"source": "identity"}}
        assert parse_override("variables=[\"W\"]") == {"variables": ["W"]}
        with pytest.raises(ConfigError):
            parse_override("params.eta0")

    def test_merge_is_deep(self):
        """Merging is deep and leaves the base untouched"""
        base = {"params": {"n": 1, "m0": 1}, "seed": 0}
        merged = merge(base, {"params": {"m0": 2}})
        assert merged == {"params": {"n": 1, "m0": 2}, "seed": 0}
        assert base["params"]["m0"] == 1

    def test_load_config(self, tmp_path):
        """Overrides win over the file"""
        path = write_json(tmp_path / "run.json", {"seed": 1, "params": {"n": 1}})
        assert load_config(str(path), {"params": {"n": 2}}) == {"seed": 1, "params": {"n": 2}}
        assert load_config(None, {"seed": 3}) == {"seed": 3}

    def test_load_config_errors(self, tmp_path):
        """Missing, non-object and unparseable files are rejected"""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))
        (tmp_path / "list.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "list.json"))
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "bad.json"))


class TestCommandModels:
    """Validation of per-command parameters"""

    def test_validation_errors_are_config_errors(self):
        """Validation errors carry exit code 4 and the failing field"""
        with pytest.raises(ConfigError) as raised:
            validate(MomentsConfig, {"operator": {"source": "identity", "N": 2}, "n": 1, "m0": 1, "trials": 10})
        assert raised.value.exit_code == 4
        assert raised.value.details["errors"][0]["loc"] == ["trials"]

    def test_operator_source_requirements(self):
        """Each operator source needs its own fields"""
        with pytest.raises(ConfigError):
            validate(OperatorSpec, {"source": "file"})
        with pytest.raises(ConfigError):
            validate(OperatorSpec, {"source": "identity"})
        assert validate(OperatorSpec, {"source": "identity", "N": 1}).source == OperatorSource.IDENTITY

    def test_factorize_defaults(self):
        """Factorize defaults to seed 0, one thread and a generated operator"""
        cfg = validate(FactorizeConfig, {
            "operator": {"N": 2},
            "params": {"n": 1, "delta": 0.5, "gamma": 1.0, "N": 2, "m0": 1, "eta0": 0.1},
        })
        assert cfg.seed == 0 and cfg.threads == 1
        assert cfg.exponents == EUCLIDEAN
        assert cfg.operator.source == OperatorSource.GENERATE

    def test_dim_formula_ranges(self):
        """Ratios below one and zero slack are rejected"""
        with pytest.raises(ConfigError):
            validate(DimFormulaConfig, {"ratios": [0.5]})
        with pytest.raises(ConfigError):
            validate(DimFormulaConfig, {"etas": [0.0]})
        assert validate(DimFormulaConfig, {}).n_values == [0, 1, 2, 3, 4, 5]


class TestOperatorLoading:
    """Operators from identity, generator and files"""

    def test_identity_with_scale(self):
        """The identity source applies its scale"""
        spec = OperatorSpec(source="identity", N=1, scale=-2.0)
        T = load_operator(spec, EUCLIDEAN, seed=0)
        assert np.array_equal(T.gram, OperatorMatrix.identity(1).gram * -2.0)

    def test_generated_is_seeded(self):
        """Generated operators depend on the seed"""
        spec = OperatorSpec(source="generate", N=1)
        first = load_operator(spec, EUCLIDEAN, seed=5)
        assert np.array_equal(first.gram, load_operator(spec, EUCLIDEAN, seed=5).gram)
        assert not np.array_equal(first.gram, load_operator(spec, EUCLIDEAN, seed=6).gram)

    def test_json_and_binary_files(self, tmp_path, rng):
        """JSON and binary files load with the requested exponents"""
        T = OperatorMatrix.identity(1).scaled(0.75)
        (tmp_path / "op.json").write_text(T.to_json())
        (tmp_path / "op.bin").write_bytes(T.to_bytes())
        skewed = ExponentPair(p=3.0, q=1.5)
        from_json = read_operator(str(tmp_path / "op.json"), skewed)
        from_bin = load_operator(OperatorSpec(source="file", path=str(tmp_path / "op.bin")), skewed, seed=0)
        assert np.array_equal(from_json.gram, T.gram)
        assert np.array_equal(from_bin.gram, T.gram)
        assert from_json.domain.exponents == skewed == from_bin.domain.exponents

    def test_missing_operator_file(self, tmp_path):
        """A missing operator file is a configuration error"""
        with pytest.raises(ConfigError):
            read_operator(str(tmp_path / "absent.json"))
