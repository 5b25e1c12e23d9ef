"""
Experiment configuration for hardy-factor
Loads JSON configs, resolves references from several sources, merges flag overrides
and validates the result against the command's parameter model
"""

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, model_validator

from config import MIN_MC_TRIALS
from errors import ConfigError
from factorization import FactorizationParams
from haar_space import EUCLIDEAN, ExponentPair
from operators import OperatorMatrix, OperatorStructure, generate_test_operator
from randomization import Variable
from seeding import derive_seed

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class ReferenceSource(str, Enum):
    """Prefixes a config string may carry"""
    ENVIRONMENT = "env"
    FILE = "file"
    LITERAL = "literal"

    @classmethod
    def split(cls, reference: str) -> Optional[Tuple["ReferenceSource", str]]:
        """(source, remainder) for a prefixed string, None otherwise"""
        prefix, sep, rest = reference.partition(":")
        if not sep:
            return None
        try:
            return cls(prefix), rest
        except ValueError:
            return None


class ConfigResolver:
    """Resolves references in config values relative to the config file's directory"""

    def __init__(self, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()

    def resolve_reference(self, reference: Any) -> Any:
        """
        Resolve a single value

        Supported formats:
        - env:VARIABLE_NAME
        - file:relative/or/absolute/path.json (parsed JSON content)
        - literal:text (or just text)
        """
        if not isinstance(reference, str):
            return reference
        parsed = ReferenceSource.split(reference)
        if parsed is None:
            return reference
        source, rest = parsed
        if source == ReferenceSource.ENVIRONMENT:
            return self._resolve_env(rest)
        if source == ReferenceSource.FILE:
            return self._resolve_file(rest)
        return rest

    def _resolve_env(self, name: str) -> str:
        value = os.getenv(name)
        if value is None:
            raise ConfigError(f"Environment variable '{name}' not found")
        return value

    def _resolve_file(self, reference: str) -> Any:
        path = Path(reference)
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            with open(path, "r") as f:
                content = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Referenced file '{path}' not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Referenced file '{path}' is not valid JSON: {str(e)}")
        # Nested references resolve relative to the referenced file
        return ConfigResolver(path.parent).resolve_value(content)

    def resolve_value(self, value: Any) -> Any:
        if isinstance(value, dict):
            return self.resolve_dict(value)
        if isinstance(value, list):
            return [self.resolve_value(item) for item in value]
        return self.resolve_reference(value)

    def resolve_dict(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """Recursively resolve every reference in a dictionary"""
        return {key: self.resolve_value(value) for key, value in data.items()}


def parse_override(text: str) -> Dict[str, Any]:
    """'a.b=value' → {"a": {"b": value}}; the value is parsed as JSON when possible"""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must have the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    result: Dict[str, Any] = {}
    cursor = result
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return result


def merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Deep merge; values in overrides win"""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Read and resolve a JSON config file, then apply overrides"""
    data: Dict[str, Any] = {}
    base_dir = Path.cwd()
    if path:
        config_path = Path(path)
        base_dir = config_path.parent
        try:
            with open(config_path, "r") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file '{path}' not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file '{path}' is not valid JSON: {str(e)}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file '{path}' must contain a JSON object")
    resolver = ConfigResolver(base_dir)
    resolved = resolver.resolve_dict(data)
    if overrides:
        resolved = merge(resolved, resolver.resolve_dict(overrides))
    logger.debug("Resolved config keys: %s", sorted(resolved))
    return resolved


def validate(model: Type[ModelT], data: Dict[str, Any]) -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(
            f"Invalid {model.__name__}",
            {"errors": json.loads(e.json(include_url=False))},
        )


# ==================== COMMAND MODELS ====================

class RunConfig(BaseModel):
    seed: int = Field(0, ge=0, description="Top-level seed for every random stream")
    threads: int = Field(1, ge=1, description="Worker cap; results do not depend on it")


class OperatorSource(str, Enum):
    IDENTITY = "identity"
    GENERATE = "generate"
    FILE = "file"


class OperatorSpec(BaseModel):
    source: OperatorSource = OperatorSource.GENERATE
    N: Optional[int] = Field(None, ge=0, description="Resolution for identity or generated operators")
    delta: float = Field(0.5, gt=0)
    gamma: float = Field(1.0, gt=0)
    structure: OperatorStructure = OperatorStructure.NOISE
    mixed_signs: bool = False
    scale: float = Field(1.0, description="Factor applied after construction")
    path: Optional[str] = Field(None, description="JSON operator or binary Gram dump")

    @model_validator(mode="after")
    def check_source(self) -> "OperatorSpec":
        if self.source == OperatorSource.FILE and not self.path:
            raise ValueError("file operators need a path")
        if self.source != OperatorSource.FILE and self.N is None:
            raise ValueError(f"{self.source.value} operators need N")
        return self


def load_operator(spec: OperatorSpec, exponents: ExponentPair, seed: int) -> OperatorMatrix:
    if spec.source == OperatorSource.IDENTITY:
        T = OperatorMatrix.identity(spec.N, exponents)
    elif spec.source == OperatorSource.GENERATE:
        T = generate_test_operator(
            spec.N, spec.delta, spec.gamma, exponents, spec.structure,
            derive_seed(seed, "operator"), spec.mixed_signs,
        )
    else:
        T = read_operator(spec.path, exponents)
    return T.scaled(spec.scale) if spec.scale != 1.0 else T


def read_operator(path: str, exponents: ExponentPair = EUCLIDEAN) -> OperatorMatrix:
    try:
        if path.endswith(".bin"):
            with open(path, "rb") as f:
                return OperatorMatrix.from_bytes(f.read(), exponents)
        with open(path, "r") as f:
            return OperatorMatrix.from_dict(json.load(f)).with_exponents(exponents)
    except FileNotFoundError:
        raise ConfigError(f"Operator file '{path}' not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Operator file '{path}' is not valid JSON: {str(e)}")


class NormConfig(RunConfig):
    element: Dict[str, Any] = Field(..., description="Element {resolution, coefficients}, usually a file: reference")
    exponents: List[ExponentPair] = Field(default_factory=lambda: [EUCLIDEAN])
    dual_trials: int = Field(200, ge=1)


class GamlenGaudetConfig(RunConfig):
    n: int = Field(..., ge=0)
    m0: int = Field(..., ge=0)
    N: Optional[int] = Field(None, ge=0, description="Target resolution, defaults to n + m0")


class CollectionsConfig(RunConfig):
    xfam: Optional[Dict[str, Any]] = None
    yfam: Optional[Dict[str, Any]] = None
    gamlen_gaudet: Optional[GamlenGaudetConfig] = None

    @model_validator(mode="after")
    def one_source(self) -> "CollectionsConfig":
        explicit = self.xfam is not None and self.yfam is not None
        if explicit == (self.gamlen_gaudet is not None):
            raise ValueError("give either xfam and yfam, or gamlen_gaudet")
        return self


class MomentsConfig(RunConfig):
    operator: OperatorSpec
    n: int = Field(..., ge=0)
    m0: int = Field(..., ge=0)
    exponents: ExponentPair = EUCLIDEAN
    variables: List[Variable] = Field(default_factory=lambda: list(Variable))
    indices: Optional[List[List[str]]] = Field(
        None, description="Index tuples as interval strings in (I, I′, J, J′) order; all admissible when absent"
    )
    trials: int = Field(10_000, ge=MIN_MC_TRIALS)
    exhaustive: bool = True
    monte_carlo: bool = True
    trace: bool = Field(False, description="Stream Monte Carlo values to CSV")


class SearchConfig(RunConfig):
    operator: OperatorSpec
    n: int = Field(..., ge=0)
    m0: int = Field(..., ge=0)
    eta0: float = Field(..., ge=0)
    max_attempts: int = Field(10_000, ge=1)
    exponents: ExponentPair = EUCLIDEAN


class FactorizeConfig(RunConfig):
    operator: OperatorSpec
    params: FactorizationParams
    exponents: ExponentPair = EUCLIDEAN
    samples: int = Field(200, ge=1, description="Sampled candidates per norm estimate")


class DimFormulaConfig(RunConfig):
    n_values: List[int] = Field(default_factory=lambda: list(range(6)))
    ratios: List[float] = Field(default_factory=lambda: [1.0], description="Values of Γ/δ")
    etas: List[float] = Field(default_factory=lambda: [1.0])

    @model_validator(mode="after")
    def positive(self) -> "DimFormulaConfig":
        if any(n < 0 for n in self.n_values):
            raise ValueError("n values must be nonnegative")
        if any(r < 1 for r in self.ratios):
            raise ValueError("Γ/δ must be at least 1")
        if any(e <= 0 for e in self.etas):
            raise ValueError("η must be positive")
        return self


class VerifyConfig(RunConfig):
    bundle: Dict[str, Any] = Field(..., description="Factorization bundle, usually a file: reference")
    exponents: ExponentPair = EUCLIDEAN
    samples: int = Field(200, ge=1)


class RenderConfig(RunConfig):
    bundle: Dict[str, Any]


class GenerateConfig(RunConfig):
    operator: OperatorSpec
    exponents: ExponentPair = EUCLIDEAN


class SweepConfig(RunConfig):
    operator: OperatorSpec
    n: int = Field(..., ge=0)
    m0_values: List[int]
    eta0: float = Field(..., ge=0)
    runs: int = Field(20, ge=1)
    max_attempts: int = Field(1_000, ge=1)
    exponents: ExponentPair = EUCLIDEAN
