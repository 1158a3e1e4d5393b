"""Run configuration.

A run is configured by a single JSON file plus a handful of CLI overrides
(mode, backend, seed, parallelism). Secrets never appear in the file or on
the command line: the file names the environment variable that holds the API
key and the variable is read at backend construction time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .types import RerailError

MODES = ("cot", "sc", "mad", "rerailer")
BACKENDS = ("live", "scripted")

DEFAULT_API_KEY_ENV = "RERAIL_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


class ConfigError(RerailError):
    """The config file is malformed or inconsistent."""


@dataclass(frozen=True)
class PriceEntry:
    prompt_per_1k: float
    completion_per_1k: float


@dataclass(frozen=True)
class RunSettings:
    """Every knob of a run, fully resolved (file values + defaults)."""

    model_id: str = "gpt-4"
    endpoint: str = DEFAULT_ENDPOINT
    api_key_env: str = DEFAULT_API_KEY_ENV
    temperature: float = 0.0
    sampling_temperature: float = 0.7
    n_samples: int = 3
    sc_budget: int = 40
    mad_agents: int = 2
    mad_rounds: int = 3
    n_debate_agents: int = 2
    n_debate_rounds: int = 3
    max_reanswer_steps: int = 12
    max_rerail_iterations: int = 3
    parallelism: int = 1
    seed: int = 0
    timeout_s: float = 120.0
    max_in_flight: int | None = None
    requests_per_minute: int | None = None
    cache_enabled: bool | None = None  # None = backend default (live on, scripted off)
    abs_tolerance: float = 1e-6
    rel_tolerance: float = 1e-4
    price_table: dict[str, PriceEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        positive = {
            "n_samples": self.n_samples,
            "sc_budget": self.sc_budget,
            "mad_agents": self.mad_agents,
            "mad_rounds": self.mad_rounds,
            "n_debate_agents": self.n_debate_agents,
            "n_debate_rounds": self.n_debate_rounds,
            "max_reanswer_steps": self.max_reanswer_steps,
            "max_rerail_iterations": self.max_rerail_iterations,
            "parallelism": self.parallelism,
        }
        for name, value in positive.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"config field {name!r} must be an integer >= 1, got {value!r}")
        if self.mad_agents < 2:
            raise ConfigError("config field 'mad_agents' must be >= 2")
        for name, value in (("temperature", self.temperature), ("sampling_temperature", self.sampling_temperature)):
            if value < 0:
                raise ConfigError(f"config field {name!r} must be >= 0")
        if not self.model_id:
            raise ConfigError("config field 'model_id' must be non-empty")

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["price_table"] = {
            model: {"prompt_per_1k": p.prompt_per_1k, "completion_per_1k": p.completion_per_1k}
            for model, p in self.price_table.items()
        }
        return payload

    def with_overrides(self, **overrides) -> "RunSettings":
        filtered = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **filtered) if filtered else self


_FIELD_NAMES = set(RunSettings.__dataclass_fields__)


def _parse_price_table(raw, source: str) -> dict[str, PriceEntry]:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: 'price_table' must be an object")
    table = {}
    for model, entry in raw.items():
        if not isinstance(entry, dict) or set(entry) != {"prompt_per_1k", "completion_per_1k"}:
            raise ConfigError(
                f"{source}: price_table[{model!r}] must have exactly "
                "prompt_per_1k and completion_per_1k"
            )
        table[model] = PriceEntry(
            prompt_per_1k=float(entry["prompt_per_1k"]),
            completion_per_1k=float(entry["completion_per_1k"]),
        )
    return table


def settings_from_dict(raw: dict, source: str = "config") -> RunSettings:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: expected a JSON object")
    unknown = sorted(set(raw) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"{source}: unknown field {unknown[0]!r}")
    values = dict(raw)
    if "price_table" in values:
        values["price_table"] = _parse_price_table(values["price_table"], source)
    try:
        return RunSettings(**values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def question_seed(base_seed: int, question_id: str) -> int:
    """Stable per-question seed; execution order can never change a call's
    parameters because each question derives its own seed space."""
    digest = hashlib.sha256(f"{base_seed}:{question_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:6], "big")


def load_settings(path: str | Path) -> RunSettings:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return settings_from_dict(raw, source=str(path))
