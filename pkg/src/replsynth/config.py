"""Configuration management for replsynth."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, model_validator

DomainName = Literal["csg2d", "csg3d", "string"]


class DomainConfig(BaseModel):
    """Which language is synthesised and at what scale."""

    name: DomainName = "csg2d"
    resolution: int | None = None
    coords: list[int] | None = None
    sizes: list[int] | None = None
    primitives: list[str] | None = None
    horizon: int | None = None
    max_chain: int = 3


class GenConfig(BaseModel):
    """Synthetic data generation settings."""

    max_objects: int = Field(default=13, ge=1)
    exact_objects: bool = False
    max_expressions: int = Field(default=6, ge=1)
    max_chain: int = Field(default=2, ge=1)
    string_length_cap: int = Field(default=36, ge=4)
    examples_per_spec: int = Field(default=4, ge=1)
    seed: int = 0
    count: int = Field(default=1000, ge=1)


class ModelConfig(BaseModel):
    """Network sizes; the defaults are a desk-scale rendition of the full architecture."""

    width: int = 128
    conv_channels: int = 16
    key_dim: int = 64
    hidden: int = 128
    char_embedding: int = 20
    action_embedding: int = 32
    kernel_size: int = 5
    use_repl: bool = True


class TrainingConfig(BaseModel):
    """Optimiser and schedule for pretraining and REINFORCE."""

    pretrain_steps: int = 2000
    reinforce_steps: int = 500
    batch_size: int = 32
    b1: int = 2
    b2: int = 16
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    log_every: int = 50
    checkpoint_every: int = 500
    seed: int = 0


class SearchConfig(BaseModel):
    """Inference-time settings for `synth` and `norepl`."""

    strategy: str = "smc"
    budget: int | None = None
    timeout: float = Field(default=120.0, gt=0)
    node_budget: int | None = None
    top_m: int = 16
    batch_size: int = 64
    seed: int = 0


class BenchConfig(BaseModel):
    """Benchmark harness settings."""

    strategies: list[str] = Field(default_factory=lambda: ["smc", "beam", "beam-novalue", "rollout"])
    tasks: int = 100
    timeout: float = Field(default=10.0, gt=0)
    node_budget: int = 2000
    workers: int = 1
    seed: int = 0


class LoggingConfig(BaseModel):
    """Logging configuration."""

    level: str = "INFO"
    file: str | None = None


class Config(BaseModel):
    """Main configuration model."""

    domain: DomainConfig = Field(default_factory=DomainConfig)
    gen: GenConfig = Field(default_factory=GenConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def _check_budgets(self) -> Config:
        if self.search.budget is not None and self.search.budget < 1:
            raise ValueError("search.budget must be at least 1")
        if self.search.node_budget is not None and self.search.node_budget < 1:
            raise ValueError("search.node_budget must be at least 1")
        return self

    @classmethod
    def load(cls, path: str | Path | None = None) -> Config:
        """Load configuration from a YAML file.

        Args:
            path: Path to the config file. If None, searches for replsynth.yaml
                  in the current directory and ~/.config/replsynth/. When nothing
                  is found the defaults are returned.

        Returns:
            Loaded configuration

        Raises:
            FileNotFoundError: If an explicit path does not exist
            pydantic.ValidationError: If the config file is invalid
        """
        if path is None:
            search_paths = [
                Path("replsynth.yaml"),
                Path("replsynth.yml"),
                Path.home() / ".config" / "replsynth" / "config.yaml",
                Path.home() / ".config" / "replsynth" / "config.yml",
            ]
            for search_path in search_paths:
                if search_path.exists():
                    path = search_path
                    break
            else:
                return cls()

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")

        with open(path) as f:
            data = yaml.safe_load(f) or {}

        # Expand environment variables in string values
        data = cls._expand_env_vars(data)

        return cls.model_validate(data)

    @classmethod
    def _expand_env_vars(cls, data: Any) -> Any:
        """Recursively expand environment variables in config values."""
        if isinstance(data, dict):
            return {k: cls._expand_env_vars(v) for k, v in data.items()}
        elif isinstance(data, list):
            return [cls._expand_env_vars(item) for item in data]
        elif isinstance(data, str):
            return os.path.expandvars(data)
        return data

    def save(self, path: str | Path) -> None:
        """Save configuration to a YAML file.

        Args:
            path: Path to save the config file
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        with open(path, "w") as f:
            yaml.dump(self.model_dump(), f, default_flow_style=False, sort_keys=False)

    def with_overrides(self, section: str, **flags: Any) -> Config:
        """Return a copy where every non-None flag replaces the file value in `section`."""
        updates = {k: v for k, v in flags.items() if v is not None}
        if not updates:
            return self
        current = getattr(self, section)
        data = self.model_dump()
        data[section] = current.model_copy(update=updates).model_dump()
        return Config.model_validate(data)


def config_digest(model: BaseModel) -> str:
    """Stable SHA-256 over a config section, used in dataset manifests."""
    payload = json.dumps(model.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
