"""Builders shared by the tests: a micro CSG domain small enough to search exhaustively."""

from __future__ import annotations

from typing import Any

from replsynth.config import Config, ModelConfig
from replsynth.csg import Circle, CsgDomain, Union

TARGET = Union(Circle(radius=8, x=8, y=8), Circle(radius=8, x=16, y=16))

TINY_MODEL = ModelConfig(
    width=16,
    conv_channels=4,
    key_dim=8,
    hidden=16,
    char_embedding=4,
    action_embedding=4,
    kernel_size=3,
)

MICRO_CONFIG: dict[str, Any] = {
    "domain": {
        "name": "csg2d",
        "resolution": 16,
        "coords": [8, 16],
        "sizes": [8],
        "primitives": ["circle"],
    },
    "gen": {"max_objects": 2, "count": 4},
    "model": TINY_MODEL.model_dump(),
    "training": {
        "pretrain_steps": 2,
        "reinforce_steps": 1,
        "batch_size": 2,
        "b1": 1,
        "b2": 2,
        "log_every": 1,
        "checkpoint_every": 100,
    },
    "search": {"timeout": 10, "node_budget": 40},
    "bench": {"strategies": ["smc", "beam"], "tasks": 2, "timeout": 10, "node_budget": 30},
    "logging": {"level": "WARNING"},
}


def make_micro_domain(**overrides: Any) -> CsgDomain:
    """Radius-8 circles at four positions on a 16x16 canvas; horizon 3."""
    options: dict[str, Any] = {
        "dimension": 2,
        "resolution": 16,
        "coords": (8, 16),
        "sizes": (8,),
        "primitives": ("circle",),
        "max_objects": 2,
    }
    options.update(overrides)
    return CsgDomain(**options)


def make_config(**sections: dict[str, Any]) -> Config:
    """Micro config with per-section overrides."""
    payload = {key: dict(value) for key, value in MICRO_CONFIG.items()}
    for section, values in sections.items():
        payload.setdefault(section, {}).update(values)
    return Config.model_validate(payload)
