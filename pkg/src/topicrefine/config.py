"""Serializable run configuration shared by the CLI subcommands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    corpus: str = ""
    test_fraction: float = 0.1
    pretokenized: bool = False
    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int | None = None
    max_context: int = 500
    max_decode: int = 50
    max_positions: int | None = None
    tie_lm_head: bool = True
    dtype: str = "float64"
    # optimization
    lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 2000
    batch_size: int = 4
    steps: int = 2000
    checkpoint_every: int = 0
    # framework variants
    ablation: str = "full"
    classifier: str = "shared_gpt"
    refine_context: str = "full"
    refine_r1_source: str = "argmax_teacher_forced"
    variant: str = "stage_two_gpt"
    use_roles: bool = True
    min_count: int = 1
    threshold: float = 0.5
    mode: str | None = None
    seed: int = 0

    _RUN_ONLY = ("corpus", "test_fraction", "pretokenized", "checkpoint_every")

    def estimator_params(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in self._RUN_ONLY}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
