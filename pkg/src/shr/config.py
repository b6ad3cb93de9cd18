"""Run configuration shared by the inference loop and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .confmap import OCCLUSION_LEVELS
from .scoring import ScoreWeights


@dataclass
class RunConfig:
    eps1: float = 0.1
    eps2: float = 0.01
    sigma_blob: float = 2.0
    sigma_blur: float = 1.5
    T1: int = 30
    T2: int = 4
    lambdas: tuple = (0.21, 0.60, 0.19)
    lambdas_init: tuple = (0.3, 0.2, 0.5)
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    leaky_slope: float = 0.01
    baseline_momentum: float = 0.9
    epochs: int = 3
    batch_episodes: int = 8
    seed: int = 0
    occlusion_levels: tuple = (0.0, 0.01, 0.04, 0.09, 0.16, 0.25)
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    roi_side: float = 160.0
    max_yaw: float = 50.0
    retrieve_k: int = 5
    yaw_threshold: float = 30.0
    tune_lambdas: bool = True
    out: str = "run"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.lambdas_init = tuple(float(v) for v in self.lambdas_init)
        self.occlusion_levels = tuple(float(v) for v in self.occlusion_levels)
        ScoreWeights(*self.lambdas)
        ScoreWeights(*self.lambdas_init)
        bad = [lv for lv in self.occlusion_levels
               if not any(abs(lv - ok) < 1e-12 for ok in OCCLUSION_LEVELS)]
        if bad:
            raise ValueError(f"unsupported occlusion levels {bad}")
        if not (0 < self.eps1 < 1 and self.eps2 > 0 and self.sigma_blur > 0 and self.sigma_blob > 0):
            raise ValueError("eps1 in (0,1), eps2 > 0 and positive sigmas required")
        if self.T1 < 1 or self.T2 < 1:
            raise ValueError("T1 and T2 must be >= 1")

    @property
    def weights(self) -> ScoreWeights:
        return ScoreWeights(*self.lambdas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["lambdas_init"] = list(self.lambdas_init)
        d["occlusion_levels"] = list(self.occlusion_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        d = dict(d)
        # weights may also be given as {"lambda1":..,"lambda2":..,"lambda3":..}
        if "lambda1" in d:
            d["lambdas"] = (d.pop("lambda1"), d.pop("lambda2"), d.pop("lambda3"))
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
