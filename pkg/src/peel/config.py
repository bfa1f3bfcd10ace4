"""Run configuration: strict JSON loading with defaults and validation.

Unknown keys are rejected by name (catching typos before a long run);
the effective configuration, defaults included, is echoed into every run
directory so results are self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .autodiff import ContractViolation
from .policy import PolicyConfig

METHODS = ("dmpel", "seqft_lora", "er", "tail_oracle")


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "dmpel"
    suite: str = "suite.json"
    epochs_per_task: int = 10
    eval_every: int = 2
    batch: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.1
    grad_clip: float = 100.0
    rank: int = 4
    delta: int = 3
    coefficient_dropout: float = 0.15
    cr_ratio: float = 0.05
    lambda_cr: float = 1.0
    consolidation_epochs: int = 10
    consolidation_lr: float = 1e-3
    synth_interval: int = 1
    tune_bias: bool = False
    eval_episodes: int = 20
    demos_per_task: int = 20
    pretrain_epochs: int = 120
    pretrain_lr: float = 3e-4
    router_hidden: int = 128
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self):
        if self.method not in METHODS:
            raise ContractViolation(f"config key 'method': unknown value {self.method!r}")
        positive = ("epochs_per_task", "eval_every", "batch", "rank", "delta",
                    "synth_interval", "eval_episodes", "demos_per_task",
                    "router_hidden")
        for key in positive:
            if getattr(self, key) < 1:
                raise ContractViolation(f"config key {key!r} must be >= 1, "
                                        f"got {getattr(self, key)}")
        if self.eval_every > self.epochs_per_task:
            raise ContractViolation(
                f"config key 'eval_every' ({self.eval_every}) exceeds "
                f"epochs_per_task ({self.epochs_per_task})")
        if self.lr <= 0:
            raise ContractViolation(f"config key 'lr' must be positive, got {self.lr}")
        if not 0.0 < self.cr_ratio <= 1.0:
            raise ContractViolation(
                f"config key 'cr_ratio' must be in (0, 1], got {self.cr_ratio}")
        if not 0.0 <= self.coefficient_dropout < 1.0:
            raise ContractViolation(
                f"config key 'coefficient_dropout' must be in [0, 1), "
                f"got {self.coefficient_dropout}")
        if self.lambda_cr < 0:
            raise ContractViolation(
                f"config key 'lambda_cr' must be >= 0, got {self.lambda_cr}")
        if self.weight_decay < 0:
            raise ContractViolation(
                f"config key 'weight_decay' must be >= 0, got {self.weight_decay}")
        if self.grad_clip <= 0:
            raise ContractViolation(
                f"config key 'grad_clip' must be positive, got {self.grad_clip}")
        if self.consolidation_epochs < 0:
            raise ContractViolation(
                f"config key 'consolidation_epochs' must be >= 0, "
                f"got {self.consolidation_epochs}")
        if self.pretrain_epochs < 0:
            raise ContractViolation(
                f"config key 'pretrain_epochs' must be >= 0, "
                f"got {self.pretrain_epochs}")
        if self.pretrain_lr <= 0:
            raise ContractViolation(
                f"config key 'pretrain_lr' must be positive, got {self.pretrain_lr}")
        if self.consolidation_lr <= 0:
            raise ContractViolation(
                f"config key 'consolidation_lr' must be positive, "
                f"got {self.consolidation_lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ContractViolation(
                f"config key 'betas' must be two values in [0, 1), got {self.betas}")
        self.policy.validate()
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def _apply(obj, data, prefix=""):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ContractViolation(f"unknown config key {prefix + key!r}")
        if key == "policy":
            if not isinstance(value, dict):
                raise ContractViolation("config key 'policy' must be an object")
            _apply(obj.policy, value, prefix="policy.")
        elif key == "betas":
            obj.betas = tuple(value)
        else:
            setattr(obj, key, value)


def parse_config(data):
    """Build a validated RunConfig from a plain dict."""
    if not isinstance(data, dict):
        raise ContractViolation("config root must be a JSON object")
    cfg = RunConfig()
    _apply(cfg, data)
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ContractViolation(f"malformed config JSON in {path}: {e}") from e
    return parse_config(data)
