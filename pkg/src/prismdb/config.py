"""Engine configuration.

One dataclass carries every tunable; environment variables named
``PRISMDB_<FIELD>`` override individual fields at load time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


@dataclass
class EngineConfig:
    seed: int = 7
    embedder_dim: int = 256
    sample_rows: int = 5

    # synthesis backend
    provider: str = "deterministic"  # or "external"
    endpoint: str = ""
    auth_token: str = ""
    timeout_s: float = 30.0
    inflight_limit: int = 4

    # clarification / sketching
    max_clarification_rounds: int = 3
    ask_about_quoted: bool = False
    max_sketch_rounds: int = 8

    # planning / synthesis
    max_plan_iterations: int = 5
    max_critic_rounds: int = 3
    parallel_synthesis: bool = False
    fusion_aggressiveness: str = "safe"  # none | safe | max
    external_call_surcharge: float = 5.0

    # execution
    max_repairs: int = 3
    lineage_row_tracking: bool = True
    monitor_enabled: bool = True
    monitor_fanout_k: int = 4
    monitor_rules: tuple = ("fan_out", "score_range", "empty_output", "duplicate_key")

    # subjective terms the query reviewer treats as ambiguous
    ambiguity_lexicon: tuple = (
        "exciting",
        "boring",
        "good",
        "bad",
        "interesting",
        "best",
        "fun",
        "scary",
        "popular",
    )

    @classmethod
    def from_env(cls, **overrides) -> "EngineConfig":
        cfg = cls(**overrides)
        for f in fields(cls):
            env_name = f"PRISMDB_{f.name.upper()}"
            if env_name not in os.environ or f.name in overrides:
                continue
            raw = os.environ[env_name]
            current = getattr(cfg, f.name)
            if isinstance(current, bool):
                setattr(cfg, f.name, raw.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, f.name, int(raw))
            elif isinstance(current, float):
                setattr(cfg, f.name, float(raw))
            elif isinstance(current, tuple):
                setattr(cfg, f.name, tuple(part.strip() for part in raw.split(",") if part.strip()))
            else:
                setattr(cfg, f.name, raw)
        return cfg
