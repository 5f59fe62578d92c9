from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class RunReport:
    """Outcome of one seeded run of a PAC learner."""

    algorithm: str
    config: dict
    samples_total: int
    chosen_policy: int
    suboptimality: float
    variance_by_policy: list
    seed: int
    stream_id: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def success(self, eps: float) -> bool:
        return self.suboptimality <= eps
