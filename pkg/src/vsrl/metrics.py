"""Evaluation records and the JSON-lines metrics files every stage emits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class EvalRecord:
    step: int
    seed: int
    variant: str
    task: str
    success_rate: float | None = None
    avg_return: float | None = None
    perturbation: str = "none"
    config_hash: str = ""

    def to_json(self) -> dict:
        payload = {k: v for k, v in asdict(self).items() if v is not None}
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "EvalRecord":
        return cls(
            step=int(payload["step"]),
            seed=int(payload["seed"]),
            variant=payload["variant"],
            task=payload.get("task", ""),
            success_rate=payload.get("success_rate"),
            avg_return=payload.get("avg_return"),
            perturbation=payload.get("perturbation", "none"),
            config_hash=payload.get("config_hash", ""),
        )

    @property
    def score(self) -> float:
        """Success rate for goal tasks, average return otherwise."""
        return self.success_rate if self.success_rate is not None else float(self.avg_return)


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)

    def append(self, record: EvalRecord) -> None:
        self.records.append(record)

    def final_per_seed(self) -> dict[tuple[str, str, str, int], EvalRecord]:
        """Latest record per (task, variant, perturbation, seed)."""
        latest: dict[tuple[str, str, str, int], EvalRecord] = {}
        for rec in self.records:
            key = (rec.task, rec.variant, rec.perturbation, rec.seed)
            if key not in latest or rec.step >= latest[key].step:
                latest[key] = rec
        return latest


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def write_jsonl(records: list[EvalRecord], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_jsonl(path: str | Path) -> list[EvalRecord]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EvalRecord.from_json(json.loads(line)))
    return records


def mean_std(values: list[float], population: bool = False) -> tuple[float, float]:
    """Mean and sample (n−1) standard deviation; std is 0 for a single value."""
    n = len(values)
    if n == 0:
        raise ValueError("mean_std of empty list")
    mean = sum(values) / n
    if n == 1 and not population:
        return mean, 0.0
    ddof = 0 if population else 1
    var = sum((v - mean) ** 2 for v in values) / (n - ddof)
    return mean, var**0.5
