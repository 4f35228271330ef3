"""Per-round metrics records and their JSON/CSV serializations."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

STAGES = ("avg", "encoder", "classifier")
CURVE_COLUMNS = ("round", "stage", "accuracy", "cumulative_cost")


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add(self, round_index: int, stage: str, accuracy: float, cumulative_cost: int):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        prev = [r for r in self.records if r["stage"] == stage]
        if prev and round_index <= prev[-1]["round"]:
            raise ValueError(f"round {round_index} does not advance stage {stage!r}")
        if self.records and cumulative_cost < self.records[-1]["cumulative_cost"]:
            raise ValueError("cumulative cost must be non-decreasing")
        self.records.append(
            {"round": int(round_index), "stage": stage, "accuracy": float(accuracy), "cumulative_cost": int(cumulative_cost)}
        )

    def stage_rounds(self, stage: str) -> int:
        return sum(1 for r in self.records if r["stage"] == stage)

    @property
    def final_accuracy(self):
        return self.records[-1]["accuracy"] if self.records else None

    def to_json(self) -> dict:
        return {
            "records": self.records,
            "summary": self.summary,
            "environment": self.environment,
            **self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in self.records:
            w.writerow([r["round"], r["stage"], repr(r["accuracy"]), r["cumulative_cost"]])
        return buf.getvalue()

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsLog":
        obj = dict(obj)
        log = cls(obj.pop("records", []), obj.pop("summary", {}), obj.pop("environment", {}))
        log.extra = obj
        return log
