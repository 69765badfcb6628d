"""Structured pass/fail records shared by the validators, the resolvent lab
and the simulator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

STATUSES = ("pass", "fail", "warn")


@dataclass
class ReportEntry:
    """One checked condition.

    ``status`` is derived from ``metric <= tolerance`` unless it is forced to
    ``"warn"``; a NaN metric always fails.
    """

    check_id: str
    metric: float
    tolerance: float
    details: str = ""
    status: str = ""
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metric = float(self.metric)
        self.tolerance = float(self.tolerance)
        ok = (not math.isnan(self.metric)) and self.metric <= self.tolerance
        if self.status == "warn":
            return
        if self.status and self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        self.status = "pass" if ok else "fail"

    @property
    def passed(self):
        return self.status == "pass"

    def to_dict(self):
        d = asdict(self)
        for k in ("metric", "tolerance"):
            if not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)
    psi_floor_activations: int = 0
    meta: dict = field(default_factory=dict)

    def add(self, entry: ReportEntry):
        self.entries.append(entry)
        return entry

    def extend(self, entries):
        for e in entries:
            self.add(e)

    def __getitem__(self, check_id):
        for e in self.entries:
            if e.check_id == check_id:
                return e
        raise KeyError(check_id)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def passed(self):
        """True when every non-warning entry passed."""
        return all(e.status != "fail" for e in self.entries)

    def counts(self):
        out = {s: 0 for s in STATUSES}
        for e in self.entries:
            out[e.status] += 1
        return out

    def to_dict(self):
        return {
            "entries": [e.to_dict() for e in self.entries],
            "psi_floor_activations": int(self.psi_floor_activations),
            "summary": self.counts(),
            "meta": self.meta,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), indent=2, default=_json_default, **kw)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_dict(cls, d):
        entries = []
        for e in d.get("entries", []):
            e = dict(e)
            status = e.pop("status", "")
            ent = ReportEntry(**{**e, "status": "warn" if status == "warn" else ""})
            entries.append(ent)
        return cls(entries, d.get("psi_floor_activations", 0), d.get("meta", {}))


def _json_default(o):
    try:
        import numpy as np

        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"not JSON serializable: {type(o)}")
