"""NormReport: the record every verification step produces."""
from dataclasses import dataclass, field
import csv
import io
import json
import math

import numpy as np


def _finite(x, what):
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value for {what}: {x}")
    return x


@dataclass(eq=False)
class NormReport:
    """Named scalars, time series, power-law fits and pass/fail verdicts.

    ``meta`` carries the grid/dt tags of the run the series came from.
    Fit entries are dicts with keys ``q``, ``C``, ``residual`` (and optional
    extras); verdicts are booleans or None for "not applicable".
    """

    name: str
    scalars: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_scalar(self, key, value):
        self.scalars[key] = _finite(value, key)

    def add_series(self, key, t, values):
        t = np.asarray(t, dtype=np.float64)
        v = np.asarray(values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError(f"series {key}: t and values must be equal-length 1-d")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError(f"series {key} has non-finite entries")
        self.series[key] = (t, v)

    def add_fit(self, key, **entries):
        self.fits[key] = {k: _finite(v, f"{key}.{k}") for k, v in entries.items()}

    def set_verdict(self, key, ok):
        self.verdicts[key] = None if ok is None else bool(ok)

    @property
    def passed(self):
        return all(v is not False for v in self.verdicts.values())

    def to_dict(self):
        return {
            "name": self.name,
            "scalars": self.scalars,
            "series": {k: {"t": t.tolist(), "value": v.tolist()}
                       for k, (t, v) in self.series.items()},
            "fits": self.fits,
            "verdicts": self.verdicts,
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        r = cls(d["name"], dict(d.get("scalars", {})), {}, dict(d.get("fits", {})),
                dict(d.get("verdicts", {})), dict(d.get("meta", {})))
        for k, s in d.get("series", {}).items():
            r.series[k] = (np.asarray(s["t"], dtype=float), np.asarray(s["value"], dtype=float))
        return r

    def csv_rows(self):
        for k in sorted(self.series):
            t, v = self.series[k]
            for a, b in zip(t, v):
                yield [self.name, k, repr(float(a)), repr(float(b))]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["report", "series", "t", "value"])
        w.writerows(self.csv_rows())
        return buf.getvalue()
