"""Evaluation reports: JSON, aligned text tables and scatter CSV."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from ..rollout import RolloutResult


@dataclass
class MetricsReport:
    """Summary of one evaluation.

    ``success_rate`` is ``successes / episodes``. Wall-clock time is kept out of
    this record so that reports from identical runs are byte-identical; it is
    written to a separate timing file.
    """

    episodes: int
    successes: int
    success_flags: list[int]
    mean_episode_length: float
    diffusion_calls: int
    targets: list[list[float]]

    @property
    def success_rate(self) -> float:
        return float(Fraction(self.successes, self.episodes)) if self.episodes else 0.0

    @classmethod
    def from_rollout(cls, res: RolloutResult) -> "MetricsReport":
        flags = [int(s) for s in res.success]
        return cls(
            episodes=len(flags),
            successes=sum(flags),
            success_flags=flags,
            mean_episode_length=float(np.mean(res.lengths)) if len(flags) else 0.0,
            diffusion_calls=int(np.sum(res.diffusion_calls)),
            targets=[[float(v) for v in t] for t in res.targets],
        )

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "episodes": self.episodes,
            "successes": self.successes,
            "mean_episode_length": self.mean_episode_length,
            "diffusion_calls": self.diffusion_calls,
            "success_flags": self.success_flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_row(self) -> dict:
        return {
            "success_rate": f"{self.success_rate:.4f}",
            "successes": str(self.successes),
            "episodes": str(self.episodes),
            "mean_len": f"{self.mean_episode_length:.2f}",
            "diffusion_calls": str(self.diffusion_calls),
        }


def aligned_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Plain-text table; numeric-looking cells right-aligned."""
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())
    cells = [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]

    def fmt(vals):
        out = []
        for v, w in zip(vals, widths):
            numeric = v.replace(".", "", 1).replace("-", "", 1).isdigit()
            out.append(v.rjust(w) if numeric else v.ljust(w))
        return "  ".join(out).rstrip()

    lines = [fmt(cols), "  ".join("-" * w for w in widths)]
    lines += [fmt(row) for row in cells]
    return "\n".join(lines) + "\n"


def csv_text(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    cols = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in cols})
    return buf.getvalue()


def scatter_csv(report: MetricsReport) -> str:
    """One row per target: ``x, y, z, success``."""
    rows = [
        {"x": repr(t[0]), "y": repr(t[1]), "z": repr(t[2]), "success": f}
        for t, f in zip(report.targets, report.success_flags)
    ]
    return csv_text(rows, ["x", "y", "z", "success"])


def write_report(out_dir: str | Path, report: MetricsReport, wall_clock: float | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.txt").write_text(aligned_table([report.summary_row()]))
    (out / "scatter.csv").write_text(scatter_csv(report))
    if wall_clock is not None:
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": round(wall_clock, 3)}) + "\n")
