"""Line-delimited training metrics and their CSV/plot export."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .const import METRIC_COMPONENTS  # noqa: E402

_LOGGER = logging.getLogger(__name__)


class MetricsLogger:
    """Write one JSON record per training step to a file.

    A fresh run truncates the file. When resuming from ``resume_step`` the
    records up to that step are kept and later ones, left behind by the run
    that was interrupted, are dropped. With ``path=None`` records are only
    kept in memory.
    """

    def __init__(self, path: str | Path | None = None, resume_step: int | None = None) -> None:
        """Initialize the logger."""
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        self._handle = None
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[dict[str, Any]] = []
        if resume_step is not None and self.path.exists():
            kept = [r for r in read_metrics(self.path) if r.get("step", 0) <= resume_step]
            _LOGGER.info("Resuming %s after step %d (%d records kept)", self.path, resume_step, len(kept))
        self._handle = open(self.path, "w", encoding="utf-8")
        for record in kept:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._handle.flush()

    def log(self, record: Mapping[str, Any]) -> None:
        """Record one step."""
        record = dict(record)
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")
            self._handle.flush()

    def close(self) -> None:
        """Close the underlying file."""
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> MetricsLogger:
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    """Read a metrics log; blank lines are ignored."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records


def _columns(records: Iterable[Mapping[str, Any]]) -> list[str]:
    keys: set[str] = set()
    for record in records:
        keys.update(record)
    head = [k for k in ("step", "domain", *METRIC_COMPONENTS, "total") if k in keys]
    return head + sorted(keys - set(head))


def export_metrics(log: str | Path, out_dir: str | Path) -> list[Path]:
    """Write ``metrics.csv`` and one PNG per logged component; return the paths."""
    records = read_metrics(log)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = _columns(records)
    written = [out_dir / "metrics.csv"]
    with open(written[0], "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record)

    for name in columns:
        if name in ("step", "domain"):
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        domains = sorted({r.get("domain", "") for r in records if name in r})
        for domain in domains:
            points = [(r["step"], r[name]) for r in records if name in r and r.get("domain", "") == domain]
            if points:
                steps, values = zip(*points)
                ax.plot(steps, values, label=domain or name, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        if len(domains) > 1:
            ax.legend()
        fig.tight_layout()
        target = out_dir / f"{name}.png"
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)
    _LOGGER.info("Exported %d records to %s", len(records), out_dir)
    return written
