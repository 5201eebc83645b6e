"""Metrics persistence: headered CSV streams, a run manifest, a status file.

A stream is written to ``<name>.csv.part`` and renamed to ``<name>.csv``
only when it is closed after a successful run, so an interrupted run never
leaves a file that looks complete. Floats are written with ``repr`` which
round-trips exactly; together with seeded runs this makes the CSV files
byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from pathlib import Path

import numpy as np
import yaml

STATUS_FILE = "status.json"
MANIFEST_FILE = "manifest.yaml"


def build_id(length=12):
    """Hash of the package sources; stands in for a VCS revision."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".cfg") and path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:length]


def record_columns(n_eds, n_rats):
    """Fixed column order of a flattened :class:`EpisodeRecord`."""
    cols = ["episode", "epsilon", "es_reward"]
    cols += [f"rat_reward_{l + 1}" for l in range(n_rats)]
    cols += ["utility", "sum_rate", "policy_utility", "policy_sum_rate"]
    cols += ["c2_violations", "c3_violations", "qos_slots_met", "dqn_loss", "shock"]
    cols += [f"critic_loss_{l + 1}" for l in range(n_rats)]
    cols += [f"ed_rate_{u + 1}" for u in range(n_eds)]
    cols += [f"link_rate_{u + 1}_{l + 1}" for u in range(n_eds) for l in range(n_rats)]
    cols += [f"assign_share_{u + 1}_{l + 1}" for u in range(n_eds) for l in range(n_rats)]
    return cols


META_COLUMNS = ("recipe", "scheme", "seed", "build_id")


def flatten_record(rec):
    row = {
        "episode": rec.episode,
        "epsilon": rec.epsilon,
        "es_reward": rec.es_reward,
        "utility": rec.utility,
        "sum_rate": rec.sum_rate,
        "policy_utility": rec.policy_utility,
        "policy_sum_rate": rec.policy_sum_rate,
        "c2_violations": rec.c2_violations,
        "c3_violations": rec.c3_violations,
        "qos_slots_met": rec.qos_slots_met,
        "dqn_loss": rec.dqn_loss,
        "shock": int(rec.shock),
    }
    for l, v in enumerate(rec.rat_rewards):
        row[f"rat_reward_{l + 1}"] = v
    n_rats = rec.link_rates.shape[1]
    losses = rec.critic_losses if len(rec.critic_losses) else np.zeros(n_rats)
    for l, v in enumerate(losses):
        row[f"critic_loss_{l + 1}"] = v
    for u, v in enumerate(rec.ed_rates):
        row[f"ed_rate_{u + 1}"] = v
    for (u, l), v in np.ndenumerate(rec.link_rates):
        row[f"link_rate_{u + 1}_{l + 1}"] = v
    for (u, l), v in np.ndenumerate(rec.assign_share):
        row[f"assign_share_{u + 1}_{l + 1}"] = v
    return row


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"refusing to write non-finite value {v!r}")
        return repr(v)
    return str(v)


class MetricsWriter:
    """Append-only CSV stream with a fixed header.

    Use as a context manager: a clean exit publishes ``<name>.csv``, an
    exception leaves only the ``.part`` file behind.
    """

    def __init__(self, directory, name, columns, meta=None):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.final_path = self.directory / f"{name}.csv"
        self.part_path = self.directory / f"{name}.csv.part"
        self.meta = dict(meta or {})
        self.columns = [c for c in META_COLUMNS if c in self.meta] + list(columns)
        if self.final_path.exists():
            self.final_path.unlink()
        self._fh = open(self.part_path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()
        self.rows = 0

    def write(self, row):
        full = {**self.meta, **row}
        missing = [c for c in self.columns if c not in full]
        if missing:
            raise KeyError(f"row lacks columns {missing}")
        extra = set(row) - set(self.columns)
        if extra:
            raise KeyError(f"unexpected columns {sorted(extra)}")
        self._writer.writerow([_cell(full[c]) for c in self.columns])
        self._fh.flush()
        self.rows += 1

    def write_record(self, rec):
        self.write(flatten_record(rec))

    def close(self, complete=True):
        if self._fh is None:
            return
        self._fh.close()
        self._fh = None
        if complete:
            os.replace(self.part_path, self.final_path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close(complete=exc_type is None)
        return False


def write_table(directory, name, columns, rows, meta=None):
    """Write a whole table at once through :class:`MetricsWriter`."""
    with MetricsWriter(directory, name, columns, meta) as w:
        for row in rows:
            w.write(row)
    return w.final_path


def write_records(directory, name, records, meta=None):
    if not records:
        raise ValueError("no records to write")
    n_eds, n_rats = records[0].link_rates.shape
    with MetricsWriter(directory, name, record_columns(n_eds, n_rats), meta) as w:
        for rec in records:
            w.write_record(rec)
    return w.final_path


def read_table(path):
    """Rows of a metrics CSV with numeric cells converted to int or float."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append({k: _parse(v) for k, v in row.items()})
    return out


def _parse(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def write_status(directory, status, **details):
    path = Path(directory) / STATUS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"status": status, **details}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def read_status(directory):
    path = Path(directory) / STATUS_FILE
    return json.loads(path.read_text()) if path.exists() else None


def write_manifest(directory, **fields):
    """Run metadata (wall-clock included), kept apart from the metrics."""
    payload = {
        "build_id": build_id(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **fields,
    }
    path = Path(directory) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=False))
    return path
