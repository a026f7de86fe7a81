"""Per-step run records and deterministic CSV/JSON emission."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


@dataclass
class RunRecord:
    name: str
    columns: tuple[str, ...]
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(values)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([fmt(v) for v in r])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def emit(records, out_dir, cfg=None, extra: dict | None = None) -> list[Path]:
    """Write one CSV per record plus ``manifest.json``; returns the written paths.

    The manifest echoes the config and its content hash, the column order of
    every CSV, per-run summaries and anything in ``extra`` (e.g. timings).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = []
    files = {}
    for rec in records:
        p = out / f"{rec.name}.csv"
        try:
            rec.write_csv(p)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        paths.append(p)
        files[p.name] = {"columns": list(rec.columns), "rows": len(rec), "summary": rec.summary}
    manifest = {"files": files}
    if cfg is not None:
        manifest["config"] = cfg.to_dict()
        manifest["config_hash"] = cfg.digest()
        manifest["seed"] = cfg.seed
    if extra:
        manifest.update(extra)
    mp = out / "manifest.json"
    tmp = mp.with_suffix(".json.tmp")
    with open(tmp, "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, mp)
    paths.append(mp)
    return paths
