"""Privacy reports: JSON with a schema, per-sample CSV and plot data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema
import numpy as np

SAMPLE_COLUMNS = ("id", "trace", "spectral", "dfil", "mse_bound", "visits", "attack_mse", "attack_stderr")


def encode_real(x) -> Union[float, str, None]:
    """JSON-safe float: non-finite values become the strings ``inf``, ``-inf``, ``nan``."""
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def decode_real(x) -> Optional[float]:
    return None if x is None else float(x)


@lru_cache(maxsize=None)
def report_schema() -> dict:
    return json.loads(resources.files("reconbound").joinpath("schemas/report.schema.json").read_text())


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, report_schema())


@dataclass
class PrivacyReport:
    """Everything one pipeline run certifies and measures.

    Per-sample FIL values are sensitive: unless ``reveal`` is set, rows are
    sorted by value and stripped of their dataset index.
    """

    mechanism: str
    model: dict
    epsilon2: float
    rdp_policy: str
    dim: int
    kappa: float
    kappa_policy: str
    runs: int
    trace: np.ndarray
    spectral: np.ndarray
    visits: np.ndarray
    rdp_mse_bound: float
    perfect_privacy_mse: float
    fil_meta: dict = field(default_factory=dict)
    attack: Optional[dict] = None
    attack_mse: Optional[np.ndarray] = None
    attack_stderr: Optional[np.ndarray] = None
    config: Optional[dict] = None
    reveal: bool = False

    @property
    def dfil(self) -> np.ndarray:
        return self.trace / self.dim

    @property
    def mse_bound(self) -> np.ndarray:
        safe = np.where(self.trace > 0, self.trace, 1.0)
        return np.where(self.trace > 0, self.dim / safe, np.inf)

    def sample_rows(self) -> list[dict]:
        bound = self.mse_bound
        order = np.arange(self.trace.size)
        if not self.reveal:
            order = np.lexsort((self.trace, bound))
        rows = []
        for i in order:
            row: dict[str, Any] = {}
            if self.reveal:
                row["id"] = int(i)
            row["trace"] = encode_real(self.trace[i])
            row["spectral"] = encode_real(self.spectral[i]) if np.isfinite(self.spectral[i]) else None
            row["dfil"] = encode_real(self.dfil[i])
            row["mse_bound"] = encode_real(bound[i])
            row["visits"] = float(self.visits[i])
            if self.attack_mse is not None:
                row["attack_mse"] = encode_real(self.attack_mse[i])
                row["attack_stderr"] = encode_real(self.attack_stderr[i])
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        bound = self.mse_bound
        doc = {
            "schema_version": 1,
            "mechanism": self.mechanism,
            "redacted": not self.reveal,
            "model": {k: encode_real(v) if isinstance(v, float) else v for k, v in self.model.items()},
            "rdp": {"epsilon2": encode_real(self.epsilon2), "policy": self.rdp_policy},
            "fil": {
                "dim": self.dim,
                "kappa": encode_real(self.kappa),
                "kappa_policy": self.kappa_policy,
                "runs": self.runs,
                **{k: encode_real(v) if isinstance(v, float) else v for k, v in self.fil_meta.items()},
                "samples": self.sample_rows(),
            },
            "bounds": {
                "rdp_mse_bound": encode_real(self.rdp_mse_bound),
                "fil_mse_bound_min": encode_real(bound.min() if bound.size else math.inf),
                "fil_mse_bound_median": encode_real(np.median(bound) if bound.size else math.inf),
                "perfect_privacy_mse": encode_real(self.perfect_privacy_mse),
            },
            "attack": None if self.attack is None else {
                k: encode_real(v) if isinstance(v, float) else v for k, v in self.attack.items()},
        }
        if self.config is not None:
            doc["config"] = self.config
        return doc

    def to_json(self) -> str:
        doc = self.to_dict()
        validate_report(doc)
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, out_dir: Union[str, Path]) -> list[Path]:
        """Write ``report.json``, ``fil_samples.csv`` and ``plot_data.csv``; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "fil_samples.csv", out / "plot_data.csv"]
        paths[0].write_text(self.to_json())
        rows = self.sample_rows()
        with paths[1].open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[c for c in SAMPLE_COLUMNS if not rows or c in rows[0]],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        with paths[2].open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fil_mse_bound", "attack_mse", "attack_stderr"])
            for r in rows:
                writer.writerow([r["mse_bound"], r.get("attack_mse", ""), r.get("attack_stderr", "")])
        return paths


def load_report(path: Union[str, Path]) -> dict:
    doc = json.loads(Path(path).read_text())
    validate_report(doc)
    return doc
