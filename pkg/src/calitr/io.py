"""Canonical serialization of artifacts with provenance headers.

JSON is written with sorted keys, fixed separators and every float rounded
to 12 significant digits, so identical inputs give byte-identical files.
Delimited text files carry the same provenance as a leading ``#`` line.
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import __version__

SIGNIFICANT_DIGITS = 12


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canon(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{SIGNIFICANT_DIGITS}g}")
    return obj


def canonical_json(obj):
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True) + "\n"


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode("ascii")).hexdigest()[:16]


def provenance(seed, config):
    return {"tool": "calitr", "version": __version__, "seed": seed,
            "config_hash": config_hash(config)}


def write_json(path, payload, seed, config):
    """Write ``payload`` with a ``provenance`` entry added."""
    body = dict(payload)
    body["provenance"] = provenance(seed, config)
    Path(path).write_text(canonical_json(body), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if not math.isfinite(v) else f"{float(v):.{SIGNIFICANT_DIGITS}g}"
    return str(v)


def write_table(path, header, rows, seed, config, delimiter=","):
    """Delimited table preceded by a ``#`` provenance line."""
    prov = provenance(seed, config)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n")
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_table(path, delimiter=","):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines, delimiter=delimiter)
    header = next(reader)
    return header, [row for row in reader]
