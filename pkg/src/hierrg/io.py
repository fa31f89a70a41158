"""Output helpers: deterministic CSV/JSON writers and the provenance record."""

import csv
import json
import math
import os
import platform
import sys

import numpy as np


def fmt(x):
    """17 significant digits, enough to round-trip a double."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer))
                        and not isinstance(v, bool) else v for v in row])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def provenance(config, timings, version, threads):
    import numba
    import scipy
    return {
        "version": version,
        "config": config,
        "seed": config.get("seed"),
        "threads": threads,
        "timings_seconds": timings,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
        "pid": os.getpid(),
    }
