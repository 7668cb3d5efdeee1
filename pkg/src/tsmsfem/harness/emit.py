"""CSV/JSON writers, the hashed manifest and staged output directories.

Files are written into a staging directory and moved into place only after
the whole experiment succeeded, so a failed run leaves no partial results.
Wall times live in ``timings.json``, which the manifest lists as volatile:
every other file is bit-identical across reruns of the same configuration.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .. import __version__

CONVERGENCE_HEADER = ("abscissa", "l2_error", "h1_error")
LOCALIZATION_HEADER = ("t", "A_t")
VOLATILE = ("timings.json",)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, np.array([[float(v) for v in row] for row in r])


def write_convergence_csv(path, rows) -> Path:
    return write_csv(path, CONVERGENCE_HEADER,
                     [(r.abscissa, r.errors["L2"], r.errors["H1"]) for r in rows])


def write_density_csv(path, nodes: np.ndarray, density: np.ndarray, name: str = "expected_density") -> Path:
    nodes = np.atleast_2d(nodes)
    cols = ("x",) if nodes.shape[1] == 1 else ("x", "y")
    return write_csv(path, cols + (name,), np.column_stack([nodes, density]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def results_payload(config, results: dict) -> dict:
    echo = config.echo()
    # the worker count never changes results, so it is kept out of the hashed files
    echo["experiment"].pop("workers", None)
    return {"metadata": {"version": __version__, "kind": config.kind, "config": echo},
            "results": results}


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def manifest(directory, names) -> dict:
    d = Path(directory)
    files = {n: sha256(d / n) for n in sorted(names) if n not in VOLATILE}
    return {"version": __version__, "files": files, "volatile": sorted(n for n in names if n in VOLATILE)}


class StagedOutput:
    """Collects files in a private directory; ``commit`` moves them to ``out_dir``."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise PermissionError(f"output directory {self.out_dir} is not writable")
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        self.names: list = []

    def path(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        return self.dir / name

    def commit(self) -> dict:
        man = manifest(self.dir, self.names)
        write_json(self.dir / "manifest.json", man)
        for name in self.names + ["manifest.json"]:
            os.replace(self.dir / name, self.out_dir / name)
        shutil.rmtree(self.dir, ignore_errors=True)
        return man

    def abort(self):
        shutil.rmtree(self.dir, ignore_errors=True)
