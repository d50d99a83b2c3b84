"""
Artifact files: CSV tables, the binary basis format and the full-solution cache.

Basis file layout (little endian): 4-byte magic ``RBVD``, uint32 version,
uint32 number of full dofs, uint32 number of columns, then the columns as
float64 in column-major order.
"""

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .control import active_measure, control_from_adjoint
from .solver import OCPSolution, solve_full

__all__ = ["write_csv", "read_csv", "write_basis", "read_basis", "SolutionCache",
           "BASIS_MAGIC", "BASIS_VERSION", "fmt"]

BASIS_MAGIC = b"RBVD"
BASIS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def fmt(value):
    """Scalars as CSV text; floats in scientific notation with 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.16e}"
    return str(value)


def write_csv(path, header, rows):
    """Write rows (sequences matching `header`) as comma separated text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_basis(path, basis):
    basis = np.asarray(basis, dtype="<f8")
    n, N = basis.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, n, N))
        fh.write(np.asfortranarray(basis).tobytes(order="F"))


def read_basis(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated basis file")
    magic, version, n, N = _HEADER.unpack_from(data)
    if magic != BASIS_MAGIC:
        raise ValueError(f"{path}: not a basis file")
    if version != BASIS_VERSION:
        raise ValueError(f"{path}: unsupported basis version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n * N:
        raise ValueError(f"{path}: expected {n * N} values, found {body.size}")
    return body.reshape((n, N), order="F").astype(float)


class SolutionCache:
    """
    Disk cache of full-order solutions.

    Keys hash the problem identity, mesh sizes, the exact parameter bits and
    the Newton tolerance, so a changed setting never reads an old entry.
    Only y and p are stored; the control is rebuilt from p.
    """

    def __init__(self, directory, ocp, problem_kwargs, opts):
        self.dir = Path(directory)
        self.ocp = ocp
        self.opts = opts
        self.identity = {"problem": ocp.name,
                         "kwargs": {k: repr(v) for k, v in sorted(problem_kwargs.items())},
                         "n": int(ocp.n), "newton_tol": float(opts.newton_tol).hex()}
        self.hits = 0
        self.misses = 0

    def key(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        blob = json.dumps({**self.identity, "mu": [float(m).hex() for m in mu]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def path(self, mu):
        return self.dir / f"{self.key(mu)}.npz"

    def _from_arrays(self, mu, y, p, iterations):
        u = control_from_adjoint(self.ocp, mu, p)
        weights = self.ocp.triangle_weights(mu)
        return OCPSolution(y, p, u, int(iterations), active_measure(u, weights), True)

    def load(self, mu):
        path = self.path(mu)
        if not path.exists():
            return None
        try:
            with np.load(path) as data:
                if str(data["key"]) != self.key(mu):
                    return None
                return self._from_arrays(mu, data["y"], data["p"], data["iterations"])
        except (OSError, KeyError, ValueError):
            return None

    def __call__(self, mu):
        sol = self.load(mu)
        if sol is not None:
            self.hits += 1
            return sol
        self.misses += 1
        sol = solve_full(self.ocp, mu, self.opts)
        if sol.converged:
            self.dir.mkdir(parents=True, exist_ok=True)
            tmp = self.path(mu).with_suffix(".tmp.npz")
            np.savez(tmp, y=sol.y, p=sol.p, iterations=sol.iterations, key=self.key(mu))
            tmp.replace(self.path(mu))
        return sol
