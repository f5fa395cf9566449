"""Random Poincare map sampling and its discretized kernel.

The chart box of the section is cut into a uniform grid.  Row ``i`` of the
kernel is estimated by launching one-return legs from the center of cell
``i`` and binning the return points; legs killed by a domain exit go to a
separate kill column.  Leg ``s`` of row ``i`` draws its noise from stream
``(i, s)`` of the seed, so rows can be built in any order or in parallel.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _backend, _rng
from .errors import EmptyRow, Timeout
from .sde import KILLED, NONFINITE, OK, TIMEOUT, BISECTION_FRACTION, CrossingChain, simulate_legs

FORMAT_NAME = "randpoincare-kernel"
FORMAT_VERSION = 1
CHAIN_STREAM = (1 << 64) - 2
ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on the box ``[lo, hi]`` with ``shape`` cells.

    Cells are numbered in C order.
    """

    lo: tuple
    hi: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        object.__setattr__(self, "shape", tuple(int(v) for v in np.atleast_1d(self.shape)))
        if not (len(self.lo) == len(self.hi) == len(self.shape)):
            raise ValueError("lo, hi and shape must have the same length")
        if any(h <= l for l, h in zip(self.lo, self.hi)) or any(s < 1 for s in self.shape):
            raise ValueError("empty grid")

    @classmethod
    def uniform(cls, lo, hi, shape):
        return cls(lo, hi, shape)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def widths(self):
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.shape)

    @property
    def volume(self):
        return float(np.prod(self.widths))

    def centers(self):
        """Cell centers, shape ``(size, dim)``."""
        axes = [l + (np.arange(s) + 0.5) * w
                for l, s, w in zip(self.lo, self.shape, self.widths)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.dim)

    def locate(self, x):
        """Cell index of each point; points outside the box go to the nearest cell."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.floor((x - np.array(self.lo)) / self.widths).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def edge_distance(self):
        """Distance, in cells, of each cell from the grid boundary."""
        idx = np.stack(np.unravel_index(np.arange(self.size), self.shape), -1)
        return np.min(np.minimum(idx, np.array(self.shape) - 1 - idx), axis=1)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "shape": list(self.shape)}


@dataclass
class DiscretizedKernel:
    """Ulam-type estimate of the random Poincare map.

    Attributes
    ----------
    grid : Grid
    matrix : ndarray, shape (n, n)
        ``matrix[a, b]`` is the probability of going from cell ``cells[a]``
        to cell ``cells[b]``.
    kill_column : ndarray, shape (n,)
        Mass sent to the cemetery; ``matrix`` rows plus ``kill_column`` sum
        to one.
    sample_counts : ndarray of int
        Usable samples per row (zero for derived kernels).
    sigma : float
    cells : ndarray of int
        Global cell labels of the rows and columns.
    metadata : dict
    """

    grid: Grid
    matrix: np.ndarray
    kill_column: np.ndarray
    sample_counts: np.ndarray
    sigma: float
    cells: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError("kernel matrix must be square")
        self.kill_column = (np.zeros(n) if self.kill_column is None
                            else np.asarray(self.kill_column, dtype=float))
        self.sample_counts = (np.zeros(n, dtype=np.int64) if self.sample_counts is None
                              else np.asarray(self.sample_counts, dtype=np.int64))
        self.cells = (np.arange(n) if self.cells is None
                      else np.asarray(self.cells, dtype=np.int64))
        if len(self.cells) != n:
            raise ValueError("cells must label every row")

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def killed(self):
        """True when some mass goes to the cemetery."""
        return bool(np.any(self.kill_column > 0))

    def positions(self, labels):
        """Row positions of global cell ``labels``; raises if one is absent."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        order = np.argsort(self.cells)
        pos = np.searchsorted(self.cells, labels, sorter=order)
        pos = np.clip(pos, 0, self.size - 1)
        found = order[pos]
        if np.any(self.cells[found] != labels):
            raise KeyError("cell labels not present in this kernel")
        return found

    def centers(self):
        return self.grid.centers()[self.cells]

    def derived(self, matrix, cells, kill_column=None, **meta):
        """Kernel on a subset of cells sharing this kernel's grid and sigma."""
        matrix = np.asarray(matrix, dtype=float)
        if kill_column is None:
            kill_column = 1.0 - matrix.sum(axis=1)
            # row-sum roundoff is not killing
            kill_column[kill_column <= ROW_SUM_TOL] = 0.0
        return DiscretizedKernel(self.grid, matrix, kill_column, None, self.sigma,
                                 np.asarray(cells), dict(self.metadata, **meta))


def _simulate(model, x0, keys, dt, max_time, tol):
    core = _backend.compiled_for(model)
    if core is None:
        return simulate_legs(model, x0, keys, dt, max_time, tol)
    s = model.spec
    x, t, st = core.radial_legs(
        np.ascontiguousarray(x0[:, 0], dtype=float), np.ascontiguousarray(keys),
        np.asarray(s["roots"], dtype=float), s["omega"], model.sigma, s["theta_noise"],
        dt, max_time, s["r_min"], s["r_max"], model.confinement == "killed", tol)
    return x[:, None], t, st


def sample_chain(model, x0, steps, dt, seed, max_time=100.0):
    """Simulate ``steps`` successive returns of the random Poincare map.

    Leg ``n`` starts on Sigma at ``X_n`` with fresh noise from stream ``n``.
    A killed leg ends the chain and sets ``killed_at``.

    Raises
    ------
    Timeout
        If a leg does not return within ``max_time``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    keys = _rng.stream_keys(seed, np.arange(steps), CHAIN_STREAM)
    tol = dt * BISECTION_FRACTION
    core = _backend.compiled_for(model)
    if core is not None:
        s = model.spec
        pts, durs, last = core.radial_chain(
            float(x0[0]), keys, np.asarray(s["roots"], dtype=float), s["omega"], model.sigma,
            s["theta_noise"], dt, max_time, s["r_min"], s["r_max"],
            model.confinement == "killed", tol)
        pts = pts[:, None]
        if last != OK:
            pts = pts[:-1]
    else:
        pts, durs, last = [x0], [], OK
        for n in range(steps):
            x, t, st = simulate_legs(model, pts[-1][None, :], keys[n:n + 1], dt, max_time, tol)
            durs.append(t[0])
            last = int(st[0])
            if last != OK:
                break
            pts.append(x[0])
        pts, durs = np.array(pts), np.array(durs)
    if last == TIMEOUT:
        raise Timeout(f"leg {len(pts) - 1} did not return within {max_time}")
    if last == NONFINITE:
        raise Timeout(f"leg {len(pts) - 1} produced a non-finite state")
    times = np.concatenate([[0.0], np.cumsum(durs)])[: len(pts)]
    killed_at = len(pts) if last == KILLED else None
    return CrossingChain(pts, times, killed_at)


def build_kernel(model, grid, samples_per_cell=1000, dt=0.01, seed=0, max_time=100.0,
                 min_row_samples=None, threads=1, rows_per_task=8):
    """Estimate the kernel of the random Poincare map on ``grid``.

    Parameters
    ----------
    model : SdeModel
    grid : Grid
        Grid of the primary section's chart box.
    samples_per_cell : int
        Legs per row, at least 100.
    dt : float
        Euler-Maruyama step.
    seed : int
    max_time : float
        Legs longer than this are discarded as timeouts.
    min_row_samples : int, optional
        Rows with fewer usable legs raise :class:`EmptyRow`; defaults to
        ``min(1000, samples_per_cell) // 2``.
    threads : int
        Worker threads; the compiled core releases the GIL.

    Returns
    -------
    DiscretizedKernel
    """
    if samples_per_cell < 100:
        raise ValueError("samples_per_cell must be at least 100")
    if grid.dim != model.chart_dim:
        raise ValueError("grid dimension does not match the section chart")
    if min_row_samples is None:
        min_row_samples = min(1000, samples_per_cell) // 2
    n = grid.size
    centers = grid.centers()
    tol = dt * BISECTION_FRACTION
    counts = np.zeros((n, n))
    kills = np.zeros(n)
    usable = np.zeros(n, dtype=np.int64)
    timeouts = np.zeros(n, dtype=np.int64)

    def run(rows):
        keys = _rng.stream_keys(seed, np.repeat(rows, samples_per_cell),
                                np.tile(np.arange(samples_per_cell), len(rows)))
        x0 = np.repeat(centers[rows], samples_per_cell, axis=0)
        x, _, st = _simulate(model, x0, keys, dt, max_time, tol)
        return rows, x, st

    tasks = [np.arange(a, min(a + rows_per_task, n)) for a in range(0, n, rows_per_task)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    for rows, x, st in results:
        owner = np.repeat(rows, samples_per_cell)
        ok = st == OK
        np.add.at(counts, (owner[ok], grid.locate(x[ok])), 1.0)
        kills += np.bincount(owner[st == KILLED], minlength=n)
        usable += np.bincount(owner[(st == OK) | (st == KILLED)], minlength=n)
        timeouts += np.bincount(owner[(st == TIMEOUT) | (st == NONFINITE)], minlength=n)
    if np.any(usable < min_row_samples):
        bad = np.flatnonzero(usable < min_row_samples)
        raise EmptyRow(f"rows {bad.tolist()[:10]} have fewer than {min_row_samples} usable samples")
    matrix = counts / usable[:, None]
    kill = kills / usable
    meta = {"model": model.spec, "dt": dt, "seed": int(seed),
            "samples_per_cell": int(samples_per_cell), "max_time": max_time,
            "timeouts": int(timeouts.sum())}
    return DiscretizedKernel(grid, matrix, kill, usable, model.sigma, None, meta)


def iterate_kernel(K, n):
    """``n``-step kernel; killed mass accumulates in the kill column."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    m = K.size
    aug = np.zeros((m + 1, m + 1))
    aug[:m, :m] = K.matrix
    aug[:m, m] = K.kill_column
    aug[m, m] = 1.0
    p = np.linalg.matrix_power(aug, n)
    out = K.derived(p[:m, :m], K.cells, p[:m, m], steps=n)
    out.sample_counts = K.sample_counts.copy()
    return out


# ---------------------------------------------------------------------------
# persistence


def kernel_to_dict(K):
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "grid": K.grid.to_dict(),
        "sigma": K.sigma,
        "cells": K.cells.tolist(),
        "matrix": K.matrix.tolist(),
        "kill_column": K.kill_column.tolist(),
        "sample_counts": K.sample_counts.tolist(),
        "metadata": K.metadata,
    }


def kernel_from_dict(d):
    if d.get("format") != FORMAT_NAME:
        raise ValueError("not a kernel file")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported kernel format version {d.get('version')}")
    g = d["grid"]
    return DiscretizedKernel(Grid(g["lo"], g["hi"], g["shape"]), np.array(d["matrix"]),
                             np.array(d["kill_column"]), np.array(d["sample_counts"]),
                             float(d["sigma"]), np.array(d["cells"]), d.get("metadata", {}))


def save_kernel(K, path):
    """Write ``K`` as a JSON document.

    Layout: ``format``, ``version``, ``grid`` (``lo``, ``hi``, ``shape``),
    ``sigma``, ``cells``, ``matrix`` (list of rows), ``kill_column``,
    ``sample_counts`` and ``metadata``.  Floats are written with round-trip
    precision, so loading gives back the same matrix bit for bit.
    """
    with open(path, "w") as fh:
        json.dump(kernel_to_dict(K), fh, indent=None, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def load_kernel(path):
    with open(path) as fh:
        return kernel_from_dict(json.load(fh))


def write_kernel_csv(K, path):
    """Row-major CSV: ``cell, center_0.., p_<cell>.., kill`` with a header row."""
    centers = K.centers()
    header = (["cell"] + [f"center_{i}" for i in range(centers.shape[1])]
              + [f"p_{c}" for c in K.cells] + ["kill"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, c in enumerate(K.cells):
            w.writerow([int(c)] + [repr(float(v)) for v in centers[a]]
                       + [repr(float(v)) for v in K.matrix[a]] + [repr(float(K.kill_column[a]))])
