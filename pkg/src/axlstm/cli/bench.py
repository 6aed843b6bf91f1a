"""Forward-pass timing of the recurrent and parallel mLSTM forms."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from ..mlstm import MLSTMParams, mlstm_parallel, mlstm_recurrent
from ..numcore import Rng, Tensor, no_grad

FORMS = {"recurrent": mlstm_recurrent, "parallel": mlstm_parallel}
EQUIV_TOL = 1e-4


@dataclass
class BenchRow:
    form: str
    L: int
    d: int
    runs: int
    median_s: float
    min_s: float
    equiv_err: float  # normwise ||parallel - recurrent|| / ||recurrent|| at this L


def normwise_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def run_bench(lengths=(125, 250, 500), d: int = 192, runs: int = 20, seed: int = 0) -> list[BenchRow]:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    rng = Rng(seed, "bench")
    p = MLSTMParams.random(d, rng)
    rows = []
    for L in lengths:
        x = Tensor(rng.normal((L, d), 1.0))
        with no_grad():
            outs = {name: fn(x, p).data for name, fn in FORMS.items()}
            err = normwise_error(outs["parallel"], outs["recurrent"])
            for name, fn in FORMS.items():
                times = []
                for _ in range(runs):
                    t0 = time.perf_counter()
                    fn(x, p)
                    times.append(time.perf_counter() - t0)
                rows.append(BenchRow(name, L, d, runs, float(np.median(times)), float(np.min(times)), err))
    return rows


def write_bench_csv(path: str | os.PathLike, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["form", "L", "d", "runs", "median_s", "min_s", "equiv_err"])
        for r in rows:
            w.writerow([r.form, r.L, r.d, r.runs, repr(r.median_s), repr(r.min_s), repr(r.equiv_err)])
