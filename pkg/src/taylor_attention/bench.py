"""Reconstruction-error, scaling and cost-table experiments.

Tokens are drawn i.i.d. standard normal from NumPy's Philox4x32-10
counter-based generator keyed by ``SeedSequence([seed, d])``. Each token
draws ``3 * d`` consecutive normals laid out as query, key, value, so a cell's
tokens are the same for every truncation order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costmodel
from .attention import (
    Tokens,
    attend_scan,
    attend_stream,
    conventional_attention,
    init_state,
)
from .basis import DEFAULT_ELEMENT_BUDGET, build_basis_family, taylor_coefficients
from .exceptions import DomainError

log = logging.getLogger(__name__)

LOG_FLOOR = -16.0
HALF_RESOLUTION = 2.0**-10
SINGLE_RESOLUTION = 2.0**-23

RECON_COLUMNS = ("d", "P", "n", "seed", "precision", "chunk", "tokens_measured",
                 "flagged_tokens", "median_log10_err", "mean_log10_err", "max_log10_err",
                 "median_abs_err")
POSITION_COLUMNS = ("d", "P", "n", "seed", "bucket_start", "bucket_end", "tokens",
                    "flagged_tokens", "median_log10_err", "mean_log10_err", "max_log10_err")
PERF_COLUMNS = ("arm", "d", "P", "n", "chunk", "precision", "runs", "seconds_per_token",
                "state_bytes", "capped", "timing_nondeterministic")
ALPHA_COLUMNS = ("d_k", "scale", "p", "alpha", "half_resolution", "single_resolution",
                 "below_half", "below_single")


@dataclass
class ExperimentConfig:
    head_widths: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    truncation_orders: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    context_length: int = 2048
    seed: int = 0
    precision_mode: str = "double"
    chunk_size: int = 0  # 0 runs the sequential recurrence
    output_path: Path | None = None
    workers: int = 1
    on_degenerate: str = "flag"

    def __post_init__(self):
        if self.context_length < 1:
            raise DomainError("context_length must be >= 1")
        if not self.head_widths or not self.truncation_orders:
            raise DomainError("head_widths and truncation_orders must be nonempty")
        if any(d < 1 for d in self.head_widths) or any(p < 1 for p in self.truncation_orders):
            raise DomainError("widths and truncation orders must be >= 1")
        if self.precision_mode not in ("double", "single"):
            raise DomainError("precision_mode must be 'double' or 'single'")
        if self.chunk_size < 0:
            raise DomainError("chunk_size must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")


def token_generator(seed: int, d: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, d])))


def sample_tokens(n: int, d: int, seed: int) -> Tokens:
    x = token_generator(seed, d).standard_normal((n, 3, d))
    return Tokens(x[:, 0].copy(), x[:, 1].copy(), x[:, 2].copy())


def log10_error(ours: np.ndarray, reference: np.ndarray) -> np.ndarray:
    err = np.abs(ours - reference)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log10(err), LOG_FLOOR)


@dataclass(frozen=True)
class CellStats:
    d: int
    P: int
    tokens_measured: int
    flagged_tokens: int
    median_log10_err: float
    mean_log10_err: float
    max_log10_err: float
    median_abs_err: float


@dataclass(frozen=True)
class BucketStats:
    d: int
    P: int
    bucket_start: int  # 1-based positions, half-open
    bucket_end: int
    tokens: int
    flagged_tokens: int
    median_log10_err: float
    mean_log10_err: float
    max_log10_err: float


@dataclass
class ErrorSummary:
    config: ExperimentConfig
    cells: list[CellStats] = field(default_factory=list)
    buckets: list[BucketStats] = field(default_factory=list)

    def cell(self, d: int, P: int) -> CellStats:
        for c in self.cells:
            if c.d == d and c.P == P:
                return c
        raise KeyError((d, P))


def _run_ours(tokens, family, config):
    if config.chunk_size:
        return attend_scan(tokens, family, config.chunk_size, on_degenerate=config.on_degenerate,
                           precision=config.precision_mode)
    return attend_stream(tokens, family, on_degenerate=config.on_degenerate,
                         precision=config.precision_mode)


def _position_buckets(n):
    # [1, 2), [2, 4), [4, 8), ... clipped to n
    out, start = [], 1
    while start <= n:
        out.append((start, min(2 * start, n + 1)))
        start *= 2
    return out


def _width_job(args):
    d, config = args
    tokens = sample_tokens(config.context_length, d, config.seed)
    reference = conventional_attention(tokens, math.sqrt(d)).outputs
    cells, buckets = [], []
    for P in config.truncation_orders:
        family = build_basis_family(d, P, value_width=d)
        result = _run_ours(tokens, family, config)
        ok = ~result.flagged
        logerr = log10_error(result.outputs[ok], reference[ok])
        abserr = np.abs(result.outputs[ok] - reference[ok])
        if result.flagged.any():
            log.warning("d=%d P=%d: %d tokens with degenerate denominators: %s", d, P,
                        int(result.flagged.sum()), np.flatnonzero(result.flagged)[:20].tolist())
        cells.append(CellStats(
            d, P, int(ok.sum()), int(result.flagged.sum()),
            float(np.median(logerr)), float(np.mean(logerr)), float(np.max(logerr)),
            float(np.median(abserr)),
        ))
        full = np.full(result.outputs.shape, np.nan)
        full[ok] = log10_error(result.outputs[ok], reference[ok])
        for start, end in _position_buckets(config.context_length):
            block = full[start - 1:end - 1]
            flagged = int(result.flagged[start - 1:end - 1].sum())
            vals = block[~np.isnan(block)]
            if vals.size:
                stats = (float(np.median(vals)), float(np.mean(vals)), float(np.max(vals)))
            else:
                stats = (math.nan,) * 3
            buckets.append(BucketStats(d, P, start, end, end - start, flagged, *stats))
    return cells, buckets


def _run_cells(config: ExperimentConfig) -> ErrorSummary:
    jobs = [(d, config) for d in config.head_widths]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_width_job, jobs))
    else:
        results = [_width_job(j) for j in jobs]
    summary = ErrorSummary(config)
    for cells, buckets in results:
        summary.cells.extend(cells)
        summary.buckets.extend(buckets)
    return summary


def _fmt(x):
    return repr(float(x))


def _open_out(path):
    if path is None:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def write_reconstruction_csv(summary: ErrorSummary, stream) -> None:
    c = summary.config
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(RECON_COLUMNS)
    for cell in summary.cells:
        w.writerow([cell.d, cell.P, c.context_length, c.seed, c.precision_mode, c.chunk_size,
                    cell.tokens_measured, cell.flagged_tokens, _fmt(cell.median_log10_err),
                    _fmt(cell.mean_log10_err), _fmt(cell.max_log10_err),
                    _fmt(cell.median_abs_err)])


def write_position_csv(summary: ErrorSummary, stream) -> None:
    c = summary.config
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(POSITION_COLUMNS)
    for b in summary.buckets:
        w.writerow([b.d, b.P, c.context_length, c.seed, b.bucket_start, b.bucket_end, b.tokens,
                    b.flagged_tokens, _fmt(b.median_log10_err), _fmt(b.mean_log10_err),
                    _fmt(b.max_log10_err)])


def run_reconstruction(config: ExperimentConfig) -> ErrorSummary:
    """Elementwise error of our outputs against float64 softmax attention, per (d, P)."""
    summary = _run_cells(config)
    out = _open_out(config.output_path)
    if out is not None:
        with out:
            write_reconstruction_csv(summary, out)
    return summary


def run_error_by_position(config: ExperimentConfig) -> ErrorSummary:
    """As :func:`run_reconstruction`, bucketed by token position ``[2^j, 2^{j+1})``."""
    summary = _run_cells(config)
    out = _open_out(config.output_path)
    if out is not None:
        with out:
            write_position_csv(summary, out)
    return summary


# -- performance -------------------------------------------------------------

@dataclass(frozen=True)
class PerfRow:
    arm: str
    d: int
    P: int
    n: int
    chunk: int
    precision: str
    runs: int
    seconds_per_token: float
    state_bytes: int
    capped: bool


def log_grid(n_min: int, n_max: int, per_decade: int = 2) -> list[int]:
    """Roughly log-spaced integers from ``n_min`` to ``n_max`` inclusive."""
    if n_min < 1 or n_max < n_min:
        raise DomainError("need 1 <= n_min <= n_max")
    lo, hi = math.log10(n_min), math.log10(n_max)
    steps = max(1, round((hi - lo) * per_decade))
    return sorted({int(round(10 ** (lo + (hi - lo) * i / steps))) for i in range(steps + 1)})


def time_ours(d: int, P: int, n: int, *, seed: int = 0, chunk: int = 0,
              precision: str = "double", runs: int = 5, block: int = 65536) -> PerfRow:
    """Median seconds per token for attending to ``n`` tokens, after one warmup.

    One block of tokens is sampled up front and fed repeatedly; the state is
    carried across blocks so memory stays one state plus one block.
    """
    family = build_basis_family(d, P, value_width=d)
    b = min(n, block)
    tokens = sample_tokens(b, d, seed)

    def once():
        state = init_state(family, d)
        done = 0
        while done < n:
            m = min(b, n - done)
            part = Tokens(tokens.queries[:m], tokens.keys[:m], tokens.values[:m])
            if chunk:
                attend_scan(part, family, chunk, on_degenerate="flag", precision=precision,
                            state=state)
            else:
                attend_stream(part, family, on_degenerate="flag", precision=precision, state=state)
            done += m
        return state

    state = once()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        once()
        times.append(time.perf_counter() - t0)
    return PerfRow("ours", d, P, n, chunk, precision, runs, statistics.median(times) / n,
                   state.nbytes, False)


def time_conventional(d: int, n: int, *, seed: int = 0, runs: int = 5,
                      max_n: int | None = None) -> PerfRow:
    """Median seconds per token of the softmax oracle over ``n`` tokens."""
    kv_bytes = n * 2 * d * 8
    if max_n is not None and n > max_n:
        return PerfRow("conventional", d, 0, n, 0, "double", 0, math.nan, kv_bytes, True)
    try:
        tokens = sample_tokens(n, d, seed)
        conventional_attention(tokens, math.sqrt(d))
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            conventional_attention(tokens, math.sqrt(d))
            times.append(time.perf_counter() - t0)
    except MemoryError:
        log.warning("conventional arm out of memory at n=%d", n)
        return PerfRow("conventional", d, 0, n, 0, "double", 0, math.nan, kv_bytes, True)
    return PerfRow("conventional", d, 0, n, 0, "double", runs, statistics.median(times) / n,
                   kv_bytes, False)


def loglog_slope(ns, ts) -> float:
    x, y = np.log10(np.asarray(ns, float)), np.log10(np.asarray(ts, float))
    return float(np.polyfit(x, y, 1)[0])


def machine_metadata() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def write_perf_csv(rows, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(PERF_COLUMNS)
    for r in rows:
        w.writerow([r.arm, r.d, r.P, r.n, r.chunk, r.precision, r.runs,
                    _fmt(r.seconds_per_token), r.state_bytes, int(r.capped), 1])


def run_perf(config: ExperimentConfig, *, n_min: int = 1000, runs: int = 5,
             conventional_max_n: int = 100_000) -> list[PerfRow]:
    """Per-token time and resident state bytes versus context length.

    Timing runs are serial. The CSV carries a ``timing_nondeterministic``
    marker; machine metadata goes to ``<output>.meta.json``.
    """
    grid = log_grid(min(n_min, config.context_length), config.context_length)
    rows = []
    for d in config.head_widths:
        for n in grid:
            for P in config.truncation_orders:
                rows.append(time_ours(d, P, n, seed=config.seed, chunk=config.chunk_size,
                                      precision=config.precision_mode, runs=runs))
            rows.append(time_conventional(d, n, seed=config.seed, runs=runs,
                                          max_n=conventional_max_n))
    out = _open_out(config.output_path)
    if out is not None:
        with out:
            write_perf_csv(rows, out)
        meta = Path(str(config.output_path) + ".meta.json")
        meta.write_text(json.dumps(machine_metadata(), indent=2) + "\n", encoding="utf-8")
    return rows


# -- cost tables -------------------------------------------------------------

def emit_cost_tables(widths, orders, lengths, heads=(1,), stream=None, alpha_stream=None,
                     max_elements: int = DEFAULT_ELEMENT_BUDGET) -> list[costmodel.CostReport]:
    """Cost rows over model width x heads x P x n, plus Taylor weights per degree.

    Per-head widths are ``width // heads``; widths not divisible by a head
    count are skipped. Rows whose per-head state exceeds ``max_elements`` are
    logged, since the CSV schema has no flag column.
    """
    reports = []
    for width in widths:
        for h in heads:
            if width % h:
                continue
            d = width // h
            for P in orders:
                size = costmodel.hidden_state_size_total(d, d, P)
                if size > max_elements:
                    log.warning("d=%d P=%d exceeds element budget (%d > %d)", d, P, size,
                                max_elements)
                for n in lengths:
                    reports.append(costmodel.cost_report(d, d, P, n, h))
    if stream is not None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(costmodel.COST_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())
    if alpha_stream is not None:
        w = csv.writer(alpha_stream, lineterminator="\n")
        w.writerow(ALPHA_COLUMNS)
        for d in sorted({width // h for width in widths for h in heads if width % h == 0}):
            c = math.sqrt(d)
            for p, a in enumerate(taylor_coefficients(max(orders) + 1, c)):
                w.writerow([d, _fmt(c), p, _fmt(a), _fmt(HALF_RESOLUTION), _fmt(SINGLE_RESOLUTION),
                            int(a < HALF_RESOLUTION), int(a < SINGLE_RESOLUTION)])
    return reports
