"""Task scoring, worst-decile aggregation, attention histograms and ablation grids."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Benchmark, make_eval_suite
from .errors import ContractError, SamplerError
from .methods import run_task


def worst_decile(scores: Sequence[float]) -> float:
    """Mean of the lowest floor(n/10) scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 10:
        raise ContractError(f"worst decile needs at least 10 scores, got {s.size}")
    k = s.size // 10
    return float(np.sort(s, kind="stable")[:k].mean())


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


@dataclass
class EvalReport:
    method: str
    seed: int
    suite: str
    accuracies: list
    times_ms: list
    average: float = 0.0
    worst_decile: float = 0.0

    def __post_init__(self):
        if self.accuracies:
            self.average = float(np.mean(self.accuracies))
            self.worst_decile = worst_decile(self.accuracies) if len(self.accuracies) >= 10 \
                else float(np.min(self.accuracies))

    def summary(self) -> dict:
        return {"method": self.method, "seed": self.seed, "suite": self.suite,
                "tasks": len(self.accuracies), "average": round(self.average, 4),
                "worst_decile": round(self.worst_decile, 4),
                "median_ms": float(np.median(self.times_ms)) if self.times_ms else None}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("task_id", "method", "accuracy", "time_ms"))
            for i, (a, t) in enumerate(zip(self.accuracies, self.times_ms)):
                w.writerow((i, self.method, f"{a:.4f}", f"{t:.4f}"))


def evaluate_model(method, model, suite, seed: int = 0, suite_name: str = "",
                   records: Optional[list] = None, threads: int = 1,
                   **task_kwargs) -> EvalReport:
    """Score one model on every task of ``suite``.

    With ``threads > 1`` tasks run concurrently; results are still folded in
    task order, so the report does not depend on the thread count.
    """
    if callable(method):
        # a bare ``fn(model, episode) -> TaskResult`` stands in for a registered method
        name = getattr(method, "__name__", "custom")
        one = lambda ep: method(model, ep)
    else:
        name = method if isinstance(method, str) else method.name
        one = lambda ep: run_task(method, model, ep, **task_kwargs)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, suite))
    else:
        results = [one(ep) for ep in suite]
    accs, times = [], []
    for ep, res in zip(suite, results):
        accs.append(accuracy(res.logits, ep.query_labels))
        times.append(res.elapsed_ms)
        if records is not None and res.record is not None:
            records.append(res.record)
    return EvalReport(name, seed, suite_name, accs, times)


def evaluate(method, models: Mapping[int, object], suite, suite_name: str = "",
             **task_kwargs) -> list:
    """One report per seed; ``models`` maps each seed to the model trained with it."""
    return [evaluate_model(method, m, suite, seed, suite_name, **task_kwargs)
            for seed, m in models.items()]


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (Bessel-corrected std / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def fmt_pm(values: Sequence[float]) -> str:
    m, s = mean_sem(values)
    return f"{m:.1f} ± {s:.1f}"


def results_table(reports_by_method: Mapping[str, Sequence[EvalReport]]) -> list[dict]:
    rows = []
    for method, reports in reports_by_method.items():
        rows.append({"method": method,
                     "W10%": fmt_pm([r.worst_decile for r in reports]),
                     "Avg": fmt_pm([r.average for r in reports])})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = list(rows[0]) if rows else ["method", "W10%", "Avg"]
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    line = lambda vals: "  ".join(str(v).ljust(w) for v, w in zip(vals, widths))
    return "\n".join([line(cols)] + [line([r[c] for c in cols]) for r in rows])


# ---------------------------------------------------------------- attention analysis


@dataclass
class AttentionHistogram:
    edges: np.ndarray
    density_same: np.ndarray
    density_diff: np.ndarray
    count_same: int
    count_diff: int
    mean_same: float
    mean_diff: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin_lo", "bin_hi", "density_same", "density_diff"))
            for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.density_same,
                                    self.density_diff):
                w.writerow((f"{lo:.8g}", f"{hi:.8g}", f"{a:.8g}", f"{b:.8g}"))


def _density(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return np.zeros(len(edges) - 1)
    counts, _ = np.histogram(values, bins=edges)
    return counts / (values.size * np.diff(edges))


def attention_histogram(records: Sequence, bins: int = 50) -> AttentionHistogram:
    """Pool weights over tasks, heads and queries, split by same/different domain."""
    if not records:
        raise ContractError("attention_histogram needs at least one record")
    same, diff = [], []
    for rec in records:
        if rec.same_domain is None:
            raise ContractError("attention records lack same-domain flags")
        w = rec.weights
        flags = np.broadcast_to(rec.same_domain, w.shape)
        same.append(w[flags])
        diff.append(w[~flags])
    same, diff = np.concatenate(same), np.concatenate(diff)
    top = max(same.max(initial=0.0), diff.max(initial=0.0))
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    return AttentionHistogram(edges, _density(same, edges), _density(diff, edges),
                              int(same.size), int(diff.size),
                              float(same.mean()) if same.size else float("nan"),
                              float(diff.mean()) if diff.size else float("nan"))


# ---------------------------------------------------------------- ablations

DOMAIN_VALUES = (1, 2, 5, 10, 20)
SIZE_VALUES = (10, 20, 50, 100, 200, 500)


@dataclass
class AblationCell:
    axis: str
    value: int
    n_domains: int
    per_domain: int
    average: Optional[float] = None
    worst_decile: Optional[float] = None
    error: str = ""


def ablation_grid(method, model, bench: Benchmark, domains: Sequence[int], axis: str,
                  values: Sequence[int], num_tasks: int = 100, seed: int = 0,
                  default_domains: int = 5, default_size: int = 100, n_query: int = 20,
                  **task_kwargs) -> list[AblationCell]:
    """Re-evaluate a fixed checkpoint on suites resampled at each axis value.

    ``axis="domains"`` keeps the support size at ``default_size`` and splits it
    evenly across the domain count; ``axis="support_size"`` keeps
    ``default_domains`` domains.  A cell whose shape the sampler rejects gets
    an error message and the grid continues.
    """
    if axis not in ("domains", "support_size"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    cells = []
    for v in values:
        nd, size = (v, default_size) if axis == "domains" else (default_domains, v)
        cell = AblationCell(axis, int(v), nd, size // nd if nd else 0)
        try:
            if nd < 1 or size % nd:
                raise SamplerError(f"support size {size} not divisible by {nd} domains")
            suite = make_eval_suite(bench, domains, num_tasks, seed, nd, size // nd, n_query)
            rep = evaluate_model(method, model, suite, seed, f"{axis}={v}", **task_kwargs)
            cell.average, cell.worst_decile = rep.average, rep.worst_decile
        except (SamplerError, ContractError) as exc:
            cell.error = str(exc)
        cells.append(cell)
    return cells


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))
