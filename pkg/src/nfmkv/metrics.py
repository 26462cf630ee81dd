"""Post-training diagnostics: density mass, marginal drift, realized cost, report tables."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .diffcore import InvalidInputError
from .flows import TimeIndexedFlow
from .rng import Stream

LOG_FLOOR = -16.0
MAX_MATCHING = 2048
COVERAGE_TOL = 1e-6


class CoverageWarning(UserWarning):
    """The quadrature mesh does not cover the density's mass."""


def _log_gap(value: float) -> float:
    gap = abs(value - 1.0)
    return LOG_FLOOR if gap == 0 else max(math.log10(gap), LOG_FLOOR)


def _box(samples: np.ndarray, width: float = 6.0):
    mean, std = samples.mean(0), samples.std(0)
    std = np.where(std > 0, std, 1.0)
    return mean - width * std, mean + width * std


def density_integral(flow: TimeIndexedFlow, n: int, cells: int | None = None, stream: Stream | None = None,
                     box=None) -> dict:
    """Trapezoid quadrature of the step-``n`` density over a covering mesh (d = 1 or 2).

    The ring uses its natural periodic mesh.  Euclidean meshes span a 6-sigma
    box around flow samples unless ``box`` = (lo, hi) is given; a density
    above ``COVERAGE_TOL`` on the mesh boundary triggers :class:`CoverageWarning`.
    """
    d = flow.base.d
    if d > 2:
        raise InvalidInputError("density_integral supports d <= 2; use projected_density_2d")
    stream = stream or Stream(0, "quadrature")
    with torch.no_grad():
        if flow.domain == "ring":
            cells = cells or 512
            x = torch.arange(cells, dtype=torch.float64) / cells
            p = flow.logprob_at_step(n, x.reshape(-1, 1)).exp().numpy()
            # periodic trapezoid rule: all nodes weighted equally
            total = float(p.sum() / cells)
            return {"step": n, "integral": total, "log_gap": _log_gap(total), "covered": True}
        if box is None:
            box = _box(flow.sample_at_step(n, 2048, stream).numpy())
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in box)
        cells = cells or (512 if d == 1 else 200)
        axes = [np.linspace(lo[j], hi[j], cells + 1) for j in range(d)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        p = flow.logprob_at_step(n, torch.as_tensor(mesh)).exp().numpy().reshape((cells + 1,) * d)
    total = p
    for j in reversed(range(d)):
        total = np.trapezoid(total, axes[j], axis=j)
    total = float(total)
    edge = [np.take(p, [0, -1], axis=j).max() for j in range(d)]
    covered = max(edge) <= COVERAGE_TOL
    if not covered:
        warnings.warn(f"step {n}: density {max(edge):.2e} on the mesh boundary", CoverageWarning, stacklevel=2)
    return {"step": n, "integral": total, "log_gap": _log_gap(total), "covered": covered}


def projected_density_2d(source, n: int | None = None, m: int = 10_000, bins: int = 64, smooth: float = 1.0,
                         box=None, stream: Stream | None = None) -> dict:
    """Histogram density of the first two coordinates on a 6-sigma box, plus a smoothed copy.

    ``source`` is either a flow (``m`` >= 1e4 samples are drawn at step ``n``)
    or an (M, d) sample array.  The reported integral is the quadrature of the
    smoothed histogram, so only mass pushed past the box edge by smoothing (or
    samples outside the box) is lost.
    """
    if isinstance(source, TimeIndexedFlow):
        if source.d <= 2:
            raise InvalidInputError("projection is for d > 2; use density_integral")
        if m < 10_000:
            raise InvalidInputError("projected density needs at least 1e4 samples")
        with torch.no_grad():
            x = source.sample_at_step(source.n_steps if n is None else n, m,
                                      stream or Stream(0, "projection")).numpy()
    else:
        x = np.asarray(source, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidInputError("need samples shaped (M, d) with d >= 2")
    xy = x[:, :2]
    lo, hi = _box(xy) if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
    counts, ex, ey = np.histogram2d(xy[:, 0], xy[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    area = (ex[1] - ex[0]) * (ey[1] - ey[0])
    raw = counts / (xy.shape[0] * area)
    smoothed = gaussian_filter(raw, smooth, mode="constant") if smooth > 0 else raw
    total = float(smoothed.sum() * area)
    return {"edges": (ex, ey), "counts": counts, "raw": raw, "density": smoothed, "integral": total,
            "log_gap": _log_gap(total)}


def wasserstein(a, b) -> float:
    """Exact W1 between two equal-size empirical measures.

    Sorting gives the answer in one dimension; otherwise an optimal
    assignment on the Euclidean cost matrix.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise InvalidInputError(f"sample sets differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] > MAX_MATCHING:
        raise InvalidInputError(f"at most {MAX_MATCHING} samples per set")
    if a.shape[1] == 1:
        return float(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0])).mean())
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def ring_wasserstein(a, b) -> float:
    """Exact W1 on the unit circle between equal-size samples.

    W1 = min_c  integral |F_a - F_b - c|, attained at the length-weighted
    median c of the piecewise-constant CDF difference.
    """
    a = np.mod(np.asarray(a, dtype=float).reshape(-1), 1.0)
    b = np.mod(np.asarray(b, dtype=float).reshape(-1), 1.0)
    if a.shape != b.shape:
        raise InvalidInputError("sample sets differ in size")
    pts = np.concatenate([a, b])
    order = np.argsort(pts, kind="stable")
    pts = pts[order]
    jumps = np.concatenate([np.ones(a.size), -np.ones(b.size)])[order] / a.size
    diff = np.cumsum(jumps)  # value on [pts[i], pts[i+1])
    lengths = np.diff(np.append(pts, pts[0] + 1.0))
    idx = np.argsort(diff, kind="stable")
    cum = np.cumsum(lengths[idx])
    c = diff[idx][np.searchsorted(cum, 0.5 * cum[-1])]
    return float(np.sum(np.abs(diff - c) * lengths))


def consecutive_wdist(flow: TimeIndexedFlow, m: int = 512, stream: Stream | None = None) -> np.ndarray:
    """W1 between flow marginals at steps n and n+1, n = 0..N-1.

    Two independent base batches are pushed along the whole flow; pair n
    compares batch A at step n with batch B at step n+1, so the two samples
    in a pair never share base draws.
    """
    stream = stream or Stream(0, "wdist")
    with torch.no_grad():
        pa = [x.numpy() for x in flow.sample_path(m, stream.child("a"))]
        pb = [x.numpy() for x in flow.sample_path(m, stream.child("b"))]
    dist = ring_wasserstein if flow.domain == "ring" else wasserstein
    return np.array([dist(pa[n], pb[n + 1]) for n in range(flow.n_steps)])


def kinematic_bound(v_max: float, dt: float, sigma: float) -> float:
    """Largest W1 step compatible with speed ``v_max`` plus a 3-sigma diffusion allowance."""
    return v_max * dt + 3.0 * sigma * math.sqrt(dt)


def realized_cost(problem, traj, views) -> float:
    """Monte-Carlo cost of the simulated policy: running cost on the left-point rule plus g(X_T)."""
    X, controls = traj.states, traj.controls
    dt = problem.grid.dt
    with torch.no_grad():
        total = torch.zeros(X.shape[0], dtype=X.dtype)
        for n in range(problem.grid.N):
            total = total + problem.f(problem.grid.t(n), X[:, n], views[n], controls[:, n]) * dt
        total = total + problem.g(X[:, -1], views[-1])
    return float(total.mean())


@dataclass
class MetricsReport:
    run_id: str
    problem: str
    log_integral: list
    wdist: list
    realized_cost: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_log_integral(self) -> float:
        return float(np.mean(self.log_integral)) if self.log_integral else float("nan")

    @property
    def mean_wdist(self) -> float:
        return float(np.mean(self.wdist))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mean_log_integral"] = self.mean_log_integral
        out["mean_wdist"] = self.mean_wdist
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, default=float)

    def write_series_csv(self, path, grid) -> None:
        """Rows ``step,t,log_integral,wdist``; wdist at step n is the (n, n+1) pair."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "log_integral", "wdist"])
            for n in range(grid.N + 1):
                li = self.log_integral[n] if n < len(self.log_integral) else ""
                wd = self.wdist[n] if n < len(self.wdist) else ""
                w.writerow([n, repr(grid.t(n)), li, wd])


def report_table(reports) -> dict:
    """Summary rows (one per run) as a structured dict and as aligned text."""
    rows = [{"run": r.run_id, "problem": r.problem, "log_integral": r.mean_log_integral,
             "wdist": r.mean_wdist, "cost": r.realized_cost} for r in reports]
    header = f"{'run':<20} {'problem':<14} {'log|int-1|':>11} {'W1 step':>9} {'cost':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        cost = "" if row["cost"] is None else f"{row['cost']:.4g}"
        lines.append(f"{row['run']:<20} {row['problem']:<14} {row['log_integral']:>11.3f} "
                     f"{row['wdist']:>9.4f} {cost:>10}")
    return {"rows": rows, "text": "\n".join(lines)}


__all__ = [
    "CoverageWarning",
    "MetricsReport",
    "consecutive_wdist",
    "density_integral",
    "kinematic_bound",
    "projected_density_2d",
    "realized_cost",
    "report_table",
    "ring_wasserstein",
    "wasserstein",
]
