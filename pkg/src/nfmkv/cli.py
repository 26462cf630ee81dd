"""``nfmkv`` command line: solve | reference | metrics | probe.

Exit codes: 0 success, 2 input error, 3 runtime or training failure.

RunConfig (JSON object, unknown keys rejected)::

    problem         required; traffic | crowd2d | crowd50d | obstacle | half_terminal
    problem_params  overrides layered on the desk problem settings
                    (sigma, N, T, mu0, x_T, lam_obs, target_x1, d depending on the tag)
    train           TrainConfig fields layered on the desk training settings
    seed            integer, default 0 (``--seed`` wins)
    out             output directory, default runs/<problem> (``--out`` wins)
    export_paths    trajectories written to trajectories.csv, default 500
    metric_samples  samples per marginal for W1 and cost estimates, default 512
    density_cells   snapshot mesh cells per axis, default 64 (256 on the ring)
    reference_J     FD cells for the traffic error report, default 128; null skips it
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .diffcore import InvalidInputError
from .experiments import DESK_CONFIGS, PROBLEM_TAGS, make_problem
from .flows import marginal_views
from .metrics import (
    MetricsReport,
    consecutive_wdist,
    density_integral,
    kinematic_bound,
    projected_density_2d,
    realized_cost,
    report_table,
)
from .probes import PROBES
from .reference import PicardDivergenceError, log_error, solve_traffic_fd
from .rng import Stream
from .sde import TimeGrid, gen_wiener, simulate_forward
from .trainer import CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3

DENSITY_HEADER = ["step", "t", "x0", "x1", "density"]
SERIES_HEADER = ["step", "t", "log_integral", "wdist"]


class InputError(Exception):
    """Bad command-line input or configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    problem: str
    problem_params: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    export_paths: int = 500
    metric_samples: int = 512
    density_cells: int | None = None
    reference_J: int | None = 128

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        if not isinstance(data, dict):
            raise InputError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config fields: {unknown}")
        if "problem" not in data:
            raise InputError("config field 'problem' is required")
        cfg = cls(**data)
        if cfg.problem not in PROBLEM_TAGS:
            raise InputError(f"problem: unknown tag {cfg.problem!r}; choose from {list(PROBLEM_TAGS)}")
        for name in ("problem_params", "train"):
            if not isinstance(getattr(cfg, name), dict):
                raise InputError(f"{name}: expected an object")
        for name in ("export_paths", "metric_samples"):
            if not isinstance(getattr(cfg, name), int) or getattr(cfg, name) < 1:
                raise InputError(f"{name}: expected a positive integer")
        if cfg.reference_J is not None and (not isinstance(cfg.reference_J, int) or cfg.reference_J < 16):
            raise InputError("reference_J: expected an integer >= 16 or null")
        if not isinstance(cfg.seed, int):
            raise InputError("seed: expected an integer")
        return cfg

    def resolve(self):
        """Problem instance and TrainConfig after layering overrides on the desk settings."""
        desk = DESK_CONFIGS[self.problem]
        try:
            problem = make_problem(self.problem, {**desk["problem"], **self.problem_params})
        except (InvalidInputError, TypeError, KeyError, ValueError) as exc:
            raise InputError(f"problem_params: {exc}") from exc
        try:
            train_cfg = TrainConfig.from_dict({**desk["train"], **self.train, "seed": self.seed})
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise InputError(f"train: {exc}") from exc
        return problem, train_cfg


# ---------------------------------------------------------------------------
# artifact helpers


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def write_manifest(out: Path, command: str, config, seed) -> None:
    """First artifact of every run: config echo, seed, version and wall-clock."""
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(out / "manifest.json", {
        "tool": "nfmkv",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "threads": int(os.environ.get("NFMKV_THREADS", "1") or 1),
        "wall_clock": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })


def _fmt(v: float) -> str:
    return repr(float(v))


def _density_box(flow, stream, cells):
    """Common 2-D mesh for all steps: the union of mean +- 4 std boxes of flow samples."""
    with torch.no_grad():
        path = flow.sample_path(2048, stream)
    lo = np.min([p.numpy()[:, :2].mean(0) - 4 * p.numpy()[:, :2].std(0) for p in path], 0)
    hi = np.max([p.numpy()[:, :2].mean(0) + 4 * p.numpy()[:, :2].std(0) for p in path], 0)
    return [np.linspace(lo[j], hi[j], cells) for j in range(2)], path


# samples behind each projected (d > 2) density estimate
PROJECTION_SAMPLES = 10_000


def write_density_csv(path: Path, flow, grid: TimeGrid, seed: int, cells: int | None) -> None:
    """Rows ``step,t,x0[,x1],density`` at every step.

    Ring and 2-D problems evaluate the flow density on a mesh; higher
    dimensions use the projected histogram of the first two coordinates.
    """
    d = flow.base.d
    stream = Stream(seed, "density-snapshot")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if d == 1:
            cells = cells or 256
            w.writerow(["step", "t", "x0", "density"])
            x = torch.arange(cells, dtype=torch.float64)[:, None] / cells
            if flow.domain != "ring":
                with torch.no_grad():
                    s = torch.cat(flow.sample_path(2048, stream)).numpy()
                x = torch.as_tensor(np.linspace(s.min(), s.max(), cells))[:, None]
            for n in range(grid.N + 1):
                with torch.no_grad():
                    dens = flow.logprob_at_step(n, x).exp().numpy()
                for xi, di in zip(x[:, 0].numpy(), dens):
                    w.writerow([n, _fmt(grid.t(n)), _fmt(xi), _fmt(di)])
            return
        cells = cells or 64
        axes, path_samples = _density_box(flow, stream, cells)
        w.writerow(DENSITY_HEADER)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
        for n in range(grid.N + 1):
            if d == 2:
                with torch.no_grad():
                    dens = flow.logprob_at_step(n, torch.as_tensor(mesh)).exp().numpy()
            else:
                step = [np.append(a, 2 * a[-1] - a[-2]) - 0.5 * (a[1] - a[0]) for a in axes]
                hist = projected_density_2d(path_samples[n].numpy(), bins=cells,
                                            box=([step[0][0], step[1][0]], [step[0][-1], step[1][-1]]))
                dens = hist["density"].reshape(-1)
            for (x0, x1), di in zip(mesh, dens):
                w.writerow([n, _fmt(grid.t(n)), _fmt(x0), _fmt(x1), _fmt(di)])


def write_trajectory_csv(path: Path, flow, grid: TimeGrid, m: int, seed: int) -> None:
    """Rows ``sample,step,t,x0..x{d-1}`` for ``m`` flow trajectories."""
    with torch.no_grad():
        traj = torch.stack(flow.sample_path(m, Stream(seed, "export-paths")), 1).numpy()
    d = traj.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "step", "t", *[f"x{j}" for j in range(d)]])
        for i in range(m):
            for n in range(grid.N + 1):
                w.writerow([i, n, _fmt(grid.t(n)), *map(_fmt, traj[i, n])])


def load_table(path) -> dict:
    """Read an nfmkv CSV artifact back, checking its header against the known schemas."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if header[:3] == ["sample", "step", "t"] and all(h == f"x{j}" for j, h in enumerate(header[3:])):
        kind = "trajectory"
    elif header in (["step", "t", "x0", "density"], DENSITY_HEADER):
        kind = "density"
    elif header == SERIES_HEADER:
        kind = "series"
    else:
        raise InputError(f"{path}: unrecognised header {header}")
    try:
        data = np.array([[float(v) if v != "" else math.nan for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric cell ({exc})") from exc
    if body and data.shape[1] != len(header):
        raise InputError(f"{path}: ragged rows")
    return {"kind": kind, "header": header, "data": data.reshape(-1, len(header))}


# ---------------------------------------------------------------------------
# metrics


def compute_metrics(problem, flow, valuenets, cfg: TrainConfig, seed: int, m: int = 512, run_id: str = "run",
                    reference_J: int | None = 128) -> MetricsReport:
    grid = problem.grid
    d = problem.d
    root = Stream(seed, "metrics")
    if d <= 2:
        log_int = [density_integral(flow, n, stream=root.child("quad", n))["log_gap"] for n in range(grid.N + 1)]
    else:
        with torch.no_grad():
            path = flow.sample_path(PROJECTION_SAMPLES, root.child("projected"))
        log_int = [projected_density_2d(x.numpy())["log_gap"] for x in path]
    wd = consecutive_wdist(flow, m, root.child("wdist"))
    views = marginal_views(flow, cfg.M_mu, root.child("mu"))
    with torch.no_grad():
        traj = simulate_forward(problem, None, valuenets, gen_wiener(grid, m, d, seed, counter=("metrics",)),
                                views=views)
        xT_flow = flow.sample_at_step(grid.N, 4096, root.child("terminal")).numpy()
    xT_sim = traj.states[:, -1].numpy()
    v_max = float(traj.controls.norm(dim=-1).max())
    bound = kinematic_bound(v_max, grid.dt, problem.sigma)
    extra = {
        "flow_terminal_mean": xT_flow.mean(0)[:2].tolist(),
        "flow_terminal_std": xT_flow.std(0)[:2].tolist(),
        "sim_terminal_mean": xT_sim.mean(0)[:2].tolist(),
        "sim_terminal_std": xT_sim.std(0)[:2].tolist(),
        "v_max": v_max,
        "kinematic_bound": bound,
        "kinematic_violations": int((wd > bound).sum()),
    }
    if problem.tag == "traffic" and reference_J:
        ref = solve_traffic_fd(reference_J, grid, problem.sigma, problem.mu0)

        def mu_net(x, n):
            with torch.no_grad():
                return flow.logprob_at_step(n, torch.as_tensor(x)[:, None]).exp().numpy()

        err = log_error(mu_net, ref)
        extra["log_error_max"] = err["max"]
        extra["log_error_mean"] = err["mean"]
        extra["log_error_by_step"] = err["eps"].max(1).tolist()
        with torch.no_grad():
            x = torch.arange(512, dtype=torch.float64)[:, None] / 512
            extra["terminal_sup_dev"] = float((flow.logprob_at_step(grid.N, x).exp() - 1.0).abs().max())
    return MetricsReport(run_id, problem.tag, [float(v) for v in log_int], wd.tolist(),
                         realized_cost(problem, traj, views), extra)


def _write_metrics(out: Path, report: MetricsReport, grid: TimeGrid) -> None:
    _json_dump(out / "metrics.json", report.to_dict())
    report.write_series_csv(out / "metrics_series.csv", grid)


# ---------------------------------------------------------------------------
# subcommands


def _read_config(path) -> tuple[RunConfig, dict]:
    if path is None:
        raise InputError("--config is required")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(raw), raw


def cmd_solve(args) -> int:
    cfg, raw = _read_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    problem, train_cfg = cfg.resolve()
    resume = None
    if args.checkpoint:
        try:
            resume = load_checkpoint(args.checkpoint)
        except (CheckpointError, OSError) as exc:
            raise InputError(f"checkpoint: {exc}") from exc
    out = Path(args.out or cfg.out or f"runs/{cfg.problem}")
    write_manifest(out, "solve", raw, cfg.seed)
    Path(out / "config.json").write_text(Path(args.config).read_text())
    ckpt = out / "checkpoint.json"
    try:
        flow, valuenets, report = train(problem, train_cfg, state=resume, checkpoint_path=ckpt)
    except TrainingError as exc:
        print(f"training failed: {exc}; checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(ckpt, report.state)
    _json_dump(out / "train_report.json", report.to_dict(with_timings=False))
    _json_dump(out / "timings.json", report.timings)
    write_density_csv(out / "density.csv", flow, problem.grid, cfg.seed, cfg.density_cells)
    write_trajectory_csv(out / "trajectories.csv", flow, problem.grid, cfg.export_paths, cfg.seed)
    metrics = compute_metrics(problem, flow, valuenets, train_cfg, cfg.seed, cfg.metric_samples,
                              run_id=f"{cfg.problem}-seed{cfg.seed}", reference_J=cfg.reference_J)
    _write_metrics(out, metrics, problem.grid)
    print(report_table([metrics])["text"])
    return EXIT_OK


def _parse_mu0(text):
    if text is None:
        return None
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"--mu0: invalid JSON ({exc.msg})") from exc
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InputError("--mu0: expected an object with a 'kind' field")
    return spec


def cmd_reference(args) -> int:
    if args.J < 16:
        raise InputError(f"--J: must be at least 16 (got {args.J})")
    if args.sigma <= 0 or args.N < 1:
        raise InputError("--sigma must be positive and --N at least 1")
    spec = _parse_mu0(args.mu0)
    grid = TimeGrid(args.T, args.N)
    try:
        problem = make_problem("traffic", {"sigma": args.sigma, "N": args.N, "T": args.T, "mu0": spec})
    except (InvalidInputError, KeyError, TypeError) as exc:
        raise InputError(f"--mu0: {exc}") from exc
    out = Path(args.out or "runs/reference")
    echo = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    write_manifest(out, "reference", echo, None)
    try:
        sol = solve_traffic_fd(args.J, grid, args.sigma, problem.mu0, picard_tol=args.picard_tol)
    except PicardDivergenceError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    with open(out / "reference_density.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "x0", "density"])
        for n in range(grid.N + 1):
            for xj, mu in zip(sol.x, sol.density[n]):
                w.writerow([n, _fmt(grid.t(n)), _fmt(xj), _fmt(mu)])
    summary = {"J": sol.J, "picard_iterations": len(sol.residuals), "picard_residual": sol.picard_residual,
               "max_mass_error": float(np.abs(sol.mass() - 1.0).max()),
               "terminal_sup_dev": float(np.abs(sol.density[-1] - 1.0).max())}
    _json_dump(out / "reference_summary.json", summary)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_metrics(args) -> int:
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    try:
        state = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise InputError(f"{args.checkpoint}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from exc
    out = Path(args.out or Path(args.checkpoint).parent)
    seed = state.config.seed if args.seed is None else args.seed
    write_manifest(out, "metrics", {"checkpoint": str(args.checkpoint)}, seed)
    report = compute_metrics(state.problem, state.flow, state.valuenets, state.config, seed,
                             run_id=Path(args.checkpoint).parent.name or "run")
    if args.trajectories:
        table = load_table(args.trajectories)
        if table["kind"] != "trajectory":
            raise InputError(f"{args.trajectories}: not a trajectory CSV")
        report.extra["trajectory_summary"] = trajectory_summary(table, state.problem)
    _write_metrics(out, report, state.problem.grid)
    if args.table:
        print(report_table([report])["text"])
    else:
        print(report.to_json())
    return EXIT_OK


def trajectory_summary(table: dict, problem) -> dict:
    data = table["data"]
    xs = data[:, 3:]
    steps = data[:, 1].astype(int)
    last = xs[steps == steps.max()]
    out = {"points": int(xs.shape[0]), "terminal_mean": last.mean(0)[:2].tolist(),
           "terminal_std": last.std(0)[:2].tolist()}
    obstacle = getattr(problem, "obstacle", None)
    if obstacle:
        dist = np.linalg.norm(xs[:, :2] - np.asarray(obstacle["center"]), axis=1)
        out["inside_obstacle_fraction"] = float((dist < obstacle["radius"]).mean())
    return out


def cmd_probe(args) -> int:
    report = PROBES[args.kind](args.seed)
    text = json.dumps(report, indent=1, default=_jsonable)
    if args.out:
        out = Path(args.out)
        write_manifest(out, f"probe {args.kind}", {"kind": args.kind}, args.seed)
        (out / f"probe_{args.kind}.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["pass"] else EXIT_RUNTIME


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nfmkv", description="Normalizing-flow solver for mean-field games.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="train on a RunConfig and export artifacts")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint", help="resume from this checkpoint")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("reference", help="finite-difference traffic reference")
    r.add_argument("--J", type=int, default=128)
    r.add_argument("--sigma", type=float, default=0.5)
    r.add_argument("--N", type=int, default=50)
    r.add_argument("--T", type=float, default=1.0)
    r.add_argument("--mu0", help='JSON density spec, e.g. {"kind": "sine_ring", "amplitude": 0.5, "k": 1}')
    r.add_argument("--picard-tol", dest="picard_tol", type=float, default=1e-7)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reference)

    m = sub.add_parser("metrics", help="metric report for a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out")
    m.add_argument("--seed", type=int)
    m.add_argument("--table", action="store_true", help="print the summary table")
    m.add_argument("--trajectories", help="trajectory CSV to summarise alongside")
    m.set_defaults(func=cmd_metrics)

    q = sub.add_parser("probe", help="convergence and consistency probes")
    q.add_argument("kind", choices=sorted(PROBES))
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
