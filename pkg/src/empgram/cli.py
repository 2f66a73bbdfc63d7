"""Benchmark runner: state, parameter and combined reduction experiments.

Every experiment writes one CSV of :class:`ResultRow` records plus a
columnar ``.dat`` file (one line per network size, one column per method)
that plotting tools can read directly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gramian as gr
from .invert import (InverseProblem, network_prior, prior_perturbation, invert,
                     relative_l2_error)
from .model import make_hyperbolic_network, make_linear_network
from .reduce import (balanced_pod, balanced_truncation, combined_reduce, reduce_parameters,
                     reduce_state, svd_truncate)
from .sim import InputSignal, SolverSpec, integrate, make_truth_data

__all__ = [
    "ExperimentConfig",
    "ResultRow",
    "CSV_HEADER",
    "benchmark_input",
    "run_state_experiment",
    "run_param_experiment",
    "run_combined_experiment",
    "run_effectivity",
    "run_verify",
    "write_rows",
    "read_rows",
    "main",
]

log = logging.getLogger(__name__)

CSV_HEADER = ["experiment", "method", "model", "n", "p", "r", "q", "sample",
              "offline_s", "online_s", "rel_l2_error"]
EXPERIMENTS = ("state", "param", "combined", "effectivity")
DEFAULT_SIZES = ((16, 4), (25, 5))
FULL_SIZES = ((16, 4), (25, 5), (36, 6), (49, 7), (64, 8))
STATE_METHODS = ("balanced_pod", "balanced_truncation", "direct_truncation")
PARAM_METHODS = ("W_S", "W_I", "W_Idd")
COMBINED_VARIANTS = ("controllability", "observability", "joint")


@dataclass
class ExperimentConfig:
    experiment: str = "state"
    model_kind: str = "linear"
    sizes: tuple = DEFAULT_SIZES
    samples: int = 10
    seed: int = 0
    solver: SolverSpec = field(default_factory=SolverSpec)
    input_kind: str = "impulse"
    galerkin: bool = True
    a_seq: tuple = (1.0,)
    r: int | None = None
    q: int | None = None
    budget_factor: int = 200
    generator: str = "dominant"
    output_dir: str = "results"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.model_kind not in ("linear", "hyperbolic"):
            raise ValueError(f"unknown model {self.model_kind!r}")
        self.sizes = tuple((int(n), int(m)) for n, m in self.sizes)
        if not self.sizes:
            raise ValueError("sizes must be nonempty")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if isinstance(self.solver, dict):
            self.solver = SolverSpec(**self.solver)
        self.a_seq = tuple(self.a_seq)

    def to_json(self) -> str:
        d = asdict(self)
        d["sizes"] = [list(s) for s in self.sizes]
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ResultRow:
    """One CSV record. A failed sample carries NaN times and error."""

    experiment: str
    method: str
    model: str
    n: int
    p: int
    r: int
    q: int
    sample: int
    offline_s: float
    online_s: float
    rel_l2_error: float

    @property
    def failed(self) -> bool:
        return math.isnan(self.rel_l2_error)


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in
                        (getattr(row, k) for k in CSV_HEADER)])


def read_rows(path) -> list[ResultRow]:
    types = {f.name: f.type for f in fields(ResultRow)}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for rec in reader:
            vals = {}
            for k, v in rec.items():
                t = types[k]
                vals[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
            rows.append(ResultRow(**vals))
    return rows


def benchmark_input(m: int, kind: str = "impulse") -> InputSignal:
    """Unit pulse (or unit step) on every input channel."""
    return InputSignal(kind, np.ones(m) / np.sqrt(m), float(np.sqrt(m)))


def _model(config, n, m, seed):
    maker = make_linear_network if config.model_kind == "linear" else make_hyperbolic_network
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return maker(n, m, seed, generator=config.generator)


def _nan_row(experiment, method, config, n, p, r, q, sample):
    return ResultRow(experiment, method, config.model_kind, n, p, r, q, sample,
                     math.nan, math.nan, math.nan)


def _seeds(config):
    for n, m in config.sizes:
        for sample in range(config.samples):
            yield n, m, sample, config.seed + 1000 * n + sample


def _state_projection(method, system, pert, spec, theta, r, galerkin):
    if method == "balanced_pod":
        return balanced_pod(system, pert, spec, theta, r)
    if method == "balanced_truncation":
        wc = gr.empirical_controllability(system, pert, spec, theta)
        wo = gr.empirical_observability(system, pert, spec, theta)
        return balanced_truncation(wc.matrix, wo.matrix, r)
    wx = gr.empirical_cross(system, pert, spec, theta)
    return svd_truncate(wx.matrix, r=r, galerkin=galerkin)


def run_state_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Reduce the state only (``r = m`` unless overridden) with balanced POD,
    balanced truncation and direct truncation of the cross gramian."""
    spec = config.solver
    pert = gr.PerturbationConfig(input_kind="impulse")
    rows = []
    for n, m, sample, seed in _seeds(config):
        system, theta = _model(config, n, m, seed)
        u = benchmark_input(m, config.input_kind)
        r = min(config.r or m, n)
        t0 = time.perf_counter()
        y = integrate(system, u, system.x_bar, theta, spec)
        full_online = time.perf_counter() - t0
        rows.append(ResultRow("state", "full", config.model_kind, n, system.p, n, system.p,
                              sample, 0.0, full_online, 0.0))
        for method in STATE_METHODS:
            try:
                t0 = time.perf_counter()
                proj = _state_projection(method, system, pert, spec, theta, r, config.galerkin)
                offline = time.perf_counter() - t0
                red = reduce_state(system, proj, theta).system
                t0 = time.perf_counter()
                yr = integrate(red, u, red.x_bar, red.theta, spec)
                online = time.perf_counter() - t0
                err = relative_l2_error(y, yr)
                rows.append(ResultRow("state", method, config.model_kind, n, system.p, proj.r,
                                      system.p, sample, offline, online, err))
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("state %s n=%d sample=%d failed: %s", method, n, sample, exc)
                rows.append(_nan_row("state", method, config, n, system.p, r, system.p, sample))
    return rows


def _inverse_setup(config, n, m, seed):
    spec = config.solver
    system, theta = _model(config, n, m, seed)
    u = benchmark_input(m, config.input_kind)
    data = make_truth_data(system, u, system.x_bar, theta, spec)
    prior = network_prior(n)
    pert = prior_perturbation(prior, config.a_seq, excitation=u)
    return system, u, data, prior, pert


def _problem(config, system, data, prior, u, n_free):
    return InverseProblem(system, data, prior, u, config.solver,
                          budget=config.budget_factor * max(n_free, 1))


def _full_row(experiment, config, system, data, prior, u, n, sample):
    est = invert(_problem(config, system, data, prior, u, system.n_free))
    err = relative_l2_error(data, est.output)
    return ResultRow(experiment, "full", config.model_kind, n, system.p, n, system.p, sample,
                     0.0, est.wall_time, err)


def param_gramian(method, system, pert, spec, theta):
    """Parameter gramian ``W_S``, ``W_I`` or ``W_Idd`` at ``theta``."""
    if method == "W_S":
        return gr.empirical_sensitivity(system, pert, spec, theta)[0]
    if method == "W_I":
        return gr.empirical_identifiability(system, pert, spec, theta)[0]
    if method == "W_Idd":
        return gr.empirical_joint(system, pert, spec, theta)[1]
    raise ValueError(f"unknown parameter method {method!r}")


def run_param_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Parameter reduction (``q = m**2`` unless overridden) followed by a
    reduced-space inversion, against a full-space inversion baseline."""
    spec = config.solver
    rows = []
    for n, m, sample, seed in _seeds(config):
        system, u, data, prior, pert = _inverse_setup(config, n, m, seed)
        q = min(config.q or m * m, system.p)
        rows.append(_full_row("param", config, system, data, prior, u, n, sample))
        for method in PARAM_METHODS:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    t0 = time.perf_counter()
                    W = param_gramian(method, system, pert, spec, prior.mean)
                    model, proj, _ = reduce_parameters(system, W, q, prior.mean, prior)
                    offline = time.perf_counter() - t0
                est = invert(_problem(config, system, data, prior, u, q), model)
                err = relative_l2_error(data, est.output)
                rows.append(ResultRow("param", method, config.model_kind, n, system.p, n, q,
                                      sample, offline, est.wall_time, err))
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("param %s n=%d sample=%d failed: %s", method, n, sample, exc)
                rows.append(_nan_row("param", method, config, n, system.p, n, q, sample))
    return rows


def run_combined_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Combined state and parameter reduction (``r = m``, ``q = m**2``)
    followed by a reduced inversion, against a full-space baseline."""
    spec = config.solver
    rows = []
    for n, m, sample, seed in _seeds(config):
        system, u, data, prior, pert = _inverse_setup(config, n, m, seed)
        r = min(config.r or m, n)
        q = min(config.q or m * m, system.p)
        rows.append(_full_row("combined", config, system, data, prior, u, n, sample))
        for variant in COMBINED_VARIANTS:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    t0 = time.perf_counter()
                    model = combined_reduce(system, prior.mean, prior, variant, r, q, pert, spec,
                                            galerkin=config.galerkin)
                    offline = time.perf_counter() - t0
                est = invert(_problem(config, system, data, prior, u, q), model)
                err = relative_l2_error(data, est.output)
                rows.append(ResultRow("combined", variant, config.model_kind, n, system.p,
                                      model.state_proj.r, q, sample, offline, est.wall_time, err))
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("combined %s n=%d sample=%d failed: %s", variant, n, sample, exc)
                rows.append(_nan_row("combined", variant, config, n, system.p, r, q, sample))
    return rows


def effectivity_summary(rows) -> dict:
    """Per method: mean of ``(offline + online) / full online`` and of
    ``error / full error`` over all samples and sizes."""
    full = {(r.n, r.sample): r for r in rows if r.method == "full"}
    acc = {}
    for r in rows:
        base = full.get((r.n, r.sample))
        if base is None or r.failed or base.failed:
            continue
        t = (r.offline_s + r.online_s) / base.online_s
        e = r.rel_l2_error / base.rel_l2_error if base.rel_l2_error > 0 else math.nan
        acc.setdefault(r.method, []).append((t, e))
    return {k: tuple(float(np.mean(c)) for c in zip(*v)) for k, v in acc.items()}


def run_effectivity(config: ExperimentConfig):
    """Combined-reduction runs normalized by the full-order inversion."""
    rows = run_combined_experiment(replace(config, experiment="combined"))
    for r in rows:
        r.experiment = "effectivity"
    return rows, effectivity_summary(rows)


def _mean_by(rows, key):
    out = {}
    for r in rows:
        if not r.failed:
            out.setdefault((r.n, r.method), []).append(getattr(r, key))
    return {k: float(np.mean(v)) for k, v in out.items()}


def write_plot_data(rows, path, key="rel_l2_error") -> None:
    """Columnar text: state dimension, then the mean of ``key`` per method."""
    means = _mean_by(rows, key)
    methods = sorted({m for _, m in means}, key=lambda s: (s != "full", s))
    sizes = sorted({n for n, _ in means})
    with open(path, "w") as fh:
        fh.write("# n " + " ".join(methods) + "\n")
        for n in sizes:
            vals = [means.get((n, meth), math.nan) for meth in methods]
            fh.write(f"{n} " + " ".join(f"{v:.6e}" for v in vals) + "\n")


def run_verify(seed: int = 0, out=None) -> bool:
    """Quick oracle checks on random symmetric systems; True when all pass."""
    out = sys.stdout if out is None else out
    rng = np.random.default_rng(seed)
    spec = SolverSpec(dt=0.01, T=5.0)
    ok = True

    def report(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}", file=out)

    for n, m in ((2, 1), (4, 2)):
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        A = Q @ np.diag(-rng.uniform(0.5, 2.0, n)) @ Q.T
        B = rng.standard_normal((n, m))
        C = B.T
        lhs, rhs = gr.trace_gain_check(A, B, C)
        report(f"trace identity n={n}", abs(lhs - rhs) <= 1e-8 * max(1, abs(rhs)),
               f"{lhs:.10f} vs {rhs:.10f}")
        W = gr.lyapunov_oracle(A, B @ B.T)
        res = np.linalg.norm(A @ W + W @ A.T + B @ B.T) / np.linalg.norm(B @ B.T)
        report(f"lyapunov residual n={n}", res <= 1e-10, f"{res:.2e}")
        from .model import linear_system
        sysl = linear_system(A, B, C)
        wx = gr.empirical_cross(sysl, gr.PerturbationConfig(), spec).matrix
        ref = gr.sylvester_oracle(A, B, C)
        rel = np.linalg.norm(wx - ref) / np.linalg.norm(ref)
        report(f"empirical cross gramian n={n}", rel <= 0.05, f"relative error {rel:.2e}")
    return ok


def _parse_sizes(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            n, m = item.split(":")
        else:
            n = item
            m = round(math.sqrt(int(n)))
        out.append((int(n), int(m)))
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="empgram", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--model", choices=("linear", "hyperbolic"))
        p.add_argument("--sizes", help="comma list of n or n:m, e.g. 16,25 or 16:4")
        p.add_argument("--samples", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--full-scale", action="store_true", help="use n = 16 ... 64")
        p.add_argument("--step-input", action="store_true", help="step instead of impulse input")
        p.add_argument("--petrov-galerkin", action="store_true",
                       help="direct truncation with the right singular vectors as test basis")
        p.add_argument("--rich-scales", action="store_true",
                       help="prior scale factors 0.25, 0.5, 0.75, 1")
        p.add_argument("-r", type=int, dest="r", help="reduced state order")
        p.add_argument("-q", type=int, dest="q", help="reduced parameter count")
    v = sub.add_parser("verify", help="run the oracle checks")
    v.add_argument("--seed", type=int, default=0)
    return ap


def config_from_args(args) -> ExperimentConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    base["experiment"] = args.command
    if args.full_scale:
        base["sizes"] = FULL_SIZES
    overrides = {
        "model_kind": args.model,
        "sizes": _parse_sizes(args.sizes) if args.sizes else None,
        "samples": args.samples,
        "seed": args.seed,
        "output_dir": args.out,
        "r": args.r,
        "q": args.q,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.step_input:
        base["input_kind"] = "step"
    if args.petrov_galerkin:
        base["galerkin"] = False
    if args.rich_scales:
        base["a_seq"] = (0.25, 0.5, 0.75, 1.0)
    return ExperimentConfig.from_dict(base)


RUNNERS = {
    "state": run_state_experiment,
    "param": run_param_experiment,
    "combined": run_combined_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "verify":
        return 0 if run_verify(args.seed) else 1
    config = config_from_args(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{config.experiment}_{config.model_kind}"
    summary = None
    if config.experiment == "effectivity":
        rows, summary = run_effectivity(config)
    else:
        rows = RUNNERS[config.experiment](config)
    rows.sort(key=lambda r: (r.n, r.sample, r.method))
    write_rows(rows, out / f"{stem}.csv")
    write_plot_data(rows, out / f"{stem}_error.dat", "rel_l2_error")
    write_plot_data(rows, out / f"{stem}_offline.dat", "offline_s")
    write_plot_data(rows, out / f"{stem}_online.dat", "online_s")
    (out / f"{stem}_config.json").write_text(config.to_json())
    if summary is not None:
        with open(out / f"{stem}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "normalized_time", "normalized_error"])
            for k in sorted(summary):
                w.writerow([k, repr(summary[k][0]), repr(summary[k][1])])
        with open(out / f"{stem}_scatter.dat", "w") as fh:
            fh.write("# normalized_time normalized_error method\n")
            for k in sorted(summary):
                fh.write(f"{summary[k][0]:.6e} {summary[k][1]:.6e} {k}\n")
        for k in sorted(summary):
            print(f"{k:16s} time {summary[k][0]:.3f}  error {summary[k][1]:.3f}")
    failed = sum(r.failed for r in rows)
    print(f"wrote {len(rows)} rows ({failed} failed) to {out / (stem + '.csv')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
