"""Command-line front end: ``cloudshape {forward,invert,speed-demo,diagnose}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import scenario as sc
from .forward import (NoCloudError, add_noise, detect_support, estimate_speed, measure_graph,
                      measure_polar)
from .geometry import GraphCloud, PolarCloud
from .jacobian import (DegenerateGeometryError, StateVector, assemble_graph, assemble_polar,
                       diagnose)
from .radiance import AlphaField, BetaProfile
from .solver import GaugeError, SingularSystemError, fix_gauge, reconstruct, write_history
from .svg import line_chart

log = logging.getLogger("cloudshape")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class Run:
    """Everything a subcommand needs: the scenario, its truth and options."""

    def __init__(self, args):
        doc = sc.apply_preset(sc.load(args.scenario), args.preset)
        self.doc = doc
        self.kind = doc["kind"]
        self.truth = sc.build_truth(doc, args.mirror_sun)
        self.speeds = sc.speeds(doc)
        try:
            self.det = sc.build_detector(doc, self.truth.cloud, self.speeds)
        except ValueError as exc:
            raise sc.ScenarioError(f"/detector: {exc}") from exc
        noise = doc.get("noise", {})
        self.sigma = float(noise.get("sigma", 0.0))
        self.seed = int(args.seed if args.seed is not None else noise.get("seed", 0))
        name = doc.get("name", Path(args.scenario).stem)
        self.out = Path(args.out or doc.get("output") or Path("out") / name)
        self.out.mkdir(parents=True, exist_ok=True)

    def measure(self, lam: float = 1.0):
        t = self.truth
        if self.kind == "graph":
            ms = measure_graph(t.cloud, t.alpha, t.beta, self.det, lam)
        else:
            ms = measure_polar(t.cloud, t.alpha, t.beta, self.det)
        return add_noise(ms, self.sigma, self.seed) if self.sigma > 0 else ms

    def initial_state(self, data, with_speed: bool, lam_true: float = 1.0) -> StateVector:
        init = self.doc.get("initial", {})
        shape = init.get("shape", {"type": "flat" if self.kind == "graph" else "circle"})
        t = self.truth
        if shape["type"] == "truth":
            if not with_speed:
                return StateVector(t.cloud, t.alpha, t.beta)
            lam0 = init.get("speed", "estimate")
            lam0 = lam_true if lam0 == "estimate" else float(lam0)
            return StateVector(t.cloud.stretched(1.0 / lam_true), t.alpha, t.beta, lam0)
        beta = sc.build_beta(init.get("beta", {"type": "limb", "a": 0.3, "P": t.beta.P}))
        a0 = float(init.get("alpha", 1.0))
        if self.kind == "polar":
            N = t.cloud.N
            if shape["type"] == "values":
                radii = np.asarray(shape["values"], dtype=float)
            elif shape["type"] == "circle":
                radii = np.full(N, shape.get("radius", float(np.mean(t.cloud.radii))))
            else:
                raise sc.ScenarioError(f"/initial/shape: {shape['type']!r} is not a polar guess")
            return StateVector(PolarCloud(radii, t.cloud.theta0), AlphaField.constant(a0, radii.size,
                                                                                  sides=False), beta)
        floor = 3 * self.sigma * data.values.max() if self.sigma > 0 else None
        x_L, x_R = detect_support(data, floor=floor)
        h = t.cloud.heights
        N = t.cloud.N
        if shape["type"] == "flat":
            nodes = np.full(N, shape.get("height", float(np.mean(h))))
            nodes[0], nodes[-1] = h[0], h[-1]
        elif shape["type"] == "linear":
            nodes = np.linspace(h[0], h[-1], N)
        elif shape["type"] == "values":
            nodes = np.asarray(shape["values"], dtype=float)
        else:
            raise sc.ScenarioError(f"/initial/shape: {shape['type']!r} is not a graph guess")
        lam = None
        if with_speed:
            lam = init.get("speed", "estimate")
            lam = estimate_speed(data, t.cloud.h_B, floor=floor) if lam == "estimate" else float(lam)
        cloud = GraphCloud(x_L, x_R, t.cloud.h_B, nodes)
        return StateVector(cloud, AlphaField.constant(a0, nodes.size - 1), beta, lam)


# --------------------------------------------------------------------------
# output helpers


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _shape_samples(state: StateVector):
    cloud = state.physical_cloud
    if isinstance(cloud, GraphCloud):
        return cloud.x, cloud.heights
    return cloud.theta, cloud.radii


def _segment_coords(state: StateVector):
    coord, _ = _shape_samples(state)
    if state.kind == "graph":
        return 0.5 * (coord[1:] + coord[:-1])
    return coord + 0.5 * state.cloud.dtheta


def write_reconstruction(run: Run, truth: StateVector, init: StateVector, rec: StateVector):
    rec = fix_gauge(rec)
    xr, hr = _shape_samples(rec)
    xt, ht = _shape_samples(truth)
    xi, hi = _shape_samples(init)
    if rec.kind == "graph":
        h_true = np.interp(xr, xt, ht)
        h_init = np.interp(xr, xi, hi)
    else:
        h_true, h_init = ht, hi
    rows = [("node", i, xr[i], h_true[i], h_init[i], hr[i]) for i in range(xr.size)]
    sr = _segment_coords(rec)
    a_rec = rec.alpha.segment_values
    if rec.kind == "graph":
        a_true = truth.alpha.segment_values[np.clip(np.searchsorted(xt, sr) - 1, 0, truth.cloud.N - 2)]
        a_init = init.alpha.segment_values[np.clip(np.searchsorted(xi, sr) - 1, 0, init.cloud.N - 2)]
    else:
        a_true, a_init = truth.alpha.segment_values, init.alpha.segment_values
    rows += [("segment", k, sr[k], a_true[k], a_init[k], a_rec[k]) for k in range(sr.size)]
    if rec.kind == "graph":
        rows += [("side", 0, xr[0], truth.alpha.alpha_L, init.alpha.alpha_L, rec.alpha.alpha_L),
                 ("side", 1, xr[-1], truth.alpha.alpha_R, init.alpha.alpha_R, rec.alpha.alpha_R)]
    b_true = np.interp(rec.beta.angles, truth.beta.angles, truth.beta.knots)
    b_init = np.interp(rec.beta.angles, init.beta.angles, init.beta.knots)
    rows += [("knot", p, rec.beta.angles[p], b_true[p], b_init[p], rec.beta.knots[p])
             for p in range(rec.beta.P + 1)]
    _write_rows(run.out / "reconstruction.csv",
                ["section", "index", "coord", "true", "initial", "reconstructed"], rows)
    label = "x" if rec.kind == "graph" else "theta"
    shape_name = "h" if rec.kind == "graph" else "r"
    line_chart(run.out / "shape.svg", [("true", xr, h_true), ("reconstructed", xr, hr),
                                       ("initial", xr, h_init)],
               title=f"{shape_name}({label})", xlabel=label, ylabel=shape_name)
    line_chart(run.out / "alpha.svg", [("true", sr, a_true), ("reconstructed", sr, a_rec),
                                       ("initial", sr, a_init)],
               title=f"alpha({label})", xlabel=label, ylabel="alpha")
    line_chart(run.out / "beta.svg", [("true", rec.beta.angles, b_true),
                                      ("reconstructed", rec.beta.angles, rec.beta.knots),
                                      ("initial", rec.beta.angles, b_init)],
               title="beta(angle)", xlabel="angle [rad]", ylabel="beta")


def _truth_state(run: Run, with_speed: bool = False, lam: float = 1.0) -> StateVector:
    t = run.truth
    if with_speed:
        return StateVector(t.cloud.stretched(1.0 / lam), t.alpha, t.beta, lam)
    return StateVector(t.cloud, t.alpha, t.beta)


def _write_report(path, report, header: str = ""):
    with open(path, "w") as fh:
        if header:
            fh.write(header.rstrip() + "\n")
        fh.write(report.summary() + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_forward(run: Run, args) -> int:
    ms = run.measure(run.speeds[0])
    ms.to_csv(run.out / "measurements.csv")
    centers = ms.detector.centers
    for j, phi in enumerate(ms.detector.angles):
        line_chart(run.out / f"profile_{j:02d}.svg", [(f"phi = {phi:.4f}", centers, ms.values[:, j])],
                   title=f"measurement profile, angle {j}", xlabel="detector position",
                   ylabel="u")
    print(f"wrote {ms.values.shape[0]} pixels x {ms.values.shape[1]} angles to {run.out}")
    return EXIT_OK


def cmd_invert(run: Run, args) -> int:
    with_speed = bool(run.doc.get("solver", {}).get("with_speed", False))
    lam = run.speeds[0]
    data = run.measure(lam)
    data.to_csv(run.out / "measurements.csv")
    init = run.initial_state(data, with_speed, lam)
    cfg = sc.solver_config(run.doc)
    try:
        result = reconstruct(data, init, cfg, with_speed=with_speed)
    except SingularSystemError as exc:
        if exc.report is not None:
            _write_report(run.out / "diagnostics.txt", exc.report, f"FAILED: {exc}")
        raise
    write_reconstruction(run, _truth_state(run), init, result.state)
    sc.dump(sc.state_document(fix_gauge(result.state), run.doc), run.out / "final_state.yaml")
    write_history(result, run.out / "history.csv")
    header = f"status: {result.status}\nconverged: {result.converged}\niterations: {result.iterations}"
    if with_speed:
        header += f"\nlambda: {result.state.lam!r}"
    if result.frozen:
        header += f"\nunobserved at the final state: {', '.join(result.frozen)}"
    _write_report(run.out / "diagnostics.txt", result.diagnostics, header)
    print(header)
    return EXIT_OK


def cmd_speed_demo(run: Run, args) -> int:
    dspec = run.doc.get("diagnose", {})
    cfg = sc.solver_config(run.doc)
    rows = []
    for lam in run.speeds:
        data = run.measure(lam)
        truth = _truth_state(run, True, lam)
        report = diagnose(assemble_graph(truth, run.det, True), local=dspec.get("local", False),
                          node_tol=dspec.get("node_tol", 0.05))
        status, lam_rec = "", float("nan")
        try:
            init = run.initial_state(data, True, lam)
            result = reconstruct(data, init, cfg, with_speed=True)
            lam_rec, status = float(result.state.lam), result.status
            if "speed[0]" in result.frozen:
                status += "; speed unobserved"
        except (SingularSystemError, NoCloudError, ValueError) as exc:
            status = f"failed: {exc}"
        _write_report(run.out / f"diagnostics_lambda_{lam:.3f}.txt", report,
                      f"lambda_true: {lam!r}\nlambda_rec: {lam_rec!r}\nstatus: {status}")
        rows.append((lam, lam_rec, report.sigma_ratio, report.speed_inseparable, status))
        print(f"lambda_true={lam:.3f} lambda_rec={lam_rec:.6f} sigma_ratio={report.sigma_ratio:.3e} "
              f"inseparable={report.speed_inseparable} ({status})")
    _write_rows(run.out / "sweep.csv",
                ["lambda_true", "lambda_rec", "sigma_ratio", "speed_inseparable", "status"], rows)
    return EXIT_OK


def cmd_diagnose(run: Run, args) -> int:
    dspec = run.doc.get("diagnose", {})
    with_speed = bool(dspec.get("with_speed", False))
    if "initial" in run.doc:
        data = run.measure(run.speeds[0])
        state = run.initial_state(data, with_speed, run.speeds[0])
    else:
        state = _truth_state(run, with_speed, run.speeds[0])
    if run.kind == "graph":
        system = assemble_graph(state, run.det, with_speed)
    else:
        system = assemble_polar(state, run.det)
    report = diagnose(system, local=dspec.get("local", False), node_tol=dspec.get("node_tol", 0.05))
    _write_report(run.out / "diagnostics.txt", report)
    _write_rows(run.out / "singular_values.csv", ["index", "sigma", "sigma_squared"],
                [(i, s, s * s) for i, s in enumerate(report.singular_values)])
    if report.null_basis.size:
        labels = state.column_labels()
        _write_rows(run.out / "null_basis.csv", ["column"] + report.null_labels,
                    [[labels[i]] + list(report.null_basis[i]) for i in range(len(labels))])
    if args.dump_matrices:
        np.savetxt(run.out / "A.csv", system.A, delimiter=",", header=",".join(state.column_labels()))
        np.savetxt(run.out / "B.csv", system.B, delimiter=",")
        np.savetxt(run.out / "rhs.csv", system.rhs, delimiter=",")
    print(report.summary())
    return EXIT_OK


COMMANDS = {"forward": cmd_forward, "invert": cmd_invert, "speed-demo": cmd_speed_demo,
            "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudshape", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True,
                       help="scenario YAML path or bundled name (" + ", ".join(sc.bundled_names()) + ")")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="noise seed (overrides the scenario)")
        p.add_argument("--preset", choices=sorted(sc.PRESETS), help="detector defaults")
        p.add_argument("--mirror-sun", action="store_true", help="put the sun in the -x half plane")
        if name == "diagnose":
            p.add_argument("--dump-matrices", action="store_true", help="write A, B and rhs as CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        return COMMANDS[args.command](run, args)
    except sc.ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SingularSystemError, DegenerateGeometryError, NoCloudError, GaugeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
