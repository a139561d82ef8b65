"""Command-line experiment runner: ``eigencharts run | list-fixtures | validate``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analysis, embed, heat, plotting, spectral
from .config import ExperimentConfig, _floats, _points, list_fixtures, load_config
from .errors import EigenchartsError, NumericalError, ValidationError
from .geometry import MetricField, ShapeSpec, build_grid_domain, geodesic_distances, region_patch

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
REPORT_VERSION = 1
# sub-stream ids: every stage draws from SeedSequence([seed, id, ...])
STREAMS = {"eig": 1, "heat": 2, "triangulate": 3, "distort": 4}


class StageError(Exception):
    def __init__(self, stage: str, error: EigenchartsError):
        super().__init__(f"stage {stage}: {error}")
        self.stage = stage
        self.error = error


def substream_seed(seed: int, stage: str, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[stage], *extra]).generate_state(1)[0])


def _clean(obj):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def make_domain(cfg: ExperimentConfig, resolution=None):
    spec = ShapeSpec(name=cfg.get("domain", "shape"), dims=cfg.dims, hole=cfg.getfloat("domain", "hole"),
                     delta=cfg.getfloat("domain", "delta"), n=cfg.getint("domain", "n"),
                     neck_length=cfg.getfloat("domain", "neck_length"),
                     mask_file=str(cfg.mask_path()) if cfg.mask_path() else None)
    res = cfg.getfloat("domain", "resolution") if resolution is None else resolution
    kind = cfg.get("metric", "kind")
    metric = None
    if kind == "constant":
        d = len(cfg.dims)
        value = np.array(_floats(cfg.sections["metric"].get("value", ""))).reshape(d, d)
        metric = lambda coords: MetricField.constant(len(coords), d, value)  # noqa: E731
    elif kind == "expression":
        exprs = {k: v for k, v in cfg.sections["metric"].items() if k.startswith("g")}
        alpha = float(cfg.sections["metric"].get("alpha", 1.0))
        metric = lambda coords: MetricField.from_expressions(coords, exprs, alpha)  # noqa: E731
    return build_grid_domain(spec, res, cfg.get("domain", "bc"), metric)


def resolve_center(domain, text: str) -> int:
    lm = domain.shape_spec.landmarks() if domain.shape_spec is not None else {}
    if text in lm:
        return domain.node_at(lm[text])
    if text == "center":
        return domain.node_at(0.5 * np.asarray(domain.shape, dtype=float) * domain.spacing)
    return domain.node_at(_floats(text))


def _selection_params(cfg, z) -> embed.SelectionParams:
    return embed.SelectionParams(
        z=z, rho=cfg.getfloat("selection", "rho"), A=cfg.getfloat("selection", "A"),
        A_prime=cfg.getfloat("selection", "A_prime"), c0=cfg.getfloat("selection", "c0"),
        delta0=cfg.getfloat("selection", "delta0"), t=cfg.optfloat("selection", "t"),
        relax_max=cfg.getint("selection", "relax_max"), rule=cfg.get("selection", "rule"))


def _heat_radius(cfg, domain, z) -> float:
    R = cfg.optfloat("heat", "R")
    return domain.inscribed_radius(z) if R is None else R


def _eigen_threshold(cfg, domain) -> float:
    need = [max(_floats(cfg.get("weyl", "thresholds")), default=0.0)]
    stages = cfg.stages
    if "select" in stages:
        z = resolve_center(domain, cfg.centers()[0])
        need.append(_selection_params(cfg, z).window[1])
    if "heat" in stages:
        z = resolve_center(domain, cfg.centers()[0])
        R = _heat_radius(cfg, domain, z)
        t_min = (heat.DELTA1 * R / 2) ** 2
        need.append(10.0 / t_min)
    return 1.02 * max(need)


class Pipeline:
    """Runs the configured stages and writes the report bundle to ``out``."""

    def __init__(self, cfg: ExperimentConfig, out: Path, figures: bool = True):
        self.cfg = cfg
        self.out = Path(out)
        self.figures = figures
        self.report = {"version": REPORT_VERSION, "experiment": cfg.name, "config": cfg.to_dict(),
                       "stages": list(cfg.stages), "files": []}
        self.stage = "setup"

    def _file(self, name: str) -> Path:
        self.report["files"].append(name)
        return self.out / name

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            self._guard("domain", self._domain)
            order = [s for s in ("eig", "weyl", "heat", "select", "embed", "distort", "triangulate")
                     if s in self.cfg.stages]
            if any(s in order for s in ("weyl", "heat", "select", "embed", "distort")) and "eig" not in order:
                order.insert(0, "eig")
            for s in order:
                self._guard(s, getattr(self, f"_{s}"))
        self.report["warnings"] = sorted({f"{w.category.__name__}: {w.message}" for w in caught
                                          if w.category.__module__.startswith("eigencharts")})
        write_json(self._file("report.json"), self.report)
        return self.report

    def _guard(self, stage, fn):
        self.stage = stage
        try:
            fn()
        except EigenchartsError as exc:
            raise StageError(stage, exc) from exc

    # stages ------------------------------------------------------------
    def _domain(self):
        self.domain = make_domain(self.cfg)
        d = self.domain
        self.report["domain"] = {"nodes": d.n_nodes, "shape": list(d.shape), "spacing": d.spacing,
                                 "physical_volume": d.physical_volume, "bc": d.bc}

    def _eig(self):
        cfg = self.cfg
        k = cfg.get("eigen", "k").strip()
        thr = cfg.get("eigen", "threshold").strip()
        dense = {"auto": None, "true": True, "false": False}[cfg.get("eigen", "dense")]
        op = spectral.assemble_laplacian(self.domain)
        seed = substream_seed(cfg.seed, "eig")
        if k:
            eigs = spectral.compute_eigensystem(op, k=int(k), seed=seed, dense=dense)
        else:
            T = _eigen_threshold(cfg, self.domain) if thr in ("", "auto") else float(thr)
            eigs = spectral.compute_eigensystem(op, threshold=T, seed=seed, dense=dense)
        self.eigs = eigs
        spectral.write_eigenvalues_csv(self._file("eigenvalues.csv"), eigs)
        self.report["eig"] = {"count": eigs.count, "lambda_min": float(eigs.eigenvalues[0]),
                              "lambda_max": float(eigs.eigenvalues[-1]),
                              "lambda_max_resolved": eigs.lambda_max_resolved, "complete": eigs.complete}

    def _weyl(self):
        rows = []
        for T in _floats(self.cfg.get("weyl", "thresholds")):
            w = spectral.weyl_count(self.eigs, T)
            rows.append({"threshold": w.threshold, "count": w.count, "ratio": w.ratio})
        ratios = [r["ratio"] for r in rows if r["ratio"] > 0]
        self.report["weyl"] = {"rows": rows,
                               "ratio_spread": max(ratios) / min(ratios) if ratios else None}
        write_csv(self._file("weyl.csv"), ["threshold", "count", "ratio"],
                  [(r["threshold"], r["count"], r["ratio"]) for r in rows])
        if self.figures:
            plotting.plot_spectrum(self._file("spectrum.png"), self.eigs.eigenvalues, rows)

    def _heat(self):
        cfg = self.cfg
        z = resolve_center(self.domain, cfg.centers()[0])
        R = _heat_radius(cfg, self.domain, z)
        probes = analysis.regime_probes(self.domain, z, R, cfg.getint("heat", "probes"),
                                        spread=cfg.getfloat("heat", "spread"),
                                        seed=substream_seed(cfg.seed, "heat"))
        diag = analysis.kernel_bound_diagnostics(self.eigs, z, probes, R,
                                                 growth_count=cfg.getint("heat", "growth_count"))
        self.report["heat"] = {"z": z, "R": R, **diag.summary}
        write_json(self._file("kernel_diagnostics.json"), {"z": z, "R": R, **diag.to_dict()})
        write_csv(self._file("kernel_probes.csv"),
                  ["w", "t", "distance", "kernel_scaled", "gradient_scaled", "status"],
                  [(r["w"], r["t"], r["distance"], r["kernel_scaled"], r["gradient_scaled"], r["status"])
                   for r in diag.rows])
        write_csv(self._file("growth.csv"), ["x", "y", "envelope"],
                  [(r["x"], r["sup"], r["envelope"]) for r in diag.growth])
        if self.figures:
            plotting.plot_kernel_probes(self._file("kernel_probes.png"), diag.rows)
            plotting.plot_growth(self._file("growth.png"), diag.growth)

    def _select(self):
        cfg = self.cfg
        self.selections = []
        out = []
        kappa = cfg.optfloat("selection", "kappa")
        for name in cfg.centers():
            z = resolve_center(self.domain, name)
            sp_ = _selection_params(cfg, z)
            sel = embed.select_eigenfunctions(self.eigs, sp_)
            T = min(sp_.window[1], self.eigs.lambda_max_resolved)
            c_count = spectral.weyl_count(self.eigs, T).ratio
            diag = analysis.selection_diagnostics(self.eigs, sel, c_count, kappa)
            floor = math.sqrt(sel.ball_volume)
            self.selections.append((name, sel))
            out.append({"center": name, "z": z, "coords": self.domain.coords[z], **sel.to_dict(),
                        "gamma_over_floor": [g / floor for g in sel.gammas], "diagnostics": diag})
        self.report["select"] = [{"center": o["center"], "indices": o["indices"],
                                  "gamma_over_floor": o["gamma_over_floor"],
                                  "all_pass": o["diagnostics"]["all_pass"]} for o in out]
        write_json(self._file("selection.json"), out)

    def _embed(self):
        if not hasattr(self, "selections"):
            self._select()
        for name, sel in self.selections:
            ball = geodesic_distances(self.domain, sel.params.z, sel.params.rho)
            vals = embed.eigen_embedding(self.eigs, sel, ball.nodes)
            c = self.domain.coords[ball.nodes]
            write_csv(self._file(f"chart_{name}.csv"), ["node", "x", "y", "u", "v"],
                      [(int(n), *c[i, :2], *vals[i, :2]) for i, n in enumerate(ball.nodes)])
            if self.figures and self.domain.dim == 2:
                plotting.plot_chart(self._file(f"chart_{name}.png"), c, vals, f"chart at {name}")

    def _distort(self):
        cfg = self.cfg
        if not hasattr(self, "selections"):
            self._select()
        budget = cfg.getint("analysis", "pair_budget")
        target = cfg.getfloat("analysis", "distortion_target")
        seed = substream_seed(cfg.seed, "distort")
        offsets = _points(cfg.get("analysis", "perturbations"))
        reports = []
        for name, sel in self.selections:
            chart = lambda nodes, s=sel: embed.eigen_embedding(self.eigs, s, nodes)  # noqa: E731
            cert = analysis.certify_theta(chart, self.domain, sel.params.z, sel.params.rho, target,
                                          cfg.getint("analysis", "max_theta"), budget, seed)
            entry = {"center": name, "theta": cert.to_dict()}
            if cert.certified and offsets:
                entry["perturbed"] = self._perturbed(sel, cert.theta, offsets, budget, seed)
            reports.append(entry)
        region = _floats(cfg.get("analysis", "region"))
        if region and self.selections:
            name, sel = self.selections[0]
            c = self.domain.coords
            keep = np.ones(self.domain.n_nodes, dtype=bool)
            for a in range(self.domain.dim):
                keep &= (c[:, a] >= region[2 * a]) & (c[:, a] <= region[2 * a + 1])
            patch = region_patch(self.domain, np.flatnonzero(keep))
            rep = analysis.measure_distortion(embed.eigen_embedding(self.eigs, sel, patch.nodes), patch,
                                              budget, seed)
            reports.append({"center": name, "region": list(region), "report": rep.to_dict()})
        self.report["distort"] = reports
        write_json(self._file("distortion_selection.json"), reports)

    def _perturbed(self, sel, theta, offsets, budget, seed) -> dict:
        h = self.domain.spacing
        zc = self.domain.coords[sel.params.z]
        values = []
        for off in offsets:
            z = self.domain.node_at(zc + h * np.asarray(off))
            sp_ = embed.SelectionParams(**{**sel.params.to_dict(), "z": z, "t": sel.params.t})
            s2 = embed.select_eigenfunctions(self.eigs, sp_)
            ball = geodesic_distances(self.domain, z, sp_.rho / theta)
            rep = analysis.measure_distortion(embed.eigen_embedding(self.eigs, s2, ball.nodes), ball, budget, seed)
            values.append(rep.distortion)
        v = np.array(values)
        mean = float(v.mean())
        spread = float(np.max(np.abs(v / mean - 1))) if math.isfinite(mean) else math.inf
        return {"offsets": [list(o) for o in offsets], "distortions": values, "mean": mean,
                "max_relative_deviation": spread}

    def _triangulate(self):
        cfg = self.cfg
        if cfg.get("triangulation", "backend") == "closed_form":
            return self._triangulate_closed_form()
        res = cfg.optfloat("triangulation", "resolution")
        domain = self.domain if res is None else make_domain(cfg, res)
        op = spectral.assemble_laplacian(domain)
        eigs = spectral.compute_eigensystem(op, k=domain.n_nodes)
        z = resolve_center(domain, cfg.get("triangulation", "center"))
        rho = cfg.getfloat("triangulation", "rho")
        ball = geodesic_distances(domain, z, rho / cfg.getfloat("analysis", "ball_divisor"))
        runs = []
        for i in range(cfg.getint("triangulation", "seeds")):
            seed = substream_seed(cfg.seed, "triangulate", i)
            tm = embed.heat_triangulation(domain, eigs, z, rho, cfg.getfloat("triangulation", "c"),
                                          cfg.getfloat("triangulation", "theta"), seed)
            rep = analysis.measure_distortion(tm.values(ball.nodes), ball, cfg.getint("analysis", "pair_budget"))
            runs.append({**tm.to_dict(), "distortion": rep.to_dict()})
        d = np.array([r["distortion"]["distortion"] if r["distortion"]["injective"] else math.inf for r in runs],
                     dtype=float)
        summary = {"resolution": domain.shape[0], "z": z, "runs": len(runs),
                   "injective": int(np.sum(np.isfinite(d))),
                   "max_over_min": float(d.max() / d.min()) if np.all(np.isfinite(d)) else math.inf}
        self.report["triangulate"] = summary
        write_json(self._file("triangulation.json"), {"summary": summary, "runs": runs})
        if self.figures:
            plotting.plot_seed_distortion(self._file("triangulation.png"), d)

    def _triangulate_closed_form(self):
        cfg = self.cfg
        z = resolve_center(self.domain, cfg.get("triangulation", "center"))
        zc = self.domain.coords[z]
        rho = cfg.getfloat("triangulation", "rho")
        t = cfg.optfloat("triangulation", "t")
        t = cfg.getfloat("triangulation", "theta") * rho ** 2 if t is None else t
        anchors = [np.asarray(a) for a in _points(cfg.get("triangulation", "anchors"))]
        J = embed.free_plane_jacobian(np.zeros(self.domain.dim), anchors, t)
        ball = geodesic_distances(self.domain, z, rho / cfg.getfloat("analysis", "ball_divisor"))
        vals = embed.free_plane_map(self.domain.coords[ball.nodes] - zc, anchors, t, rho)
        rep = analysis.measure_distortion(vals, ball, cfg.getint("analysis", "pair_budget"))
        expected = 0.5 / (4 * math.pi) * math.exp(-0.25)
        summary = {"t": t, "anchors": anchors, "jacobian": J, "analytic_entry": expected,
                   "distortion": rep.to_dict()}
        self.report["triangulate"] = {"jacobian": J, "distortion": rep.distortion}
        write_json(self._file("triangulation.json"), summary)


def run_experiment(config, overrides=(), out_dir=None, figures: bool = True) -> dict:
    """Load, validate and run a config; returns the report dict."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, overrides)
    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    return Pipeline(cfg, out, figures).run()


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eigencharts", description="Local charts from Laplacian eigenfunctions "
                                "and heat kernels, with distortion certificates.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config or a fixture name")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides config and environment)")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value; repeatable")
    r.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    sub.add_parser("list-fixtures", help="list shipped fixture configs")
    v = sub.add_parser("validate", help="validate a config without computing")
    v.add_argument("config")
    v.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-fixtures":
        for name, desc in list_fixtures():
            print(f"{name}: {desc}")
        return EXIT_OK
    stage = "config"
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "validate":
            print(f"{cfg.name}: ok")
            return EXIT_OK
        report = run_experiment(cfg, out_dir=args.output, figures=not args.no_figures)
        out = Path(args.output) if args.output else cfg.output_dir()
        print(f"{cfg.name}: wrote {len(report['files'])} files to {out}")
        return EXIT_OK
    except StageError as exc:
        stage, err = exc.stage, exc.error
    except EigenchartsError as exc:
        err = exc
    code = EXIT_NUMERICAL if isinstance(err, NumericalError) else EXIT_VALIDATION
    kind = "numerical failure" if code == EXIT_NUMERICAL else "validation failure"
    print(f"eigencharts: {kind} in stage {stage}: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
