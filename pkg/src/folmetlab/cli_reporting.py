"""Command line front end: run experiment configs, write CSV tables, summaries and SVG plots.

Exit codes: 0 when every verdict passes, 2 when a verdict fails, 1 on bad
input (unreadable or invalid config, violated preconditions).
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, domain_from_tree, load_config, serialize_config
from .convergence_lab import (ExperimentReport, Family, build_defective_model, build_family, compact_cloud,
                              defective_membership_detail, eta_point, hausdorff_to_kernel_check,
                              pointwise_convergence_experiment, removability_check, uniform_convergence_experiment)
from .cplx_geometry import (DomainSequence, as_point, check_kernel_convergence, coordinate_radii, point_from_pairs,
                            polydisc, write_cloud_csv)
from .errors import FolmetError, InputError
from .eta_engine import MC_SANDWICH
from .foliation import in_singular_set

EXIT_OK, EXIT_INPUT, EXIT_VERDICT = 0, 1, 2
PLOT_KINDS = ("eta_vs_n", "f_scatter")


# ---------------------------------------------------------------------------
# families from configs


def family_from_config(cfg: ExperimentConfig) -> Family:
    seq = cfg.section("sequence")
    X = cfg.field()
    if "family" in seq:
        params = seq.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("sequence: params must be a table")
        fam = build_family(seq["family"], **params)
        if fam.field.dim != X.dim:
            raise ConfigError(f"field lives on C^{X.dim} but family {fam.name!r} on C^{fam.field.dim}")
        fam.field = X
        return fam
    terms = [domain_from_tree(t) for t in seq["terms"]]
    W = domain_from_tree(seq["limit"])
    base = as_point(np.zeros(W.dim)) if "base_point" not in seq else point_from_pairs(seq["base_point"])
    if "ambient" in seq:
        U = domain_from_tree(seq["ambient"])
    else:
        U = polydisc(tuple(np.max([coordinate_radii(D) for D in terms + [W]], axis=0) + 1.0))

    def gen(n):
        if n > len(terms):
            raise InputError(f"the explicit sequence has {len(terms)} terms")
        return terms[n - 1]

    S = DomainSequence(gen, base, W, name=cfg.name, ambient=U, metadata={"length": len(terms)})
    return Family(cfg.name, X, S, W, U, None, None, length=len(terms))


# ---------------------------------------------------------------------------
# CSV and summaries


def _fmt(x: float) -> str:
    return repr(float(x))


def _bool(v: Optional[bool]) -> str:
    return "" if v is None else ("true" if v else "false")


def report_header(N: int) -> list:
    return [f"{p}_{i}" for i in range(1, N + 1) for p in ("re", "im")] + \
        ["n", "eta_n", "eta_W", "gap", "in_S", "in_E", "verdictflags"]


def _row_flags(row, tol: dict) -> str:
    flags = list(row.flags)
    from .convergence_lab import _row_converged, _row_liminf
    flags.append("converged" if _row_converged(row, tol["tol"], tol["mc_tol"]) else "gap")
    if not _row_liminf(row, tol["tol"]):
        flags.append("liminf_violation")
    if row.mc:
        flags.append(f"eta_n_upper={_fmt(row.eta_n.upper)}")
        flags.append(f"eta_W_upper={_fmt(row.eta_W.upper)}")
    return ";".join(flags)


def emit_csv(report: ExperimentReport, path, dim: Optional[int] = None) -> Path:
    """One row per (point, n); an empty report gives the header alone."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    N = dim or (report.rows[0].point.size if report.rows else int(report.extra.get("dim", 1)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_header(N))
    rows = sorted(report.rows, key=lambda r: (tuple(np.c_[r.point.real, r.point.imag].ravel()), r.n))
    for r in rows:
        coords = []
        for c in r.point:
            coords += [_fmt(c.real), _fmt(c.imag)]
        w.writerow(coords + [str(r.n), _fmt(r.eta_n.value), _fmt(r.eta_W.value), _fmt(r.gap),
                             _bool(r.in_S), _bool(r.in_E), _row_flags(r, report.tolerances)])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def summary_tree(report: ExperimentReport) -> dict:
    out = {"experiment": report.extra.get("kind", ""), "family": report.extra.get("family", ""),
           "rows": len(report.rows), "runtime_s": float(report.runtime),
           "verdicts": {k: bool(v) for k, v in report.verdicts.items()},
           "tolerances": {k: float(v) for k, v in report.tolerances.items()}}
    if "sup" in report.extra:
        out["sup_gap"] = {f"n_{n}": {k: float(v) for k, v in d.items()} for n, d in report.extra["sup"].items()}
    if report.extra.get("S_points"):
        out["defective_points"] = [[float(x) for c in p for x in (c.real, c.imag)] for p in report.extra["S_points"]]
    return {"summary": out}


def emit_summary(tree: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(tree), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# SVG plots


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "folmetlab"
    return plt


def _save_svg(fig, path: Path, plt) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def read_report_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_svg(rows: Sequence[dict], kind: str, path) -> Path:
    """Static SVG: `eta_vs_n` curves per point, or `f_scatter` of a cloud projected to one coordinate plane."""
    if kind not in PLOT_KINDS:
        raise InputError(f"unknown plot kind {kind!r}; expected one of {list(PLOT_KINDS)}")
    if not rows:
        raise InputError("refusing to plot an empty report")
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "eta_vs_n":
        if "eta_n" not in rows[0]:
            raise InputError("eta_vs_n needs a report CSV")
        coord_keys = [k for k in rows[0] if k.startswith(("re_", "im_"))]
        groups: dict = {}
        for r in rows:
            groups.setdefault(tuple(r[k] for k in coord_keys), []).append(r)
        for key, rs in groups.items():
            rs.sort(key=lambda r: int(r["n"]))
            n = [int(r["n"]) for r in rs]
            label = "p=(" + ", ".join(_cplx_label(float(key[i]), float(key[i + 1])) for i in range(0, len(key), 2)) + ")"
            line, = ax.plot(n, [float(r["eta_n"]) for r in rs], marker="o", label=f"eta_n, {label}")
            ax.plot(n, [float(r["eta_W"]) for r in rs], ls="--", color=line.get_color(), label=f"eta_W, {label}")
        ax.set_xlabel("n")
        ax.set_ylabel("eta")
        ax.set_xscale("log")
        ax.legend(fontsize=6)
    else:
        if "tag" not in rows[0]:
            raise InputError("f_scatter needs a sample-cloud CSV")
        N = sum(1 for k in rows[0] if k.startswith("re_"))
        P = np.array([[float(r[f"re_{i}"]) + 1j * float(r[f"im_{i}"]) for i in range(1, N + 1)] for r in rows])
        i = int(np.argmax(np.ptp(np.abs(P), axis=0)))
        ax.scatter(P[:, i].real, P[:, i].imag, s=2)
        ax.set_xlabel(f"Re z_{i + 1}")
        ax.set_ylabel(f"Im z_{i + 1}")
        ax.set_aspect("equal")
        ax.set_title(f"{rows[0]['tag']} samples, z_{i + 1}-plane")
    return _save_svg(fig, Path(path), plt)


def _cplx_label(re: float, im: float) -> str:
    return f"{re:g}" if im == 0 else f"{re:g}{im:+g}i"


# ---------------------------------------------------------------------------
# commands


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _default_out(cfg: ExperimentConfig, suffix: str) -> Path:
    return cfg.base_dir / "out" / f"{cfg.name}{suffix}"


def _write_report(cfg: ExperimentConfig, report: ExperimentReport, dim: int) -> None:
    csv_path = cfg.output_path("csv") or _default_out(cfg, ".csv")
    emit_csv(report, csv_path, dim)
    tree = summary_tree(report)
    tree["config"] = cfg.tree
    emit_summary(tree, cfg.output_path("summary") or _default_out(cfg, ".summary.cfg"))
    svg = cfg.output_path("svg")
    if svg is not None:
        rows = read_report_csv(csv_path)
        if rows:
            emit_svg(rows, cfg.section("output").get("plot", "eta_vs_n"), svg)
        else:
            _log("empty report: no plot written")
    for k, v in report.verdicts.items():
        _log(f"{k}: {'PASS' if v else 'FAIL'}")
    _log(f"wrote {csv_path}")


def run_experiment(cfg: ExperimentConfig, kind: Optional[str] = None) -> int:
    kind = kind or cfg.kind
    fam = family_from_config(cfg)
    X = fam.field
    threads = cfg.section("numerics").get("threads")
    if kind in ("pointwise", "eta"):
        P = cfg.points()
        if P.size == 0:
            raise ConfigError("points: no sample points given")
        if P.shape[1] != X.dim:
            raise ConfigError(f"points: expected {X.dim} complex coordinates per point")
        if kind == "eta":
            return _run_eta(cfg, fam, P)
        model = build_defective_model(fam, cfg.h, cfg.defective, cfg.n_max, cfg.seed)
        rep = pointwise_convergence_experiment(fam, P, cfg.schedule, cfg.h, cfg.tol, cfg.budget, cfg.seed, model,
                                               cfg.tree, threads)
        _write_report(cfg, rep, X.dim)
        return EXIT_OK if all(rep.verdicts.values()) else EXIT_VERDICT
    if kind == "uniform":
        c = cfg.section("compact")
        K = compact_cloud(X, fam.W, int(c.get("count", 100)), float(c.get("radius", 0.9)), cfg.seed,
                          bool(c.get("mix", True)))
        model = build_defective_model(fam, cfg.h, cfg.defective, cfg.n_max, cfg.seed)
        rep = uniform_convergence_experiment(fam, K, cfg.schedule, cfg.h, cfg.tol, cfg.budget, cfg.seed, model,
                                             None, cfg.tree, threads)
        _write_report(cfg, rep, X.dim)
        return EXIT_OK if all(rep.verdicts.values()) else EXIT_VERDICT
    if kind == "kernel":
        return _run_kernel(cfg, fam)
    if kind == "hausdorff":
        r = hausdorff_to_kernel_check(fam.sequence, fam.box, cfg.h, n_max=cfg.n_max, seed=cfg.seed)
        tree = {"summary": {"experiment": "hausdorff", "verdict": r.verdict, "failing_stage": r.failing_stage or "",
                            "message": r.message, "rho": {f"n_{n}": float(v) for n, v in r.rho.items()}}}
        emit_summary(tree, cfg.output_path("summary") or _default_out(cfg, ".summary.cfg"))
        _log(f"hausdorff_to_kernel: {r.verdict} {r.message}")
        return EXIT_OK if r.verdict == "pass" else EXIT_VERDICT
    if kind in ("defective", "dense"):
        return _run_defective(cfg, fam)
    raise ConfigError(f"experiment: unknown kind {kind!r}")


def _run_eta(cfg: ExperimentConfig, fam: Family, P: np.ndarray) -> int:
    from .convergence_lab import ExperimentRow, _common_mc, _mc_reach, _tolerances
    X = fam.field
    common = _common_mc(X, fam)
    rows = []
    for k, p in enumerate(P):
        onE = in_singular_set(X, p)
        reach = None if onE else _mc_reach(X, p, common)
        eW = eta_point(X, p, fam.W, cfg.budget, cfg.seed + k, common["lipschitz"], reach)
        for n in cfg.schedule:
            Dn = fam.sequence(n)
            if not Dn.sdf(p[None, :])[0] < 0:
                continue
            en = eta_point(X, p, Dn, cfg.budget, cfg.seed + k, common["lipschitz"], reach)
            mc = MC_SANDWICH in (en.method, eW.method)
            rows.append(ExperimentRow(p, n, en, eW, None, onE, ("mc",) if mc else ()))
    rep = ExperimentReport(cfg.tree, rows, {}, _tolerances(cfg.h, cfg.tol), 0.0, {"kind": "eta", "family": fam.name})
    _write_report(cfg, rep, X.dim)
    return EXIT_OK


def _run_kernel(cfg: ExperimentConfig, fam: Family) -> int:
    count = int(cfg.section("numerics").get("subsequences", 5))
    v = check_kernel_convergence(fam.sequence, count, cfg.n_max, fam.box, cfg.h, cfg.seed)
    out = cfg.output_path("csv") or _default_out(cfg, ".kernel.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cloud_csv(v.kernel.boundary_cloud(), out)
    w = v.witness
    tree = {"summary": {"experiment": "kernel", "verdict": v.verdict, "degenerate": bool(v.kernel.degenerate),
                        "rho": {k: (float(x) if x is not None else -1.0) for k, x in w.get("rho", {}).items()},
                        "rho_to_declared": float(w.get("rho_to_declared", math.nan)),
                        "tolerance": float(w["tolerance"])}}
    emit_summary(tree, cfg.output_path("summary") or _default_out(cfg, ".summary.cfg"))
    ok = v.verdict == "converges" and not (w.get("rho_to_declared", 0.0) > 2 * cfg.h)
    _log(f"kernel convergence: {v.verdict}; rho to declared limit {w.get('rho_to_declared')}")
    return EXIT_OK if ok else EXIT_VERDICT


def _run_defective(cfg: ExperimentConfig, fam: Family) -> int:
    model = build_defective_model(fam, cfg.h, cfg.defective, cfg.n_max, cfg.seed)
    out = cfg.output_path("csv") or _default_out(cfg, ".F.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cloud_csv(model.F_samples, out)
    P = cfg.points()
    points = []
    for p in P:
        if in_singular_set(fam.field, p):
            points.append({"coords": [float(x) for c in p for x in (c.real, c.imag)], "in_E": True})
            continue
        m = defective_membership_detail(fam.field, model.leafy_F, p, fam.W, cfg.h, fam.ambient)
        entry = {"coords": [float(x) for c in p for x in (c.real, c.imag)], "in_E": False, "in_S": m.member,
                 "confident": m.confident}
        if m.member:
            entry["removability"] = removability_check(fam.field, model.leafy_F, p, cfg.h, fam.ambient).verdict
        points.append(entry)
    tree = {"summary": {"experiment": cfg.kind, "F_samples": len(model.F_samples),
                        "F_samples_off_E": len(model.leafy_F), "points": points}}
    emit_summary(tree, cfg.output_path("summary") or _default_out(cfg, ".summary.cfg"))
    svg = cfg.output_path("svg")
    if svg is not None and len(model.F_samples):
        emit_svg(read_report_csv(out), "f_scatter", svg)
    _log(f"F: {len(model.F_samples)} samples; wrote {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = read_report_csv(args.csv)
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(f".{args.plot}.svg")
    emit_svg(rows, args.plot, out)
    _log(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="folmetlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run the experiment a config describes"),
                        ("kernel", "kernel convergence check for the config's sequence"),
                        ("eta", "eta_n and eta_W at the config's points")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
    p = sub.add_parser("report", help="plot a CSV written by an earlier run")
    p.add_argument("csv")
    p.add_argument("--plot", required=True, choices=PLOT_KINDS)
    p.add_argument("--out")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = load_config(args.config)
        kind = None if args.command == "run" else args.command
        return run_experiment(cfg, kind)
    except (FolmetError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
