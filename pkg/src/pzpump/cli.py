"""Command-line entry point: mesh generation/validation, homogenization,
sensitivity audit and macroscopic simulation from flat JSON configs.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.  Every
produced file is listed in ``manifest.json`` with a SHA-256 checksum.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import cell_mesh as cm
from . import cell_problems as cp
from . import fem_forms as ff
from . import homogenization as hg
from . import macro as mc
from . import sensitivity as sn
from .errors import (
    ChannelDegenerate,
    ConfigError,
    MissingMaterial,
    PeriodicityError,
    PzPumpError,
    RegionOverlap,
    ResolutionTooCoarse,
    SchemaError,
    TagError,
)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2

# bad inputs and malformed files are configuration errors (exit 2); the
# remaining package errors count as numerical failures (exit 1)
_CONFIG_ERRORS = (ConfigError, MissingMaterial, SchemaError, TagError,
                  PeriodicityError, ChannelDegenerate, RegionOverlap,
                  ResolutionTooCoarse)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, subcommand, inputs, outdir):
        self.doc = {
            "subcommand": subcommand,
            "inputs": {k: str(v) for k, v in inputs.items()},
            "output_dir": str(outdir),
            "outputs": {},
            "deterministic": True,
            "stats": {},
        }
        self.outdir = outdir
        self.t0 = time.time()

    def add(self, path) -> None:
        rel = os.path.relpath(path, self.outdir)
        self.doc["outputs"][rel] = _sha256(path)

    def finish(self, **stats) -> None:
        self.doc["stats"].update(stats)
        self.doc["stats"]["wall_seconds"] = time.time() - self.t0
        path = os.path.join(self.outdir, "manifest.json")
        with open(path, "w") as f:
            json.dump(self.doc, f, indent=1, sort_keys=True)
            f.write("\n")


def _load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from None


def _resolve_mesh(doc: dict, base_dir) -> cm.CellMesh:
    if "mesh" in doc and isinstance(doc["mesh"], str):
        path = doc["mesh"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return cm.load_mesh(path)
    gen = doc.get("mesh", {})
    geo_kw = {k: gen[k] for k in ("channel_halfwidth", "bulge", "cushion")
              if k in gen}
    if "electrode_shapes" in gen:
        geo_kw["electrode_shapes"] = tuple(tuple(s) for s in gen["electrode_shapes"])
    return cm.generate_canonical_cell(int(gen.get("resolution", 32)),
                                      cm.CanonicalGeometry(**geo_kw))


def _resolve_materials(doc: dict, base_dir) -> ff.MaterialSet:
    mat = doc.get("materials")
    if mat is None:
        raise ConfigError("config misses 'materials'")
    if isinstance(mat, str):
        path = mat if os.path.isabs(mat) else os.path.join(base_dir, mat)
        return ff.load_materials(path)
    if isinstance(mat, dict) and mat.get("default"):
        return ff.default_materials(eps0=float(mat.get("eps0", 5e-3)),
                                    scaling=mat.get("scaling", "eps2"))
    raise ConfigError("'materials' must be a file path or {'default': true, ...}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_mesh(args) -> int:
    doc = _load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    os.makedirs(args.out, exist_ok=True)
    man = Manifest("mesh", {"config": args.config}, args.out)
    mesh = _resolve_mesh(doc, base)
    cm.validate_mesh(mesh)
    out_path = os.path.join(args.out, "cell_mesh.json")
    cm.save_mesh(mesh, out_path)
    man.add(out_path)
    man.finish(n_nodes=mesh.n_nodes, n_elements=mesh.n_elements,
               region_measures=mesh.region_measures())
    print("mesh: %d nodes, %d elements -> %s"
          % (mesh.n_nodes, mesh.n_elements, out_path))
    return EXIT_OK


def cmd_homogenize(args) -> int:
    doc = _load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    os.makedirs(args.out, exist_ok=True)
    man = Manifest("homogenize", {"config": args.config}, args.out)

    mesh = _resolve_mesh(doc, base)
    mat = _resolve_materials(doc, base)
    correctors = cp.solve_all(mesh, mat)
    coeffs = hg.compute_coefficients(mesh, mat, correctors)

    report = hg.coefficients_to_doc(coeffs)
    if doc.get("gradients", True):
        grads = sn.state_gradients(mesh, mat, correctors)
        report["gradients"] = sn.gradients_to_doc(grads)
    report_path = os.path.join(args.out, "coefficients.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    man.add(report_path)

    corr_path = os.path.join(args.out, "correctors.csv")
    cp.export_correctors_csv(correctors, corr_path)
    man.add(corr_path)

    man.finish(phi_f=coeffs.phi_f, K11=coeffs.K[0, 0], M=coeffs.M)
    print("homogenize: phi_f=%.6g K11=%.6g -> %s"
          % (coeffs.phi_f, coeffs.K[0, 0], report_path))
    return EXIT_OK


def cmd_audit(args) -> int:
    doc = _load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    os.makedirs(args.out, exist_ok=True)
    man = Manifest("audit", {"config": args.config}, args.out)

    mesh = _resolve_mesh(doc, base)
    mat = _resolve_materials(doc, base)
    res = sn.sensitivity_audit(
        mesh, mat,
        n_random=int(doc.get("n_random", 5)),
        seed=int(doc.get("seed", 0)),
        tau=float(doc.get("tau", 1e-5)),
        tau_sweep=tuple(doc.get("tau_sweep", (1e-3, 1e-4, 1e-5))),
        sweep_fields=int(doc.get("sweep_fields", 1)),
        max_resolves=int(doc.get("max_resolves", 200)),
    )
    tol = float(doc.get("tolerance", 1e-3))

    audit_path = os.path.join(args.out, "sensitivity_audit.csv")
    with open(audit_path, "w") as f:
        f.write("# schema: pzpump.audit.v1\n")
        f.write("velocity,coefficient,formula_value,fd_value,rel_error\n")
        for vel, name, a, b, rel in res.family_rows:
            f.write("%s,%s,%.17g,%.17g,%.17g\n" % (vel, name, a, b, rel))
        for vel, lab, a, b, rel in res.rows:
            f.write("%s,%s,%.17g,%.17g,%.17g\n" % (vel, lab, a, b, rel))
    man.add(audit_path)

    orders_path = os.path.join(args.out, "tau_sweep_orders.csv")
    with open(orders_path, "w") as f:
        f.write("# schema: pzpump.audit-orders.v1\n")
        f.write("velocity,coefficient,order\n")
        for vel, fams in res.orders.items():
            for name, order in fams.items():
                f.write("%s,%s,%.6g\n" % (vel, name, order))
    man.add(orders_path)

    ok = res.passed(tol=tol)
    man.finish(max_rel_err=res.max_rel_err, min_order=res.min_order,
               n_resolves=res.n_resolves, passed=bool(ok))
    print("audit: max family rel err %.3e, min order %.3f -> %s"
          % (res.max_rel_err, res.min_order, "PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    if args.mode:
        doc["mode"] = args.mode
    cfg = mc.config_from_doc(doc, base_dir=base)
    os.makedirs(args.out, exist_ok=True)
    man = Manifest("simulate", {"config": args.config}, args.out)

    series = mc.run_simulation(cfg)

    flux_path = os.path.join(args.out, "fluxes.csv")
    mc.write_fluxes_csv(series, flux_path)
    man.add(flux_path)
    for k in sorted(series.snapshots):
        if k == 0:
            continue
        p = os.path.join(args.out, "fields_%d.csv" % k)
        mc.write_fields_csv(series, k, p)
        man.add(p)
    summary = mc.summary_doc(series)
    sum_path = os.path.join(args.out, "summary.json")
    with open(sum_path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    man.add(sum_path)

    man.finish(newton_iters_max=summary["newton_iters_max"],
               slope_plus=summary["slope_plus"])
    print("simulate (%s): slope_plus=%.6g, max %d Newton iters -> %s"
          % (cfg.mode, summary["slope_plus"], summary["newton_iters_max"],
             flux_path))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pzpump",
        description="Two-scale piezo-poroelastic homogenization toolkit")
    parser.add_argument("--threads", type=int, default=1,
                        help="solver thread budget (runs are serialized for "
                             "determinism; accepted for interface stability)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("mesh", cmd_mesh), ("homogenize", cmd_homogenize),
                     ("audit", cmd_audit), ("simulate", cmd_simulate)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        if name == "simulate":
            p.add_argument("--mode", choices=["linear", "semilinear"])
        p.set_defaults(func=fn)

    args = parser.parse_args(argv)
    if args.threads < 1:
        _print_error(ConfigError("--threads must be >= 1"))
        return EXIT_CONFIG
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        _print_error(exc)
        return EXIT_CONFIG
    except PzPumpError as exc:
        _print_error(exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}))
        return EXIT_CONFIG


def _print_error(exc) -> None:
    code = exc.code if isinstance(exc, PzPumpError) else type(exc).__name__
    print(json.dumps({"error": code, "message": str(exc)}))


if __name__ == "__main__":
    sys.exit(main())
