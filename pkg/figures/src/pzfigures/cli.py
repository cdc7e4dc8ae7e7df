"""Render flux, field-snapshot and audit figures from pzpump CSV files.

The scripts consume only the documented CSV schemas (version header pinned
in the first line of each file) and never mutate their inputs.  Output
format follows the file extension (.png or .svg); rendering is
deterministic for fixed inputs.
"""

from __future__ import annotations

import argparse
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FLUX_SCHEMA = "pzpump.fluxes.v1"
FIELDS_SCHEMA = "pzpump.fields.v1"
AUDIT_SCHEMA = "pzpump.audit.v1"

REGRESSION_WINDOW = 0.5  # trailing fraction of the time axis


class MissingColumn(Exception):
    pass


class SchemaMismatch(Exception):
    pass


def _read_csv(path, schema, required):
    """Header-checked CSV reader: returns a dict of named columns plus the
    comment lines (for per-file metadata like the snapshot time)."""
    with open(path) as f:
        lines = f.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    if not comments or not comments[0].startswith("# schema: %s" % schema):
        raise SchemaMismatch("%s: expected schema %r in the header" % (path, schema))
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise MissingColumn("%s: no header row" % path)
    names = body[0].split(",")
    for col in required:
        if col not in names:
            raise MissingColumn("%s: column %r missing" % (path, col))
    if len(body) < 2:
        raise MissingColumn("%s: no data rows" % path)
    data = np.loadtxt(body[1:], delimiter=",", ndmin=2)
    if data.shape[1] != len(names):
        raise MissingColumn("%s: row width does not match header" % path)
    return {name: data[:, k] for k, name in enumerate(names)}, comments


def _regression(t, Q):
    sel = t >= (1.0 - REGRESSION_WINDOW) * t[-1]
    if sel.sum() < 2:
        raise MissingColumn("not enough samples for the regression window")
    slope, intercept = np.polyfit(t[sel], Q[sel], 1)
    return slope, intercept, sel


def render_flux_figure(inputs, out_path) -> None:
    """Cumulative-flux curves with least-squares regression overlays; the
    regression window is the second half of the time axis."""
    fig, axes = plt.subplots(1, len(inputs), figsize=(5.2 * len(inputs), 3.6),
                             squeeze=False)
    for ax, path in zip(axes[0], inputs):
        cols, _ = _read_csv(path, FLUX_SCHEMA,
                            ["t", "Q_minus", "Q_mid", "Q_plus"])
        t = cols["t"]
        for name, style in (("Q_minus", "C0-"), ("Q_mid", "C1-"), ("Q_plus", "C2-")):
            ax.plot(t, cols[name], style, lw=1.0, label=name.replace("_", ""))
        slope, intercept, sel = _regression(t, cols["Q_plus"])
        ax.plot(t[sel], slope * t[sel] + intercept, "k--", lw=1.4,
                label="regression: %.3e m/s" % slope)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("Q [m$^3$/m$^2$]")
        ax.set_title(path.split("/")[-2] if "/" in path else path)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)


def render_field_snapshots(inputs, out_path) -> None:
    """Pressure and seepage profiles, one curve per time level."""
    snaps = []
    for path in inputs:
        cols, comments = _read_csv(path, FIELDS_SCHEMA, ["x", "u", "p", "w"])
        t = None
        for ln in comments:
            if ln.startswith("# t ="):
                t = float(ln.split("=", 1)[1])
        snaps.append((t, cols))
    x0 = snaps[0][1]["x"]
    for t, cols in snaps[1:]:
        if cols["x"].shape != x0.shape or not np.array_equal(cols["x"], x0):
            raise MissingColumn("snapshot x-grids do not match")

    fig, (ax_p, ax_w) = plt.subplots(1, 2, figsize=(10.4, 3.6))
    for t, cols in snaps:
        label = "t = %g s" % t if t is not None else None
        ax_p.plot(cols["x"], cols["p"], lw=1.0, label=label)
        ax_w.plot(cols["x"], cols["w"], lw=1.0, label=label)
    ax_p.set_xlabel("x [m]")
    ax_p.set_ylabel("p [Pa]")
    ax_w.set_xlabel("x [m]")
    ax_w.set_ylabel("w [m/s]")
    for ax in (ax_p, ax_w):
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)


def render_audit_bars(inputs, out_path) -> None:
    """Formula-vs-FD relative error per coefficient family."""
    fig, axes = plt.subplots(1, len(inputs), figsize=(5.6 * len(inputs), 3.6),
                             squeeze=False)
    for ax, path in zip(axes[0], inputs):
        cols, comments = _read_audit(path)
        names = sorted(cols)
        vals = [cols[n] for n in names]
        ax.bar(range(len(names)), vals, color="C0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.set_yscale("log")
        ax.axhline(1e-3, color="r", ls="--", lw=1.0, label="tolerance 1e-3")
        ax.set_ylabel("max relative error vs FD")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, out_path)


def _read_audit(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("# schema: %s" % AUDIT_SCHEMA):
        raise SchemaMismatch("%s: expected schema %r" % (path, AUDIT_SCHEMA))
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    header = body[0].split(",")
    for col in ("velocity", "coefficient", "rel_error"):
        if col not in header:
            raise MissingColumn("%s: column %r missing" % (path, col))
    ic = header.index("coefficient")
    ie = header.index("rel_error")
    out = {}
    for ln in body[1:]:
        parts = ln.split(",")
        name = parts[ic]
        if "_" in name:
            continue  # entry rows; the family rows carry the gate values
        out[name] = max(out.get(name, 0.0), float(parts[ie]))
    if not out:
        raise MissingColumn("%s: no family rows" % path)
    return out, lines


def _save(fig, out_path) -> None:
    meta = {"Date": None} if str(out_path).endswith(".svg") else {}
    fig.savefig(out_path, dpi=150, metadata=meta)
    plt.close(fig)


KINDS = {
    "flux-with-regression": render_flux_figure,
    "field-snapshots": render_field_snapshots,
    "audit-bars": render_audit_bars,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="figures", description="pzpump figure rendering")
    parser.add_argument("kind", choices=sorted(KINDS))
    parser.add_argument("--in", dest="inputs", nargs="+", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        KINDS[args.kind](args.inputs, args.out)
    except (MissingColumn, SchemaMismatch, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    print("wrote %s" % args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
