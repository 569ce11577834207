"""Deterministic export of reports: JSON, CSV tables and SVG figures."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

SVG_HASH_SALT = "gelswim"


def _matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    matplotlib.rcParams["svg.fonttype"] = "path"
    return plt


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_rows(path, rows: list) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (f"{v:.10g}" if isinstance(v, float) else v))
                        for k, v in r.items()})


def plot_frequency_responses(report: dict, path) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, env in sorted(report["environments"].items()):
        fr = env.get("frequency_response")
        if not fr:
            continue
        f = np.asarray(fr["f_hz"], float)
        u = np.array([np.nan if v is None else v for v in fr["u_z_um_s"]], float)
        ax.plot(f, u, marker="o", ms=3, label=name)
        if env.get("step_out_hz"):
            ax.axvline(env["step_out_hz"], ls=":", lw=0.8, color=ax.lines[-1].get_color())
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("forward speed (um/s)")
    ax.legend(frameon=False)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


def plot_sweep(sweep: dict, path) -> None:
    plt = _matplotlib()
    param = sweep["parameter"]
    panels = [("P_um", "pitch (um)"), ("D_um", "diameter (um)"), ("alpha_deg", "helix angle (deg)"),
              ("n_turns", "turns")]
    fig, axes = plt.subplots(2, 2, figsize=(7, 5.5))
    for ax, (key, label) in zip(axes.flat, panels):
        for env, rows in sorted(sweep["tables"].items()):
            ax.plot([r[param] for r in rows], [r[key] for r in rows], marker="o", label=env)
        ax.set_xlabel(param)
        ax.set_ylabel(label)
    axes.flat[0].legend(frameon=False)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


def plot_deswelling(recipe, path, powers=None) -> None:
    plt = _matplotlib()
    lp = np.linspace(recipe.nv.lp_min, recipe.nv.lp_max, 41) if powers is None else np.asarray(powers)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, trend in sorted(recipe.deswelling.items()):
        ax.plot(lp, trend(lp), label=name)
    ax.set_xlabel("laser power (mW)")
    ax.set_ylabel("deswelling ratio")
    ax.legend(frameon=False)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


SWEEP_PANELS = (("pitch", "P_um", "um"), ("diameter", "D_um", "um"), ("angle", "alpha_deg", "deg"),
                ("turns", "n_turns", "1"))


def write_sweep_panels(sweep: dict, out: Path) -> list:
    """One CSV per helix descriptor (pitch, diameter, angle, turns) against the swept
    parameter, one column per environment, plus the step-out frequencies."""
    param = sweep["parameter"]
    envs = sorted(sweep["tables"])
    written = []
    panels = SWEEP_PANELS + (("step_out", "step_out_hz", "hz"),)
    for panel, key, unit in panels:
        rows = []
        for i, v in enumerate(sweep["values"]):
            row = {param: v}
            for env in envs:
                row[f"{env}_{unit}"] = sweep["tables"][env][i][key]
            rows.append(row)
        name = f"sweep_{panel}.csv" if panel != "step_out" else "step_out_sweep.csv"
        write_rows(out / name, rows)
        written.append(out / name)
    return written


def export_report(report: dict, out_dir, formats=("json", "csv", "svg"), recipe=None,
                  sweep: Optional[dict] = None) -> list:
    """Write a pipeline report (the ``DesignReport.to_dict`` form) to ``out_dir``.

    Returns the written paths.  Output is byte-identical for identical input.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        write_json(out / "report.json", report)
        written.append(out / "report.json")
        if sweep is not None:
            write_json(out / "sweep.json", sweep)
            written.append(out / "sweep.json")
    if "csv" in formats:
        for name, env in sorted(report["environments"].items()):
            fr = env.get("frequency_response")
            if fr:
                rows = [{"f_hz": f, "u_z_um_s": u, "precession_deg": p, "feasible": int(ok)}
                        for f, u, p, ok in zip(fr["f_hz"], fr["u_z_um_s"], fr["precession_deg"],
                                               fr["feasible"])]
                write_rows(out / f"frequency_{name}.csv", rows)
                written.append(out / f"frequency_{name}.csv")
        if sweep is not None:
            written += write_sweep_panels(sweep, out)
    if "svg" in formats:
        plot_frequency_responses(report, out / "frequency_response.svg")
        written.append(out / "frequency_response.svg")
        if recipe is not None:
            plot_deswelling(recipe, out / "deswelling.svg")
            written.append(out / "deswelling.svg")
        if sweep is not None:
            plot_sweep(sweep, out / "sweep.svg")
            written.append(out / "sweep.svg")
    return written
