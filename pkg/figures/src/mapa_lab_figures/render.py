"""Render paper-style figures from the experiment pipeline's artifacts.

Four figure kinds, one per experiment family:

* ``kl_vs_s``    test-KL against training sample count, one line per method
                 (reads a set of eval.json files)
* ``passes``     forward passes per point against sample count under the
                 decoder-only and encoder+decoder cost models
                 (reads a cost CSV)
* ``trends``     per-point posterior panels: original-model posterior curve,
                 empiricalized posterior, and the affinity approximation
                 (reads a trends CSV)
* ``non_ident``  per-point rank-correlation parity between the two model
                 variants (reads a non-ident CSV)

Inputs are validated against frozen column schemas before any file is
written; a mismatch aborts with exit status 2 naming the offending column,
and never leaves a partial output file. Rendering is deterministic: same
inputs, same figure content.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("kl_vs_s", "passes", "trends", "non_ident")

CSV_SCHEMAS = {
    "passes": ["method", "s", "k", "decoder_per_point", "encoder_per_point",
               "total_per_point"],
    "trends": ["point", "series", "x", "y"],
    "non_ident": ["point", "corr_variant1", "corr_variant2"],
}

EVAL_JSON_KEYS = ("method", "s_train", "kl", "kl_stderr")

SERIES_STYLE = {
    "original": dict(color="black", lw=1.5, label="original posterior"),
    "empiricalized": dict(color="tab:red", s=6, label="empiricalized posterior"),
    "mapa": dict(color="tab:blue", s=6, label="index-affinity approximation"),
}


class SchemaError(ValueError):
    """Input artifact does not match the frozen schema."""


@dataclass
class FigureSpec:
    kind: str
    inputs: list
    output: str
    title: str = ""
    log_y: bool = False
    max_panels: int = 6
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind '{self.kind}'")
        if not self.inputs:
            raise SchemaError("figure spec needs at least one input")


def read_artifact_csv(path, kind):
    """Read a provenance-headed CSV and validate its columns for `kind`."""
    if not os.path.exists(path):
        raise SchemaError(f"input not found: {path}")
    with open(path) as f:
        first = f.readline()
        body = f.read() if first.startswith("#") else first + f.read()
    reader = csv.DictReader(body.splitlines())
    expected = CSV_SCHEMAS[kind]
    got = reader.fieldnames or []
    for col in expected:
        if col not in got:
            raise SchemaError(f"{path}: missing column '{col}'")
    for col in got:
        if col not in expected:
            raise SchemaError(f"{path}: unexpected column '{col}'")
    return list(reader)


def read_eval_json(path):
    if not os.path.exists(path):
        raise SchemaError(f"input not found: {path}")
    with open(path) as f:
        payload = json.load(f)
    for key in EVAL_JSON_KEYS:
        if key not in payload:
            raise SchemaError(f"{path}: missing column '{key}'")
    return payload


# -------------------------------------------------------------- figure kinds

def _fig_kl_vs_s(spec: FigureSpec):
    points = [read_eval_json(p) for p in spec.inputs]
    by_method = {}
    for p in points:
        by_method.setdefault(p["method"], []).append(
            (p["s_train"] or 0, p["kl"], p["kl_stderr"]))
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for method in sorted(by_method):
        rows = sorted(by_method[method])
        s = [r[0] for r in rows]
        kl = [r[1] for r in rows]
        err = [r[2] for r in rows]
        ax.errorbar(s, kl, yerr=err, marker="o", capsize=3, label=method)
    ax.set_xlabel("importance samples S (training)")
    ax.set_ylabel("test KL to ground truth")
    if spec.log_y:
        ax.set_yscale("log")
    ax.legend()
    ax.set_title(spec.title or "density estimation vs sample budget")
    fig.tight_layout()
    return fig


def _fig_passes(spec: FigureSpec):
    rows = read_artifact_csv(spec.inputs[0], "passes")
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4), sharex=True)
    panels = (("decoder_per_point", "decoder-dominant cost"),
              ("total_per_point", "encoder+decoder cost"))
    methods = sorted({r["method"] for r in rows} - {"mapa_max"})
    cap = next((float(r["decoder_per_point"]) for r in rows if r["method"] == "mapa_max"),
               None)
    for ax, (column, label) in zip(axes, panels):
        for method in methods:
            pts = sorted((int(r["s"]), float(r[column]))
                         for r in rows if r["method"] == method)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        if cap is not None:
            factor = 2.0 if column == "total_per_point" else 1.0
            ax.axhline(cap * factor, color="gray", ls="--", lw=1, label="mapa max")
        ax.set_xlabel("importance samples S")
        ax.set_ylabel("passes per point")
        ax.set_title(label)
        if spec.log_y:
            ax.set_yscale("log")
    axes[0].legend()
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    return fig


def _fig_trends(spec: FigureSpec):
    rows = read_artifact_csv(spec.inputs[0], "trends")
    by_point = {}
    for r in rows:
        by_point.setdefault(int(r["point"]), []).append(r)
    points = sorted(by_point)[: spec.max_panels]
    ncol = min(2, len(points))
    nrow = int(np.ceil(len(points) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(4.6 * ncol, 3.0 * nrow),
                             squeeze=False)
    handles = {}
    for ax, point in zip(axes.ravel(), points):
        data = by_point[point]
        for series in ("original", "empiricalized", "mapa"):
            xs = np.array([float(r["x"]) for r in data if r["series"] == series])
            ys = np.array([float(r["y"]) for r in data if r["series"] == series])
            keep = np.isfinite(ys)
            style = SERIES_STYLE[series]
            if series == "original":
                order = np.argsort(xs[keep])
                h, = ax.plot(xs[keep][order], ys[keep][order], **style)
            else:
                h = ax.scatter(xs[keep], ys[keep], **style)
            handles[series] = h
        ax.set_title(f"x index {point}", fontsize=9)
        ax.set_xlabel("latent coordinate")
        ax.set_ylabel("log posterior")
    for ax in axes.ravel()[len(points):]:
        ax.axis("off")
    fig.legend(handles.values(), [h.get_label() for h in handles.values()],
               loc="lower center", ncol=3, frameon=False)
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    return fig


def _fig_non_ident(spec: FigureSpec):
    rows = read_artifact_csv(spec.inputs[0], "non_ident")
    c1 = np.array([float(r["corr_variant1"]) for r in rows])
    c2 = np.array([float(r["corr_variant2"]) for r in rows])
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.scatter(c1, c2, s=14, color="tab:blue", label="per conditioning point")
    lo = min(c1.min(), c2.min()) - 0.05
    ax.plot([lo, 1], [lo, 1], color="gray", ls="--", lw=1, label="parity")
    ax.axvline(np.median(c1), color="black", lw=0.8, ls=":",
               label="medians")
    ax.axhline(np.median(c2), color="black", lw=0.8, ls=":")
    ax.set_xlabel("rank corr. vs variant 1 posterior")
    ax.set_ylabel("rank corr. vs variant 2 posterior")
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title(spec.title or "approximation quality across model variants")
    fig.tight_layout()
    return fig


_BUILDERS = {"kl_vs_s": _fig_kl_vs_s, "passes": _fig_passes,
             "trends": _fig_trends, "non_ident": _fig_non_ident}


def build_figure(spec: FigureSpec):
    """Validate inputs and build the matplotlib Figure (not yet saved)."""
    return _BUILDERS[spec.kind](spec)


def render(spec: FigureSpec):
    """Render to spec.output (PNG or SVG by extension); returns the path."""
    ext = os.path.splitext(spec.output)[1].lower()
    if ext not in (".png", ".svg"):
        raise SchemaError(f"unsupported output extension '{ext}' (png or svg)")
    fig = build_figure(spec)   # any schema error fires before the file opens
    os.makedirs(os.path.dirname(os.path.abspath(spec.output)), exist_ok=True)
    fig.savefig(spec.output, dpi=150, metadata=_stable_metadata(ext))
    plt.close(fig)
    return spec.output


def _stable_metadata(ext):
    # strip tool/date metadata so identical inputs give identical bytes
    if ext == ".png":
        return {"Software": None}
    return {"Date": None}


def spec_from_args(args):
    if args.spec:
        with open(args.spec) as f:
            payload = json.load(f)
        return FigureSpec(**payload)
    if not (args.kind and args.input and args.output):
        raise SchemaError("need --spec or all of --kind/--input/--output")
    return FigureSpec(kind=args.kind, inputs=args.input, output=args.output,
                      title=args.title, log_y=args.log_y)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mapa-lab-figs",
        description="Render figures from mapa-lab artifacts")
    parser.add_argument("--spec", help="JSON FigureSpec file")
    parser.add_argument("--kind", choices=KINDS)
    parser.add_argument("--input", action="append",
                        help="input artifact path (repeatable)")
    parser.add_argument("--output", help="output image path (.png or .svg)")
    parser.add_argument("--title", default="")
    parser.add_argument("--log-y", action="store_true")
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
        path = render(spec)
    except (SchemaError, json.JSONDecodeError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
