"""Evaluation over the test split: CSV tables, NPS, difference images, plots.

Outputs under the chosen directory:

  metrics.csv            volume,method,slice,psnr_db,roi_mean_hu,roi_std_hu
  metrics_aggregate.csv  method,mean_psnr_db,mean_roi_mean_hu,mean_roi_std_hu
  nps.csv                method,bin_center_cyc_per_mm,power_hu2_mm2,count
  nps_distance.csv       method,l2_to_mbir
  nps_parseval.csv       method,recovered_variance_hu2,direct_variance_hu2,rel_error
  diff_mean_abs.csv      method,mean_abs_hu
  diff_<method>_vol<v>.ctk   difference stacks against MBIR
  psnr_per_slice.svg, nps_overlay.svg, line_profile.svg

Floats are written with repr (shortest round-trip form), so identical
inputs regenerate byte-identical files.  PSNR uses the fixed configured
data range; the NPS pools patches from every test slice per method.
"""

from __future__ import annotations

import os

import numpy as np

from .core import SliceStack, write_container
from .dataset import load_stack
from .metrics import (MetricsReport, collect_patches, difference_image,
                      line_profile, nps2d_from_patches, nps_compare,
                      nps_radial, nps_variance, psnr, roi_stats)
from .nnet import infer_volume, load_weights
from . import plots

PSNR_PLOT = "psnr_per_slice.svg"
NPS_PLOT = "nps_overlay.svg"
PROFILE_PLOT = "line_profile.svg"
SUMMARY_NAME = "summary.html"


def _fmt(value):
    return repr(float(value))


def _write_csv(path, header, rows):
    lines = [header]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (str, int)) else _fmt(c)
                              for c in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_weight_files(weight_paths):
    """Map method label -> ParamStore, ordered by Z."""
    stores = []
    for path in weight_paths:
        store = load_weights(path)
        stores.append((store.spec.z_channels, store))
    stores.sort(key=lambda t: t[0])
    zs = [z for z, _ in stores]
    if len(set(zs)) != len(zs):
        raise ValueError(f"duplicate Z among weight files: {zs}")
    return {f"DL-MBIR_{z}": store for z, store in stores}


def evaluate(manifest, weight_paths, out_dir, cfg):
    """Run the full evaluation; returns (report, profiles, distances)."""
    test = manifest.split("test")
    if not test:
        raise ValueError("manifest has no test volumes")
    os.makedirs(out_dir, exist_ok=True)
    dl_stores = _load_weight_files(weight_paths)
    methods = ["MBIR", "FBP"] + list(dl_stores)
    roi = cfg.roi()
    nps_params = cfg.nps_params()
    n_bins = cfg.getint("evaluate", "nps_bins")
    data_range = cfg.getfloat("evaluate", "data_range_hu")

    # reconstruct every method's stacks per test volume
    stacks = {}
    for vol in test:
        fbp_stack = load_stack(manifest, vol.fbp)
        mbir_stack = load_stack(manifest, vol.mbir)
        if fbp_stack.n_slices != mbir_stack.n_slices:
            raise ValueError(f"volume {vol.index}: FBP/MBIR slice counts differ")
        entry = {"FBP": fbp_stack, "MBIR": mbir_stack}
        for label, store in dl_stores.items():
            entry[label] = infer_volume(store, fbp_stack)
        stacks[vol.index] = entry

    report = MetricsReport()
    for vol in test:
        entry = stacks[vol.index]
        for method in methods:
            for k in range(entry["MBIR"].n_slices):
                img = entry[method].slices[k]
                ref = entry["MBIR"].slices[k]
                mean, std = roi_stats(img, roi)
                report.add(f"vol{vol.index}", method, k,
                           psnr(img, ref, data_range), mean, std)

    _write_csv(os.path.join(out_dir, "metrics.csv"),
               "volume,method,slice,psnr_db,roi_mean_hu,roi_std_hu",
               report.rows)
    _write_csv(os.path.join(out_dir, "metrics_aggregate.csv"),
               "method,mean_psnr_db,mean_roi_mean_hu,mean_roi_std_hu",
               [(m, *vals) for m, vals in report.aggregate().items()])

    # pooled NPS per method
    profiles = {}
    parseval_rows = []
    nps_rows = []
    for method in methods:
        patches = []
        for vol in test:
            for img in stacks[vol.index][method].slices:
                patches.extend(collect_patches(img, nps_params))
        pixel_size = stacks[test[0].index][method].slices[0].pixel_size
        nmap = nps2d_from_patches(patches, pixel_size)
        recovered = nps_variance(nmap)
        direct = float(np.mean([np.mean(p * p) for p in patches]))
        rel = abs(recovered - direct) / direct if direct > 0 else 0.0
        parseval_rows.append((method, recovered, direct, rel))
        prof = nps_radial(nmap, n_bins)
        profiles[method] = prof
        for center, power, count in zip(prof.bin_centers, prof.power, prof.counts):
            nps_rows.append((method, center, power, int(count)))
    distances = nps_compare(profiles)

    _write_csv(os.path.join(out_dir, "nps.csv"),
               "method,bin_center_cyc_per_mm,power_hu2_mm2,count", nps_rows)
    _write_csv(os.path.join(out_dir, "nps_distance.csv"), "method,l2_to_mbir",
               [(m, d) for m, d in distances.items()])
    _write_csv(os.path.join(out_dir, "nps_parseval.csv"),
               "method,recovered_variance_hu2,direct_variance_hu2,rel_error",
               parseval_rows)

    # difference stacks and their pooled mean absolute error
    diff_rows = []
    for method in methods:
        if method == "MBIR":
            continue
        total = 0.0
        count = 0
        for vol in test:
            entry = stacks[vol.index]
            diffs = tuple(
                difference_image(entry[method].slices[k], entry["MBIR"].slices[k])
                for k in range(entry["MBIR"].n_slices)
            )
            stack = SliceStack(diffs, entry["MBIR"].slice_spacing)
            write_container(
                os.path.join(out_dir, f"diff_{method}_vol{vol.index}.ctk"), stack)
            for d in diffs:
                total += float(np.abs(d.values).sum())
                count += d.values.size
        diff_rows.append((method, total / count))
    _write_csv(os.path.join(out_dir, "diff_mean_abs.csv"),
               "method,mean_abs_hu", diff_rows)

    # figures
    plots.psnr_per_slice(report, os.path.join(out_dir, PSNR_PLOT))
    plots.nps_overlay(profiles, os.path.join(out_dir, NPS_PLOT))
    first = test[0]
    entry = stacks[first.index]
    mid = entry["MBIR"].n_slices // 2
    row = cfg.getint("evaluate", "profile_row")
    width = entry["MBIR"].slices[mid].width
    series = {}
    truth_stack = load_stack(manifest, first.truth)
    series["truth"] = line_profile(truth_stack.slices[mid], row, 0, width - 1)
    for method in methods:
        series[method] = line_profile(entry[method].slices[mid], row, 0, width - 1)
    plots.profile_overlay(series, os.path.join(out_dir, PROFILE_PLOT),
                          row_label=f"vol{first.index} slice {mid} row {row}")
    return report, profiles, distances


def _read_csv(path):
    if not os.path.exists(path):
        raise ValueError(f"missing evaluation output: {os.path.basename(path)}")
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def _embed_svg(path):
    if not os.path.exists(path):
        raise ValueError(f"missing evaluation output: {os.path.basename(path)}")
    with open(path) as fh:
        text = fh.read()
    start = text.find("<svg")
    return text[start:]


def report_page(out_dir):
    """Render one self-contained summary page from the evaluate outputs.

    Pure function of the input files; regenerating over unchanged inputs
    writes identical bytes.
    """
    agg_header, agg_rows = _read_csv(os.path.join(out_dir, "metrics_aggregate.csv"))
    dist_header, dist_rows = _read_csv(os.path.join(out_dir, "nps_distance.csv"))

    def table(header, rows):
        cells = "".join(f"<th>{h}</th>" for h in header)
        body = "".join(
            "<tr>" + "".join(f"<td>{c}</td>" for c in row) + "</tr>" for row in rows)
        return f"<table><tr>{cells}</tr>{body}</table>"

    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\"><title>ctbench summary</title>",
        "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
        "td,th{border:1px solid #999;padding:0.3em 0.7em}h2{margin-top:1.5em}</style>",
        "</head><body>",
        "<h1>Reconstruction workbench summary</h1>",
        "<h2>Aggregate metrics (test split)</h2>",
        table(agg_header, agg_rows),
        "<h2>Radial NPS distance to MBIR</h2>",
        table(dist_header, dist_rows),
        "<h2>Per-slice PSNR</h2>",
        _embed_svg(os.path.join(out_dir, PSNR_PLOT)),
        "<h2>NPS overlay</h2>",
        _embed_svg(os.path.join(out_dir, NPS_PLOT)),
        "<h2>Line profile</h2>",
        _embed_svg(os.path.join(out_dir, PROFILE_PLOT)),
        "</body></html>",
    ]
    page = "\n".join(parts)
    path = os.path.join(out_dir, SUMMARY_NAME)
    with open(path, "w") as fh:
        fh.write(page)
    return path
