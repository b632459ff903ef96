"""Command-line pipeline: phantom, coils, mask, acquire, recon, fit, metrics, compare, sweep.

Every subcommand reads one JSON configuration (``--config``; built-in defaults
otherwise), writes the resolved configuration to ``config.resolved.json`` in
the output directory, and reuses artifacts already present there (truth,
coils, masks, measurements) or regenerates them deterministically.

Exit codes: 0 success, 1 usage/configuration error, 2 reconstruction written
but not converged, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext

import numpy as np

from . import analysis, phantom
from .config import ConfigError, RunConfig, load_config
from .direct import DirectBackend, direct_irls_reconstruct
from .forward import AcquisitionOperator
from .irls import FastBackend, mu_sweep, solve
from .lifting import DenseCapError, FilterSupport
from .volume import ComplexVolume, CserError, as_array, read_cser, write_cser

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- artifacts

class Workspace:
    def __init__(self, cfg: RunConfig, out: str):
        self.cfg = cfg
        self.out = out
        os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def exists(self, name: str) -> bool:
        return os.path.exists(self.path(name))

    def write_resolved_config(self) -> None:
        with open(self.path("config.resolved.json"), "w") as fh:
            fh.write(self.cfg.to_json() + "\n")

    # truth -------------------------------------------------------
    def make_phantom(self):
        c = self.cfg
        t, p, q = c.shape
        ph = c["phantom"]
        if ph["kind"] == "uniform_beta":
            maps = phantom.uniform_beta_maps(p, q, ph["beta"], ph["seed"], ph["delta_te"])
        else:
            maps = phantom.gaussian_blob_maps(p, q, ph["l"], ph["seed"], tuple(ph["t2_range"]), ph["delta_te"])
        series = np.array(phantom.synthesize_series(maps, t))
        peak = np.abs(series).max()
        scale = 1.0 / peak if peak > 0 else 1.0
        series *= scale
        write_cser(series, self.path("truth.cser"))
        stack = np.concatenate([maps.amplitude_maps * scale, maps.t2_maps.astype(np.complex128)])
        write_cser(stack, self.path("maps.cser"))
        sidecar = {
            "kind": ph["kind"],
            "l": maps.l,
            "delta_te_ms": maps.delta_te,
            "echo_times_ms": maps.echo_times(t),
            "maps_layout": f"frames 0..{maps.l - 1}: amplitudes; frames {maps.l}..{2 * maps.l - 1}: T2 in ms (real part)",
            "truth_domain": "image",
            "peak_scale": scale,
        }
        with open(self.path("phantom.json"), "w") as fh:
            json.dump(sidecar, fh, indent=2)
        return series

    def truth_image(self) -> np.ndarray:
        if not self.exists("truth.cser"):
            return self.make_phantom()
        arr = as_array(read_cser(self.path("truth.cser")))
        if arr.shape != self.cfg.shape:
            raise UsageError(f"truth.cser has shape {arr.shape}, config dims give {self.cfg.shape}")
        return np.array(arr)

    def truth_kspace(self) -> np.ndarray:
        return np.fft.fft2(self.truth_image(), axes=(-2, -1), norm="ortho")

    # coils -------------------------------------------------------
    def make_coils(self):
        t, p, q = self.cfg.shape
        c = self.cfg["coils"]
        coils = phantom.coil_sensitivities(p, q, c["count"], c["seed"]) if c["count"] > 1 else None
        maps = coils.maps if coils is not None else np.ones((1, p, q), dtype=np.complex128)
        write_cser(maps, self.path("coils.cser"))
        return coils

    def coils(self):
        if not self.exists("coils.cser"):
            return self.make_coils()
        maps = as_array(read_cser(self.path("coils.cser")))
        if maps.shape[1:] != self.cfg.shape[1:]:
            raise UsageError(f"coils.cser frames {maps.shape[1:]} do not match dims {self.cfg.shape[1:]}")
        return phantom.CoilSet(np.array(maps)) if maps.shape[0] > 1 else None

    # mask --------------------------------------------------------
    def make_mask(self):
        t, p, q = self.cfg.shape
        m = self.cfg["mask"]
        if m["kind"] == "uniform":
            masks = phantom.mask_uniform_random(p, q, t, m["fraction"], m["seed"])
        else:
            masks = phantom.mask_cartesian_vd(p, q, t, m["cart_factor"], m["vd_factor"], m["seed"])
        write_cser(masks.mask.astype(np.float64), self.path("mask.cser"))
        return masks

    def mask(self):
        if not self.exists("mask.cser"):
            return self.make_mask()
        arr = as_array(read_cser(self.path("mask.cser")))
        if arr.shape != self.cfg.shape:
            raise UsageError(f"mask.cser has shape {arr.shape}, config dims give {self.cfg.shape}")
        return phantom.SamplingMaskSeries(arr != 0, self.cfg["mask"]["seed"])

    # measurements ------------------------------------------------
    def make_measurements(self):
        n = self.cfg["noise"]
        meas = phantom.acquire(self.truth_image(), self.coils(), self.mask(), n["sigma"], n["seed"])
        meas.save(self.path("acquisition"))
        return meas

    def measurements(self):
        if not os.path.isdir(self.path("acquisition")):
            return self.make_measurements()
        try:
            meas = phantom.Measurements.load(self.path("acquisition"))
        except ValueError as exc:
            if isinstance(exc, CserError):
                raise
            raise UsageError(str(exc)) from None
        if meas.mask.shape != self.cfg.shape:
            raise UsageError(f"measurement mask {meas.mask.shape} does not match config dims {self.cfg.shape}")
        return meas

    def operator(self, meas) -> AcquisitionOperator:
        coils = self.coils()
        maps = coils.maps if coils is not None else None
        op = AcquisitionOperator(meas.mask, maps)
        if op.n_coils != meas.n_coils:
            raise UsageError(f"{meas.n_coils} coil channels measured but {op.n_coils} coil maps found")
        return op


# ---------------------------------------------------------------- commands

def _tag(f: FilterSupport) -> str:
    return f"{f.n1}x{f.n2}x{f.m}"


def _image(x) -> np.ndarray:
    return np.fft.ifft2(as_array(x), axes=(-2, -1), norm="ortho")


def cmd_phantom(ws: Workspace, args) -> int:
    ws.make_phantom()
    print(f"wrote {ws.path('truth.cser')} and {ws.path('maps.cser')}")
    return EXIT_OK


def cmd_coils(ws: Workspace, args) -> int:
    ws.make_coils()
    print(f"wrote {ws.path('coils.cser')}")
    return EXIT_OK


def cmd_mask(ws: Workspace, args) -> int:
    masks = ws.make_mask()
    print(f"wrote {ws.path('mask.cser')} (acceleration {masks.acceleration:.3f})")
    return EXIT_OK


def cmd_acquire(ws: Workspace, args) -> int:
    meas = ws.make_measurements()
    print(f"wrote {meas.n_coils} coil channel(s) to {ws.path('acquisition')}")
    return EXIT_OK


def _truth_if_available(ws: Workspace):
    return ws.truth_kspace() if ws.exists("truth.cser") else None


def cmd_recon(ws: Workspace, args) -> int:
    cfg = ws.cfg
    meas = ws.measurements()
    A = ws.operator(meas)
    filt = cfg.filt
    truth = _truth_if_available(ws)
    grid = cfg["solver"]["mu_grid"]
    if grid:
        if truth is None:
            raise UsageError("a mu_grid sweep needs truth.cser in the output directory")
        res = mu_sweep(meas.kspace, A, filt, cfg.solver(), grid, truth)
        rows = []
        for mu, snr in res.table:
            res.reports[mu].to_csv(ws.path(f"report_mu_{mu:.6g}.csv"))
            rows.append({"mu": mu, "SNR_dB": snr, "best": mu == res.best_mu,
                         "converged": res.reports[mu].converged})
        analysis.export_csv(rows, ws.path("sweep.csv"))
        recon, report = res.best_recon, res.reports[res.best_mu]
        print(f"best mu={res.best_mu:.6g}")
    else:
        recon, report = solve(meas.kspace, A, filt, cfg.solver(), truth=truth)
    write_cser(_image(recon), ws.path("recon.cser"))
    report.to_csv(ws.path("report.csv"))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if truth is not None:
        print(f"SNR_dB={report.final.snr_db:.12g}")
    print(f"iterations={report.n_iters} converged={report.converged}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _load_image(ws: Workspace, name: str) -> np.ndarray:
    arr = as_array(read_cser(ws.path(name)))
    if arr.shape != ws.cfg.shape:
        raise UsageError(f"{name} has shape {arr.shape}, config dims give {ws.cfg.shape}")
    return np.array(arr)


def _display(m: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(m), m, 0.0)


def cmd_fit(ws: Workspace, args) -> int:
    dte = ws.cfg["phantom"]["delta_te"]
    lo, hi = ws.cfg["phantom"]["t2_range"]
    rows = []
    for name in ("truth", "recon"):
        if not ws.exists(f"{name}.cser"):
            continue
        fit = analysis.fit_t2(_load_image(ws, f"{name}.cser"), dte)
        write_cser(np.nan_to_num(fit.t2_map, nan=0.0, posinf=0.0)[None], ws.path(f"t2_{name}.cser"))
        analysis.export_pgm(_display(fit.t2_map), ws.path(f"t2_{name}.pgm"), window=(0.0, 1.5 * hi))
        t2v = fit.t2_map[fit.valid_mask & np.isfinite(fit.t2_map)]
        rows.append({"series": name, "valid_pixels": int(fit.valid_mask.sum()),
                     "t2_median_ms": float(np.median(t2v)) if t2v.size else float("nan"),
                     "residual_median": float(np.median(fit.residual_map[fit.valid_mask])) if t2v.size else float("nan")})
    if not rows:
        raise FileNotFoundError(f"no truth.cser or recon.cser in {ws.out}")
    analysis.export_csv(rows, ws.path("fit_summary.csv"))
    print(f"wrote {ws.path('fit_summary.csv')}")
    return EXIT_OK


def _metrics_row(ws: Workspace, truth_img, recon_img, label: dict) -> dict:
    dte = ws.cfg["phantom"]["delta_te"]
    row = dict(label)
    row["SNR_dB"] = analysis.snr_db(truth_img, recon_img)
    tf, rf = analysis.fit_t2(truth_img, dte), analysis.fit_t2(recon_img, dte)
    try:
        summ = analysis.t2_error_map(tf, rf)
        row["t2_median_rel_err"], row["t2_p95_rel_err"] = summ.median, summ.p95
    except analysis.UndefinedMetricError:
        summ = None
        row["t2_median_rel_err"] = row["t2_p95_rel_err"] = float("nan")
    return row, summ


def cmd_metrics(ws: Workspace, args) -> int:
    truth = _load_image(ws, "truth.cser")
    rows = []
    if ws.exists("acquisition"):
        meas = ws.measurements()
        zf = _image(ws.operator(meas).apply_adjoint(meas.kspace))
        rows.append(_metrics_row(ws, truth, zf, {"recon": "zero_filled"})[0])
    targets = [("recon", "recon.cser")] if ws.exists("recon.cser") else []
    targets += [(f"filter_{_tag(f)}", f"recon_{_tag(f)}.cser") for f in ws.cfg.filters
                if ws.exists(f"recon_{_tag(f)}.cser")]
    if not targets:
        raise FileNotFoundError(f"no reconstruction found in {ws.out}")
    for label, name in targets:
        row, summ = _metrics_row(ws, truth, _load_image(ws, name), {"recon": label})
        rows.append(row)
        if summ is not None:
            analysis.export_pgm(_display(summ.error_map), ws.path(f"t2_error_{label}.pgm"), window=(0.0, 0.5))
        print(f"{label}: SNR_dB={row['SNR_dB']:.6g} median_T2_err={row['t2_median_rel_err']:.4g}")
    analysis.export_csv(rows, ws.path("metrics.csv"))
    return EXIT_OK


def cmd_compare(ws: Workspace, args) -> int:
    cfg = ws.cfg
    meas = ws.measurements()
    A = ws.operator(meas)
    filt = cfg.filt
    try:
        DirectBackend(A.shape, filt)
    except DenseCapError as exc:
        raise UsageError(f"compare refused: {exc}") from None
    truth = _truth_if_available(ws)
    scfg = cfg.solver()
    from dataclasses import replace
    scfg = replace(scfg, keep_iterates=True)
    t0 = time.perf_counter()
    xf, rf = solve(meas.kspace, A, filt, scfg, truth=truth)
    tf = time.perf_counter() - t0
    t0 = time.perf_counter()
    xd, rd = direct_irls_reconstruct(meas.kspace, A, filt, scfg)
    td = time.perf_counter() - t0
    rows = []
    for k in range(max(rf.n_iters, rd.n_iters)):
        a = rf.records[k] if k < rf.n_iters else None
        b = rd.records[k] if k < rd.n_iters else None
        gap = float("nan")
        if a is not None and b is not None:
            gap = float(np.linalg.norm(rf.iterates[k] - rd.iterates[k]) / np.linalg.norm(rd.iterates[k]))
        rows.append({"iteration": k + 1,
                     "cost_fast": a.cost if a else float("nan"), "cost_direct": b.cost if b else float("nan"),
                     "iterate_gap": gap,
                     "seconds_fast": a.seconds if a else float("nan"),
                     "seconds_direct": b.seconds if b else float("nan")})
    analysis.export_csv(rows, ws.path("comparison.csv"))
    summary = {"time_fast_s": tf, "time_direct_s": td, "time_ratio_direct_over_fast": td / tf,
               "max_iterate_gap": float(np.nanmax([r["iterate_gap"] for r in rows]))}
    if truth is not None:
        summary["snr_fast_dB"] = analysis.snr_db(truth, xf)
        summary["snr_direct_dB"] = analysis.snr_db(truth, xd)
    analysis.export_csv([summary], ws.path("comparison_summary.csv"))
    for k, v in summary.items():
        print(f"{k}={v:.6g}")
    return EXIT_OK


def cmd_sweep(ws: Workspace, args) -> int:
    """Filter-size study: one row ``(n1, n2, m, SNR_dB)`` per configured filter."""
    cfg = ws.cfg
    meas = ws.measurements()
    A = ws.operator(meas)
    truth = ws.truth_kspace()
    grid = cfg["solver"]["mu_grid"] or [cfg["solver"]["mu"]]
    rows = []
    for filt in cfg.filters:
        res = mu_sweep(meas.kspace, A, filt, cfg.solver(), grid, truth, FastBackend(A.shape, filt))
        write_cser(_image(res.best_recon), ws.path(f"recon_{_tag(filt)}.cser"))
        rows.append({"n1": filt.n1, "n2": filt.n2, "m": filt.m, "SNR_dB": res.best_snr, "best_mu": res.best_mu})
        print(f"{_tag(filt)}: SNR_dB={res.best_snr:.6g} (mu={res.best_mu:.6g})")
    analysis.export_csv(rows, ws.path("table1.csv"))
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "coils": cmd_coils,
    "mask": cmd_mask,
    "acquire": cmd_acquire,
    "recon": cmd_recon,
    "fit": cmd_fit,
    "metrics": cmd_metrics,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="expslr", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", metavar="PATH", help="JSON run configuration (defaults if omitted)")
    ap.add_argument("--out", metavar="DIR", help="output directory (overrides outputs.directory)")
    ap.add_argument("--seed", type=int, metavar="N", help="base seed; stage seeds become N, N+1, N+2, N+3")
    ap.add_argument("--threads", type=int, default=0, metavar="N", help="BLAS/FFT thread cap, 0 = auto")
    return ap


LARGE_FILTER = 4096


def _thread_limit(n: int):
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        text = None
        if args.config:
            with open(args.config) as fh:
                text = fh.read()
        cfg = load_config(text)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be non-negative")
            cfg.override_seed(args.seed)
        if args.threads < 0:
            raise ConfigError("--threads", "must be >= 0")
        out = args.out or cfg["outputs"]["directory"]
        cfg.raw["outputs"]["directory"] = out
        ws = Workspace(cfg, out)
        ws.write_resolved_config()
        if args.command in ("recon", "metrics", "compare", "sweep"):
            for f in cfg.filters:
                if f.size > LARGE_FILTER:
                    print(f"warning: filter {_tag(f)} has {f.size} taps; the dense {f.size}x{f.size} "
                          "eigendecomposition per iteration will be slow", file=sys.stderr)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, DenseCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CserError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
