"""Command-line front end.

Every subcommand writes CSV or JSON data files into ``--out``. Exit codes:
0 success, 1 runtime or solver failure, 2 configuration or ingestion error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import assimilation, spectral
from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import DiffusionCorrelation
from .kernels import CorrelationModel, ar_correlation, ar_spectrum, circulant_eigenvalues
from .mesh import build_track_mesh, uniform_mesh

log = logging.getLogger("trackcorr")

__all__ = ["main", "build_parser", "read_observations", "IngestionError"]


class IngestionError(ValueError):
    pass


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out_dir: Path, name, text):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)
    return path


def read_observations(path):
    """Tracks from an observation CSV.

    Columns: ``track_id``, either ``arc_km`` or ``lon_deg`` and ``lat_deg``,
    and optionally ``value`` and ``sigma_o``. Rows of one track must be in
    along-track order. Returns a list of ``(mesh, values, sigma)``; absent
    values are NaN and absent ``sigma_o`` gives ``sigma = None``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cols = set(reader.fieldnames or [])
            rows = list(reader)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc.strerror}") from None
    if "track_id" not in cols:
        raise IngestionError(f"{path}: missing column track_id")
    has_value, has_sigma = "value" in cols, "sigma_o" in cols
    use_arc = "arc_km" in cols
    if not use_arc and not {"lon_deg", "lat_deg"} <= cols:
        raise IngestionError(f"{path}: needs arc_km or lon_deg and lat_deg columns")
    groups = {}
    for line, row in enumerate(rows, start=2):
        try:
            loc = float(row["arc_km"]) if use_arc else (float(row["lon_deg"]), float(row["lat_deg"]))
            rec = (
                loc,
                float(row["value"]) if has_value else np.nan,
                float(row["sigma_o"]) if has_sigma else 1.0,
            )
        except (TypeError, ValueError):
            raise IngestionError(f"{path}, line {line}: non-numeric field") from None
        if not rec[2] > 0:
            raise IngestionError(f"{path}, line {line}: sigma_o must be > 0")
        groups.setdefault(row["track_id"], []).append(rec)
    if not groups:
        raise IngestionError(f"{path}: no observations")
    tracks = []
    for tid, recs in groups.items():
        locs = np.array([r[0] for r in recs], dtype=float)
        try:
            meshes = build_track_mesh(locs, track_id=tid)
        except ValueError as exc:
            raise IngestionError(f"{path}, track {tid}: {exc}") from None
        sigma = np.array([r[2] for r in recs]) if has_sigma else None
        tracks.append((meshes[0], np.array([r[1] for r in recs]), sigma))
    return tracks


def cmd_kernel(cfg: ExperimentConfig, args):
    kc = cfg.kernel
    r = np.linspace(0.0, kc.r_max_km, kc.n_points)
    k = np.linspace(0.0, kc.k_max, kc.n_points)
    rows = []
    for rho in kc.rho_values:
        for m in kc.m_values:
            model = CorrelationModel(m, rho)
            corr, dens = ar_correlation(model, r), ar_spectrum(model, k)
            rows += [(m, float(rho), r[i], corr[i], k[i], dens[i]) for i in range(r.size)]
    _write(args.out, "kernel.csv", _csv_text(("m", "rho_km", "r_km", "corr", "k", "density"), rows))
    return 0


def _theory_spectrum(cov, n, h):
    return circulant_eigenvalues(cov.model, n, h)


def cmd_spectrum(cfg: ExperimentConfig, args):
    n, h = cfg.grid.n, cfg.grid.h_km
    spec_b = _theory_spectrum(cfg.background, n, h)
    spec_o = _theory_spectrum(cfg.truth, n, h)
    spec_t = _theory_spectrum(cfg.specified, n, h)
    dec = spectral.ScaleDecomposition(
        p=n,
        h=h,
        sigma_b2=cfg.background.sigma**2,
        sigma_o2=cfg.truth.sigma**2,
        lam_b=spec_b.eigenvalues,
        lam_o=spec_o.eigenvalues,
        sigma_o2_tilde=cfg.specified.sigma**2,
        lam_o_tilde=spec_t.eigenvalues,
    )
    _write(args.out, "spectrum.csv", spectral.decomposition_csv(dec))
    summary = {"n": n, "h_km": h}
    try:
        summary["crossing"] = spectral.variance_crossing(spec_b, dec.sigma_b2, spec_o, dec.sigma_o2)
    except ValueError:
        summary["crossing"] = None
    _write(args.out, "spectrum_summary.json", _json_text(summary))
    return 0


def cmd_ratio_surface(cfg: ExperimentConfig, args):
    grid_oo, grid_ob = cfg.ratio_surface.grids()
    _write(args.out, "ratio_surface.csv", spectral.ratio_surface_csv(grid_oo, grid_ob))
    return 0


def cmd_normalize(cfg: ExperimentConfig, args):
    truth = cfg.truth
    if truth.diagonal:
        raise ConfigError("truth.diagonal", "normalize needs a correlated (diffusion) covariance")
    if args.obs is not None:
        meshes = [t[0] for t in read_observations(args.obs)]
    else:
        meshes = [uniform_mesh(cfg.grid.n, cfg.grid.h_km)]
    nc = cfg.normalize
    rows, tracks = [], []
    for k, mesh in enumerate(meshes):
        t0 = time.perf_counter()
        est = DiffusionCorrelation(
            m=truth.m, rho=truth.rho_km, target_tol=nc.target_tol, spacing_factor=nc.spacing_factor,
            normalization="spaced", random_state=k,
        ).fit(mesh)
        elapsed = time.perf_counter() - t0
        gamma = est.gamma_
        info = {
            "track_id": str(mesh.track_id),
            "nodes": mesh.size,
            "mean_spacing_km": mesh.mean_spacing,
            "ci_iterations": est.n_iter_,
            "applications": est.normalization_applications_,
            "fit_seconds": round(elapsed, 3) if args.timing else None,
            "gamma_min": float(gamma.min()),
            "gamma_max": float(gamma.max()),
            "gamma_mean": float(gamma.mean()),
        }
        exact = None
        if args.exact_normalization:
            exact = est.set_params(normalization="exact").fit(mesh).gamma_
            err = np.abs(gamma - exact) / exact
            info.update(mean_rel_error=float(err.mean()), max_rel_error=float(err.max()))
        tracks.append(info)
        for i in range(mesh.size):
            row = [str(mesh.track_id), i, mesh.positions[i], gamma[i]]
            if exact is not None:
                row += [exact[i], abs(gamma[i] - exact[i]) / exact[i]]
            rows.append(row)
    header = ["track_id", "node", "arc_km", "gamma"]
    if args.exact_normalization:
        header += ["gamma_exact", "rel_error"]
    _write(args.out, "normalize.csv", _csv_text(header, rows))
    _write(args.out, "normalize_summary.json", _json_text({"m": truth.m, "rho_km": truth.rho_km, "tracks": tracks}))
    return 0


def cmd_sample(cfg: ExperimentConfig, args):
    B, R_true, _, G = assimilation.build_operators(cfg, args.exact_normalization)
    state = assimilation.simulate_innovation(B, R_true, G, cfg.seed)
    h = cfg.grid.h_km
    bg_rows = [(i, i * h, state.eps_b[i]) for i in range(G.n)]
    ob_rows = [(j, int(G.indices[j]), G.indices[j] * h, state.eps_o[j], state.d[j]) for j in range(G.p)]
    _write(args.out, "sample_background.csv", _csv_text(("state_index", "x_km", "eps_b"), bg_rows))
    _write(args.out, "sample_obs.csv", _csv_text(("obs", "state_index", "x_km", "eps_o", "d"), ob_rows))
    return 0


def cmd_assimilate(cfg: ExperimentConfig, args):
    report = assimilation.run_experiment(cfg, workers=args.workers, exact_normalization=args.exact_normalization)
    _write(args.out, "report.csv", report.csv_text())
    _write(args.out, "summary.json", report.summary_json())
    failed = int(np.sum(~report.converged))
    if failed:
        log.error("%d of %d replicates hit the iteration cap", failed, report.replicates)
        return 1
    return 0


COMMANDS = {
    "kernel": cmd_kernel,
    "spectrum": cmd_spectrum,
    "ratio-surface": cmd_ratio_surface,
    "normalize": cmd_normalize,
    "sample": cmd_sample,
    "assimilate": cmd_assimilate,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="trackcorr",
        description="Track-correlated observation-error experiments; every command writes data files into --out.",
    )
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="INI configuration file (defaults are used when omitted)")
    ap.add_argument("--obs", type=Path, help="observation CSV (normalize)")
    ap.add_argument("--out", type=Path, default=Path("."), help="output directory")
    ap.add_argument("--seed", type=int, help="override experiment.seed")
    ap.add_argument("--workers", type=int, default=1, help="processes for replicate batches")
    ap.add_argument("--exact-normalization", action="store_true", help="brute-force normalization factors")
    ap.add_argument("--timing", action="store_true", help="include wall-clock times (breaks byte-identical output)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
