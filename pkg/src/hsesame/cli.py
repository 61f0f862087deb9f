"""Command-line workflows: ``simulate``, ``localize`` and ``evaluate``.

Each subcommand reads an optional JSON config; command-line flags override
config values. Relative paths in a config file resolve against the file's
directory. Every run writes ``manifest.json`` with the effective config, its
hash, the seed and the package version.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 sampler hit
``max_iterations`` before reaching the full posterior, 4 infeasible
simulation scenario.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimates import summarize, write_timecourses
from .evaluation import (Dataset, WORKERS_ENV, compare_methods, setting_prior, write_report)
from .forward import (LeadfieldError, load_data, load_leadfield, save_data, save_leadfield,
                      sphere_sensors, synth_leadfield)
from .model import NoiseModel, PriorConfig
from .sampler import SamplerConfig, run
from .simulate import (InfeasibleScenario, enforce_snr, estimate_noise_sigma,
                       peak_window, scenario_json, simulate_sources, synth_data)
from .source_space import (GridError, build_grid, load_grid, random_ball_grid, regular_ball_grid,
                           save_grid)

log = logging.getLogger("hsesame")

EXIT_OK, EXIT_CONFIG, EXIT_INCOMPLETE, EXIT_INFEASIBLE = 0, 2, 3, 4

GEOMETRY_DEFAULTS = {
    "sim_points": 400, "inf_points": 200, "radius": 0.07, "min_distance": 0.008,
    "n_sensors": 50, "sensor_radius": 0.12, "mixing_spread": 0.1,
    "neighbor_radius": 0.02, "proposal_scale": 0.01, "seed": 0,
}
SIMULATE_DEFAULTS = {
    "n_datasets": 1, "n_dipoles": 1, "amplitude_peak": 2e-7, "T": 40, "min_separation": 0.03,
    "snr_floor_db": 3.0, "noise_sigma": 2e-13, "enforce_snr": True, "geometry": {},
}
LOCALIZE_DEFAULTS = {
    "mode": "sesame", "poisson_mean": 0.25, "n_dipoles_max": 10, "base_sigma": 2e-7,
    "noise_sigma": "auto", "window": {"start": None, "length": 20}, "n_particles": 100,
    "min_iterations": 10, "max_iterations": 1000, "neighbor_radius": 0.02,
    "proposal_scale": 0.01, "exclusion_radius": 0.02,
}
EVALUATE_DEFAULTS = {
    "base_sigma": 2e-7, "methods": ["sesame", "h-sesame"], "k_values": [0.1, 1.0, 10.0],
    "poisson_mean": 0.25, "n_dipoles_max": 10, "window_length": 20, "n_particles": 100,
    "min_iterations": 10, "max_iterations": 1000, "exclusion_radius": 0.02,
}


class ConfigError(ValueError):
    pass


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def load_config(path):
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg, path.resolve().parent


def merged(defaults, cfg, args, flag_map):
    out = {**defaults, **cfg}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    unknown = set(cfg) - set(defaults) - {"grid", "leadfield", "data", "batch", "sigma_q",
                                          "sigma_min", "sigma_max", "k", "seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return out


def resolve(base, p, what):
    if p is None:
        raise ConfigError(f"missing required path: {what}")
    path = Path(p)
    path = path if path.is_absolute() else base / path
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def write_manifest(out, command, cfg, seed, extra=None):
    manifest = {"command": command, "config": cfg, "config_hash": config_hash(cfg),
                "seed": seed, "version": __version__}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


# --- simulate -----------------------------------------------------------------

def build_geometry(geo):
    rng = np.random.default_rng(geo["seed"])
    sim = build_grid(random_ball_grid(geo["sim_points"], geo["radius"], rng, geo["min_distance"]),
                     geo["neighbor_radius"], geo["proposal_scale"])
    inf = build_grid(regular_ball_grid(geo["inf_points"], geo["radius"]),
                     geo["neighbor_radius"], geo["proposal_scale"])
    sensors = sphere_sensors(geo["n_sensors"], geo["sensor_radius"])
    lf_sim = synth_leadfield(sim, sensors, geo["seed"], geo["mixing_spread"])
    lf_inf = synth_leadfield(inf, sensors, geo["seed"], geo["mixing_spread"])
    return sim, lf_sim, inf, lf_inf


def cmd_simulate(args) -> int:
    raw, base = load_config(args.config)
    cfg = merged(SIMULATE_DEFAULTS, raw, args, {"n_dipoles": "n_dipoles", "n_datasets": "n_datasets"})
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    out = Path(args.out or raw.get("out") or "simulation")
    counts = cfg["n_dipoles"] if isinstance(cfg["n_dipoles"], list) else [cfg["n_dipoles"]]
    if any(int(n) < 0 for n in counts) or int(cfg["n_datasets"]) < 0:
        raise ConfigError("n_dipoles and n_datasets must be non-negative")

    geo_dir = out / "geometry"
    geo_dir.mkdir(parents=True, exist_ok=True)
    if "grid" in raw or "leadfield" in raw:
        sim = inf = load_grid(resolve(base, raw.get("grid"), "grid"))
        lf_sim = lf_inf = load_leadfield(resolve(base, raw.get("leadfield"), "leadfield"), sim)
        geometry = {"grid": str(resolve(base, raw["grid"], "grid")),
                    "leadfield": str(resolve(base, raw["leadfield"], "leadfield"))}
    else:
        geo = {**GEOMETRY_DEFAULTS, **cfg["geometry"]}
        cfg["geometry"] = geo
        sim, lf_sim, inf, lf_inf = build_geometry(geo)
        save_grid(geo_dir / "sim_grid.csv", sim.points)
        save_leadfield(geo_dir / "sim_leadfield.npy", lf_sim)
        save_grid(geo_dir / "grid.csv", inf.points)
        save_leadfield(geo_dir / "leadfield.npy", lf_inf)
        geometry = {"grid": "geometry/grid.csv", "leadfield": "geometry/leadfield.npy",
                    "sim_grid": "geometry/sim_grid.csv",
                    "sim_leadfield": "geometry/sim_leadfield.npy"}

    scen_kw = {k: cfg[k] for k in ("amplitude_peak", "T", "min_separation", "snr_floor_db",
                                   "noise_sigma")}
    children = np.random.SeedSequence(seed).spawn(len(counts) * int(cfg["n_datasets"]))
    entries = []
    i = 0
    for n in counts:
        for _ in range(int(cfg["n_datasets"])):
            ds_seed = int(children[i].generate_state(1)[0])
            rng = np.random.default_rng(children[i])
            scenario = simulate_sources(sim, int(n), rng, **scen_kw)
            if cfg["enforce_snr"]:
                scenario = enforce_snr(scenario, lf_sim, sim, rng)
            clean, noisy, snr = synth_data(scenario, lf_sim, rng)
            ds_id = f"ds{i:04d}"
            d = out / "datasets" / ds_id
            d.mkdir(parents=True, exist_ok=True)
            save_data(d / "data.csv", noisy)
            save_data(d / "clean.csv", clean)
            (d / "truth.json").write_text(scenario_json(scenario, sim, snr))
            (d / "seed.txt").write_text(f"{ds_seed}\n")
            entries.append({"id": ds_id, "n_dipoles": int(n), "data": f"datasets/{ds_id}/data.csv",
                            "truth": f"datasets/{ds_id}/truth.json", "seed": ds_seed,
                            "min_snr_db": float(np.min(snr)) if snr.size else None})
            i += 1
    write_manifest(out, "simulate", cfg, seed, {"geometry": geometry, "datasets": entries})
    log.info("wrote %d datasets to %s", len(entries), out)
    return EXIT_OK


# --- localize -----------------------------------------------------------------

def localize_prior(cfg) -> PriorConfig:
    mode = cfg["mode"]
    if mode not in ("sesame", "h-sesame"):
        raise ConfigError(f"mode must be 'sesame' or 'h-sesame', got {mode!r}")
    common = {"poisson_mean": cfg["poisson_mean"], "n_dipoles_max": cfg["n_dipoles_max"]}
    if cfg.get("k") is not None:
        return setting_prior(mode, float(cfg["k"]), cfg["base_sigma"], **common)
    if mode == "sesame":
        if cfg.get("sigma_q") is None:
            raise ConfigError("sesame mode needs sigma_q (or k)")
        return PriorConfig.fixed(cfg["sigma_q"], **common)
    if cfg.get("sigma_min") is None:
        raise ConfigError("h-sesame mode needs sigma_min (or k)")
    smax = cfg.get("sigma_max") or 1e3 * cfg["sigma_min"]
    return PriorConfig.hyper(cfg["sigma_min"], smax, **common)


def cmd_localize(args) -> int:
    raw, base = load_config(args.config)
    cfg = merged(LOCALIZE_DEFAULTS, raw, args,
                 {"mode": "mode", "k": "k", "particles": "n_particles"})
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    out = Path(args.out or raw.get("out") or "localize")
    prior = localize_prior(cfg)
    grid = load_grid(resolve(base, raw.get("grid"), "grid"), cfg["neighbor_radius"],
                     cfg["proposal_scale"])
    lf = load_leadfield(resolve(base, raw.get("leadfield"), "leadfield"), grid)
    y = load_data(resolve(base, raw.get("data"), "data"))
    if y.shape[0] != lf.n_sensors:
        raise ConfigError(f"data have {y.shape[0]} sensors, leadfield has {lf.n_sensors}")
    if prior.n_dipoles_max > grid.n_points:
        raise ConfigError("n_dipoles_max exceeds the number of grid points")
    window = {**LOCALIZE_DEFAULTS["window"], **(cfg.get("window") or {})}
    start, stop = peak_window(y, int(window["length"]), window.get("start"))
    y = y[:, start:stop]
    log.info("using %d topographies (samples %d to %d)", y.shape[1], start, stop - 1)
    sigma_noise = estimate_noise_sigma(y) if cfg["noise_sigma"] == "auto" else float(cfg["noise_sigma"])
    noise = NoiseModel(sigma_noise)
    sampler_cfg = SamplerConfig(n_particles=int(cfg["n_particles"]),
                                min_iterations=int(cfg["min_iterations"]),
                                max_iterations=int(cfg["max_iterations"]), rng_seed=seed)

    out.mkdir(parents=True, exist_ok=True)
    state = run(y, lf, grid, prior, noise, sampler_cfg, diagnostics_path=out / "diagnostics.csv")
    summary = summarize(state, y, lf, grid, prior, noise, cfg["exclusion_radius"])
    summary.meta.update({"window": [start, stop], "noise_sigma": sigma_noise,
                         "n_topographies": int(y.shape[1])})
    summary.write(out / "summary.json", grid)
    if summary.moment_timecourses is not None:
        write_timecourses(out / "timecourses.csv", summary.moment_timecourses)
    write_manifest(out, "localize", cfg, seed, {"complete": state.complete})
    log.info("estimated %d dipoles; sigma_q %.3g", summary.est_n_dipoles, summary.est_sigma_q)
    return EXIT_OK if state.complete else EXIT_INCOMPLETE


# --- evaluate -----------------------------------------------------------------

def read_batch(batch_dir):
    manifest = json.loads((batch_dir / "manifest.json").read_text())
    geo = manifest.get("geometry", {})
    grid_path = resolve(batch_dir, geo.get("grid"), "batch grid")
    lf_path = resolve(batch_dir, geo.get("leadfield"), "batch leadfield")
    datasets = []
    for entry in manifest.get("datasets", []):
        truth_path = batch_dir / entry["truth"]
        if not truth_path.exists():
            log.warning("skipping %s: truth file %s missing", entry["id"], truth_path)
            continue
        truth = json.loads(truth_path.read_text())
        datasets.append(Dataset(entry["id"], load_data(batch_dir / entry["data"]),
                                int(truth["n_dipoles"]),
                                np.asarray(truth.get("true_coordinates", []), dtype=float)))
    return grid_path, lf_path, datasets


def cmd_evaluate(args) -> int:
    raw, base = load_config(args.config)
    cfg = merged(EVALUATE_DEFAULTS, raw, args, {"particles": "n_particles"})
    if args.k is not None:
        cfg["k_values"] = [args.k]
    if args.mode is not None:
        cfg["methods"] = [args.mode]
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    out = Path(args.out or raw.get("out") or "report")
    batch_dir = resolve(base, args.batch or raw.get("batch"), "batch")
    grid_path, lf_path, datasets = read_batch(batch_dir)
    grid = load_grid(grid_path)
    lf = load_leadfield(lf_path, grid)
    sampler_cfg = SamplerConfig(n_particles=int(cfg["n_particles"]),
                                min_iterations=int(cfg["min_iterations"]),
                                max_iterations=int(cfg["max_iterations"]))
    matrix = compare_methods(datasets, grid, lf, cfg["base_sigma"], sampler_cfg, seed,
                             tuple(cfg["methods"]), tuple(float(k) for k in cfg["k_values"]),
                             prior_kw={"poisson_mean": cfg["poisson_mean"],
                                       "n_dipoles_max": cfg["n_dipoles_max"]},
                             window_len=int(cfg["window_length"]),
                             exclusion_radius=cfg["exclusion_radius"])
    summary = write_report(matrix, out)
    write_manifest(out, "evaluate", cfg, seed, {"batch": str(batch_dir),
                                                "workers": os.environ.get(WORKERS_ENV, "1")})
    log.info("evaluated %d datasets, %d failed cells", len(datasets), len(summary["failed"]))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hsesame", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("localize", cmd_localize),
                     ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "simulate":
            p.add_argument("--n-dipoles", dest="n_dipoles", type=int)
            p.add_argument("--n-datasets", dest="n_datasets", type=int)
        else:
            p.add_argument("--mode", choices=["sesame", "h-sesame"])
            p.add_argument("--k", type=float, help="prior scale factor on base_sigma")
            p.add_argument("--particles", type=int)
        if name == "evaluate":
            p.add_argument("--batch", help="directory written by `hsesame simulate`")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GridError, LeadfieldError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except InfeasibleScenario as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
