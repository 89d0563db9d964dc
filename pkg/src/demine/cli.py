"""Command-line entry point: ingest, train, cv, simulate, report, serve.

Configuration comes from a JSON file (--config); command-line flags
override file values, and DEMINE_* environment variables sit between the
two (flag > env > file). Seeds are mandatory for simulate and cv so every
produced artifact is reproducible; with the same config and seed the JSON
outputs are byte-identical (key-sorted serialization).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import signal
import sys
from pathlib import Path

import numpy as np

from . import geodata, risk, service, simulator, training

ENV_PREFIX = "DEMINE_"


class CliError(Exception):
    pass


def write_json(path: str | Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise CliError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config file is not valid JSON: {e}") from e


def _setting(args, config: dict, name: str, cast=str, default=None):
    """flag > DEMINE_<NAME> env var > config value > default."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    env = os.environ.get(ENV_PREFIX + name.upper())
    if env is not None:
        return cast(env)
    if name in config:
        return config[name]
    return default


def _load_regions(entries) -> list:
    """Region entries: {"dataset": path} or {"synthetic": {...}}."""
    regions = []
    for entry in entries:
        if "dataset" in entry:
            _, grid, ds = geodata.load_dataset(entry["dataset"])
            regions.append((grid, ds))
        elif "synthetic" in entry:
            raw = entry["synthetic"]
            spec = simulator.SyntheticSpec(
                pattern=raw.get("pattern", "line"),
                n_mines=int(raw["n_mines"]),
                spacing=float(raw.get("spacing", 30.0)),
                jitter=float(raw.get("jitter", 0.0)),
                region_size=float(raw.get("region_size", 500.0)),
                seed=int(raw["seed"]),
                arc_radius=float(raw.get("arc_radius", 200.0)),
                components=tuple(raw.get("components", ("line", "arc"))),
            )
            regions.append(simulator.generate_synthetic_minefield(spec))
        else:
            raise CliError(f"region entry needs 'dataset' or 'synthetic': {entry}")
    return regions


def _hyper_from(config: dict) -> training.InstanceHyperparams:
    h = config.get("hyperparameters") or {}
    try:
        return training.InstanceHyperparams(
            landmine_weight=float(h["landmine_weight"]),
            cluster_max_distance=float(h["cluster_max_distance"]),
            pc_smoothness_factor=(float(h["pc_smoothness_factor"])
                                  if h.get("pc_smoothness_factor") is not None else None),
        )
    except KeyError as e:
        raise CliError(f"hyperparameters missing {e}") from e


def _sampler_from(config: dict, seed: int) -> risk.SamplerSettings:
    s = config.get("sampler") or {}
    return risk.SamplerSettings(
        chains=int(s.get("chains", 4)),
        draws=int(s.get("draws", 2000)),
        warmup=int(s.get("warmup", 1000)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    region = geodata.load_region(args.region)
    try:
        grid, dataset = geodata.ingest(region, args.input)
    except (ValueError, OSError) as e:
        raise CliError(f"ingest failed: {e}") from e
    summary = geodata.save_dataset(args.out, region, grid, dataset)
    print(f"tiles: {summary['n_tiles']}  mines: {summary['n_mines']}  "
          f"mined-tile share: {summary['mined_tile_share']:.2%}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    kind = _setting(args, config, "instance", default="linear")
    seed = _setting(args, config, "seed", cast=int)
    if seed is None:
        seed = 0
    out = _setting(args, config, "out", default="model.json")
    regions = _load_regions(config.get("regions") or [])
    if not regions:
        raise CliError("train needs at least one region")
    hyper = _hyper_from(config)
    sampler = _sampler_from(config, seed) if kind == "bayesian" else None
    instance = training.train_instance(
        regions, kind, hyper, sampler=sampler,
        metadata={"seed": seed, "regions": config.get("regions"),
                  "hyperparameters": hyper.to_dict()},
    )
    training.save_instance(out, instance)
    print(f"trained {kind} instance -> {out} (effective extent {instance.effective_extent} m)")
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args.config)
    kind = _setting(args, config, "instance", default="linear")
    seed = _setting(args, config, "seed", cast=int)
    if seed is None:
        raise CliError("cv requires a seed (--seed, DEMINE_SEED or config)")
    out = _setting(args, config, "out", default="cv_report.json")
    recalc = _setting(args, config, "recalc_interval", cast=int, default=50)
    regions = _load_regions(config.get("regions") or [])
    g = config.get("grid") or {}
    grid = simulator.HyperGrid(
        landmine_weights=tuple(g.get("landmine_weights", (30.0, 60.0, 90.0))),
        cluster_max_distances=tuple(g.get("cluster_max_distances", (50.0, 75.0, 100.0))),
        pc_smoothness_factors=tuple(g.get("pc_smoothness_factors", (5.0, 10.0, 25.0))),
    )
    sampler = _sampler_from(config, seed) if kind == "bayesian" else None
    result = simulator.cross_validate(regions, kind, grid,
                                      recalc_interval=recalc, sampler=sampler)
    write_json(out, {"instance": kind, "seed": seed, "recalc_interval": recalc,
                     **result.to_dict()})
    print(f"cv over {len(result.cells)} cells -> {out}")
    print(f"best: {result.best} (weighted score {result.best_score:.4f})")
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    seed = _setting(args, config, "seed", cast=int)
    if seed is None:
        raise CliError("simulate requires a seed (--seed, DEMINE_SEED or config)")
    out_dir = Path(_setting(args, config, "out", default="sim_out"))
    recalc = _setting(args, config, "recalc_interval", cast=int, default=25)
    out_dir.mkdir(parents=True, exist_ok=True)

    region_entry = config.get("region")
    if not region_entry:
        raise CliError("simulate needs a 'region' entry")
    (grid, dataset), = _load_regions([region_entry])

    deminers = config.get("deminers") or ["random", "sequential"]
    models = config.get("models") or {}
    scorecards: dict = {}
    for kind in deminers:
        if kind == "random":
            suite = simulator.run_random(grid, dataset, seed=seed,
                                         runs=int(config.get("random_runs", 10)))
        elif kind == "sequential":
            suite = simulator.run_sequential_suite(grid, dataset)
        elif kind in training.INSTANCE_KINDS:
            model_path = models.get(kind)
            if not model_path:
                raise CliError(f"no model artifact configured for the {kind} deminer")
            try:
                instance = training.load_instance(model_path)
            except FileNotFoundError as e:
                raise CliError(f"model artifact not found: {model_path}") from e
            stack = training.make_stack(instance, recalc_interval=recalc)
            suite = simulator.run_pattern_suite(grid, dataset, stack)
        else:
            raise CliError(f"unknown deminer kind {kind!r}")
        scorecards[kind] = suite.scorecard().to_dict()
        _write_history_csv(out_dir / f"history_{kind}.csv", suite.mean_l)

    doc = {
        "seed": seed,
        "recalc_interval": recalc,
        "region": region_entry,
        "n_tiles": grid.n_tiles,
        "n_mines": len(dataset),
        "scorecards": scorecards,
    }
    write_json(out_dir / "scorecards.json", doc)
    for kind, card in scorecards.items():
        print(f"{kind:12s} d={card['demining_score']:.4f} t100={card['t100']:.2f}%")
    return 0


def _write_history_csv(path: Path, l: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestep", "share_found"])
        for i, v in enumerate(l, start=1):
            writer.writerow([i, f"{v:.10g}"])


def cmd_report(args) -> int:
    with open(args.scorecards) as fh:
        doc = json.load(fh)
    out = args.out or "report.json"
    table = {}
    plot_data = {}
    base_dir = Path(args.scorecards).parent
    for kind, card in doc["scorecards"].items():
        table[kind] = {
            "demining_score": card["demining_score"],
            "t50": card["t50"], "t75": card["t75"],
            "t90": card["t90"], "t100": card["t100"],
        }
        hist = base_dir / f"history_{kind}.csv"
        if hist.exists():
            with open(hist) as fh:
                rows = list(csv.DictReader(fh))
            plot_data[kind] = [float(r["share_found"]) for r in rows]
    write_json(out, {"table": table, "plot_data": plot_data,
                     "n_tiles": doc.get("n_tiles"), "seed": doc.get("seed")})
    for kind, row in table.items():
        print(f"{kind:12s} d={row['demining_score']:.4f} "
              f"T50={row['t50']:.2f}% T75={row['t75']:.2f}% "
              f"T90={row['t90']:.2f}% T100={row['t100']:.2f}%")
    return 0


def cmd_serve(args) -> int:
    config = _load_config(args.config)
    out_dir = Path(_setting(args, config, "out", default="sessions"))
    host = args.host or config.get("host", "127.0.0.1")
    port = int(args.port if args.port is not None else config.get("port", 8775))
    models = {}
    for kind, path in (config.get("models") or {}).items():
        try:
            models[kind] = training.load_instance(path)
        except FileNotFoundError:
            print(f"warning: model for {kind!r} not found at {path}; "
                  f"pattern sessions of that kind will be refused", file=sys.stderr)
    svc = service.ServiceConfig(
        models=models,
        out_dir=out_dir,
        default_recalc_interval=int(config.get("recalc_interval", 25)),
    )
    try:
        server, manager = service.make_server(svc, host=host, port=port)
    except OSError as e:
        raise CliError(f"cannot bind {host}:{port}: {e}") from e
    print(f"serving on http://{host}:{server.server_address[1]} "
          f"(sessions dir: {out_dir})")

    def _shutdown(signum, frame):
        server.shutdown()

    signal.signal(signal.SIGTERM, _shutdown)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demine",
        description="Pattern-based landmine risk mapping and clearance simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize a mine file into a dataset file")
    p.add_argument("--input", required=True, help="GeoJSON or CSV mine file")
    p.add_argument("--region", required=True, help="region record JSON")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train an instance and write a model artifact")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--instance", choices=training.INSTANCE_KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="two-fold cross validation over a hyperparameter grid")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--instance", choices=training.INSTANCE_KINDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--recalc-interval", dest="recalc_interval", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="run deminers on a region, write scorecards")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--seed", type=int)
    p.add_argument("--recalc-interval", dest="recalc_interval", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="comparison table + plot data from scorecards")
    p.add_argument("--scorecards", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the clearance session API")
    p.add_argument("--config", help="JSON config")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
