"""Command-line pipeline: data generation through tracer reports.

Every command reads an optional JSON config file, applies flag overrides,
and writes its artifacts plus a run manifest (config snapshot, seeds,
input hashes, artifact hashes, timestamps, tool version) into the output
directory.  Each output directory holds exactly one manifest, so give
every run its own directory.  Exit codes: 0 success, 1 runtime failure
(with a machine-readable error report on stderr), 2 usage or config
error.  Seeded commands reproduce their CSV artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as dsmod
from . import evaluation, tracer, trainer
from . import mms as mmsmod
from . import model as md
from . import objective as ob
from .autodiff import DivergenceError

MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seeds, inputs: dict,
                   artifacts) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "input_hashes": {name: _sha256(p) for name, p in inputs.items()},
        "input_paths": {name: str(p) for name, p in inputs.items()},
        "artifacts": {
            str(Path(p).relative_to(out_dir)): _sha256(p) for p in artifacts
        },
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "tool_version": __version__,
    }
    path = out_dir / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def verify_manifest(out_dir) -> dict:
    """Recompute every hash recorded in a manifest; raise on mismatch."""
    out_dir = Path(out_dir)
    with open(out_dir / MANIFEST_NAME) as f:
        manifest = json.load(f)
    for name, digest in manifest["input_hashes"].items():
        path = manifest["input_paths"][name]
        if _sha256(path) != digest:
            raise ValueError(f"input {name!r} changed since the run: {path}")
    for rel, digest in manifest["artifacts"].items():
        if _sha256(out_dir / rel) != digest:
            raise ValueError(f"artifact {rel!r} does not match its manifest hash")
    return manifest


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def _merge_flags(config: dict, args, keys) -> dict:
    out = dict(config)
    for key in keys:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            out[key] = value
    return out


def _print_config_and_exit(config: dict) -> int:
    json.dump(config, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _bounds_from(config: dict) -> md.DomainBounds:
    return md.DomainBounds(**config.get("bounds", {}))


def _spec_from(config: dict) -> mmsmod.MmsSpec:
    return mmsmod.MmsSpec(**config.get("mms_spec", {}))


def _exact_model(config: dict) -> mmsmod.MmsExactModel:
    return mmsmod.MmsExactModel(
        _spec_from(config), _bounds_from(config), md.OutputStats.identity()
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _merge_flags(
        _load_config(args.config), args, ("conditions", "points", "seed", "method")
    )
    config.setdefault("conditions", 24)
    config.setdefault("points", 10_000)
    config.setdefault("seed", 0)
    config.setdefault("method", "lhs")
    if args.print_config:
        return _print_config_and_exit(config)
    bounds = _bounds_from(config)
    spec = _spec_from(config)
    conds = dsmod.sample_conditions(
        config["conditions"], bounds, config["seed"], config["method"]
    )
    data = dsmod.generate_dataset(
        conds, config["points"], seed=config["seed"], spec=spec, bounds=bounds
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dataset.vfd"
    dsmod.save_dataset(data, path)
    write_manifest(out_dir, "gen-data", config, [config["seed"]], {}, [path])
    print(f"wrote {path} ({data.n_conditions} conditions x {data.n_points} points)")
    return 0


TRAIN_FLAG_KEYS = (
    "variant", "epochs", "batch", "seed", "lr0", "lambda-pde",
    "m-residual", "width", "depth", "sigma-b", "fourier-mode",
)


def _train_config_from(config: dict) -> trainer.TrainConfig:
    model_cfg = md.ModelConfig(
        depth=config.get("depth", 10),
        width=config.get("width", 100),
        seed=config.get("seed", 0),
        sigma_b=config.get("sigma-b", 1.0),
        fourier_mode=config.get("fourier-mode", "all"),
    )
    return trainer.TrainConfig(
        variant=ob.Variant.parse(config.get("variant", "MLP")),
        epochs=config.get("epochs", 300),
        batch=config.get("batch", 5000),
        lr0=config.get("lr0", 1e-3),
        lambda_pde=config.get("lambda-pde", ob.LAMBDA_PDE),
        seed=config.get("seed", 0),
        m_residual=config.get("m-residual"),
        checkpoint_every=config.get("checkpoint-every", 0),
        model=model_cfg,
    )


def cmd_train(args) -> int:
    config = _merge_flags(_load_config(args.config), args, TRAIN_FLAG_KEYS)
    config.setdefault("seed", 0)
    if args.print_config:
        return _print_config_and_exit(config)
    tcfg = _train_config_from(config)
    data = dsmod.load_dataset(args.dataset)
    if "train-size" in config or args.train_size is not None:
        size = args.train_size or config["train-size"]
        train_ds, _ = dsmod.split(data, size, tcfg.seed)
    else:
        train_ds = data
    out_dir = Path(args.out)
    result = trainer.train(train_ds, tcfg, run_dir=out_dir)
    artifacts = [
        out_dir / "config.json",
        out_dir / "history.csv",
        out_dir / "metrics.json",
        out_dir / "checkpoints" / "final.ckpt",
    ]
    write_manifest(
        out_dir, "train", config, [tcfg.seed], {"dataset": args.dataset}, artifacts
    )
    print(f"trained {tcfg.variant.value} for {tcfg.epochs} epochs -> {out_dir}")
    print(f"final total loss: {result.history[-1]['total']:.6g}"
          if result.history else "no epochs requested")
    return 0


def cmd_study(args) -> int:
    config = _load_config(args.config)
    if args.workers is not None:
        config["workers"] = args.workers
    config["workers"] = int(os.environ.get("VESSEL_WORKERS", config.get("workers", 1)))
    if args.print_config:
        return _print_config_and_exit(config)
    template = _train_config_from(config.get("template", {}))
    study = trainer.StudyConfig(
        sizes=tuple(config.get("sizes", (4, 8, 16))),
        seeds=tuple(config.get("seeds", range(5))),
        variants=tuple(
            ob.Variant.parse(v) for v in config.get("variants", ("MLP",))
        ),
        template=template,
        workers=config["workers"],
    )
    data = dsmod.load_dataset(args.dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = trainer.run_study(data, study, out_dir=out_dir)
    runs_csv = out_dir / "runs.csv"
    agg_csv = out_dir / "aggregate.csv"
    trainer.write_study_csv(report, runs_csv, agg_csv)
    write_manifest(
        out_dir,
        "study",
        config,
        list(study.seeds),
        {"dataset": args.dataset},
        [runs_csv, agg_csv],
    )
    print(f"study complete: {len(report['runs'])} runs -> {out_dir}")
    for row in report["aggregate"]:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config = _merge_flags(
        _load_config(args.config), args, ("train-size", "split-seed", "residual-points")
    )
    config.setdefault("split-seed", 0)
    config.setdefault("residual-points", 2000)
    if args.print_config:
        return _print_config_and_exit(config)
    model = md.load_checkpoint(args.model)
    data = dsmod.load_dataset(args.dataset)
    if config.get("train-size"):
        _, test_ds = dsmod.split(data, config["train-size"], config["split-seed"])
    else:
        test_ds = data
    rctx = trainer._default_rctx(data)
    metrics = evaluation.test_mse(model, test_ds)
    residuals = evaluation.residual_mse(
        model, test_ds, rctx, n_points=config["residual-points"],
        seed=config["split-seed"],
    )
    metrics.update({f"residual_{k}": v for k, v in residuals.items()})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_json = out_dir / "metrics.json"
    with open(metrics_json, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    metrics_csv = out_dir / "metrics.csv"
    with open(metrics_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(metrics))
        writer.writerow([repr(float(v)) for v in metrics.values()])
    write_manifest(
        out_dir, "eval", config, [config["split-seed"]],
        {"model": args.model, "dataset": args.dataset},
        [metrics_json, metrics_csv],
    )
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_profiles(args) -> int:
    config = _merge_flags(
        _load_config(args.config), args, ("r", "theta", "rpm", "height", "n-z")
    )
    for key in ("r", "rpm", "height"):
        if key not in config:
            raise ConfigError(f"profiles needs --{key}")
    config.setdefault("theta", 0.0)
    config.setdefault("n-z", 100)
    if args.print_config:
        return _print_config_and_exit(config)
    model = md.load_checkpoint(args.model)
    if args.dataset:
        reference = dsmod.load_dataset(args.dataset)
        inputs = {"model": args.model, "dataset": args.dataset}
    else:
        reference = _exact_model(config)
        inputs = {"model": args.model}
    line = evaluation.axial_profile(
        model,
        reference,
        r=config["r"],
        theta=config["theta"],
        mu=(config["rpm"], config["height"]),
        n_z=config["n-z"],
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "profile.csv"
    evaluation.write_profile_csv(line, path)
    write_manifest(out_dir, "profiles", config, [], inputs, [path])
    print(f"wrote {path}")
    return 0


def cmd_tracer(args) -> int:
    config = _merge_flags(
        _load_config(args.config), args,
        ("rpm", "height", "scheme", "t-end", "dt", "grid"),
    )
    for key in ("rpm", "height"):
        if key not in config:
            raise ConfigError(f"tracer needs --{key}")
    if args.print_config:
        return _print_config_and_exit(config)
    resolution = tracer.DEFAULT_RESOLUTION
    if config.get("grid"):
        parts = [int(v) for v in str(config["grid"]).split(",")]
        if len(parts) != 3:
            raise ConfigError("--grid expects n_r,n_theta,n_z")
        resolution = tuple(parts)
    tcfg = tracer.TracerConfig(
        dt=config.get("dt", 0.05),
        t_end=config.get("t-end", 200.0),
        scheme=config.get("scheme"),
        resolution=resolution,
        d_mode=config.get("d-mode", "molecular"),
    )
    if args.exact:
        source = _exact_model(config)
        inputs = {}
    elif args.model:
        source = md.load_checkpoint(args.model)
        inputs = {"model": args.model}
    else:
        raise ConfigError("tracer needs --model or --exact")
    series = tracer.simulate(source, (config["rpm"], config["height"]), tcfg)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_probe_csv(series, out_path)
    write_manifest(out_path.parent, "tracer", config, [], inputs, [out_path])
    print(f"wrote {out_path} ({len(series.times)} samples)")
    return 0


def cmd_report(args) -> int:
    config = _load_config(args.config)
    if args.print_config:
        return _print_config_and_exit(config)
    runs = [read_probe_csv(p) for p in args.runs]
    reference = read_probe_csv(args.reference)
    report = evaluation.ensemble_tracer_report(runs, reference)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ensemble.csv"
    evaluation.write_ensemble_csv(report, path)
    summary = {
        "end_state_bias": report["end_state_bias"],
        "end_band_width": report["end_band_width"],
        "max_band_width": report["max_band_width"],
        "n_runs": len(runs),
    }
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    inputs = {f"run_{i}": p for i, p in enumerate(args.runs)}
    inputs["reference"] = args.reference
    write_manifest(out_dir, "report", config, [], inputs, [path, summary_path])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    manifest = verify_manifest(args.dir)
    print(f"manifest ok: {manifest['command']} run with tool {manifest['tool_version']}")
    return 0


# ---------------------------------------------------------------------------
# probe series CSV round trip


def write_probe_csv(series: tracer.ProbeSeries, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "c_probe", "total_mass", "max_c", "min_c"])
        for i in range(len(series.times)):
            writer.writerow(
                [
                    repr(float(series.times[i])),
                    repr(float(series.values[i])),
                    repr(float(series.total_mass[i])),
                    repr(float(series.c_max[i])),
                    repr(float(series.c_min[i])),
                ]
            )


def read_probe_csv(path) -> tracer.ProbeSeries:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append(
                [float(row[k]) for k in ("t", "c_probe", "total_mass", "max_c", "min_c")]
            )
    data = np.array(rows)
    return tracer.ProbeSeries(
        times=data[:, 0], values=data[:, 1], total_mass=data[:, 2],
        c_max=data[:, 3], c_min=data[:, 4],
    )


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselflow",
        description="Neural surrogates of stirred-vessel flow with physics "
                    "constraints and tracer transport",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective config and exit")

    p = sub.add_parser("gen-data", help="generate a manufactured dataset")
    common(p)
    p.add_argument("--conditions", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("lhs", "uniform"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one surrogate")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-size", type=int)
    p.add_argument("--variant", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lambda-pde", type=float)
    p.add_argument("--m-residual", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--sigma-b", type=float)
    p.add_argument("--fourier-mode", choices=("all", "spatial"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("study", help="multi-size x multi-seed data-efficiency study")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--workers", type=int,
                   help="parallel jobs (env VESSEL_WORKERS overrides)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("eval", help="test metrics of a checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-size", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--residual-points", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profiles", help="axial profile vs reference")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", help="reference dataset (omit for exact fields)")
    p.add_argument("--r", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--rpm", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--n-z", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("tracer", help="frozen-flow tracer dispersion run")
    common(p)
    p.add_argument("--model", help="surrogate checkpoint")
    p.add_argument("--exact", action="store_true", help="use the exact fields")
    p.add_argument("--rpm", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--grid", help="n_r,n_theta,n_z")
    p.add_argument("--scheme", choices=("conservative", "advective"))
    p.add_argument("--t-end", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_tracer)

    p = sub.add_parser("report", help="ensemble summary of tracer runs")
    common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="re-check a run manifest's hashes")
    p.add_argument("dir")
    p.set_defaults(func=cmd_verify)

    return parser


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        parser.exit(2, f"config error: {err}\n")
    except (trainer.TrainingDiverged, DivergenceError) as err:
        json.dump({"error": "divergence", "message": str(err)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except (OSError, ValueError) as err:
        json.dump({"error": "runtime", "message": str(err)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


def main(argv=None) -> int:
    return parse_and_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
