"""Command-line pipeline: data generation, training, evaluation, certification.

Subcommands: gen-data, train-phase1, train-obs, train-dyn, train-curriculum,
evaluate, bound, report. Exit codes: 0 success, 2 config error,
3 numerical abort, 4 missing prerequisite.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint as ckpt, plots as plotmod, training
from .config import ConfigError, RunConfig, apply_overrides, default_config
from .dynamics import IntegrationError, get_system, integrate, sample_initial_condition, sample_input
from .observer import ModelBundle
from . import rng as rngmod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_MISSING = 4


class MissingPrerequisite(RuntimeError):
    pass


def _paths(out: Path) -> dict[str, Path]:
    return {
        "data_aut": out / "data_autonomous.kkld",
        "data_forced": out / "data_forced.kkld",
        "ckpt_autonomous": out / "ckpt_autonomous.kklc",
        "ckpt_obs": out / "ckpt_obs.kklc",
        "ckpt_dyn": out / "ckpt_dyn.kklc",
        "ckpt_curriculum": out / "ckpt_curriculum.kklc",
        "figures": out / "figures",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- data -----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    mats = cfg.build_matrices()
    p = _paths(out)
    aut = training.build_autonomous_dataset(spec, mats, cfg.train)
    ckpt.save_container(
        p["data_aut"], "dataset",
        {"dataset": "autonomous", "system": cfg.system, "config": cfg.to_dict(),
         "sample_count": len(aut), "t_burn": aut.t_burn, "burn_steps": aut.burn_steps},
        {"x": aut.x, "z": aut.z, "y": aut.y, "xdot": aut.xdot},
    )
    forced = training.build_forced_dataset(spec, cfg.train)
    ckpt.save_container(
        p["data_forced"], "dataset",
        {"dataset": "forced", "system": cfg.system, "config": cfg.to_dict(),
         "sample_count": len(forced), "omega": forced.omega, "dt": forced.dt},
        {"x": forced.x, "y": forced.y, "u": forced.u, "xdot": forced.xdot,
         "traj_id": forced.traj_id.astype(np.float64), "k": forced.k.astype(np.float64),
         "u_series": forced.u_series, "x_series": forced.x_series,
         "y_series": forced.y_series, "kind_id": forced.kind_id.astype(np.float64)},
    )
    print(f"gen-data: {len(aut)} autonomous samples, {len(forced)} forced samples -> {out}")


def _load_autonomous(path: Path) -> training.AutonomousDataset:
    meta, t = ckpt.load_container(path)
    return training.AutonomousDataset(t["x"], t["z"], t["y"], t["xdot"],
                                      float(meta["t_burn"]), int(meta["burn_steps"]))


def _load_forced(path: Path, system: str) -> training.ForcedDataset:
    meta, t = ckpt.load_container(path)
    return training.ForcedDataset(
        system, int(meta["omega"]), float(meta["dt"]),
        t["x"], t["y"], t["u"], t["xdot"],
        t["traj_id"].astype(np.int64), t["k"].astype(np.int64),
        t["u_series"], t["x_series"], t["y_series"], t["kind_id"].astype(np.int64),
    )


# -- training -------------------------------------------------------------------

def _metrics_summary(records: list[dict]) -> dict:
    return {"epochs": len(records), "final_loss": records[-1]["loss"] if records else None}


def cmd_train_phase1(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    mats = cfg.build_matrices()
    p = _paths(out)
    aut = _load_autonomous(_require(p["data_aut"], "autonomous dataset (run gen-data)"))
    records: list[dict] = []
    enc, dec = training.train_phase1(spec, mats, cfg.train, aut, records=records)
    bundle = ModelBundle("autonomous", cfg.system, enc, dec, mats,
                         cfg.train.omega, cfg.train.dt)
    ckpt.save_checkpoint(p["ckpt_autonomous"], bundle, cfg.to_dict(), _metrics_summary(records))
    training.write_metrics_log(out / "metrics_phase1.jsonl", records)
    print(f"train-phase1: checkpoint -> {p['ckpt_autonomous']}")


def _load_base(cfg: RunConfig, out: Path) -> ModelBundle:
    p = _paths(out)
    base, _ = ckpt.load_checkpoint(
        _require(p["ckpt_autonomous"], "base checkpoint (run train-phase1)"))
    if base.system != cfg.system:
        raise ConfigError(f"checkpoint system {base.system!r} != config {cfg.system!r}")
    return base


def cmd_train_obs(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    p = _paths(out)
    base = _load_base(cfg, out)
    forced = _load_forced(_require(p["data_forced"], "forced dataset (run gen-data)"), cfg.system)
    records: list[dict] = []
    inj = training.train_obs(spec, (base.encoder, base.decoder), base.matrices,
                             cfg.train, forced, records=records)
    bundle = ModelBundle("obs", cfg.system, base.encoder, base.decoder, base.matrices,
                         cfg.train.omega, cfg.train.dt, injection=inj)
    ckpt.save_checkpoint(p["ckpt_obs"], bundle, cfg.to_dict(), _metrics_summary(records))
    training.write_metrics_log(out / "metrics_obs.jsonl", records)
    print(f"train-obs: checkpoint -> {p['ckpt_obs']}")


def cmd_train_dyn(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    p = _paths(out)
    base = _load_base(cfg, out)
    forced = _load_forced(_require(p["data_forced"], "forced dataset (run gen-data)"), cfg.system)
    records: list[dict] = []
    hyper = training.train_dyn(spec, (base.encoder, base.decoder), base.matrices,
                               cfg.train, forced, records=records)
    bundle = ModelBundle("dyn", cfg.system, base.encoder, base.decoder, base.matrices,
                         cfg.train.omega, cfg.train.dt, hyper=hyper)
    ckpt.save_checkpoint(p["ckpt_dyn"], bundle, cfg.to_dict(), _metrics_summary(records))
    training.write_metrics_log(out / "metrics_dyn.jsonl", records)
    print(f"train-dyn: checkpoint -> {p['ckpt_dyn']}")


def cmd_train_curriculum(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    p = _paths(out)
    base = _load_base(cfg, out)
    forced = _load_forced(_require(p["data_forced"], "forced dataset (run gen-data)"), cfg.system)
    records: list[dict] = []
    enc2, dec2 = training.train_curriculum(spec, (base.encoder, base.decoder),
                                           base.matrices, cfg.train, forced,
                                           records=records)
    bundle = ModelBundle("curriculum", cfg.system, enc2, dec2, base.matrices,
                         cfg.train.omega, cfg.train.dt)
    ckpt.save_checkpoint(p["ckpt_curriculum"], bundle, cfg.to_dict(), _metrics_summary(records))
    training.write_metrics_log(out / "metrics_curriculum.jsonl", records)
    print(f"train-curriculum: checkpoint -> {p['ckpt_curriculum']}")


# -- evaluation -----------------------------------------------------------------

def _load_bundles(cfg: RunConfig, out: Path) -> dict[str, ModelBundle]:
    p = _paths(out)
    bundles = {}
    for v in cfg.variants:
        bundle, _ = ckpt.load_checkpoint(
            _require(p[f"ckpt_{v}"], f"checkpoint for variant {v!r}"))
        bundles[v] = bundle
    return bundles


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    bundles = _load_bundles(cfg, out)
    report = analysis.run_benchmark(
        bundles, spec, cfg.eval.regimes, cfg.eval.n_trials, cfg.eval.noise_var,
        cfg.seed, cfg.eval.t_skip, cfg.train.T, cfg.train.dt)
    analysis.smape_report_csv(report, out / f"smape_{cfg.system}.csv")
    analysis.smape_report_json(report, out / f"smape_{cfg.system}.json",
                               extra={"config": cfg.to_dict()})
    for v in report.variants:
        means = "  ".join(f"{r}={report.mean(v, r):6.2f}" for r in report.regimes)
        print(f"evaluate[{cfg.system}/{v}]: {means}")


def cmd_bound(cfg: RunConfig, out: Path) -> None:
    spec = get_system(cfg.system)
    bundles = _load_bundles(cfg, out)
    regime = cfg.eval.regimes[0]
    trajs = []
    for i in range(10):
        r = rngmod.derive(cfg.seed, "bound-traj", i)
        x0 = sample_initial_condition(spec, r)
        trajs.append(integrate(spec, x0, sample_input(regime, r, spec.n_u),
                               cfg.train.T, cfg.train.dt))
    p = _paths(out)
    p["figures"].mkdir(parents=True, exist_ok=True)
    # a zero-input regime is certified against the autonomous PDE only
    levels = [0.0] if regime == "zero" else None
    for v, bundle in bundles.items():
        consts = analysis.estimate_constants(bundle, trajs, input_levels=levels,
                                             w_bar=cfg.eval.w_bar, v_bar=cfg.eval.v_bar)
        t = np.linspace(0.0, cfg.train.T, 201)
        from . import networks as nets

        xi0 = float(np.max([np.linalg.norm(nets.mlp_forward(bundle.encoder, tr.states[0]))
                            for tr in trajs]))
        data = {
            "system": cfg.system, "variant": v, "regime": regime,
            "constants": consts.to_dict(),
            "xi_z0_norm": xi0,
            "t": t.tolist(),
            "bound": np.asarray(analysis.worst_case_bound(consts, xi0, t)).tolist(),
            "asymptotic": analysis.asymptotic_bound(consts),
            "noisy_asymptotic": analysis.noisy_bound(consts),
            "proxy_note": "eps_dec <- empirical round-trip sup, eps_enc <- 0",
            "config": cfg.to_dict(),
        }
        _write_json(out / f"bounds_{cfg.system}_{v}.json", data)
        plotmod.bound_curve(data, p["figures"] / f"bound_{cfg.system}_{v}.png")
        print(f"bound[{cfg.system}/{v}]: eps_pde={consts.eps_pde:.4g} "
              f"eps_rt={consts.eps_rt:.4g} l_dec={consts.l_dec:.4g} "
              f"asymptotic={data['asymptotic']:.4g}")


def cmd_report(cfg: RunConfig, out: Path) -> None:
    reports = []
    for path in sorted(out.glob("smape_*.json")):
        with open(path, encoding="utf-8") as fh:
            reports.append(json.load(fh))
    if not reports:
        raise MissingPrerequisite(f"no smape_*.json found in {out} (run evaluate)")
    p = _paths(out)
    p["figures"].mkdir(parents=True, exist_ok=True)

    # merged CSV: one row per variant, column groups per system x regime
    variants: list[str] = []
    for rep in reports:
        for v in rep["variants"]:
            if v not in variants:
                variants.append(v)
    cols = [(rep["system"], r) for rep in reports for r in rep["regimes"]]
    with open(out / "report.csv", "w", encoding="utf-8") as fh:
        fh.write("variant," + ",".join(f"{s}:{r}" for s, r in cols) + "\n")
        for v in variants:
            cells = []
            for rep in reports:
                for r in rep["regimes"]:
                    cells.append(f"{rep['means'][v][r]:.3f}" if v in rep["variants"] else "")
            fh.write(v + "," + ",".join(cells) + "\n")
    _write_json(out / "report.json", {"config": cfg.to_dict(), "reports": reports})

    for rep in reports:
        plotmod.smape_boxplot(rep, p["figures"] / f"smape_box_{rep['system']}.png")
    plotmod.smape_mean_bars(reports, p["figures"] / "smape_means.png")
    print(f"report: {len(reports)} system(s), {len(variants)} variant(s) -> "
          f"{out / 'report.csv'}, figures in {p['figures']}")


# -- entry point ------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-phase1": cmd_train_phase1,
    "train-obs": cmd_train_obs,
    "train-dyn": cmd_train_dyn,
    "train-curriculum": cmd_train_curriculum,
    "evaluate": cmd_evaluate,
    "bound": cmd_bound,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="kklobs",
        description="Train, run and certify KKL observers for controlled nonlinear systems.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None,
                        help="JSON run configuration (default: built-in desk-scale config)")
        sp.add_argument("--system", default=None, help="system name for the built-in config")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path config override")
        sp.add_argument("--out", type=Path, default=None,
                        help="artifact directory (default runs/<system>)")
    return ap


def load_run_config(args) -> RunConfig:
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
        if args.system is not None:
            d["system"] = args.system
    else:
        d = default_config(args.system or "duffing").to_dict()
    d = apply_overrides(d, args.overrides)
    if args.seed is not None:
        d["seed"] = int(args.seed)
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
    except (ConfigError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else Path("runs") / cfg.system
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, out)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"error: missing file {e}", file=sys.stderr)
        return EXIT_MISSING
    except ckpt.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingDivergence, IntegrationError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
