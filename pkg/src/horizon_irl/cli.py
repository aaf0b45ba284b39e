"""Command-line pipeline: synth, learn, simulate, evaluate and recover."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import harness
from .distribution import DistributionError, build_model, load_model, save_model
from .features import DriverConstants, FeatureError
from .learner import LearnerConfig, LearningError, learn_all
from .planner import EgoState, PlannerConfig, PlannerError, rollout_many
from .trajectory import LogFormatError, LogValidationError, load_log_file, save_log_file

log = logging.getLogger("horizon_irl")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    model: str = "model/model.json"
    out: str = "out"
    train_fraction: float = 25 / 30
    repeats: int = 30
    scenario_duration: float = 120.0  # [s]
    noise_std: float = 0.1  # [m/s^2]
    generator: str = "nmpc"
    N_star: float = 3.0
    samples: int = 50
    learner: dict = dataclasses.field(default_factory=dict)
    planner: dict = dataclasses.field(default_factory=dict)
    constants: dict = dataclasses.field(default_factory=lambda: {"tau": 1.2, "d_s": 5.0,
                                                                 "v_d": 25.0})

    def learner_config(self) -> LearnerConfig:
        kw = dict(self.learner)
        if "horizons" in kw:
            kw["horizons"] = tuple(float(h) for h in kw["horizons"])
        return LearnerConfig(**kw)

    def planner_config(self) -> PlannerConfig:
        kw = dict(self.planner)
        if "a_bounds" in kw:
            kw["a_bounds"] = tuple(kw["a_bounds"])
        kw.setdefault("d_s", self.driver_constants().d_s)
        return PlannerConfig(**kw)

    def driver_constants(self) -> DriverConstants:
        return DriverConstants(**self.constants)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**data)
        # validate the nested sections eagerly so errors surface as config errors
        cfg.learner_config()
        cfg.planner_config()
    except (TypeError, ValueError, FeatureError, PlannerError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    if not 0 < cfg.train_fraction <= 1:
        raise ConfigError("train_fraction must lie in (0, 1]")
    if cfg.scenario_duration < cfg.learner_config().H:
        raise ConfigError("scenario_duration must cover at least one segment")
    if cfg.repeats < 1 or cfg.samples < 1:
        raise ConfigError("repeats and samples must be at least 1")
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _ensure_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    if not p.is_dir():
        raise ConfigError(f"{path} is not a directory")
    return p


def _scenario_of(log_id: str) -> str:
    """Scenario part of a ``<scenario>-rNN`` log id."""
    head, _, tail = log_id.rpartition("-r")
    return head if head and tail.isdigit() else log_id


def _read_corpus(data_dir: Path):
    files = sorted(data_dir.glob("*.csv"))
    if not files:
        raise ConfigError(f"no CSV logs in {data_dir}")
    return [(f, load_log_file(f)) for f in files]


# --- commands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    out = _ensure_dir(cfg.data_dir)
    driver = harness.GroundTruthDriver(W_star=harness.recovery_weights(), N_star=cfg.N_star,
                                       noise_std=cfg.noise_std,
                                       constants=cfg.driver_constants())
    scenarios = harness.builtin_scenarios(cfg.scenario_duration)
    logs = harness.generate_synthetic_demos(driver, scenarios, cfg.repeats, cfg.seed,
                                            generator=cfg.generator,
                                            planner_cfg=cfg.planner_config())
    entries = []
    for lg in logs:
        path = out / f"{lg.scenario_id}.csv"
        save_log_file(lg, path)
        entries.append({"file": path.name, "scenario": _scenario_of(lg.scenario_id),
                        "sha256": _sha256(path)})
    _write_json(out / "manifest.json", {"command": "synth", "seed": cfg.seed,
                                        "config": cfg.snapshot(), "logs": entries})
    print(f"wrote {len(logs)} logs for {len(scenarios)} scenarios to {out}")
    return EXIT_OK


def split_corpus(ids: Sequence[str], fraction: float, seed: int
                 ) -> tuple[list[str], list[str]]:
    """Per-scenario seeded shuffle; the first ``round(fraction * n)`` logs train."""
    by_scen: dict[str, list[str]] = {}
    for i in sorted(ids):
        by_scen.setdefault(_scenario_of(i), []).append(i)
    train, test = [], []
    for k, scen in enumerate(sorted(by_scen)):
        members = by_scen[scen]
        rng = np.random.default_rng([seed, k])
        order = [members[j] for j in rng.permutation(len(members))]
        n_train = max(1, int(round(fraction * len(members))))
        train += sorted(order[:n_train])
        test += sorted(order[n_train:])
    return train, test


def cmd_learn(cfg: RunConfig) -> int:
    corpus = _read_corpus(Path(cfg.data_dir))
    by_id = {lg.scenario_id: (f, lg) for f, lg in corpus}
    train_ids, test_ids = split_corpus(list(by_id), cfg.train_fraction, cfg.seed)
    if not train_ids:
        raise ConfigError("training split is empty")
    lcfg = cfg.learner_config()
    outcome = learn_all([by_id[i][1] for i in train_ids], lcfg,
                        constants=cfg.driver_constants())
    corpus_hash = hashlib.sha256("".join(_sha256(by_id[i][0]) for i in train_ids)
                                 .encode()).hexdigest()
    model = build_model(outcome.pools, outcome.horizon_counts, outcome.table,
                        outcome.constants, support=lcfg.horizons,
                        provenance={"seed": cfg.seed, "config": cfg.snapshot(),
                                    "corpus_sha256": corpus_hash, "train": train_ids,
                                    "test": test_ids})
    model_path = Path(cfg.model)
    _ensure_dir(str(model_path.parent))
    save_model(model, model_path)
    out = _ensure_dir(cfg.out)
    with open(out / "segments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "scenario", "condition", "best_N", "final_grad_norm"]
                   + [f"W{i}" for i in range(4)])
        for r in outcome.results:
            w.writerow([r.segment_id, _scenario_of(r.parent), r.condition.value, r.best_N,
                        repr(r.final_grad_norm)] + [repr(float(x)) for x in r.W])
    with open(out / "grad_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "N", "iteration", "grad_norm"])
        for r in outcome.results:
            for N, fit in sorted(r.per_horizon.items()):
                for i, g in enumerate(fit.trace):
                    w.writerow([r.segment_id, N, i + 1, repr(g)])
    _write_json(out / "manifest.json", {"command": "learn", "seed": cfg.seed,
                                        "config": cfg.snapshot(),
                                        "model_sha256": _sha256(model_path),
                                        "corpus_sha256": corpus_hash})
    sizes = dict(zip(("steady", "free", "unsteady"), outcome.pool_sizes()))
    print(f"learned {len(outcome.results)} segments; pools {sizes}")
    for c, m in model.copulas.items():
        print(f"  {c.value}: dof {m.dof:g}")
    if model.missing:
        print("  no copula for: " + ", ".join(c.value for c in model.missing))
    print("  P_N " + ", ".join(f"{s:g}s={p:.3f}" for s, p in zip(model.P_N.support,
                                                                  model.P_N.probs)))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, scenario: Optional[str] = None) -> int:
    try:
        model = load_model(cfg.model)
    except DistributionError as exc:
        raise ConfigError(str(exc)) from None
    test_ids = model.provenance.get("test") or []
    data_dir = Path(cfg.data_dir)
    if scenario:
        test_ids = [i for i in test_ids if i == scenario or _scenario_of(i) == scenario]
    if not test_ids:
        raise ConfigError("no test logs to simulate (check --scenario and the model's split)")
    out = _ensure_dir(cfg.out)
    pcfg = cfg.planner_config()
    manifest = {"command": "simulate", "seed": cfg.seed, "config": cfg.snapshot(),
                "model_sha256": _sha256(Path(cfg.model)), "runs": []}
    failures = 0
    root = np.random.SeedSequence(cfg.seed)
    for k, log_id in enumerate(test_ids):
        path = data_dir / f"{log_id}.csv"
        try:
            lg = load_log_file(path)
        except (OSError, LogFormatError, LogValidationError) as exc:
            raise ConfigError(f"cannot load test log {path}: {exc}") from None
        ss = np.random.SeedSequence(root.entropy, spawn_key=(k,))
        seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(cfg.samples)]
        rolls = rollout_many(EgoState(0.0, float(lg.ego_pos[0]), float(lg.ego_vel[0]),
                                      float(lg.ego_acc[0])),
                             lg.t, lg.leader_pos, lg.leader_vel, model, pcfg, seeds)
        sdir = _ensure_dir(str(out / log_id))
        for j, r in enumerate(rolls):
            entry = {"log": log_id, "sample": j, "seed": r.seed,
                     "file": f"{log_id}/sample_{j:03d}.csv", "error": r.error}
            if r.error is None:
                (sdir / f"sample_{j:03d}.csv").write_text(r.to_csv())
            else:
                failures += 1
                print(f"{log_id} sample {j}: {r.error}", file=sys.stderr)
            manifest["runs"].append(entry)
    _write_json(out / "manifest.json", manifest)
    print(f"simulated {len(test_ids)} logs x {cfg.samples} samples; {failures} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


def _read_sample(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {"ego_vel": np.array([float(r["ego_vel"]) for r in rows]),
            "ego_acc": np.array([float(r["ego_acc"]) for r in rows]),
            "N": np.array([float(r["N_sampled"]) for r in rows])}


def cmd_evaluate(cfg: RunConfig, observed: str, samples: str,
                 segments: Optional[str] = None) -> int:
    obs_dir, smp_dir = Path(observed), Path(samples)
    try:
        manifest = json.loads((smp_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read samples manifest: {exc}") from None
    by_log: dict[str, list[Path]] = {}
    for run in manifest["runs"]:
        if run.get("error") is None:
            by_log.setdefault(run["log"], []).append(smp_dir / run["file"])
    missing = [i for i in by_log if not (obs_dir / f"{i}.csv").exists()]
    if missing or not by_log:
        raise ConfigError(f"observed logs missing for {missing or 'every sample set'}")
    out = _ensure_dir(cfg.out)
    rows = []
    for log_id in sorted(by_log):
        lg = load_log_file(obs_dir / f"{log_id}.csv")
        runs = [_read_sample(p) for p in by_log[log_id]]
        mean_v = np.mean([r["ego_vel"] for r in runs], axis=0)
        mean_a = np.mean([r["ego_acc"] for r in runs], axis=0)
        s, a = harness.rmse(lg, (mean_v, mean_a))
        rows.append((log_id, _scenario_of(log_id), len(runs), s, a))
    with open(out / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["log", "scenario", "samples", "speed_rmse", "acc_rmse"])
        w.writerows([[r[0], r[1], r[2], repr(r[3]), repr(r[4])] for r in rows])
    mean_s = float(np.mean([r[3] for r in rows]))
    mean_a = float(np.mean([r[4] for r in rows]))
    print(f"{'log':32s} {'speed RMSE':>11s} {'acc RMSE':>9s}")
    for r in rows:
        print(f"{r[0]:32s} {r[3]:11.3f} {r[4]:9.3f}")
    print(f"{'mean':32s} {mean_s:11.3f} {mean_a:9.3f}")

    pmf_rows = _horizon_pmfs(segments, by_log)
    with open(out / "horizon_pmf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "N", "probability"])
        for scen, pmf in sorted(pmf_rows.items()):
            for N, p in sorted(pmf.items()):
                w.writerow([scen, N, repr(p)])
    _write_json(out / "manifest.json", {"command": "evaluate", "seed": cfg.seed,
                                        "config": cfg.snapshot(),
                                        "mean_rmse": {"speed": mean_s, "acc": mean_a}})
    return EXIT_OK


def _horizon_pmfs(segments: Optional[str], by_log: dict[str, list[Path]]
                  ) -> dict[str, dict[float, float]]:
    """Per-scenario horizon frequencies, from learned segments when available."""
    counts: dict[str, dict[float, int]] = {}
    if segments and Path(segments).exists():
        with open(segments, newline="") as fh:
            for r in csv.DictReader(fh):
                c = counts.setdefault(r["scenario"], {})
                c[float(r["best_N"])] = c.get(float(r["best_N"]), 0) + 1
    else:
        for log_id, paths in by_log.items():
            c = counts.setdefault(_scenario_of(log_id), {})
            for p in paths:
                for N in _read_sample(p)["N"]:
                    c[float(N)] = c.get(float(N), 0) + 1
    out = {}
    for scen, c in counts.items():
        total = sum(c.values())
        keys = sorted(c)
        probs = [c[k] / total for k in keys]
        probs[-1] = 1.0 - sum(probs[:-1])
        out[scen] = dict(zip(keys, probs))
    return out


def cmd_recover(cfg: RunConfig) -> int:
    out = _ensure_dir(cfg.out)
    rep = harness.run_recovery_experiment(
        config=harness.RecoveryConfig(N_star=cfg.N_star, rollouts=cfg.samples),
        seed=cfg.seed, learner_config=cfg.learner_config(), planner_cfg=cfg.planner_config())
    _write_json(out / "recovery.json", rep.to_json())
    (out / "segments.csv").write_text(rep.segments_csv())
    (out / "grad_traces.csv").write_text(rep.traces_csv())
    _write_json(out / "manifest.json", {"command": "recover", "seed": cfg.seed,
                                        "config": cfg.snapshot()})
    print(f"horizon recovery {rep.horizon_recovery:.3f} (N*={cfg.N_star:g} s)")
    print(f"converged at N*: {rep.converged_fraction:.3f}; "
          f"median iterations {rep.iterations['median']:g}")
    for c, v in rep.cosine.items():
        print(f"  cosine {c}: {v:.3f} (all-ones start {rep.baseline_cosine[c]:.3f})")
    if rep.rmse_mean:
        print(f"held-out RMSE speed {rep.rmse_mean['speed']:.3f} m/s, "
              f"acc {rep.rmse_mean['acc']:.3f} m/s^2")
    return EXIT_PARTIAL if rep.audit.get("failed") else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--model")
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="horizon-irl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic demonstration corpus")
    s.add_argument("--repeats", type=int)
    s.add_argument("--noise-std", dest="noise_std", type=float)
    s.add_argument("--generator", choices=("quintic", "nmpc"))
    s.add_argument("--n-star", dest="N_star", type=float)
    sub.add_parser("learn", parents=[common], help="learn a driver model from a corpus")
    s = sub.add_parser("simulate", parents=[common], help="roll out a model on test logs")
    s.add_argument("--samples", type=int)
    s.add_argument("--scenario")
    s = sub.add_parser("evaluate", parents=[common], help="RMSE and horizon PMFs")
    s.add_argument("--observed", required=True)
    s.add_argument("--samples-dir", dest="samples_dir", required=True)
    s.add_argument("--segments")
    s = sub.add_parser("recover", parents=[common], help="oracle recovery experiment")
    s.add_argument("--n-star", dest="N_star", type=float)
    s.add_argument("--samples", type=int)
    return p


_OVERRIDES = ("seed", "data_dir", "model", "out", "repeats", "noise_std", "generator",
              "N_star", "samples")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k, None) for k in _OVERRIDES})
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "learn":
            return cmd_learn(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.scenario)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.observed, args.samples_dir, args.segments)
        return cmd_recover(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LearningError, DistributionError, PlannerError, harness.HarnessError,
            LogFormatError, LogValidationError, FeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
