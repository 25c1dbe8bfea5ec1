"""Command-line pipeline: synth, fit, assign, evaluate, treatment and check.

Every command reads one YAML/JSON config, writes under ``--out`` and refreshes
``manifest.json`` with the SHA-256 of every output file.  Exit codes: 0 on
success, 1 on a runtime or numeric failure, 2 on a configuration failure (in
which case nothing is written).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import evalstats as ev
from .clusterop import assign_clusters
from .cohort import (
    CohortSchema,
    Episode,
    TreatmentSpec,
    filter_treatment_cohort,
    four_blob_spec,
    generate_synthetic_cohort,
    load_cohort,
    outcome_split_spec,
    split_by_patient,
    write_cohort,
)
from .embedding import ConfigError
from .trainer import GREEK, ModelState, TrainConfig, cohort_checksum, infer_embeddings, phenotype_labels, train
from .treatfx import DEFAULT_ADJUSTERS, fits_by_phenotype, forest_csv

log = logging.getLogger("npcnet")

CONFIG_ENV = "NPCNET_CONFIG"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DATA_KEYS = {"statics", "events", "outcomes", "sofa", "treatment", "schema"}
SYNTH_KEYS = {"preset", "n_patients", "seed", "treatment"}
PRESETS = {"four_blob": four_blob_spec, "outcome_split": outcome_split_spec}


@dataclass
class RunConfig:
    """Training knobs plus data location, output directory, seeds and alpha."""

    train: TrainConfig
    out: str = "npcnet-out"
    data: dict | None = None
    synthetic: dict | None = None
    seeds: list[int] = field(default_factory=list)
    alpha: float = 0.05
    split_ratio: float = 0.8
    split_seed: int = 0
    evaluate_on: str = "test"
    adjusters: list[str] = field(default_factory=lambda: list(DEFAULT_ADJUSTERS))

    @classmethod
    def from_mapping(cls, raw: dict, base_dir: Path) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        own = {f.name for f in dataclasses.fields(cls)} - {"train"}
        unknown = sorted(set(raw) - train_keys - own)
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        try:
            train_cfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
            cfg = cls(train=train_cfg, **{k: v for k, v in raw.items() if k in own})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg._validate(base_dir)
        return cfg

    def _validate(self, base_dir: Path) -> None:
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'data' (CSV paths) or 'synthetic'")
        if self.data is not None:
            unknown = sorted(set(self.data) - DATA_KEYS)
            if unknown:
                raise ConfigError(f"unknown data key(s): {unknown}")
            for need in ("statics", "events", "outcomes", "schema"):
                if need not in self.data:
                    raise ConfigError(f"data.{need} is required")
            self.data = {k: str((base_dir / v).resolve()) for k, v in self.data.items()}
            for k, p in self.data.items():
                if not Path(p).is_file():
                    raise ConfigError(f"data.{k}: no such file {p}")
        if self.synthetic is not None:
            unknown = sorted(set(self.synthetic) - SYNTH_KEYS)
            if unknown:
                raise ConfigError(f"unknown synthetic key(s): {unknown}")
            if self.synthetic.get("preset", "four_blob") not in PRESETS:
                raise ConfigError(f"synthetic.preset must be one of {sorted(PRESETS)}")
            tr = self.synthetic.get("treatment")
            if tr is not None:
                names = {f.name for f in dataclasses.fields(TreatmentSpec)}
                if not isinstance(tr, dict) or set(tr) - names:
                    raise ConfigError(f"synthetic.treatment accepts only {sorted(names)}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.evaluate_on not in ("test", "all"):
            raise ConfigError("evaluate_on must be 'test' or 'all'")
        self.seeds = [int(s) for s in self.seeds] or [self.train.seed]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        self.out = str(Path(self.out) if Path(self.out).is_absolute() else (base_dir / self.out).resolve())

    def to_dict(self) -> dict:
        # the output directory is left out so relocated runs stay byte-identical
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("train", "out")}
        d.update(self.train.to_dict())
        return d


def read_config(path: str | None, overrides: dict) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError(f"no config given (use --config or set {CONFIG_ENV})")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(raw, p.resolve().parent)


# output helpers -----------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: non-finite floats become ``None``, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def refresh_manifest(out: Path, cfg: RunConfig) -> None:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out / MANIFEST, {"seeds": cfg.seeds, "files": files})


# data ---------------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[list[Episode], CohortSchema]:
    if cfg.synthetic is not None:
        s = cfg.synthetic
        kwargs = {"n_patients": int(s["n_patients"])} if "n_patients" in s else {}
        spec = PRESETS[s.get("preset", "four_blob")](**kwargs)
        if s.get("treatment") is not None:
            spec.treatment = TreatmentSpec(**s["treatment"])
        return generate_synthetic_cohort(spec, int(s.get("seed", 0))), spec.schema()
    d = cfg.data
    schema = CohortSchema.from_dict(yaml.safe_load(Path(d["schema"]).read_text(encoding="utf-8")))
    episodes, report = load_cohort(
        d["statics"], d["events"], d["outcomes"], d.get("sofa"), d.get("treatment"), schema=schema
    )
    for w in report.warnings:
        log.warning(w)
    return episodes, schema


def partitions(cfg: RunConfig, episodes: list[Episode]):
    split = split_by_patient(episodes, cfg.split_ratio, cfg.split_seed)
    return split.train, (split.test if cfg.evaluate_on == "test" else episodes)


def model_path(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed_{seed}" / "model.json"


def load_model(cfg: RunConfig, seed: int, train_eps: list[Episode], override: str | None = None) -> ModelState:
    path = Path(override) if override else model_path(cfg, seed)
    if not path.is_file():
        raise FileNotFoundError(f"no model at {path}; run 'fit' first")
    model = ModelState.load(path)
    if cfg.evaluate_on == "test" and model.manifest.get("train_checksum") != cohort_checksum(train_eps):
        raise ValueError(f"model {path} was trained on a different training partition than this config yields")
    return model


# commands -----------------------------------------------------------------------------

LOSS_COLUMNS = ["stage", "epoch", "rec", "clustering", "prob", "dist", "navigator", "total"]


def loss_curve_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for rec in history:
        w.writerow([rec.get(c, "") if c in ("stage", "epoch") else repr(rec[c]) if c in rec else "" for c in LOSS_COLUMNS])
    return buf.getvalue()


def cmd_synth(cfg: RunConfig, args) -> dict:
    if cfg.synthetic is None:
        raise ConfigError("synth needs a 'synthetic' block")
    episodes, schema = load_data(cfg)
    out = Path(cfg.out) / "cohort"
    write_cohort(episodes, out, schema)
    write_json(out / "schema.json", schema.to_dict())
    return {"episodes": len(episodes), "dir": str(out)}


def cmd_fit(cfg: RunConfig, args) -> dict:
    episodes, schema = load_data(cfg)
    train_eps, eval_eps = partitions(cfg, episodes)
    out = Path(cfg.out)
    report = ev.MetricReport()
    runs = []
    for seed in cfg.seeds:
        tcfg = dataclasses.replace(cfg.train, seed=seed)
        log.info("fitting seed %d on %d training episodes", seed, len(train_eps))
        model = train(train_eps, tcfg, schema.statics)
        model.save(model_path(cfg, seed))
        write_text(out / f"seed_{seed}" / "loss_curve.csv", loss_curve_csv(model.history))
        E = infer_embeddings(eval_eps, model)
        report.add(seed, E, assign_labels(model, E))
        final = model.history[-1] if model.history else {}
        runs.append({"seed": seed, "final_loss": final, "navigator_active": model.manifest.get("navigator_active")})
    split = {
        "train": [e.episode_id for e in train_eps],
        "evaluate": [e.episode_id for e in eval_eps],
    }
    write_json(out / "split.json", split)
    write_json(out / "fit_report.json", {"evaluated_on": cfg.evaluate_on, "metrics": report.to_dict(), "runs": runs})
    return {"seeds": cfg.seeds, "metrics": report.summary()}


def assign_labels(model: ModelState, E: np.ndarray) -> np.ndarray:
    return assign_clusters(E, model.centroids.M)


def labels_csv(episodes: Sequence[Episode], clusters: np.ndarray, names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode_id", "patient_id", "cluster", "phenotype"])
    for e, c, n in zip(episodes, clusters, names):
        w.writerow([e.episode_id, e.patient_id, int(c), n])
    return buf.getvalue()


def cmd_assign(cfg: RunConfig, args) -> dict:
    episodes, _ = load_data(cfg)
    train_eps, eval_eps = partitions(cfg, episodes)
    seed = cfg.seeds[0]
    model = load_model(cfg, seed, train_eps, args.model)
    E = infer_embeddings(eval_eps, model)
    clusters = assign_labels(model, E)
    write_text(Path(cfg.out) / "assign" / "labels.csv", labels_csv(eval_eps, clusters, phenotype_labels(model, clusters)))
    return {"episodes": len(eval_eps)}


def _ordered_names(names: Sequence[str]) -> list[str]:
    return sorted(names, key=lambda n: (GREEK.index(n) if n in GREEK else len(GREEK), n))


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    episodes, _ = load_data(cfg)
    train_eps, eval_eps = partitions(cfg, episodes)
    out = Path(cfg.out) / "evaluate"
    metrics = ev.MetricReport()
    tdis = []
    for i, seed in enumerate(cfg.seeds):
        model = load_model(cfg, seed, train_eps, args.model if i == 0 else None)
        E = infer_embeddings(eval_eps, model)
        clusters = assign_labels(model, E)
        names = phenotype_labels(model, clusters)
        metrics.add(seed, E, clusters)
        grid = ev.trajectory_grid(eval_eps, names, phenotypes=_ordered_names(model.phenotype_names))
        value = ev.tdi(grid, cfg.alpha)
        tdis.append(
            {
                "seed": seed,
                "tdi": value if ev.is_defined(value) else None,
                "n_testable": grid.n_testable,
                "n_significant": grid.n_significant(cfg.alpha),
                "excluded_missing_sofa6": grid.excluded_missing_sofa6,
            }
        )
        if i == 0:
            write_text(out / "tdi_grid.csv", grid.to_csv(cfg.alpha))
            write_text(out / "km_curves.csv", ev.km_to_csv(ev.kaplan_meier(eval_eps, names)))
            write_text(out / "characteristics.csv", ev.phenotype_characteristics(eval_eps, names).to_csv())
    values = [t["tdi"] for t in tdis if t["tdi"] is not None]
    mean = float(np.mean(values)) if values else None
    sd = (float(np.std(values, ddof=1)) if len(values) > 1 else 0.0) if values else None
    report = {
        "evaluated_on": cfg.evaluate_on,
        "n_episodes": len(eval_eps),
        "alpha": cfg.alpha,
        "metrics": metrics.to_dict(),
        "tdi": {"per_seed": tdis, "mean": mean, "sd": sd},
    }
    write_json(out / "report.json", report)
    return {"metrics": metrics.summary(), "tdi_mean": mean}


def cmd_treatment(cfg: RunConfig, args) -> dict:
    episodes, _ = load_data(cfg)
    train_eps, eval_eps = partitions(cfg, episodes)
    treated = filter_treatment_cohort(eval_eps)
    model = load_model(cfg, cfg.seeds[0], train_eps, args.model)
    clusters = assign_labels(model, infer_embeddings(treated, model)) if treated else np.zeros(0, dtype=int)
    names = phenotype_labels(model, clusters)
    fits = fits_by_phenotype(treated, names, _ordered_names(model.phenotype_names), cfg.adjusters)
    out = Path(cfg.out) / "treatment"
    write_text(out / "forest.csv", forest_csv(fits))
    summary = []
    for f in fits:
        row = {"phenotype": f.phenotype, "n": f.n, "deaths": f.n_deaths, "low_power": f.low_power}
        row["non_estimable"] = f.non_estimable
        if f.fit is not None:
            row["converged"] = f.fit.converged
            row["terms"] = {t: f.fit.term(t) for t in f.terms}
        summary.append(row)
    write_json(out / "treatment.json", {"n_treated": len(treated), "adjusters": cfg.adjusters, "phenotypes": summary})
    return {"n_treated": len(treated), "phenotypes": len(fits)}


def cmd_check(cfg: RunConfig | None, args) -> dict:
    from .selftest import run_selftest

    results = run_selftest(cfg.train.seed if cfg else 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"self-test failed: {failed}")
    return {"checks": len(results)}


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "assign": cmd_assign,
    "evaluate": cmd_evaluate,
    "treatment": cmd_treatment,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npcnet", description="Computable phenotyping pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"YAML or JSON run config (default: ${CONFIG_ENV})")
        p.add_argument("--seeds", type=int, help="run seeds seed..seed+N-1")
        p.add_argument("--alpha", type=float, help="significance level for the TDI")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true")
        if name in ("assign", "evaluate", "treatment"):
            p.add_argument("--model", help="model file (default: <out>/seed_<first seed>/model.json)")
    return parser


def _error(kind: str, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"alpha": args.alpha}
        cfg = None
        if args.command != "check" or args.config or os.environ.get(CONFIG_ENV):
            cfg = read_config(args.config, overrides)
            if args.seeds is not None:
                if args.seeds < 1:
                    raise ConfigError("--seeds must be positive")
                cfg.seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
            if args.out is not None:
                cfg.out = str(Path(args.out).resolve())
    except (ConfigError, ValueError) as exc:
        _error("config", exc)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](cfg, args)
        if cfg is not None and args.command != "check":
            out = Path(cfg.out)
            write_json(out / "resolved_config.json", cfg.to_dict())
            refresh_manifest(out, cfg)
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to a machine-readable exit
        log.debug("command failed", exc_info=True)
        _error("runtime", exc)
        return EXIT_RUNTIME
    if not args.quiet:
        print(json.dumps(_clean(result), sort_keys=True, ensure_ascii=False))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
