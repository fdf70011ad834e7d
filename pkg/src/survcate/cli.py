"""``survcate`` command line: simulate, fit, predict, explain, subgroup, bench.

Each command reads a JSON config (``--config``), applies the ``--seed``,
``--threads`` and ``--out`` overrides, echoes the effective config into the
output directory as ``run_config.json`` and writes its results there.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else raised by the library.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .data import load_schema, read_cohort_csv, read_covariates_csv, write_cohort_csv
from .exceptions import ConfigError, DataError, NumericalError, SurvCateError
from .interpret import ShapConfig, kernel_shap, schema_groups, select_background, write_shap_summary
from .metalearners import CateConfig, LearnerKind, SurvivalMetaLearner, _resolve_t_star, cross_fit_cate
from .nuisance import NuisanceConfig
from .persist import load_model, save_model
from .simbench import BenchConfig, ScenarioSpec, run_benchmark, simulate_pair
from .subgroup import DEFAULT_GRID, mtd_curve

log = logging.getLogger("survcate")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _build(cls, d, where):
    """Instantiate dataclass ``cls`` from mapping ``d``, rejecting unknown keys."""
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class SimulateConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)

    def __post_init__(self):
        self.scenario = _build(ScenarioSpec, self.scenario, "scenario")

    def apply(self, seed, threads):
        if seed is not None:
            self.scenario.seed = seed


@dataclass
class FitConfig:
    data: str = ""
    schema: str = ""
    learner: str = "R"
    t_star: object = "median"
    seed: int = 0
    cross_fit: object = None
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    cate: CateConfig = field(default_factory=CateConfig)

    def __post_init__(self):
        self.learner = LearnerKind.parse(self.learner).value
        self.nuisance = _build(NuisanceConfig, self.nuisance, "nuisance")
        self.cate = _build(CateConfig, self.cate, "cate")
        if self.cross_fit is not None:
            k = self.cross_fit.get("k_folds", 5) if isinstance(self.cross_fit, dict) else None
            if not isinstance(k, int) or set(self.cross_fit) - {"k_folds"}:
                raise ConfigError("cross_fit must be {\"k_folds\": int}")
        _require(self, "data", "schema")

    def apply(self, seed, threads):
        if seed is not None:
            self.seed = seed
        if threads is not None:
            self.nuisance.threads = self.cate.threads = threads


@dataclass
class PredictConfig:
    model: str = ""
    data: str = ""
    schema: str = ""

    def __post_init__(self):
        _require(self, "model", "data", "schema")

    def apply(self, seed, threads):
        pass


@dataclass
class ExplainConfig:
    model: str = ""
    data: str = ""
    schema: str = ""
    background: str = ""
    shap: ShapConfig = field(default_factory=ShapConfig)

    def __post_init__(self):
        self.shap = _build(ShapConfig, self.shap, "shap")
        _require(self, "model", "data", "schema")

    def apply(self, seed, threads):
        if seed is not None:
            self.shap.seed = seed


@dataclass
class SubgroupConfig:
    data: str = ""
    schema: str = ""
    tau_hat: str = ""
    model: str = ""
    t_star: object = "median"
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    margin: float = 0.05

    def __post_init__(self):
        _require(self, "data", "schema")
        if bool(self.tau_hat) == bool(self.model):
            raise ConfigError("give exactly one of tau_hat or model")

    def apply(self, seed, threads):
        pass


@dataclass
class BenchRunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    learners: list = field(default_factory=lambda: ["X", "M", "DR", "D", "DEA", "R"])
    reps: int = 10
    Q: int = 50
    attribution: object = True
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    cate: CateConfig = field(default_factory=CateConfig)
    shap: ShapConfig = field(default_factory=ShapConfig)
    jobs: int = 1

    def __post_init__(self):
        self.scenario = _build(ScenarioSpec, self.scenario, "scenario")
        self.nuisance = _build(NuisanceConfig, self.nuisance, "nuisance")
        self.cate = _build(CateConfig, self.cate, "cate")
        self.shap = _build(ShapConfig, self.shap, "shap")

    def apply(self, seed, threads):
        if seed is not None:
            self.scenario.seed = seed
        if threads is not None:
            self.jobs = threads

    def bench_config(self):
        return BenchConfig(tuple(self.learners), self.reps, self.Q, self.attribution,
                           self.nuisance, self.cate, self.shap, self.jobs)


def _require(cfg, *names):
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")


CONFIGS = {"simulate": SimulateConfig, "fit": FitConfig, "predict": PredictConfig,
           "explain": ExplainConfig, "subgroup": SubgroupConfig, "bench": BenchRunConfig}


def load_config(command, path, seed=None, threads=None):
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    cfg = _build(CONFIGS[command], raw, command)
    cfg.apply(seed, threads)
    return cfg


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_finite(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_column(path, header, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", header])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])


def _read_column(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or header not in rows[0]:
        raise DataError(f"{path}: expected a {header!r} column")
    try:
        return np.array([float(r[header]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_simulate(cfg, out):
    spec = cfg.scenario
    train, test, rate = simulate_pair(spec)
    for name, sim in (("train", train), ("test", test)):
        write_cohort_csv(sim.cohort, os.path.join(out, f"{name}.csv"))
        with open(os.path.join(out, f"{name}_oracle.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            cols = sim.oracle_columns()
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", *cols])
            for i in range(sim.cohort.n):
                w.writerow([i, *(repr(float(cols[k][i])) for k in cols)])
    _write_json(os.path.join(out, "schema.json"), train.cohort.schema.to_dict())
    _write_json(os.path.join(out, "manifest.json"), {
        "scenario": spec.scenario, "design": spec.design, "seed": spec.seed,
        "n_train": spec.n_train, "n_test": spec.n_test,
        "censor_rate_target": spec.censor_rate, "censor_rate_param": rate,
        "censored_fraction_train": float(1.0 - train.cohort.event.mean()),
        "treated_fraction_train": float(train.cohort.treatment.mean()),
        "t_star": train.t_star, "target_time_rule": spec.target_time,
        "binary_coding": spec.binary_coding,
        "files": ["train.csv", "test.csv", "train_oracle.csv", "test_oracle.csv", "schema.json"],
    })


def _cohort(cfg):
    schema = load_schema(cfg.schema)
    return read_cohort_csv(cfg.data, schema), schema


def cmd_fit(cfg, out):
    cohort, schema = _cohort(cfg)
    X = cohort.design_matrix()
    names = schema.encoded_names()
    t_star = _resolve_t_star(cfg.t_star, cohort.time)
    if cfg.cross_fit is not None:
        res = cross_fit_cate(cohort, t_star, cfg.learner, cfg.cross_fit.get("k_folds", 5),
                             cfg.seed, cfg.nuisance, cfg.cate)
        for k, est in enumerate(res.models):
            save_model(est.model_, os.path.join(out, f"model_fold{k}.npz"))
        _write_column(os.path.join(out, "tau_hat.csv"), "tau_hat", res.tau)
        diag = {"mode": "cross_fit", "learner": cfg.learner, "t_star": t_star,
                "folds": [dict(est.diagnostics_, fold=k) for k, est in enumerate(res.models)]}
        _write_json(os.path.join(out, "diagnostics.json"), diag)
        return
    est = SurvivalMetaLearner(cfg.learner, t_star, cfg.nuisance, cfg.cate, cfg.seed)
    est.fit(X, cohort.time, cohort.event, cohort.treatment, feature_names=names)
    save_model(est.model_, os.path.join(out, "model.npz"))
    _write_column(os.path.join(out, "tau_hat.csv"), "tau_hat", est.predict(X))
    _write_json(os.path.join(out, "diagnostics.json"), dict(est.diagnostics_, mode="single"))


def _model_matrix(cfg):
    model = load_model(cfg.model)
    schema = load_schema(cfg.schema)
    if schema.encoded_names() != list(model.feature_names):
        raise DataError("schema columns do not match the model's covariates")
    return model, schema, read_covariates_csv(cfg.data, schema)


def cmd_predict(cfg, out):
    model, _, X = _model_matrix(cfg)
    _write_column(os.path.join(out, "predictions.csv"), "tau_hat", model.predict(X))


def cmd_explain(cfg, out):
    model, schema, X = _model_matrix(cfg)
    bg = read_covariates_csv(cfg.background, schema) if cfg.background else X
    background = select_background(bg, cfg.shap.background_size, cfg.shap.seed)
    n = min(X.shape[0], cfg.shap.subject_cap)
    shap = kernel_shap(model, X[:n], background, cfg.shap, names=schema.encoded_names())
    tol = 1e-6 if shap.mode == "exact" else 1e-3
    if shap.additivity_error() > tol:
        raise NumericalError("SHAP additivity check failed; nothing written")
    shap.to_csv(os.path.join(out, "shap_values.csv"))
    write_shap_summary(shap, os.path.join(out, "shap_summary.json"), schema_groups(schema))


def cmd_subgroup(cfg, out):
    cohort, schema = _cohort(cfg)
    if cfg.tau_hat:
        tau = _read_column(cfg.tau_hat, "tau_hat")
    else:
        model = load_model(cfg.model)
        tau = model.predict(cohort.design_matrix())
    t_star = _resolve_t_star(cfg.t_star, cohort.time)
    curve = mtd_curve(cohort, tau, t_star, cfg.grid, cfg.margin)
    curve.to_csv(os.path.join(out, "mtd_curve.csv"))
    curve.to_json(os.path.join(out, "mtd_curve.json"))


def cmd_bench(cfg, out):
    report = run_benchmark(cfg.scenario, cfg.bench_config())
    report.write_per_replicate(os.path.join(out, "per_replicate.csv"))
    report.write_aggregate(os.path.join(out, "aggregate.json"))
    report.write_long(os.path.join(out, "fig2_long.csv"))
    for r in report.rows:
        log.info("rep %d %s runtime %.2fs%s", r["rep"], r["learner"], r["runtime"],
                 f" error: {r['error']}" if r["error"] else "")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "explain": cmd_explain, "subgroup": cmd_subgroup, "bench": cmd_bench}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="survcate", description="Survival CATE meta-learners with KernelSHAP and MTD curves.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="cap on worker threads")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.command, args.config, args.seed, args.threads)
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "run_config.json"),
                    {"command": args.command, "config": _plain(cfg)})
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"survcate: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"survcate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"survcate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SurvCateError as exc:
        print(f"survcate: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
