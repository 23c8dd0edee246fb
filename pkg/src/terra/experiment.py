"""Config-driven experiment runner producing reproducible artifacts.

Config files are plain key=value text: tokens separated by whitespace or
newlines, ``#`` starting a comment. Every key has a default, so the empty
document is a valid config. Recognized keys:

  scenario        S1 | S2 | S3 | semisynthetic        (default S1)
  n               training panel size                 (default 3000)
  eval_n          evaluation panel size               (default = n)
  t               horizon                             (default 5)
  k               treatment levels, semisynthetic     (default 4)
  noise_sd        outcome noise sd                    (per-scenario default)
  seed            base seed                           (default 0)
  seeds           number of seeds                     (default 5)
  methods         comma list of terra,rlearner_ols,rlearner_ridge
  oracle_propensity  true|false                       (default true)
  ridge_alpha     ridge penalty for rlearner_ridge    (default 1.0)
  out             output directory                    (default runs)
  d_model n_heads n_layers d_ff dropout               architecture
  lr beta1 beta2 weight_decay clip_max_norm max_epochs batch_size
  patience_early_stop patience_lr lr_decay_factor lambda_prop lambda_cmu
  lambda_blip time_weights val_fraction               training

Artifacts per run directory: ``manifest.json`` (the resolved config echoed
together with every generator surrogate parameter), ``metrics.csv`` with
exactly the columns method, seed, timepoint, mse, spearman (per-step rows,
per-seed ``overall`` rows, and per-method ``mean``/``sd`` rows over seeds),
``plot_data.csv`` with per-step across-seed means for line charts, one
training-log CSV and one checkpoint per TERRA seed, and ``failures.txt``
when a method run failed. Rerunning the same config reproduces every file
byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import RegressorKind, fit_recursive_rlearner
from .datagen import generate, generator_manifest, scenario_spec
from .metrics import EvalReport, evaluate
from .model import ArchConfig, TerraModel
from .snmm import write_panel_csv
from .training import TRAINING_LOG_COLUMNS, TrainConfig, train

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "run_experiment",
    "summarize",
    "METRICS_COLUMNS",
    "EVAL_SEED_OFFSET",
]

METRICS_COLUMNS = ["method", "seed", "timepoint", "mse", "spearman"]
PLOT_COLUMNS = ["method", "timepoint", "mse_mean", "mse_sd",
                "spearman_mean", "spearman_sd"]
METHODS = ("terra", "rlearner_ols", "rlearner_ridge")
EVAL_SEED_OFFSET = 100003  # shifts the DGP seed for the held-out panel


class ConfigError(ValueError):
    """A config key is unknown or its value is out of range."""


@dataclass
class ExperimentConfig:
    scenario: str = "S1"
    n: int = 3000
    eval_n: int | None = None
    t: int = 5
    k: int | None = None
    noise_sd: float | None = None
    seed: int = 0
    n_seeds: int = 5
    methods: tuple[str, ...] = METHODS
    oracle_propensity: bool = True
    ridge_alpha: float = 1.0
    output_dir: str = "runs"
    arch_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def spec(self, seed: int, n: int | None = None):
        return scenario_spec(self.scenario, n=self.n if n is None else n,
                             seed=seed, t=self.t, k=self.k,
                             noise_sd=self.noise_sd)

    def arch(self) -> ArchConfig:
        probe = self.spec(0)
        return ArchConfig(p=probe.p, n_treatments=probe.k, horizon=probe.t,
                          **self.arch_overrides)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train_overrides)

    def resolved(self) -> dict:
        """Fully resolved key/value view for the run manifest."""
        arch = self.arch()
        trn = self.train_config(self.seed)
        return {
            "scenario": self.scenario,
            "n": self.n,
            "eval_n": self.n if self.eval_n is None else self.eval_n,
            "t": self.t,
            "k": self.spec(0).k,
            "noise_sd": self.spec(0).noise_sd,
            "seed": self.seed,
            "seeds": self.n_seeds,
            "methods": list(self.methods),
            "oracle_propensity": self.oracle_propensity,
            "ridge_alpha": self.ridge_alpha,
            "out": self.output_dir,
            "arch": {"d_model": arch.d_model, "n_heads": arch.n_heads,
                     "n_layers": arch.n_layers, "d_ff": arch.d_ff,
                     "dropout": arch.dropout_p},
            "train": {k: getattr(trn, k) for k in (
                "lr", "beta1", "beta2", "weight_decay", "clip_max_norm",
                "max_epochs", "batch_size", "patience_early_stop",
                "patience_lr", "lr_decay_factor", "lambda_prop",
                "lambda_cmu", "lambda_blip", "time_weight_strategy",
                "val_fraction")},
        }


_INT_KEYS = {"n": "n", "eval_n": "eval_n", "t": "t", "k": "k", "seed": "seed",
             "seeds": "n_seeds"}
_FLOAT_KEYS = {"noise_sd": "noise_sd", "ridge_alpha": "ridge_alpha"}
_ARCH_INT = {"d_model", "n_heads", "n_layers", "d_ff"}
_TRAIN_FLOAT = {"lr", "beta1", "beta2", "weight_decay", "clip_max_norm",
                "lr_decay_factor", "lambda_prop", "lambda_cmu", "lambda_blip",
                "val_fraction"}
_TRAIN_INT = {"max_epochs", "batch_size", "patience_early_stop", "patience_lr"}


def _parse_number(key: str, value: str, caster):
    try:
        return caster(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a key=value config document."""
    cfg = ExperimentConfig()
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        if key == "scenario":
            if value not in ("S1", "S2", "S3", "semisynthetic"):
                raise ConfigError(f"key 'scenario': unknown scenario {value!r}")
            cfg.scenario = value
        elif key in _INT_KEYS:
            parsed = _parse_number(key, value, int)
            if parsed < (0 if key == "seed" else 1):
                raise ConfigError(f"key {key!r}: value {parsed} out of range")
            setattr(cfg, _INT_KEYS[key], parsed)
        elif key in _FLOAT_KEYS:
            parsed = _parse_number(key, value, float)
            if parsed < 0:
                raise ConfigError(f"key {key!r}: value {parsed} out of range")
            setattr(cfg, _FLOAT_KEYS[key], parsed)
        elif key == "methods":
            methods = tuple(m for m in value.split(",") if m)
            unknown = [m for m in methods if m not in METHODS]
            if unknown or not methods:
                raise ConfigError(f"key 'methods': unknown methods {unknown}")
            cfg.methods = methods
        elif key == "oracle_propensity":
            if value not in ("true", "false"):
                raise ConfigError("key 'oracle_propensity': expected true|false")
            cfg.oracle_propensity = value == "true"
        elif key == "out":
            cfg.output_dir = value
        elif key in _ARCH_INT:
            parsed = _parse_number(key, value, int)
            if parsed < 1:
                raise ConfigError(f"key {key!r}: value {parsed} out of range")
            cfg.arch_overrides[key] = parsed
        elif key == "dropout":
            parsed = _parse_number(key, value, float)
            if not 0.0 <= parsed < 1.0:
                raise ConfigError(f"key 'dropout': value {parsed} out of range")
            cfg.arch_overrides["dropout_p"] = parsed
        elif key in _TRAIN_FLOAT:
            parsed = _parse_number(key, value, float)
            if parsed < 0:
                raise ConfigError(f"key {key!r}: value {parsed} out of range")
            cfg.train_overrides[key] = parsed
        elif key in _TRAIN_INT:
            parsed = _parse_number(key, value, int)
            if parsed < 1:
                raise ConfigError(f"key {key!r}: value {parsed} out of range")
            cfg.train_overrides[key] = parsed
        elif key == "time_weights":
            cfg.train_overrides["time_weight_strategy"] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        cfg.arch()
        cfg.train_config(cfg.seed)
        cfg.spec(cfg.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def _format_value(v) -> str:
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row[c]) for c in columns])


def _fit_method(method: str, cfg: ExperimentConfig, panel, gt, arch, seed: int,
                out_dir: Path, seed_index: int):
    """Returns an object exposing predict_blip_components."""
    if method == "terra":
        result = train(panel, arch, cfg.train_config(seed))
        _write_csv(out_dir / f"training_log_seed{seed_index}.csv",
                   TRAINING_LOG_COLUMNS, result.log)
        result.model.save(out_dir / f"checkpoint_seed{seed_index}.npz")
        return result.model
    kind = (RegressorKind("ols") if method == "rlearner_ols"
            else RegressorKind("ridge", cfg.ridge_alpha))
    oracle = gt.propensity if cfg.oracle_propensity else None
    return fit_recursive_rlearner(panel, kind, oracle_propensities=oracle)


def run_experiment(cfg: ExperimentConfig, dry_run: bool = False) -> int:
    """Generate, fit, evaluate, and persist artifacts; 0 on success.

    Per seed the training panel and an independently seeded evaluation panel
    come from the same DGP, so reported errors measure generalization. A
    failing method run is recorded and skipped; the exit code is nonzero
    only if every seed of some requested method failed.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    manifest = {
        "config": cfg.resolved(),
        "generator": generator_manifest(cfg.spec(cfg.seed)),
        "seed_list": seeds,
        "eval_seed_offset": EVAL_SEED_OFFSET,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if dry_run:
        lines = [f"{method} seed={s}" for method in cfg.methods for s in seeds]
        (out_dir / "planned_runs.txt").write_text("\n".join(lines) + "\n")
        return 0

    eval_n = cfg.n if cfg.eval_n is None else cfg.eval_n
    arch = cfg.arch()
    rows: list[dict] = []
    reports: dict[str, list[EvalReport]] = {m: [] for m in cfg.methods}
    failures: list[str] = []
    for i, seed in enumerate(seeds):
        train_panel, train_gt = generate(cfg.spec(seed))
        eval_panel, _ = generate(cfg.spec(seed + EVAL_SEED_OFFSET, n=eval_n))
        for method in cfg.methods:
            try:
                estimator = _fit_method(method, cfg, train_panel, train_gt,
                                        arch, seed, out_dir, i)
                report = evaluate(estimator, eval_panel)
            except Exception as err:  # noqa: BLE001 - recorded, not fatal
                failures.append(f"{method} seed={seed}: {err!r}")
                continue
            reports[method].append(report)
            rows.extend(report.to_rows(method, seed))
    for method in cfg.methods:
        got = reports[method]
        if not got:
            continue
        mses = np.array([r.overall_mse for r in got])
        sps = np.array([r.overall_spearman for r in got])
        sd_mse = float(mses.std(ddof=1)) if len(got) > 1 else 0.0
        sd_sp = float(sps.std(ddof=1)) if len(got) > 1 else 0.0
        rows.append({"method": method, "seed": "mean", "timepoint": "overall",
                     "mse": float(mses.mean()), "spearman": float(sps.mean())})
        rows.append({"method": method, "seed": "sd", "timepoint": "overall",
                     "mse": sd_mse, "spearman": sd_sp})
    _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, rows)
    _write_plot_data(out_dir / "plot_data.csv", cfg.methods, reports)
    if failures:
        (out_dir / "failures.txt").write_text("\n".join(failures) + "\n")
    all_failed = any(not reports[m] for m in cfg.methods)
    return 1 if all_failed else 0


def _write_plot_data(path: Path, methods, reports) -> None:
    rows = []
    for method in methods:
        got = reports[method]
        if not got:
            continue
        t = len(got[0].mse_per_timepoint)
        mse = np.stack([r.mse_per_timepoint for r in got])
        sp = np.stack([r.spearman_per_timepoint for r in got])
        for j in range(t):
            rows.append({
                "method": method,
                "timepoint": j + 1,
                "mse_mean": float(mse[:, j].mean()),
                "mse_sd": float(mse[:, j].std(ddof=1)) if len(got) > 1 else 0.0,
                "spearman_mean": float(sp[:, j].mean()),
                "spearman_sd": float(sp[:, j].std(ddof=1)) if len(got) > 1 else 0.0,
            })
    _write_csv(path, PLOT_COLUMNS, rows)


def generate_panels(cfg: ExperimentConfig) -> list[Path]:
    """Write one training-panel CSV per seed plus the generator manifest."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "generator_manifest.json", "w") as fh:
        json.dump(generator_manifest(cfg.spec(cfg.seed)), fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    paths = []
    for i in range(cfg.n_seeds):
        seed = cfg.seed + i
        panel, _ = generate(cfg.spec(seed))
        path = out_dir / f"panel_seed{i}.csv"
        write_panel_csv(panel, path)
        paths.append(path)
    return paths


def summarize(metric_paths: list[str | Path]) -> tuple[list[dict], str]:
    """Merge metrics files into a per-method ranking by overall MSE.

    Uses the per-seed ``overall`` rows; ties on MSE break by Spearman
    descending. Returns the summary rows and an aligned plain-text table.
    """
    per_method: dict[str, list[tuple[float, float]]] = {}
    for path in metric_paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != METRICS_COLUMNS:
                raise ValueError(f"{path}: unexpected metrics schema {header}")
            for method, seed, timepoint, mse, sp in reader:
                if timepoint != "overall" or seed in ("mean", "sd"):
                    continue
                per_method.setdefault(method, []).append(
                    (float(mse), float(sp) if sp else float("nan")))
    rows = []
    for method, vals in per_method.items():
        mses = np.array([v[0] for v in vals])
        sps = np.array([v[1] for v in vals])
        rows.append({
            "method": method,
            "n_seeds": len(vals),
            "mse_mean": float(mses.mean()),
            "mse_sd": float(mses.std(ddof=1)) if len(vals) > 1 else 0.0,
            "spearman_mean": float(np.nanmean(sps)),
            "spearman_sd": float(np.nanstd(sps, ddof=1)) if len(vals) > 1 else 0.0,
        })
    rows.sort(key=lambda r: (r["mse_mean"], -r["spearman_mean"]))
    widths = {"method": 14, "n_seeds": 7}
    lines = [f"{'method':<14} {'n_seeds':>7} {'mse':>22} {'spearman':>22}"]
    for r in rows:
        mse_col = f"{r['mse_mean']:.6f} +/- {r['mse_sd']:.6f}"
        sp_col = f"{r['spearman_mean']:.4f} +/- {r['spearman_sd']:.4f}"
        lines.append(f"{r['method']:<14} {r['n_seeds']:>7} {mse_col:>22} {sp_col:>22}")
    return rows, "\n".join(lines) + "\n"


def write_summary(metric_paths: list[str | Path], out_dir: str | Path) -> None:
    rows, text = summarize(metric_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "summary.csv",
               ["method", "n_seeds", "mse_mean", "mse_sd",
                "spearman_mean", "spearman_sd"], rows)
    (out_dir / "summary.txt").write_text(text)
