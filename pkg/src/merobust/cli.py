"""Command-line front end.

Subcommands ``test``, ``estimate``, ``simulate`` and ``power`` read an INI
configuration (see ``configs/``) and write JSON/CSV reports to ``--out-dir``.
Exit status: 0 on success, 1 on errors, 2 when ``--strict`` is given and
the run produced warnings.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import hashlib
import json
import math
import sys
import warnings as _warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import BasisError, BasisSpec, evaluate_bases, extension_basis
from .dataset import DataError, Dataset
from .gmm import GmmError, WeightingScheme, estimate_effect, gmm_minimize
from .moments import MOMENT_KINDS, MomentError, MomentSystem
from .simlab import ALL_TESTS, REGIMES, SimConfig, SimulationError, build_system, run_grid

MISSING_TOKENS = {"", "na", "nan", "null"}
_LM_KINDS = {"rps", "dr", "rps_binary", "rps_count", "dr_count"}
_K_KINDS = {"ror", "dr", "ror_count", "dr_count"}
_ALPHA1_KINDS = {"rps", "dr", "rps_binary", "rps_count", "dr_count"}
_GAMMA_KINDS = {"ror", "dr", "ror_count", "dr_count"}


class ConfigError(ValueError):
    pass


ERROR_CODES = (
    (ConfigError, "config_error"), (DataError, "data_error"), (BasisError, "basis_error"),
    (MomentError, "moment_error"), (GmmError, "gmm_error"), (SimulationError, "simulation_error"),
    (OSError, "io_error"), (ValueError, "value_error"),
)


def error_code(err: Exception) -> str:
    for cls, code in ERROR_CODES:
        if isinstance(err, cls):
            return code
    return "internal_error"


# -- configuration ---------------------------------------------------------------

def _list(value: str | None) -> list[str]:
    if value is None:
        return []
    return [v.strip() for v in value.replace(";", ",").split(",") if v.strip()]


@dataclass
class AnalysisConfig:
    outcome: str = "y"
    exposure: str = "a"
    error_free: list[str] = field(default_factory=list)
    error_prone: list[str] = field(default_factory=list)
    time: str | None = None
    exposure_kind: str = "continuous"
    missing: str = "error"
    test: str = "dr"
    outcome_link: str = "identity"
    instruments: str = "auto"
    alpha_level: float = 0.05
    gof: bool = False
    gof_level: float = 0.10
    weighting: WeightingScheme = field(default_factory=WeightingScheme)
    bases: dict = field(default_factory=dict)
    instrument_specs: dict = field(default_factory=dict)
    seed: int = 1
    simulate: dict = field(default_factory=dict)
    power: dict = field(default_factory=dict)
    estimate: dict = field(default_factory=dict)
    text_hash: str = ""

    @property
    def role_columns(self) -> list[str]:
        return [self.outcome, self.exposure] + self.error_free + self.error_prone


def _parse_spec(parser: configparser.ConfigParser, name: str) -> BasisSpec:
    sec = parser[name]
    kind = sec.get("kind", "polynomial")
    intercept = sec.getboolean("intercept", fallback=None)
    column = sec.get("column")
    try:
        if kind == "polynomial":
            scale = sec.get("scale", "1")
            return BasisSpec.polynomial(
                column, degree=sec.getint("degree", 1),
                include_intercept=True if intercept is None else intercept,
                powers=[int(p) for p in _list(sec.get("powers"))] or None,
                scale=None if scale == "auto" else float(scale))
        if kind == "constant":
            return BasisSpec.constant()
        if kind == "fourier":
            return BasisSpec.fourier(column, sec.getfloat("period"), sec.getint("n_harmonics", 1),
                                     include_intercept=bool(intercept))
        if kind == "dummy":
            return BasisSpec.dummy(column, [float(v) for v in _list(sec.get("levels"))],
                                   include_intercept=bool(intercept))
        if kind == "custom":
            return BasisSpec.custom(column, sec.get("expression"), include_intercept=bool(intercept))
        if kind == "interaction":
            parts = _list(sec.get("parts"))
            if len(parts) != 2:
                raise ConfigError(f"[{name}] interaction needs two parts")
            return BasisSpec.interaction(_parse_spec(parser, parts[0]),
                                         _parse_spec(parser, parts[1]),
                                         include_intercept=True if intercept is None else intercept)
    except (TypeError, ValueError) as err:
        if isinstance(err, (ConfigError, BasisError)):
            raise
        raise ConfigError(f"[{name}] {err}") from None
    raise ConfigError(f"[{name}] unknown basis kind {kind!r}")


def _specs_for(parser, prefix: str) -> list[BasisSpec]:
    names = [s for s in parser.sections() if s == prefix or s.startswith(prefix + ".")]
    referenced = {p for s in parser.sections() for p in _list(parser[s].get("parts"))}
    return [_parse_spec(parser, s) for s in names if s not in referenced]


def _canonical(parser: configparser.ConfigParser) -> str:
    data = {s: dict(sorted(parser[s].items())) for s in sorted(parser.sections())}
    return json.dumps(data, sort_keys=True)


def parse_config(text: str) -> AnalysisConfig:
    """Build an ``AnalysisConfig`` from INI text."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    cfg = AnalysisConfig()
    try:
        if parser.has_section("data"):
            d = parser["data"]
            cfg.outcome = d.get("outcome", cfg.outcome)
            cfg.exposure = d.get("exposure", cfg.exposure)
            cfg.error_free = _list(d.get("error_free"))
            cfg.error_prone = _list(d.get("error_prone"))
            cfg.time = d.get("time")
            cfg.exposure_kind = d.get("exposure_kind", cfg.exposure_kind)
            cfg.missing = d.get("missing", cfg.missing)
        if parser.has_section("model"):
            m = parser["model"]
            cfg.test = m.get("test", cfg.test)
            cfg.outcome_link = m.get("outcome_link", cfg.outcome_link)
            cfg.instruments = m.get("instruments", cfg.instruments)
            cfg.alpha_level = m.getfloat("alpha_level", cfg.alpha_level)
            cfg.gof = m.getboolean("gof", cfg.gof)
            cfg.gof_level = m.getfloat("gof_level", cfg.gof_level)
            cfg.seed = m.getint("seed", cfg.seed)
        if parser.has_section("weighting"):
            w = parser["weighting"]
            bandwidth = w.get("bandwidth")
            cfg.weighting = WeightingScheme(
                kind=w.get("kind", "iterated"), covariance=w.get("covariance", "iid"),
                bandwidth=None if bandwidth in (None, "auto") else int(bandwidth),
                max_iter=w.getint("max_iter", 50))
        for role in ("exposure", "interaction", "outcome"):
            specs = _specs_for(parser, f"basis.{role}")
            if specs:
                cfg.bases[role] = specs
        for inst in ("ell", "m", "k"):
            specs = _specs_for(parser, f"instrument.{inst}")
            if specs:
                cfg.instrument_specs[inst] = specs
        for name in ("simulate", "power", "estimate"):
            if parser.has_section(name):
                setattr(cfg, name, dict(parser[name]))
    except ValueError as err:
        if isinstance(err, (ConfigError, BasisError)):
            raise
        raise ConfigError(str(err)) from None
    if cfg.test not in MOMENT_KINDS or cfg.test == "or_gof":
        raise ConfigError(f"unknown test {cfg.test!r}")
    if cfg.instruments not in ("auto", "cubic", "explicit"):
        raise ConfigError(f"unknown instrument mode {cfg.instruments!r}")
    if cfg.missing not in ("error", "drop_row"):
        raise ConfigError(f"unknown missing-value policy {cfg.missing!r}")
    cfg.text_hash = hashlib.sha256(_canonical(parser).encode()).hexdigest()
    return cfg


def load_config(path) -> AnalysisConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- data ------------------------------------------------------------------------

@dataclass
class LoadResult:
    dataset: Dataset
    dropped: int


def load_csv(path, config: AnalysisConfig) -> LoadResult:
    """Read the role columns of a UTF-8 CSV file into a ``Dataset``.

    Data rows are numbered from 1 (the header is not counted) in error
    messages.  Missing cells either raise or drop the row, per
    ``config.missing``.  With a time column the rows are sorted by it.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file") from None
        wanted = config.role_columns
        if config.time and config.time not in wanted:
            wanted = wanted + [config.time]
        missing_cols = [c for c in wanted if c not in header]
        if missing_cols:
            raise DataError(f"missing column(s): {', '.join(missing_cols)}")
        index = [header.index(c) for c in wanted]
        rows, dropped = [], 0
        for rownum, record in enumerate(reader, start=1):
            if not record:
                continue
            values, skip = [], False
            for col, j in zip(wanted, index):
                cell = record[j].strip() if j < len(record) else ""
                if cell.lower() in MISSING_TOKENS:
                    if config.missing == "drop_row":
                        skip = True
                        break
                    raise DataError(f"missing value at row {rownum}, column {col!r}")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"cannot parse {cell!r} at row {rownum}, column {col!r}") from None
            if skip:
                dropped += 1
                continue
            rows.append(values)
    if not rows:
        raise DataError("no data rows after dropping missing values")
    arr = np.array(rows, dtype=float)
    col = {name: arr[:, i] for i, name in enumerate(wanted)}
    c_names = list(config.error_free)
    if config.time and config.time not in c_names:
        c_names.append(config.time)
    c = np.column_stack([col[n] for n in c_names]) if c_names else np.zeros((len(rows), 0))
    x = np.column_stack([col[n] for n in config.error_prone]) if config.error_prone else \
        np.zeros((len(rows), 0))
    dataset = Dataset(col[config.outcome], col[config.exposure], c, x,
                      exposure_kind=config.exposure_kind, c_names=tuple(c_names),
                      x_names=tuple(config.error_prone))
    if config.time:
        # serial-correlation corrections assume rows in time order
        dataset = dataset.take(np.argsort(col[config.time], kind="stable"))
    return LoadResult(dataset, dropped)


def write_csv(path, dataset: Dataset) -> None:
    """Write a dataset with ``repr`` floats so that reading it back is exact."""
    names = ["y", "a"] + list(dataset.c_names) + list(dataset.x_names)
    cols = [dataset.y, dataset.a] + [dataset.c[:, j] for j in range(dataset.c.shape[1])] + \
        [dataset.x[:, j] for j in range(dataset.x.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])


# -- building moment systems from a config ----------------------------------------

def _default_column(config: AnalysisConfig, dataset: Dataset) -> str:
    if config.time:
        return config.time
    if not dataset.c_names:
        raise ConfigError("at least one error-free covariate is required")
    return dataset.c_names[0]


def _bases(config: AnalysisConfig, dataset: Dataset) -> dict:
    col = _default_column(config, dataset)
    default = [BasisSpec.polynomial(col, 1)]
    specs = {
        "exposure": config.bases.get("exposure", default),
        "interaction": config.bases.get("interaction", [BasisSpec.constant()]),
        "outcome": config.bases.get("outcome", default),
    }
    return specs


def _time_powers(t: np.ndarray, count: int) -> np.ndarray:
    scale = np.max(np.abs(t))
    u = t / (scale if scale > 0 else 1.0)
    return np.column_stack([u**p for p in range(count)])


def build_analysis_system(config: AnalysisConfig, dataset: Dataset, kind: str | None = None
                          ) -> MomentSystem:
    """Moment system for ``config.test`` (or ``kind``) on ``dataset``."""
    kind = kind or config.test
    specs = _bases(config, dataset)
    b1 = evaluate_bases(specs["exposure"], dataset)
    b2 = evaluate_bases(specs["interaction"], dataset)
    by = evaluate_bases(specs["outcome"], dataset)
    n, n_x = dataset.n, dataset.x.shape[1]
    kw = {"kind": kind, "interaction_basis": b2, "n_x": n_x, "outcome_link": config.outcome_link}
    if kind in _ALPHA1_KINDS:
        kw["exposure_basis"] = b1
    if kind in _GAMMA_KINDS:
        kw["outcome_basis"] = by
    if config.instruments == "cubic":
        if kind not in ("rps", "ror", "dr") or dataset.c.shape[1] != 1:
            raise ConfigError("cubic instruments need a continuous test and one error-free column")
        table = build_system(kind, dataset)
        kw.update({name: getattr(table, name) for name in ("ell", "m", "k")
                   if getattr(table, name) is not None})
    elif config.instruments == "explicit":
        for name in ("ell", "m", "k"):
            if name in config.instrument_specs:
                kw[name] = evaluate_bases(config.instrument_specs[name], dataset)
    else:
        t = dataset.column(_default_column(config, dataset))
        p2 = b2.n_columns * n_x
        lead = _time_powers(t, p2 + 1)
        if kind in ("rps", "rps_binary", "rps_count"):
            zeros_l = np.zeros((n, b1.n_columns))
            zeros_m = np.zeros((n, lead.shape[1]))
            kw["ell"] = np.concatenate([lead, zeros_l], axis=1)
            kw["m"] = np.concatenate([zeros_m, b1.values], axis=1)
        elif kind in ("ror", "ror_count"):
            kw["k"] = lead
        else:
            kw["k"] = lead
            kw["m"] = b1.values
            kw["ell"] = np.zeros_like(b1.values)
    system = MomentSystem(**kw)
    system.check(dataset)
    return system


def _extend(specs, dataset, count):
    for spec in reversed(specs):
        if spec.kind in ("polynomial", "fourier"):
            return extension_basis(spec, dataset, count).values
    raise ConfigError("goodness-of-fit augmentation needs a polynomial or Fourier basis")


def goodness_of_fit(config: AnalysisConfig, dataset: Dataset, kind: str) -> list[dict]:
    """Overidentification tests of the exposure and outcome models used by ``kind``.

    The exposure check uses ``l = 0`` and ``m`` equal to the gradient of
    ``g_{A,1}`` augmented by the next basis functions of its family; the
    outcome check multiplies the outcome residual by its own basis augmented
    the same way.  Two functions are added unless more are needed for
    overidentification.
    """
    specs = _bases(config, dataset)
    b1 = evaluate_bases(specs["exposure"], dataset).values
    b2 = evaluate_bases(specs["interaction"], dataset).values
    by = evaluate_bases(specs["outcome"], dataset).values
    n_x = dataset.x.shape[1]
    results = []
    scheme = config.weighting
    if kind in _ALPHA1_KINDS:
        p2 = b2.shape[1] * n_x
        ext = _extend(specs["exposure"], dataset, max(2, p2 + 1))
        m = np.concatenate([b1, ext], axis=1)
        exp_kind = {"binary": "rps_binary", "count": "rps_count"}.get(dataset.exposure_kind, "rps")
        system = MomentSystem(exp_kind, exposure_basis=b1, interaction_basis=b2, m=m, n_x=n_x)
        fit = gmm_minimize(system, dataset, scheme)
        results.append({"model": "exposure", "j_stat": fit.j_stat, "df": fit.df,
                        "p_value": fit.p_value})
    if kind in _GAMMA_KINDS:
        ext = _extend(specs["outcome"], dataset, 2)
        system = MomentSystem("or_gof", k=np.concatenate([by, ext], axis=1), outcome_basis=by,
                              outcome_link=config.outcome_link, n_x=n_x)
        fit = gmm_minimize(system, dataset, scheme)
        results.append({"model": "outcome", "j_stat": fit.j_stat, "df": fit.df,
                        "p_value": fit.p_value})
    return results


# -- commands --------------------------------------------------------------------

def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _config_hash(config: AnalysisConfig, extra: str = "") -> str:
    return hashlib.sha256((config.text_hash + extra).encode()).hexdigest()[:16]


def _clean(value):
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _json_report(payload: dict) -> str:
    """JSON with ``generated_at`` last, on a line of its own."""
    body = dict(payload)
    body["generated_at"] = _timestamp()
    return json.dumps(_clean(body), indent=2) + "\n"


def run_test(config: AnalysisConfig, dataset: Dataset) -> dict:
    """Run the configured test (after the fit checks, when enabled)."""
    warnings_out: list[str] = []
    gof = []
    if config.gof:
        gof = goodness_of_fit(config, dataset, config.test)
        for entry in gof:
            if entry["p_value"] < config.gof_level:
                warnings_out.append(
                    f"{entry['model']} model fit rejected (p = {entry['p_value']:.4g}); "
                    "a rejection of the null may reflect misspecification")
    system = build_analysis_system(config, dataset)
    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        fit = gmm_minimize(system, dataset, config.weighting)
    warnings_out += [w for w in fit.warnings]
    warnings_out += [str(w.message) for w in caught if str(w.message) not in warnings_out]
    return {
        "test": config.test, "j_stat": fit.j_stat, "df": fit.df, "p_value": fit.p_value,
        "weighting": fit.scheme, "reject": bool(fit.p_value < config.alpha_level),
        "alpha_level": config.alpha_level,
        "theta": dict(zip(fit.param_labels, fit.theta.tolist())),
        "converged": fit.converged, "n_iterations": fit.n_iterations,
        "jacobian_rank": fit.jacobian_rank, "n": fit.n, "gof": gof,
        "warnings": warnings_out,
    }


def run_estimate(config: AnalysisConfig, dataset: Dataset) -> dict:
    system = build_analysis_system(config, dataset)
    grid = None
    if "psi_grid" in config.estimate:
        grid = [float(v) for v in _list(config.estimate["psi_grid"])]
    est = estimate_effect(system, dataset, config.weighting, psi_grid=grid)
    z = 1.959963984540054
    return {
        "test": config.test, "psi_hat": est.psi_hat, "std_err": est.std_err,
        "ci95": [est.psi_hat - z * est.std_err, est.psi_hat + z * est.std_err],
        "j_stat": est.fit.j_stat, "df": est.fit.df, "p_value": est.fit.p_value,
        "weighting": est.fit.scheme,
        "theta": dict(zip(est.fit.param_labels, est.fit.theta.tolist())),
        "warnings": list(est.fit.warnings),
    }


def _sim_config(section: dict, seed: int) -> tuple[SimConfig, dict]:
    try:
        base = SimConfig(
            n=int(section.get("n", 2000)), n_reps=int(section.get("n_reps", 1000)),
            seed=seed, tests=tuple(_list(section.get("tests")) or ALL_TESTS),
            psi0=float(section.get("psi0", 0.0)),
            alpha_level=float(section.get("alpha_level", 0.05)),
            weighting=section.get("weighting", "iterated"),
            exposure_sd=float(section.get("exposure_sd", 2.0)))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    grid = {
        "taus": [float(v) for v in _list(section.get("taus"))] or [1.0],
        "regimes": _list(section.get("regimes")) or ["both_correct"],
    }
    bad = set(grid["regimes"]) - set(REGIMES)
    if bad:
        raise ConfigError(f"unknown regimes {sorted(bad)}")
    return base, grid


def run_simulate(config: AnalysisConfig, seed: int, threads: int = 1, n_reps: int | None = None):
    base, grid = _sim_config(config.simulate, seed)
    if n_reps:
        base = replace(base, n_reps=n_reps)
    return run_grid(base, taus=grid["taus"], regimes=grid["regimes"], threads=threads)


def run_power(config: AnalysisConfig, seed: int, threads: int = 1, n_reps: int | None = None):
    section = dict(config.power)
    section.setdefault("tests", "rps")
    base, grid = _sim_config(section, seed)
    if n_reps:
        base = replace(base, n_reps=n_reps)
    psis = [float(v) for v in _list(section.get("psi_grid"))] or [0.0, 0.02, 0.04, 0.06, 0.08]
    return run_grid(base, taus=grid["taus"], regimes=grid["regimes"], psis=psis, threads=threads)


def _write_sim(report, out_dir: Path, stem: str, config_hash: str) -> list[Path]:
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(f"# generated {_timestamp()} config {config_hash}\n" + report.to_csv(),
                        encoding="utf-8")
    payload = json.loads(report.to_json())
    payload["config_hash"] = config_hash
    json_path.write_text(_json_report(payload), encoding="utf-8")
    return [csv_path, json_path]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_data in (("test", True), ("estimate", True), ("simulate", False),
                             ("power", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI configuration file")
        if needs_data:
            p.add_argument("--data", required=True, help="input CSV file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--strict", action="store_true", help="exit 2 when warnings are raised")
        p.add_argument("--out-dir", default=".", help="directory for reports")
        if not needs_data:
            p.add_argument("--reps", type=int, default=None, help="override n_reps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    try:
        config = load_config(args.config)
        seed = config.seed if args.seed is None else args.seed
        out_dir.mkdir(parents=True, exist_ok=True)
        config_hash = _config_hash(config, f"seed={seed}")
        warns: list[str] = []
        if args.command in ("test", "estimate"):
            loaded = load_csv(args.data, config)
            data_hash = hashlib.sha256(Path(args.data).read_bytes()).hexdigest()[:16]
            runner = run_test if args.command == "test" else run_estimate
            report = runner(config, loaded.dataset)
            report["rows_dropped"] = loaded.dropped
            report["config_hash"] = config_hash
            report["data_hash"] = data_hash
            warns = report["warnings"]
            text = _json_report(report)
            (out_dir / f"{args.command}_report.json").write_text(text, encoding="utf-8")
            sys.stdout.write(text)
        else:
            runner = run_simulate if args.command == "simulate" else run_power
            report = runner(config, seed, args.threads, args.reps)
            paths = _write_sim(report, out_dir, args.command, config_hash)
            sys.stdout.write(report.to_csv())
            for path in paths:
                sys.stderr.write(f"wrote {path}\n")
    except Exception as err:  # surfaced as a machine-readable error record
        code = error_code(err)
        if code == "internal_error":
            raise
        sys.stderr.write(json.dumps({"error": code, "message": str(err)}) + "\n")
        return 1
    return 2 if (args.strict and warns) else 0


if __name__ == "__main__":
    sys.exit(main())
