"""Run configuration: an INI file with strict keys, plus CLI overrides.

Every default echoes the value hard-wired elsewhere in the package (forest
sizes, trim bounds, fold count, agricultural threshold), so an empty config
reproduces the reference pipeline. Unknown sections or keys are rejected
outright rather than ignored, which turns typos into immediate errors.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import Optional

from .causal import EstimatorConfig
from .errors import SchemaError, ValidationError
from .geo import GridSpec
from .learners import BoostParams, ForestParams
from .synth import (
    ConstantTheta,
    DgpSpec,
    F_FORMS,
    G_FORMS,
    LinearTheta,
    NamedTheta,
    ThetaForm,
    _named_theta,
)


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one pipeline run; field defaults are canonical."""

    # [paths]
    parcels: str = "parcels.csv"
    env: str = "env.csv"
    outcome: str = "outcome.csv"
    output_dir: str = "out"
    dataset: str = ""  # empty -> <output_dir>/dataset.csv
    # [grid]
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 1.0
    n_cols: int = 1
    n_rows: int = 1
    # [run]
    seed: int = 0
    threads: int = 1
    folds: int = 3
    trim_lo: float = 0.2
    trim_hi: float = 0.8
    agricultural_threshold: float = 0.5
    study_years: tuple = ()  # empty -> years shared by env and outcome
    # [learners]
    n_trees: int = 200
    max_depth: int = 12
    min_leaf_size: int = 5
    max_features: Optional[int] = None  # None -> task-dependent default
    boost_rounds: int = 100
    boost_depth: int = 3
    boost_learning_rate: float = 0.1
    # [interpreter]
    interpreter_depth: int = 3
    interpreter_min_leaf: Optional[int] = None  # None -> 5% of rows
    curve_bins: int = 20
    # [simulate]
    sim_n: int = 2000
    sim_p: int = 5
    sim_theta: str = "constant:1.0"
    sim_g_form: str = "sine_quadratic"
    sim_f_form: str = "default"
    sim_noise_sd: float = 1.0
    sim_reps: int = 100

    # -- derived accessors ---------------------------------------------------

    def dataset_path(self) -> str:
        return self.dataset or os.path.join(self.output_dir, "dataset.csv")

    def output_path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def grid_spec(self) -> GridSpec:
        return GridSpec(origin_x=self.origin_x, origin_y=self.origin_y,
                        cell_size=self.cell_size, n_cols=self.n_cols,
                        n_rows=self.n_rows)

    def forest_params(self) -> ForestParams:
        return ForestParams(n_trees=self.n_trees, max_depth=self.max_depth,
                            min_leaf_size=self.min_leaf_size,
                            max_features=self.max_features)

    def boost_params(self) -> BoostParams:
        return BoostParams(n_rounds=self.boost_rounds,
                           max_depth=self.boost_depth,
                           learning_rate=self.boost_learning_rate)

    def estimator_config(self) -> EstimatorConfig:
        forest = self.forest_params()
        return EstimatorConfig(k=self.folds, trim_lo=self.trim_lo,
                               trim_hi=self.trim_hi, y_forest=forest,
                               t_forest=forest, propensity=self.boost_params())

    def dgp_spec(self) -> DgpSpec:
        return DgpSpec(n=self.sim_n, p=self.sim_p,
                       theta=parse_theta(self.sim_theta),
                       g_form=self.sim_g_form, f_form=self.sim_f_form,
                       noise_sd=self.sim_noise_sd, seed=self.seed)

    def validate(self) -> None:
        checks = (
            (self.cell_size > 0, "grid cell_size must be positive"),
            (self.n_cols >= 1 and self.n_rows >= 1,
             "grid must have at least one column and row"),
            (self.threads >= 1, "threads must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (0.0 <= self.trim_lo <= self.trim_hi <= 1.0,
             "trim bounds must satisfy 0 <= lo <= hi <= 1"),
            (0.0 <= self.agricultural_threshold <= 1.0,
             "agricultural_threshold must lie in [0, 1]"),
            (self.n_trees >= 1, "n_trees must be >= 1"),
            (self.max_depth >= 1, "max_depth must be >= 1"),
            (self.min_leaf_size >= 1, "min_leaf_size must be >= 1"),
            (self.max_features is None or self.max_features >= 1,
             "max_features must be >= 1 when set"),
            (self.boost_rounds >= 1, "boost_rounds must be >= 1"),
            (self.boost_depth >= 1, "boost_depth must be >= 1"),
            (self.boost_learning_rate > 0,
             "boost_learning_rate must be positive"),
            (self.interpreter_depth >= 0, "interpreter max_depth must be >= 0"),
            (self.interpreter_min_leaf is None or self.interpreter_min_leaf >= 1,
             "interpreter min_leaf_size must be >= 1 when set"),
            (self.curve_bins >= 1, "curve_bins must be >= 1"),
            (self.sim_n >= 2, "simulate n must be >= 2"),
            (self.sim_p >= 1, "simulate p must be >= 1"),
            (self.sim_noise_sd >= 0, "simulate noise_sd must be >= 0"),
            (self.sim_reps >= 1, "simulate reps must be >= 1"),
        )
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)
        if self.sim_g_form not in G_FORMS:
            raise ValidationError("unknown simulate g_form",
                                  g_form=self.sim_g_form,
                                  known=sorted(G_FORMS))
        if self.sim_f_form not in F_FORMS:
            raise ValidationError("unknown simulate f_form",
                                  f_form=self.sim_f_form,
                                  known=sorted(F_FORMS))
        parse_theta(self.sim_theta)


def parse_theta(text: str) -> ThetaForm:
    """Effect form from ``constant:<v>``, ``linear:<a>:<b1,...>``, ``named:<n>``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "constant" and rest:
            return ConstantTheta(float(rest))
        if kind == "linear" and rest:
            intercept_text, _, slopes_text = rest.partition(":")
            slopes = tuple(float(s) for s in slopes_text.split(",") if s.strip())
            if slopes:
                return LinearTheta(float(intercept_text), slopes)
        if kind == "named" and rest:
            _named_theta(rest)  # validate the name now, not at first draw
            return NamedTheta(rest)
    except ValueError:
        pass
    raise ValidationError(
        "theta must look like constant:<value>, linear:<intercept>:<s1,s2,...>, "
        "or named:<name>", theta=text)


def config_dict(config: RunConfig) -> dict:
    """JSON-ready resolved settings; threads are excluded because outputs
    never depend on them."""
    doc = asdict(config)
    doc.pop("threads")
    doc["study_years"] = list(config.study_years)
    doc["dataset"] = config.dataset_path()
    return doc


# (section, key) -> (RunConfig attribute, parse kind)
_SCHEMA = {
    "paths": {
        "parcels": ("parcels", "str"),
        "env": ("env", "str"),
        "outcome": ("outcome", "str"),
        "output_dir": ("output_dir", "str"),
        "dataset": ("dataset", "str"),
    },
    "grid": {
        "origin_x": ("origin_x", "float"),
        "origin_y": ("origin_y", "float"),
        "cell_size": ("cell_size", "float"),
        "n_cols": ("n_cols", "int"),
        "n_rows": ("n_rows", "int"),
    },
    "run": {
        "seed": ("seed", "int"),
        "threads": ("threads", "int"),
        "folds": ("folds", "int"),
        "trim_lo": ("trim_lo", "float"),
        "trim_hi": ("trim_hi", "float"),
        "agricultural_threshold": ("agricultural_threshold", "float"),
        "study_years": ("study_years", "year_list"),
    },
    "learners": {
        "n_trees": ("n_trees", "int"),
        "max_depth": ("max_depth", "int"),
        "min_leaf_size": ("min_leaf_size", "int"),
        "max_features": ("max_features", "optional_int"),
        "boost_rounds": ("boost_rounds", "int"),
        "boost_depth": ("boost_depth", "int"),
        "boost_learning_rate": ("boost_learning_rate", "float"),
    },
    "interpreter": {
        "max_depth": ("interpreter_depth", "int"),
        "min_leaf_size": ("interpreter_min_leaf", "optional_int"),
        "curve_bins": ("curve_bins", "int"),
    },
    "simulate": {
        "n": ("sim_n", "int"),
        "p": ("sim_p", "int"),
        "theta": ("sim_theta", "str"),
        "g_form": ("sim_g_form", "str"),
        "f_form": ("sim_f_form", "str"),
        "noise_sd": ("sim_noise_sd", "float"),
        "reps": ("sim_reps", "int"),
    },
}


def _convert(raw: str, kind: str, path, section: str, key: str):
    where = f"{path}: [{section}] {key}"
    value = raw.strip()
    try:
        if kind == "str":
            return value
        if kind == "int":
            return int(value)
        if kind == "float":
            parsed = float(value)
            if not math.isfinite(parsed):
                raise ValueError
            return parsed
        if kind == "optional_int":
            if value in ("", "none", "auto"):
                return None
            return int(value)
        if kind == "year_list":
            if not value:
                return ()
            return tuple(int(tok.strip()) for tok in value.split(","))
    except ValueError:
        raise SchemaError(f"{where}: cannot parse {raw!r} as {kind}",
                          file=str(path), section=section, key=key) from None
    raise AssertionError(f"unhandled kind {kind}")


def load_config(path) -> RunConfig:
    """Parse and validate an INI run configuration."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise SchemaError(f"{path}: {exc}", file=str(path)) from None
    if parser.defaults():
        raise SchemaError(f"{path}: [DEFAULT] section is not supported",
                          file=str(path))
    overrides = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise SchemaError(
                f"{path}: unknown section '{section}'; known sections: "
                f"{', '.join(sorted(_SCHEMA))}",
                file=str(path), section=section)
        known = _SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in known:
                raise SchemaError(
                    f"{path}: unknown key '{key}' in section '{section}'; "
                    f"known keys: {', '.join(sorted(known))}",
                    file=str(path), section=section, key=key)
            attr, kind = known[key]
            overrides[attr] = _convert(raw, kind, path, section, key)
    config = replace(RunConfig(), **overrides)
    config.validate()
    return config
