"""INI run configuration with documented defaults and strict key checking.

Sections and keys (defaults in brackets):

[toy]   n_train [40], n_test [40], M [50], noise_sigma [0.01], seed [0],
        peak_centers [0.3, 0.7], center_shift [0.05], amplitude_slope [0.2],
        peak_width [0.08]
[data]  dir [.], mode [regression], preprocess [none | snv]
[fit]   method [ws-gplvm | ws-gplvm-ind | cls | cls-gp | pls], seed [0],
        restarts [5], latent_dim [2], n_latent_inducing [4],
        n_location_inducing [16], stage1_steps [500],
        stage1_learning_rate [0.05], anneal_steps [20],
        quasi_newton_steps_per_anneal [2], stage3_tol [1e-7],
        stage3_max_iter [2000], sigma2_init [1.0], sigma_f2_range [0.5, 1.0],
        beta_range [0.5, 5.5], gamma_init [auto], skip_stage1 [auto],
        freeze_latents_stage1 [false], prior_alpha [ones], jitter [1e-6],
        pls_folds [10], pls_kmax [10]
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

METHODS = ("ws-gplvm", "ws-gplvm-ind", "cls", "cls-gp", "pls")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto(parse):
    def inner(text):
        return None if text.strip().lower() in ("auto", "none", "") else parse(text)

    return inner


def _choice(*options):
    def inner(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t

    return inner


# section -> key -> (parser, default)
SCHEMA = {
    "toy": {
        "n_train": (int, 40),
        "n_test": (int, 40),
        "M": (int, 50),
        "noise_sigma": (float, 0.01),
        "seed": (int, 0),
        "peak_centers": (_floats, (0.3, 0.7)),
        "center_shift": (float, 0.05),
        "amplitude_slope": (float, 0.2),
        "peak_width": (float, 0.08),
    },
    "data": {
        "dir": (str, "."),
        "mode": (_choice("regression", "classification"), "regression"),
        "preprocess": (_choice("none", "snv"), "none"),
    },
    "fit": {
        "method": (_choice(*METHODS), "ws-gplvm"),
        "seed": (int, 0),
        "restarts": (int, 5),
        "latent_dim": (int, 2),
        "n_latent_inducing": (int, 4),
        "n_location_inducing": (int, 16),
        "stage1_steps": (int, 500),
        "stage1_learning_rate": (float, 0.05),
        "anneal_steps": (int, 20),
        "quasi_newton_steps_per_anneal": (int, 2),
        "stage3_tol": (float, 1e-7),
        "stage3_max_iter": (int, 2000),
        "sigma2_init": (float, 1.0),
        "sigma_f2_range": (_floats, (0.5, 1.0)),
        "beta_range": (_floats, (0.5, 5.5)),
        "gamma_init": (_auto(float), None),
        "skip_stage1": (_auto(_bool), None),
        "freeze_latents_stage1": (_bool, False),
        "prior_alpha": (_auto(_floats), None),
        "jitter": (float, 1e-6),
        "pls_folds": (int, 10),
        "pls_kmax": (int, 10),
    },
}

# keys whose values must be counts of at least this size
MINIMUMS = {
    ("toy", "n_train"): 0,
    ("toy", "n_test"): 0,
    ("toy", "M"): 1,
    ("fit", "restarts"): 1,
    ("fit", "latent_dim"): 1,
    ("fit", "n_latent_inducing"): 1,
    ("fit", "n_location_inducing"): 1,
    ("fit", "stage1_steps"): 0,
    ("fit", "anneal_steps"): 1,
    ("fit", "quasi_newton_steps_per_anneal"): 0,
    ("fit", "stage3_max_iter"): 0,
    ("fit", "pls_folds"): 2,
    ("fit", "pls_kmax"): 1,
}
POSITIVE = {
    ("toy", "peak_width"),
    ("fit", "stage1_learning_rate"),
    ("fit", "stage3_tol"),
    ("fit", "sigma2_init"),
    ("fit", "gamma_init"),
}
NON_NEGATIVE = {("toy", "noise_sigma"), ("fit", "jitter")}


@dataclass
class RunConfig:
    toy: dict
    data: dict
    fit: dict
    source: str = ""

    def to_ini(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            values = getattr(self, section)
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_format(values[key])}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _validate(section, key, value):
    if value is None:
        return
    if (section, key) in MINIMUMS and value < MINIMUMS[(section, key)]:
        raise ConfigError(f"[{section}] {key} must be at least {MINIMUMS[(section, key)]}, got {value}")
    if (section, key) in POSITIVE and not value > 0:
        raise ConfigError(f"[{section}] {key} must be positive, got {value}")
    if (section, key) in NON_NEGATIVE and not value >= 0:
        raise ConfigError(f"[{section}] {key} must be non-negative, got {value}")
    if key in ("sigma_f2_range", "beta_range"):
        if len(value) != 2 or not 0 < value[0] <= value[1]:
            raise ConfigError(f"[{section}] {key} must be two ordered positive numbers")
    if key == "prior_alpha" and any(v <= 0 for v in value):
        raise ConfigError(f"[{section}] {key} entries must be positive")


def load_config(path=None, text=None) -> RunConfig:
    """Parse a config file (or string), apply defaults and validate.

    Unknown sections and keys raise :class:`ConfigError` naming them.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M)
    source = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        source = str(p)
    try:
        parser.read_string(text or "")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    resolved = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in [{section}]")
    for section, keys in SCHEMA.items():
        values = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    value = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            else:
                value = default
            _validate(section, key, value)
            values[key] = value
        resolved[section] = values
    return RunConfig(resolved["toy"], resolved["data"], resolved["fit"], source)


def override_seed(cfg: RunConfig, seed: int) -> None:
    cfg.toy["seed"] = int(seed)
    cfg.fit["seed"] = int(seed)


def dataclass_kwargs(cls, values: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}
