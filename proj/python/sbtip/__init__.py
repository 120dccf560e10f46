"""Schrodinger bridges on grids, semi-discrete transport and tipping
indicators, backed by the native sbtip library."""

import configparser
import tempfile

from ._sbtip import (
    Config,
    Error,
    ParseError,
    ValidationError,
    __version__,
    derive_seed,
    detect_tipping,
    fit_heights,
    indicator_from_costs,
    morris_lecar_cycle,
    morris_lecar_equilibria,
    preset_names,
    preset_text,
    run_experiment,
    schema,
    synthetic_cohort,
)
from ._sbtip import solve_bridge_ipf as _solve_bridge_ipf

__all__ = [
    "Config",
    "Error",
    "ParseError",
    "ValidationError",
    "__version__",
    "configure",
    "derive_seed",
    "detect_tipping",
    "fit_heights",
    "indicator_from_costs",
    "morris_lecar_cycle",
    "morris_lecar_equilibria",
    "preset_names",
    "preset_text",
    "run_experiment",
    "schema",
    "solve_bridge_ipf",
    "synthetic_cohort",
]


def configure(base="brownian_bridge", overrides=None, base_dir="."):
    """Config from a preset name or Config, with {"section.key": value}
    overrides applied before validation."""
    cfg = Config.from_preset(base) if isinstance(base, str) else base
    if not overrides:
        return cfg
    ini = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    ini.optionxform = str
    ini.read_string(cfg.to_ini())
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if not name:
            raise ValueError(f"override key '{key}' must look like section.key")
        if not ini.has_section(section):
            ini.add_section(section)
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        ini.set(section, name, str(value))
    lines = []
    for section in ini.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in ini.items(section))
    return Config.from_string("\n".join(lines) + "\n", base_dir)


def solve_bridge_ipf(config, child=0, out_dir=None):
    """IPF bridge of one child. Output files go to out_dir, or to a
    temporary directory that is removed afterwards."""
    if out_dir is not None:
        return _solve_bridge_ipf(config, child, str(out_dir))
    with tempfile.TemporaryDirectory(prefix="sbtip_") as tmp:
        return _solve_bridge_ipf(config, child, tmp)
