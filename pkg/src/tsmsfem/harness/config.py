"""Experiment configuration: an INI file with one section per concern.

Every key is declared in ``SCHEMA`` with a type and a default; unknown
sections or keys are errors.  Numeric values may be arithmetic expressions
over ``pi`` (``-2*pi``, ``1/8``, ``(10*pi)**0.25``).  Lists are comma
separated.
"""
from __future__ import annotations

import ast
import configparser
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("simulate", "converge-space", "converge-time", "converge-samples", "basis", "pod-bench",
         "localization")
POTENTIALS = ("zero", "harmonic", "sine_series", "step", "checkerboard", "multiscale_cos")

REQUIRED = object()


class ConfigError(ValueError):
    pass


_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg, ast.UAdd: operator.pos}


def _eval_node(node):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_eval_node(node.operand))
    raise ValueError("unsupported expression")


def parse_number(text: str) -> float:
    """Evaluate a numeric literal or an arithmetic expression over ``pi``."""
    try:
        val = float(_eval_node(ast.parse(text.strip(), mode="eval")))
    except (SyntaxError, ValueError, TypeError, ZeroDivisionError, OverflowError) as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc
    if not math.isfinite(val):
        raise ConfigError(f"non-finite number {text!r}")
    return val


def _to_int(text: str) -> int:
    val = parse_number(text)
    if val != int(val):
        raise ConfigError(f"expected an integer, got {text!r}")
    return int(val)


def _list(conv):
    def parse(text: str):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        if not items:
            raise ConfigError("empty list")
        return tuple(conv(t) for t in items)
    return parse


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


FLOAT, INT, STR, BOOL = parse_number, _to_int, str.strip, _bool
FLOATS, INTS = _list(parse_number), _list(_to_int)

SCHEMA = {
    "experiment": {"kind": (STR, REQUIRED), "workers": (INT, 1), "seed": (INT, 0), "chunk": (INT, 64)},
    "domain": {"dim": (INT, 1), "lower": (FLOATS, REQUIRED), "upper": (FLOATS, REQUIRED),
               "cells": (INTS, REQUIRED), "ratio": (INT, 1)},
    "physics": {"eps": (FLOAT, REQUIRED), "lam": (FLOAT, 0.0), "T": (FLOAT, 1.0), "dt": (FLOAT, REQUIRED),
                "initial": (STR, "gaussian"), "initial_width": (FLOAT, 20.0),
                "initial_amplitude": (FLOAT, (10 * math.pi) ** 0.25), "initial_center": (FLOATS, None)},
    "scheme": {"scheme": (STR, "SI"), "space": (STR, "fem"), "nonlinear": (STR, "coarse"),
               "initial_transfer": (STR, "nodal"), "cadence": (FLOAT, 0.0)},
    "potential": {"kind": (STR, "zero"), "coefficient": (FLOAT, 0.5), "add_harmonic": (FLOAT, 0.0),
                  "sigma": (FLOAT, 1.0), "beta": (FLOAT, 0.0), "m": (INT, 5), "mean": (FLOAT, 0.0),
                  "levels": (FLOATS, None), "breakpoints": (FLOATS, None), "side": (STR, "left"),
                  "eps1": (FLOAT, 1 / 8), "eps2": (FLOAT, 1 / 6), "oscillation": (FLOAT, None),
                  "xi": (FLOATS, None)},
    "reference": {"cells": (INTS, None), "dt": (FLOAT, None), "scheme": (STR, None)},
    "convergence": {"cells": (INTS, None), "coarse_cells": (INTS, None), "dts": (FLOATS, None)},
    "sampling": {"method": (STR, "both"), "N": (INT, 1024), "sizes": (INTS, None), "shifts": (INT, 4),
                 "seed": (INT, 7), "mc_seed": (INT, 2024), "korobov": (INT, 1571), "vector_file": (STR, None),
                 "reference_N": (INT, 8192), "reference_seed": (INT, 12345)},
    "pod": {"Q": (INT, 200), "m_p": (INT, 3), "online": (INT, 800), "timing_samples": (INT, 8),
            "lattice_seed": (INT, 3)},
    "localization": {"lams": (FLOATS, None), "dt_linear": (FLOAT, None), "window_start": (FLOAT, 10.0)},
    "basis": {"node": (INT, None), "ell_max": (INT, 6), "include_potential": (BOOL, True)},
    "output": {"format": (STR, "both")},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, typed configuration values by section."""

    values: dict = field(repr=False)
    source: str = ""

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def n_steps(self, dt: float | None = None, T: float | None = None) -> int:
        dt = self.get("physics", "dt") if dt is None else dt
        T = self.get("physics", "T") if T is None else T
        return int(round(T / dt))

    def echo(self) -> dict:
        """JSON-friendly copy of every value (lists become lists)."""
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}


def _apply(raw: dict, section: str, key: str, text: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    raw.setdefault(section, {})[key] = text


def parse_override(text: str):
    """``section.key=value`` -> ``(section, key, value)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override key {lhs!r} must be section.key")
    section, key = lhs.strip().split(".", 1)
    return section.strip(), key.strip(), value.strip()


def load_config(path=None, text: str | None = None, overrides=()) -> ExperimentConfig:
    """Read, override and validate.  Raises :class:`ConfigError` on any problem."""
    if text is None:
        if path is None:
            raise ConfigError("no configuration given")
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    raw: dict = {}
    for section in cp.sections():
        for key, val in cp.items(section):
            _apply(raw, section, key, val)
    for item in overrides:
        section, key, val = item if isinstance(item, tuple) else parse_override(item)
        _apply(raw, section, key, val)
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key in raw.get(section, {}):
                try:
                    values[section][key] = conv(raw[section][key])
                except ConfigError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{section}]")
            else:
                values[section][key] = default
    cfg = ExperimentConfig(values, text)
    validate(cfg)
    return cfg


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    """Range and consistency checks; nothing is computed before this passes."""
    ex, dom, ph, sc = cfg["experiment"], cfg["domain"], cfg["physics"], cfg["scheme"]
    pot, samp = cfg["potential"], cfg["sampling"]
    _check(ex["kind"] in KINDS, f"experiment kind must be one of {KINDS}, got {ex['kind']!r}")
    _check(ex["workers"] >= 1, "workers must be >= 1")
    _check(ex["chunk"] >= 1, "chunk must be >= 1")
    d = dom["dim"]
    _check(d in (1, 2), f"dim must be 1 or 2, got {d}")
    for key in ("lower", "upper", "cells"):
        _check(len(dom[key]) in (1, d), f"[domain] {key} needs 1 or {d} entries")
    lo = dom["lower"] * d if len(dom["lower"]) == 1 else dom["lower"]
    hi = dom["upper"] * d if len(dom["upper"]) == 1 else dom["upper"]
    _check(all(a < b for a, b in zip(lo, hi)), "[domain] lower must be below upper")
    cells = dom["cells"] * d if len(dom["cells"]) == 1 else dom["cells"]
    _check(all(c >= 2 for c in cells), "[domain] cells must be >= 2")
    _check(dom["ratio"] >= 1, "[domain] ratio must be >= 1")
    _check(all(c % dom["ratio"] == 0 for c in cells), "[domain] cells must be divisible by ratio")
    dom["lower"], dom["upper"], dom["cells"] = tuple(lo), tuple(hi), tuple(cells)

    _check(ph["eps"] > 0, "eps must be positive")
    _check(ph["lam"] >= 0, "lam must be nonnegative")
    _check(ph["T"] > 0 and ph["dt"] > 0, "T and dt must be positive")
    n = ph["T"] / ph["dt"]
    _check(abs(n - round(n)) <= 1e-9 * n, f"T = {ph['T']} is not a whole number of steps of {ph['dt']}")
    _check(ph["initial"] in ("gaussian", "constant"), f"unknown initial state {ph['initial']!r}")
    _check(ph["initial_width"] > 0, "initial_width must be positive")
    if ph["initial_center"] is not None:
        _check(len(ph["initial_center"]) == d, f"initial_center needs {d} entries")

    _check(sc["scheme"] in ("SI", "SII"), f"scheme must be SI or SII, got {sc['scheme']!r}")
    _check(sc["space"] in ("fem", "msfem"), f"space must be fem or msfem, got {sc['space']!r}")
    _check(sc["nonlinear"] in ("coarse", "reconstruct"), f"unknown nonlinear mode {sc['nonlinear']!r}")
    _check(sc["initial_transfer"] in ("nodal", "l2"), f"unknown initial transfer {sc['initial_transfer']!r}")
    _check(sc["cadence"] >= 0, "cadence must be nonnegative")
    if sc["space"] == "msfem" and ex["kind"] not in ("converge-space",):
        _check(dom["ratio"] >= 1, "msfem needs a coarsening ratio")

    _check(pot["kind"] in POTENTIALS, f"potential kind must be one of {POTENTIALS}, got {pot['kind']!r}")
    if pot["kind"] == "step":
        _check(pot["levels"] is not None and pot["breakpoints"] is not None, "step potential needs levels and breakpoints")
        _check(len(pot["levels"]) == len(pot["breakpoints"]) + 1, "step potential needs one more level than breakpoints")
        _check(d == 1, "step potential is one-dimensional")
    if pot["kind"] in ("checkerboard", "multiscale_cos"):
        _check(d == 2, f"{pot['kind']} potential is two-dimensional")
    if pot["kind"] == "multiscale_cos":
        _check(pot["oscillation"] is not None and pot["oscillation"] > 0, "multiscale_cos needs oscillation > 0")
    _check(pot["side"] in ("left", "right"), "side must be left or right")
    _check(pot["m"] >= 0, "m must be nonnegative")
    if pot["xi"] is not None:
        _check(pot["kind"] == "sine_series" and len(pot["xi"]) == pot["m"], "xi needs a sine_series potential with m entries")

    _check(samp["method"] in ("qmc", "mc", "both"), f"sampling method must be qmc, mc or both, got {samp['method']!r}")
    _check(samp["N"] >= 2 and samp["reference_N"] >= 2, "sample counts must be >= 2")
    _check(samp["shifts"] >= 1, "shifts must be >= 1")
    if samp["sizes"] is not None:
        _check(all(samp["N"] % s == 0 for s in samp["sizes"]), "every sample size must divide N")

    kind = ex["kind"]
    conv, ref = cfg["convergence"], cfg["reference"]
    if kind == "converge-space":
        if sc["space"] == "fem":
            _check(conv["cells"] is not None and len(conv["cells"]) >= 3, "converge-space needs >= 3 ladder cells")
            ref_cells = ref["cells"][0] if ref["cells"] else 4 * max(conv["cells"])
            _check(all(ref_cells % c == 0 and ref_cells > c for c in conv["cells"]),
                   "reference cells must be a strict multiple of every ladder level")
        else:
            _check(conv["coarse_cells"] is not None and len(conv["coarse_cells"]) >= 3,
                   "msfem converge-space needs >= 3 coarse_cells")
            _check(all(cells[0] % c == 0 and c < cells[0] for c in conv["coarse_cells"]),
                   "coarse_cells must divide the fine cells")
    if kind == "converge-time":
        _check(conv["dts"] is not None and len(conv["dts"]) >= 3, "converge-time needs >= 3 dts")
        rdt = ref["dt"] if ref["dt"] is not None else 1e-4
        _check(all(rdt < t for t in conv["dts"]), "reference dt must be smaller than every ladder step")
        for t in conv["dts"] + (rdt,):
            k = ph["T"] / t
            _check(abs(k - round(k)) <= 1e-9 * k, f"T is not a whole number of steps of {t}")
    if kind in ("converge-samples", "pod-bench", "localization"):
        _check(pot["kind"] == "sine_series" and pot["m"] >= 1, f"{kind} needs a random sine_series potential")
        _check(sc["space"] == "msfem", f"{kind} runs in the msfem space")
        _check(sc["nonlinear"] == "coarse", f"{kind} advances samples in lock step and needs nonlinear = coarse")
    if kind == "converge-samples":
        _check(samp["sizes"] is not None and len(samp["sizes"]) >= 3, "converge-samples needs >= 3 sizes")
        _check(samp["reference_N"] > samp["N"], "reference_N must exceed N")
    if kind == "pod-bench":
        pd = cfg["pod"]
        _check(pd["Q"] >= pd["m_p"] + 1, "pod needs Q >= m_p + 1")
        _check(pd["m_p"] >= 0 and pd["online"] >= 1 and pd["timing_samples"] >= 1, "pod counts out of range")
    if kind == "localization":
        loc = cfg["localization"]
        if loc["lams"] is not None:
            _check(all(v >= 0 for v in loc["lams"]), "lams must be nonnegative")
        if loc["dt_linear"] is not None:
            k = ph["T"] / loc["dt_linear"]
            _check(abs(k - round(k)) <= 1e-9 * k, "T is not a whole number of dt_linear steps")
        _check(sc["cadence"] > 0, "localization needs an observation cadence")
    if cfg["output"]["format"] not in ("csv", "json", "both"):
        raise ConfigError("output format must be csv, json or both")
