"""Run configuration: an INI-style key/value file with an explicit schema version."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """A config value is missing, malformed or out of range; ``path`` names the field."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _drops(text):
    out = []
    for item in text.replace(",", " ").split():
        frac, factor = item.split(":")
        out.append((float(frac), float(factor)))
    return tuple(out)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{repr(a)}:{repr(b)}" for a, b in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> [(key, parser, default)]; a default of ... marks a required key
_SCHEMA = {
    "network": [("layer_widths", _ints, ...), ("activation", str, "tanh"),
                ("loss", str, "squared_error"), ("bias", _bool, False), ("init_scale", float, 0.0)],
    "data": [("kind", str, ...), ("n_train", int, 200), ("n_test", int, 100), ("dims", _ints, ...),
             ("rank", int, 0), ("noise", float, 0.1), ("input_scale", float, 0.5), ("seed", int, 0),
             ("train_path", str, ""), ("test_path", str, "")],
    "optimizer": [("kind", str, "grda"), ("c", float, 0.0), ("mu", float, 0.51)],
    "schedule": [("kind", str, "constant"), ("gamma", float, ...), ("drops", _drops, ()),
                 ("epochs", int, 1), ("steps", int, 0), ("batch_size", int, 1),
                 ("sampling", str, "replacement")],
    "seeds": [("init", int, 0), ("batch", int, 0)],
    "logging": [("cadence", int, 100), ("checkpoint_every", int, 0), ("test_every", str, "epoch")],
    "verify": [("gammas", _floats, ()), ("t", float, 0.0), ("tol_abs", float, 1e-10),
               ("tol_rel", float, 1e-6), ("top", int, 10)],
}


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.  Sections map to nested dicts of typed values."""

    name: str = "run"
    sections: dict = field(default_factory=dict)

    def __getitem__(self, key):
        section, _, name = key.partition(".")
        return self.sections[section][name]

    def with_overrides(self, overrides):
        """Copy with ``{"schedule.gamma": 0.01, ...}`` style overrides applied and validated."""
        secs = {k: dict(v) for k, v in self.sections.items()}
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in secs or name not in secs[section]:
                raise ConfigError(key, "unknown field")
            secs[section][name] = value
        cfg = replace(self, sections=secs)
        validate(cfg)
        return cfg

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["meta"] = {"schema_version": str(SCHEMA_VERSION), "name": self.name}
        for section, spec in _SCHEMA.items():
            cp[section] = {k: _fmt(self.sections[section][k]) for k, _, _ in spec}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, str(exc)) from exc
    if "meta" not in cp or "schema_version" not in cp["meta"]:
        raise ConfigError("meta.schema_version", "missing")
    try:
        version = int(cp["meta"]["schema_version"])
    except ValueError:
        raise ConfigError("meta.schema_version", "not an integer") from None
    if version != SCHEMA_VERSION:
        raise ConfigError("meta.schema_version", f"unsupported version {version}")
    extra = set(cp.sections()) - set(_SCHEMA) - {"meta"}
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown section")
    sections = {}
    for section, spec in _SCHEMA.items():
        raw = cp[section] if section in cp else {}
        known = {k for k, _, _ in spec}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown field")
        values = {}
        for key, parse, default in spec:
            if key in raw and raw[key].strip() != "":
                try:
                    values[key] = parse(raw[key])
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}", str(exc)) from None
            elif default is ...:
                raise ConfigError(f"{section}.{key}", "required field missing")
            else:
                values[key] = default
        sections[section] = values
    cfg = RunConfig(cp["meta"].get("name", "run"), sections)
    validate(cfg)
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def validate(cfg):
    s = cfg.sections
    net, data, opt, sch = s["network"], s["data"], s["optimizer"], s["schedule"]
    if len(net["layer_widths"]) < 2 or min(net["layer_widths"]) < 1:
        raise ConfigError("network.layer_widths", "need >= 2 positive widths")
    if net["activation"] not in ("relu", "tanh", "identity"):
        raise ConfigError("network.activation", f"unknown activation {net['activation']!r}")
    if net["loss"] not in ("squared_error", "cross_entropy"):
        raise ConfigError("network.loss", f"unknown loss {net['loss']!r}")
    if data["kind"] not in ("rank_deficient_regression", "blobs", "csv"):
        raise ConfigError("data.kind", f"unknown dataset kind {data['kind']!r}")
    if data["kind"] == "csv" and not data["train_path"]:
        raise ConfigError("data.train_path", "required for csv data")
    if data["n_train"] < 1:
        raise ConfigError("data.n_train", "must be positive")
    if opt["kind"] not in ("sgd", "grda"):
        raise ConfigError("optimizer.kind", f"unknown optimizer {opt['kind']!r}")
    if opt["c"] < 0:
        raise ConfigError("optimizer.c", "must be nonnegative")
    if not 0 < opt["mu"] < 1:
        raise ConfigError("optimizer.mu", "must lie in (0, 1)")
    if sch["kind"] not in ("constant", "constant_and_drop", "garipov_linear"):
        raise ConfigError("schedule.kind", f"unknown schedule {sch['kind']!r}")
    if sch["gamma"] <= 0:
        raise ConfigError("schedule.gamma", "must be positive")
    if sch["epochs"] < 1 and sch["steps"] < 1:
        raise ConfigError("schedule.epochs", "need epochs >= 1 or steps >= 1")
    if sch["batch_size"] < 1:
        raise ConfigError("schedule.batch_size", "must be positive")
    if sch["sampling"] not in ("replacement", "shuffle"):
        raise ConfigError("schedule.sampling", "must be 'replacement' or 'shuffle'")
    if s["logging"]["cadence"] < 1:
        raise ConfigError("logging.cadence", "must be positive")
    if s["logging"]["test_every"] not in ("epoch", "row"):
        raise ConfigError("logging.test_every", "must be 'epoch' or 'row'")
