"""INI-style config files: ``[train]``, ``[hyper]`` and ``[spec]`` sections of ``key = value``."""
import configparser
from dataclasses import fields, replace

from .model import HyperParams, PARAM_NAMES
from .task import TaskSpec
from .training import TrainConfig

TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "hyper")
HYPER_KEYS = ("d", "h", "norm_variant")
SPEC_KEYS = ("L", "k", "p")


def _parse(key, raw, template):
    raw = raw.strip()
    if key == "mask":
        names = [s.strip() for s in raw.replace(" ", ",").split(",") if s.strip()]
        if names == ["all"]:
            names = list(PARAM_NAMES)
        return frozenset(names)
    if key == "betas":
        return tuple(float(s) for s in raw.replace(",", " ").split())
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def _format(value):
    if isinstance(value, frozenset):
        return ",".join(sorted(value, key=PARAM_NAMES.index))
    if isinstance(value, tuple):
        return " ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(config, overrides):
    """Return ``config`` with flat ``{key: raw_string_or_value}`` overrides applied."""
    spec_kw, hyper_kw, train_kw = {}, {}, {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in SPEC_KEYS:
            tmpl, bucket = getattr(config.hyper.spec, key), spec_kw
        elif key in HYPER_KEYS:
            tmpl, bucket = getattr(config.hyper, key), hyper_kw
        elif key in TRAIN_KEYS:
            tmpl, bucket = getattr(config, key), train_kw
        else:
            raise KeyError(f"unknown config key {key!r}")
        bucket[key] = _parse(key, value, tmpl) if isinstance(value, str) else value
    spec = replace(config.hyper.spec, **spec_kw)
    hyper = replace(config.hyper, spec=spec, **hyper_kw)
    return replace(config, hyper=hyper, **train_kw)


def load_config(path, base=None):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    with open(path) as fh:
        cp.read_file(fh)
    flat = {}
    allowed = {"train": TRAIN_KEYS, "hyper": HYPER_KEYS, "spec": SPEC_KEYS}
    for section in cp.sections():
        if section not in allowed:
            raise KeyError(f"unknown config section [{section}]")
        for key, value in cp.items(section):
            if key not in allowed[section]:
                raise KeyError(f"unknown key {key!r} in [{section}]")
            flat[key] = value
    return apply_overrides(base or TrainConfig(), flat)


def dump_config(config):
    lines = ["[train]"]
    lines += [f"{k} = {_format(getattr(config, k))}" for k in TRAIN_KEYS]
    lines += ["", "[hyper]"]
    lines += [f"{k} = {_format(getattr(config.hyper, k))}" for k in HYPER_KEYS]
    lines += ["", "[spec]"]
    lines += [f"{k} = {_format(getattr(config.hyper.spec, k))}" for k in SPEC_KEYS]
    return "\n".join(lines) + "\n"


def write_config(config, path):
    with open(path, "w") as fh:
        fh.write(dump_config(config))


__all__ = ["TrainConfig", "HyperParams", "TaskSpec", "load_config", "dump_config",
           "write_config", "apply_overrides"]
