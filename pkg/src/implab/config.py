"""Experiment configuration files: INI sections of flat key/value pairs.

Values are typed on read: integers, 64-bit reals, booleans (``true``/``false``),
comma-separated lists of those, or plain strings.  Writing uses ``repr`` for
reals so a parse/serialize/parse cycle is the identity.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from implab.exceptions import ConfigurationError

KINDS = ("train", "imp", "barrier", "matrix", "slice", "robustness", "spectrum", "theory",
         "adaptive", "cdf", "report")


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        items = [format_value(v) for v in value]
        # a one-element list still needs a comma to read back as a list
        return ", ".join(items) + ("," if len(items) == 1 else "")
    return str(value)


def loads(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from exc
    return {s: {k: parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}


def dumps(config: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    for section, items in config.items():
        parser[section] = {k: format_value(v) for k, v in items.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load(path) -> dict:
    return loads(Path(path).read_text())


def dump(config: dict, path) -> None:
    Path(path).write_text(dumps(config))


@dataclass
class ExperimentManifest:
    kind: str
    config: dict
    inputs: dict = field(default_factory=dict)
    out_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_config(cls, config: dict, out_dir=None, seed=None) -> "ExperimentManifest":
        exp = config.get("experiment")
        if exp is None:
            raise ConfigurationError("configuration needs an [experiment] section")
        kind = exp.get("kind")
        if kind is None:
            raise ConfigurationError("[experiment] must name a kind")
        if seed is None:
            if "seed" not in exp:
                raise ConfigurationError("[experiment] seed is mandatory")
            seed = exp["seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ConfigurationError(f"seed must be a nonnegative integer, got {seed!r}")
        inputs = {k: str(v) if not isinstance(v, list) else [str(x) for x in v]
                  for k, v in config.get("inputs", {}).items()}
        out = out_dir if out_dir is not None else exp.get("out", "out")
        return cls(str(kind), config, inputs, str(out), int(seed))

    def section(self, name: str) -> dict:
        return dict(self.config.get(name, {}))
