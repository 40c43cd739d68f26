"""Run configuration: ``rdn.conf`` file, ``RDN_*`` environment, command-line flags.

Later sources win: flags over environment over file over built-in defaults.
Every key is checked against :data:`SCHEMA`; unknown keys are errors.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

from rdnkit.errors import ConfigError

ENV_PREFIX = "RDN_"
DEFAULT_FILE = "rdn.conf"


def _thresholds(text):
    vals = tuple(float(t) for t in str(text).split(",") if t.strip())
    if not vals or any(v <= 0 for v in vals):
        raise ValueError("need positive comma-separated values")
    return vals


def _choice(*options):
    def parse(text):
        text = str(text).strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _optional_float(text):
    text = str(text).strip()
    return None if text.lower() in ("", "none") else float(text)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "profile": (_choice("full", "quarter"), "full"),
    "epochs": (int, 50),
    "lr": (float, 1e-3),
    "stride": (int, 8),
    "margin": (int, 16),
    "grid_stride": (int, 8),
    "thresholds": (_thresholds, (1.0, 3.0, 5.0)),
    "threshold": (_optional_float, None),
    "model": (_choice("homography", "fundamental", "none"), "homography"),
    "max_iterations": (int, 2000),
    "ablation": (_choice("full", "fen-only"), "full"),
    "backend": (_choice("numba", "numpy"), "numba"),
    "size": (int, 64),
    "crop": (int, 0),
    "max_rotation": (float, 15.0),
    "max_scale_log": (float, 0.22314355131420976),  # ln 1.25
    "max_translation": (float, 8.0),
    "max_perspective": (float, 0.05),
    "brightness": (float, 0.1),
    "contrast": (float, 0.2),
    "noise_sigma": (float, 0.01),
}


def _parse(key, raw, source):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r} in {source}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key} in {source}: {exc}") from None


def read_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse(key, value, f"{path} line {n}")
    return out


def read_env(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            out[key] = _parse(key, value, f"environment variable {name}")
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def get(self, key, default=None):
        """Like ``[]`` but returns ``default`` when no source set the key."""
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        return self.values.get(key, default)

    @classmethod
    def load(cls, flags: dict | None = None, path=None, environ=None) -> "RunConfig":
        """Merge sources; ``flags`` entries that are ``None`` count as unset.

        ``path=None`` reads ``rdn.conf`` from the working directory when it
        exists; an explicit path must exist.
        """
        cfg = cls()
        if path is None:
            path = Path(DEFAULT_FILE) if Path(DEFAULT_FILE).is_file() else None
        layers = [("file", read_file(path) if path is not None else {}), ("env", read_env(environ))]
        parsed = {}
        for key, value in (flags or {}).items():
            if value is None:
                continue
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r} on the command line")
            parsed[key] = value if not isinstance(value, str) else _parse(key, value, "command line")
        layers.append(("flag", parsed))
        for source, layer in layers:
            for key, value in layer.items():
                cfg.values[key] = value
                cfg.sources[key] = source
        return cfg
