"""Sectioned ``key = value`` configuration with dotted overrides.

Every key has a declared type; unknown sections or keys are errors. Keys
declared with a ``None`` default are required by whichever command reads them.
"""
from __future__ import annotations

import configparser
from typing import Any, Dict, Iterable, List, Optional, Tuple


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _str_list(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


PARSERS = {int: int, float: float, bool: _bool, str: str, "ints": _int_list, "strs": _str_list}

SCHEMA: Dict[str, Dict[str, Tuple[Any, Any]]] = {
    "data": {
        "root": (str, None),
        "n_identities": (int, None),
        "images_per_identity": (int, None),
        "height": (int, 36),
        "width": (int, 18),
        "seed": (int, 0),
        "max_shift": (float, 3.0),
        "scale_jitter": (float, 0.15),
        "occlusion": (float, 0.5),
        "occlusion_prob": (float, 0.5),
        "clutter": (float, 0.6),
        "noise": (float, 0.03),
        "identity_offset": (int, 0),
    },
    "model": {
        "c_shallow": (int, 16),
        "c_layer4": (int, 32),
        "c_layer5": (int, 64),
    },
    "train": {
        "identities_per_modality": (int, 8),
        "images_per_identity": (int, 4),
        "epochs": (int, 80),
        "steps_per_epoch": (int, 0),
        "base_lr_backbone": (float, 1e-2),
        "base_lr_head": (float, 1e-1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "warmup_epochs": (int, 10),
        "decay_epochs": ("ints", [20, 50]),
        "decay_factor": (float, 10.0),
        "cmalign_layers": ("ints", [4, 5]),
        "seed": (int, 0),
        "checkpoint_every": (int, 1),
    },
    "loss": {
        "lambda_ic": (float, 1.0),
        "lambda_dt": (float, 0.5),
        "alpha": (float, 0.3),
        "beta": (float, 50.0),
        "co_attention": (bool, True),
        "normalize_dt": (bool, False),
        "mask_stop_gradient": (bool, False),
        "gem_p": (float, 3.0),
    },
    "eval": {
        "root": (str, ""),
        "query_modality": (str, "B"),
        "trials": (int, 10),
        "gallery_seed": (int, 0),
    },
    "match": {
        "k": (int, 20),
        "image_a": (str, None),
        "image_b": (str, None),
    },
    "gradcheck": {
        "tol": (float, 1e-4),
        "ops": ("strs", ["all"]),
        "seeds": (int, 10),
        "step": (float, 1e-4),
    },
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


class Config:
    """Parsed configuration: ``cfg['train.epochs']`` or ``cfg.section('train')``."""

    def __init__(self):
        self._values: Dict[str, Dict[str, Any]] = {
            sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}

    def set(self, dotted: str, text: str) -> None:
        section, key = self._split(dotted)
        kind, default = SCHEMA[section][key]
        if default is None and not text.strip():
            # an unset required key, as written by dumps()
            self._values[section][key] = None
            return
        try:
            self._values[section][key] = PARSERS[kind](text)
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from exc

    @staticmethod
    def _split(dotted: str) -> Tuple[str, str]:
        if "." not in dotted:
            raise ConfigError(f"{dotted}: keys are written as section.key")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"{dotted}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{dotted}: unknown key")
        return section, key

    def __getitem__(self, dotted: str):
        section, key = self._split(dotted)
        return self._values[section][key]

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self._values[name])

    def require(self, keys: Iterable[str]) -> None:
        for dotted in keys:
            value = self[dotted]
            if value is None or value == "":
                raise ConfigError(f"missing required key {dotted}")

    def dumps(self) -> str:
        out = []
        for sec, keys in self._values.items():
            out.append(f"[{sec}]")
            for k, v in keys.items():
                out.append(f"{k} = {'' if v is None else _format(v)}")
            out.append("")
        return "\n".join(out)


def parse_text(text: str, cfg: Optional[Config] = None) -> Config:
    cfg = cfg or Config()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(f"{section}.{key}", raw)
    return cfg


def load(path=None, overrides: Iterable[str] = ()) -> Config:
    """Parse ``path`` (optional), then apply ``key=value`` overrides in order."""
    cfg = Config()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        parse_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        cfg.set(key.strip(), val.strip())
    return cfg
