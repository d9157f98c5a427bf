"""Run configuration: a small sectioned ``key = value`` dialect.

Format::

    # comment (also ';')
    [section]
    key = value   # trailing comments need whitespace before the marker

Sections are ``run``, ``model``, ``train``, ``attack``, ``data`` and
``analysis``.  Values are typed by the schema below: integers, floats,
booleans (true/false/yes/no/on/off/1/0), ``auto`` for unset switches, and
comma-separated lists.  Unknown sections or keys are errors.  Budgets under
``[attack]`` and ``[train] adv_eps`` are in pixel units (1/255).
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from .attacks import AttackSpec
from .models import CIFAR_MEAN, CIFAR_STD, ModelConfig
from .train import TrainSpec


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _bool(text: str) -> bool:
    t = text.lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _switch(text: str) -> Optional[bool]:
    return None if text.lower() in ("auto", "") else _bool(text)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _str(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "precision": (_str, "f32"),
        "threads": (int, 1),
        "checkpoint": (_str, ""),
    },
    "model": {
        "family": (_str, "evpnet"),
        "depth": (int, 20),
        "widths": (_ints, (16, 32, 64)),
        "pdog": (_switch, None),
        "trelu": (_switch, None),
        "pnl": (_switch, None),
        "num_classes": (int, 10),
        "se_reduction": (int, 16),
        "theta_granularity": (_str, "channel"),
        "pdog_init": (_str, "gaussian"),
        "pnl_norm": (float, 2.0),
        "input_mean": (_floats, CIFAR_MEAN),
        "input_std": (_floats, CIFAR_STD),
    },
    "train": {
        "epochs": (int, 160),
        "batch_size": (int, 128),
        "lr": (float, 0.1),
        "milestones": (_ints, (80, 120)),
        "decay_factor": (float, 0.1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "adv_mode": (_str, "none"),
        "adv_eps": (float, 8.0),
        "adv_mixed": (_bool, False),
        "augment": (_bool, True),
        "eval_attack": (_str, ""),
        "eval_limit": (int, 0),
    },
    "attack": {
        "family": (_str, "pgd"),
        "eps": (float, 8.0),
        "step": (float, 2.0),
        "iters": (int, 10),
        "start": (_str, "clean"),
        "labels": (_str, "true"),
        "source": (_str, ""),
        "limit": (int, 0),
        "export_batch": (_bool, False),
    },
    "data": {
        "source": (_str, "synth"),
        "path": (_str, ""),
        "n_train": (int, 0),
        "n_test": (int, 0),
        "noise": (float, 0.1),
        "seed": (int, 0),
        "batch": (_str, ""),
    },
    "analysis": {
        "n_samples": (int, 64),
        "attack": (_str, "pgd-40-2"),
        "eps": (float, 8.0),
        "maps": (_ints, (0,)),
        "map_images": (int, 1),
        "sweep": (_bool, False),
        "sweep_eps": (_floats, (0.0, 1.0, 2.0, 4.0, 8.0)),
        "sweep_families": (_words, ("fgsm", "rfgsm", "pgd")),
    },
}


def _format(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _nearest(word: str, options: Iterable[str]) -> str:
    match = difflib.get_close_matches(word, list(options), n=1, cutoff=0.0)
    return match[0] if match else ""


@dataclass
class RunConfig:
    """Typed values for every section, defaults filled in."""

    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, section: str, key: str, raw: str, where: str = "") -> None:
        prefix = f"{where}: " if where else ""
        if section not in SCHEMA:
            raise ConfigError(f"{prefix}unknown section [{section}]; did you mean "
                              f"[{_nearest(section, SCHEMA)}]?")
        keys = SCHEMA[section]
        if key not in keys:
            raise ConfigError(f"{prefix}unknown key {key!r} in [{section}]; did you mean "
                              f"{_nearest(key, keys)!r}?")
        parse = keys[key][0]
        try:
            self.values[section][key] = parse(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{prefix}bad value for {section}.{key}: {exc}") from None

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``."""
        name, sep, raw = assignment.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
        self.set(section, key, raw, where=f"--set {assignment}")

    def format(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.format(), encoding="utf-8")

    # typed views

    def model_config(self) -> ModelConfig:
        m = self["model"]
        return ModelConfig(family=m["family"], depth=m["depth"], widths=m["widths"], pdog=m["pdog"],
                           trelu=m["trelu"], pnl=m["pnl"], num_classes=m["num_classes"],
                           se_reduction=m["se_reduction"], theta_granularity=m["theta_granularity"],
                           pdog_init=m["pdog_init"], pnl_norm=m["pnl_norm"],
                           input_mean=m["input_mean"], input_std=m["input_std"])

    def train_spec(self) -> TrainSpec:
        t = self["train"]
        eval_attack = AttackSpec.parse(t["eval_attack"], eps_pixels=t["adv_eps"]) if t["eval_attack"] else None
        return TrainSpec(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                         milestones=t["milestones"], decay_factor=t["decay_factor"],
                         momentum=t["momentum"], weight_decay=t["weight_decay"],
                         adv_mode=t["adv_mode"], adv_eps=t["adv_eps"], adv_mixed=t["adv_mixed"],
                         augment=t["augment"], seed=self["run"]["seed"], eval_attack=eval_attack,
                         eval_limit=t["eval_limit"] or None)

    def attack_spec(self) -> AttackSpec:
        a = self["attack"]
        return AttackSpec(family=a["family"], eps_pixels=a["eps"], alpha_pixels=a["step"] or None,
                          iters=a["iters"], start=a["start"], label_source=a["labels"])


_INLINE_COMMENT = re.compile(r"\s[#;]")


def parse_config_text(text: str, name: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    section: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = _INLINE_COMMENT.split(line.strip(), maxsplit=1)[0].rstrip()
        if not s or s[0] in "#;":
            continue
        where = f"{name}:{lineno}"
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {s!r}")
            section = s[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]; did you mean "
                                  f"[{_nearest(section, SCHEMA)}]?")
            continue
        key, sep, raw = s.partition("=")
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {s!r}")
        if section is None:
            raise ConfigError(f"{where}: key {key.strip()!r} outside any [section]")
        cfg.set(section, key.strip(), raw, where)
    return cfg


def parse_config(path=None) -> RunConfig:
    """Read a configuration file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{p}: not valid UTF-8 ({exc})") from None
    return parse_config_text(text, str(p))
