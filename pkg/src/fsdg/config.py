"""Plain-text run configuration: one ``key = value`` per line.

Blank lines are ignored and ``#`` starts a comment.  Keys map one-to-one
onto TrainConfig fields; unknown keys are rejected rather than ignored so
typos fail loudly.  Lists (encoder widths, per-block modulation flags)
are comma separated.
"""

from __future__ import annotations

from dataclasses import fields

from .errors import ConfigError, ParseError
from .training import TrainConfig

_FLAG_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _parse_flag(token: str) -> bool:
    word = token.strip().lower()
    if word not in _FLAG_WORDS:
        raise ParseError(f"config: {token!r} is not a flag (use 1/0 or true/false)")
    return _FLAG_WORDS[word]


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("mode", "head", "optimizer"):
        return raw
    if key in ("iterations", "inner_steps", "way", "shot", "query", "seed"):
        try:
            return int(raw)
        except ValueError:
            raise ParseError(f"config: key {key!r} needs an integer, got {raw!r}") from None
    if key in ("alpha", "ft_reg_weight", "ft_init_gamma", "ft_init_beta"):
        try:
            return float(raw)
        except ValueError:
            raise ParseError(f"config: key {key!r} needs a number, got {raw!r}") from None
    if key == "encoder_widths":
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError:
            raise ParseError(f"config: encoder_widths must be comma-separated ints, got {raw!r}") from None
    if key == "ft_blocks":
        return tuple(_parse_flag(tok) for tok in raw.split(",") if tok.strip())
    raise ConfigError(f"config: unknown key {key!r}")


def parse_config_text(text: str) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def load_config(path: str) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(config: TrainConfig) -> str:
    """Render a config as parseable text (round-trips through parse)."""
    lines = [
        f"mode = {config.mode}",
        f"head = {config.head}",
        f"alpha = {config.alpha!r}",
        f"iterations = {config.iterations}",
        f"inner_steps = {config.inner_steps}",
        f"ft_reg_weight = {config.ft_reg_weight!r}",
        f"ft_init_gamma = {config.ft_init_gamma!r}",
        f"ft_init_beta = {config.ft_init_beta!r}",
        f"way = {config.way}",
        f"shot = {config.shot}",
        f"query = {config.query}",
        f"seed = {config.seed}",
        f"optimizer = {config.optimizer}",
        "encoder_widths = " + ",".join(str(w) for w in config.encoder_widths),
        "ft_blocks = " + ",".join("1" if b else "0" for b in config.ft_blocks),
    ]
    return "\n".join(lines) + "\n"
