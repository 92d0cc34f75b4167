"""Flat ``key = value`` run configuration with dotted keys.

Blank lines and lines starting with ``#`` are ignored. Every key has a
typed default below; unknown keys are errors so typos never pass silently.
"""
from __future__ import annotations

from .augment import DEFAULT_ALPHA_ADD, DEFAULT_ALPHA_SUB, LADDER


class ConfigError(ValueError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pairs_text(pairs):
    return ",".join(f"{s}:{q}" for s, q in pairs)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "threads": (int, 1),
    "data.root": (str, ""),
    "data.synthetic.train_classes": (int, 64),
    "data.synthetic.test_classes": (int, 20),
    "data.synthetic.per_class": (int, 20),
    "data.synthetic.size": (int, 28),
    "data.synthetic.seed": (int, 0),
    "episode.n_way": (int, 5),
    "episode.k_shot": (int, 1),
    "episode.m_query": (int, 5),
    "episode.episodes_per_epoch": (int, 10000),
    "aug.support": (str, "AA+TIMsub"),
    "aug.query": (str, "R+TA+TIMadd"),
    "aug.alpha_sub": (float, DEFAULT_ALPHA_SUB),
    "aug.alpha_add": (float, DEFAULT_ALPHA_ADD),
    "train.epochs": (int, 60),
    "train.initial_lr": (float, 1e-3),
    "train.lr_factors": (str, "auto"),
    "train.lr_mode": (str, "replace"),
    "train.gamma": (float, 1.0),
    "train.filters": (int, 64),
    "train.eq5_literal": (_bool, False),
    "train.eval_episodes": (int, 100),
    "train.record_wall_clock": (_bool, False),
    "eval.n_way": (int, 5),
    "eval.k_shot": (int, 1),
    "eval.m_query": (int, 15),
    "eval.episodes": (int, 600),
    "eval.repeats": (int, 1),
    "diagnose.pairs": (str, _pairs_text(LADDER)),
    "diagnose.samples": (int, 1000),
}


def defaults():
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(text) if parser is not str else str(text).strip()
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def parse_text(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def to_text(cfg):
    """Canonical text; parsing it back yields the same config."""
    lines = []
    for key in SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def parse_lr_factors(text):
    """``auto`` (scaled default schedule) or ``epoch:factor,...``; ``none`` for a flat rate."""
    t = text.strip().lower()
    if t == "auto":
        return None
    if t in ("none", ""):
        return ()
    try:
        return tuple((int(e), float(f)) for e, f in (item.split(":") for item in t.split(",")))
    except ValueError:
        raise ConfigError(f"train.lr_factors: expected 'auto', 'none' or 'epoch:factor,...', got {text!r}") from None


def parse_pairs(text):
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.count(":") != 1:
            raise ConfigError(f"diagnose pair {item!r} must look like SUPPORT:QUERY")
        s, q = (p.strip() for p in item.split(":"))
        pairs.append((s, q))
    if not pairs:
        raise ConfigError("no diagnose pairs given")
    return pairs
