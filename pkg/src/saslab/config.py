"""Flat ``key=value`` configuration with dotted keys.

A config file holds one ``section.field=value`` per line; ``#`` starts a
comment.  Command-line ``--section.field value`` overrides win over the file.
``resolve`` turns the merged mapping into typed config objects and rejects
unknown keys; ``dump`` writes the canonical sorted echo (``config.resolved``).
"""

import dataclasses
import os
from dataclasses import dataclass, field

from .attention import AttentionConfig
from .errors import ConfigError
from .model import ModelConfig

VARIANTS = ("mha", "mqa", "gqa", "sas", "sas-mqa", "sas-gqa", "sas-identity")

# keys that are not fields of ModelConfig / AttentionConfig / TrainConfig
EXTRA_KEYS = {
    "data.corpus": str,
    "run.out_dir": str,
    "run.checkpoint": str,
    "sweep.axis": str,
    "sweep.values": str,
    "sweep.seeds": str,
    "sweep.name": str,
    "sweep.workers": int,
    "timing.steps": int,
    "timing.warmup": int,
    "gradcheck.tolerance": float,
    "gradcheck.seed": int,
}
EXTRA_DEFAULTS = {
    "data.corpus": "builtin:stdlib",
    "run.out_dir": "out",
    "run.checkpoint": "",
    "sweep.axis": "variant",
    "sweep.values": "mha,sas",
    "sweep.seeds": "0,1,2",
    "sweep.name": "sweep",
    "sweep.workers": 1,
    "timing.steps": 20,
    "timing.warmup": 3,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.seed": 0,
}


@dataclass
class Resolved:
    model: ModelConfig
    train: object
    extras: dict = field(default_factory=dict)


def parse_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), source=str(path))


def parse_overrides(args):
    """``['--a.b', '1', '--c.d=2']`` -> ``{'a.b': '1', 'c.d': '2'}``."""
    out = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}", key=tok.lstrip("-") or tok)
        tok = tok[2:]
        if "=" in tok:
            key, value = tok.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for --{tok}", key=tok)
            key, value = tok, args[i + 1]
            i += 2
        out[key] = value
    return out


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(value, typ):
    if isinstance(value, str) and value.lower() in ("none", "") and typ is not str:
        return None
    if typ is bool:
        return _parse_bool(value)
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    if typ is tuple:
        return tuple(float(v) for v in str(value).split(","))
    return str(value)


def _field_types(cls, skip=()):
    return {f.name: f.type for f in dataclasses.fields(cls) if f.name not in skip}


def key_table():
    """All accepted keys -> python type."""
    from .training import TrainConfig

    table = {}
    for name, t in _field_types(ModelConfig, skip=("attention",)).items():
        table[f"model.{name}"] = t
    for name, t in _field_types(AttentionConfig, skip=("d_model",)).items():
        table[f"attention.{name}"] = t
    table["attention.variant"] = str
    for name, t in _field_types(TrainConfig).items():
        table[f"train.{name}"] = t
    table.update(EXTRA_KEYS)
    return table


def variant_fields(variant):
    """Attention fields implied by a variant shortcut name."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown attention.variant {variant!r}; choose from {', '.join(VARIANTS)}",
                          key="attention.variant")
    if variant == "sas-identity":
        return {"base_variant": "mha", "expand": True, "kernel_size": 1,
                "expansion_init": "identity", "freeze_expansion": True, "_identity": True}
    if variant.startswith("sas"):
        base = variant.split("-", 1)[1] if "-" in variant else "mha"
        return {"base_variant": base, "expand": True}
    return {"base_variant": variant, "expand": False}


def resolve(flat):
    """Build typed configs from a flat ``{dotted_key: str}`` mapping."""
    from .training import TrainConfig

    table = key_table()
    typed = {}
    for key, raw in flat.items():
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        try:
            typed[key] = _convert(raw, table[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", key=key) from None

    def section(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in typed.items() if k.startswith(prefix)}

    mkw = section("model.")
    akw = section("attention.")
    tkw = section("train.")
    d_model = mkw.get("d_model", ModelConfig.d_model)

    variant = akw.pop("variant", None)
    if variant is not None:
        implied = variant_fields(variant)
        identity = implied.pop("_identity", False)
        for k, v in implied.items():
            akw.setdefault(k, v)
        if identity:
            n_heads = akw.get("n_heads") or max(1, d_model // 32)
            akw.setdefault("sim_heads", n_heads)
            akw.setdefault("sim_head_dim", akw.get("head_dim") or d_model // n_heads)
    akw.setdefault("n_heads", max(1, d_model // 32))

    try:
        attention = AttentionConfig(d_model=d_model, **akw)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"attention.{exc.key}" if exc.key else None) from None
    try:
        model = ModelConfig(attention=attention, **mkw)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"model.{exc.key}" if exc.key else None) from None
    try:
        train = TrainConfig(**tkw)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"train.{exc.key}" if exc.key else None) from None

    extras = dict(EXTRA_DEFAULTS)
    extras.update({k: v for k, v in typed.items() if k in EXTRA_KEYS})
    return Resolved(model=model, train=train, extras=extras)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def flatten(model=None, train=None, extras=None):
    """Canonical ``{dotted_key: str}`` of the effective configuration."""
    out = {}
    if model is not None:
        for f in dataclasses.fields(model):
            if f.name != "attention":
                out[f"model.{f.name}"] = _fmt(getattr(model, f.name))
        for f in dataclasses.fields(model.attention):
            if f.name != "d_model":
                out[f"attention.{f.name}"] = _fmt(getattr(model.attention, f.name))
    if train is not None:
        for f in dataclasses.fields(train):
            out[f"train.{f.name}"] = _fmt(getattr(train, f.name))
    if extras:
        out.update({k: _fmt(v) for k, v in extras.items()})
    return out


def dump(flat):
    return "".join(f"{k}={flat[k]}\n" for k in sorted(flat))


def write_resolved(directory, model=None, train=None, extras=None):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.resolved")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump(flatten(model, train, extras)))
    return path


def model_from_flat(flat):
    """Rebuild a ModelConfig from flattened keys (other sections ignored)."""
    keep = {k: v for k, v in flat.items() if k.startswith(("model.", "attention."))}
    return resolve(keep).model
