"""Flat key=value configuration files and their mapping onto the model,
trainer and FFN dataclasses. CLI flags reuse the same schema, so a flag named
after any key overrides the file value.
"""

from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (target section, python type)
CONFIG_SCHEMA: dict[str, tuple[str, type]] = {
    # model
    "vocab_size": ("model", int),
    "context": ("model", int),
    "embed_dim": ("model", int),
    "hidden": ("model", int),
    "num_blocks": ("model", int),
    "model_seed": ("model", int),
    # trainer
    "steps": ("train", int),
    "warmup_dense_steps": ("train", int),
    "batch_tokens": ("train", int),
    "lr": ("train", float),
    "beta1": ("train", float),
    "beta2": ("train", float),
    "weight_decay": ("train", float),
    "grad_clip": ("train", float),
    "lr_warmup_steps": ("train", int),
    "lr_schedule": ("train", str),
    "eval_every": ("train", int),
    "eval_tokens": ("train", int),
    "seed": ("train", int),
    "split_fraction": ("train", float),
    "plan_refresh_every": ("train", int),
    "corpus": ("train", str),
    # ffn
    "activation": ("ffn", str),
    "forward_mode": ("ffn", str),
    "backward_mode": ("ffn", str),
    "mask_grad_with_fwd": ("ffn", bool),
    "permute_tokens": ("ffn", bool),
    "permute_seed": ("ffn", int),
    "split_ratio": ("ffn", float),
    "fp8_emulation": ("ffn", bool),
    "fp8_backward": ("ffn", bool),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        _, typ = CONFIG_SCHEMA[key]
        try:
            values[key] = _parse_bool(value) if typ is bool else typ(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def parse_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), source=str(path))


def build_configs(values: dict):
    """Assemble (ToyModelConfig, TrainConfig, corpus_path) from raw key/values."""
    from .train import ToyModelConfig, TrainConfig  # circular-import guard

    model_kw = {}
    train_kw = {}
    ffn_kw = {}
    corpus = None
    for key, value in values.items():
        section, _ = CONFIG_SCHEMA[key]
        if key == "corpus":
            corpus = value
        elif section == "model":
            model_kw["seed" if key == "model_seed" else key] = value
        elif section == "train":
            train_kw[key] = value
        else:
            ffn_kw[key] = value
    model_cfg = ToyModelConfig(**model_kw)
    train_cfg = TrainConfig(**train_kw)
    if ffn_kw:
        train_cfg = replace(train_cfg, ffn=replace(train_cfg.ffn, **ffn_kw))
    return model_cfg, train_cfg, corpus


def config_as_dict(model_cfg, train_cfg, corpus=None) -> dict:
    """Flat, schema-keyed dump used by summaries and checkpoints."""
    out: dict[str, object] = {}
    for f in fields(model_cfg):
        key = "model_seed" if f.name == "seed" else f.name
        out[key] = getattr(model_cfg, f.name)
    for f in fields(train_cfg):
        if f.name == "ffn":
            continue
        out[f.name] = getattr(train_cfg, f.name)
    for f in fields(train_cfg.ffn):
        out[f.name] = getattr(train_cfg.ffn, f.name)
    if corpus is not None:
        out["corpus"] = str(corpus)
    return out
