"""Experiment configuration files: validation, defaults and the resolved dump.

A config is a JSON object with four sections::

    {"data": {...}, "train": {...}, "eval": {...}, "output": {...}}

Every key is optional. Missing keys take the desk-scale defaults below,
unknown keys are rejected and every error names the offending key path.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .synthdomains import DEFAULT_SHIFT, DESK_COUNTS, ROLES, SOURCE_PARAMS, DomainParams, domain_pair
from .trainloop import MODE_DEFAULTS, MODES, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that failed."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


TABLE_MODES = ["without_da", "plain_adv", "without_norm", "norm_d_and_p", "norm_p"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("mode", "seed")]
_MODE_KEYS = ("alpha", "a", "da_iterations", "da_milestones", "da_lr", "disc_lr")


def _train_defaults() -> dict:
    base = TrainConfig()
    out = {}
    for name in _TRAIN_KEYS:
        v = getattr(base, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    out["alpha"] = None  # per mode unless set here
    out["a"] = None
    return out


DEFAULTS: dict = {
    "data": {
        "seed": 0,
        "shift": DEFAULT_SHIFT,
        "source": None,  # DomainParams fields; null = built-in source
        "target": None,  # null = derived from source and shift
        "counts": dict(DESK_COUNTS),
        "dir": None,  # load datasets from here instead of generating
    },
    "train": {
        "seed": 0,
        "modes": list(TABLE_MODES),
        "repetitions": 5,
        "workers": 1,
        "mode_params": {},
        **_train_defaults(),
    },
    "eval": {
        "iou_threshold": 0.5,
        "conf_threshold": 0.01,
        "nms_threshold": 0.5,
        "report": "best_f1",
        "pr_curves": False,
    },
    "output": {
        "dir": "runs/experiment",
        "checkpoints": False,
    },
}

_NULLABLE = {"data.source", "data.target", "data.dir", "train.alpha", "train.a"}


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_type(path: str, value, default):
    if value is None:
        if path in _NULLABLE:
            return
        raise ConfigError(path, "must not be null")
    if path in ("data.source", "data.target"):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object of domain parameters")
        return
    if path in ("train.alpha",):
        ok = _is_number(value)
    elif path == "train.a":
        ok = isinstance(value, list) and all(_is_number(v) for v in value)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = _is_number(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:  # nullable string default
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(path, f"wrong type {type(value).__name__}")


def _merge(path: str, user: dict, defaults: dict) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(path, "expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        sub = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(sub, "unknown key")
        _check_type(sub, value, defaults[key])
        if key in ("counts",):
            out[key] = _merge(sub, value, defaults[key])
        elif key in ("mode_params",):
            out[key] = value
        else:
            out[key] = copy.deepcopy(value)
    return out


def _domain(path: str, value, base: DomainParams) -> DomainParams:
    known = {f.name for f in fields(DomainParams)}
    for key in value:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown key")
    merged = base.to_dict()
    merged.update(value)
    try:
        return DomainParams.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _range(path: str, ok: bool, what: str):
    if not ok:
        raise ConfigError(path, what)


def _check_train_values(path: str, t: dict):
    checks = {
        "alpha": lambda v: v is None or v >= 0,
        "a": lambda v: v is None or (len(v) == 2 and all(x > 0 for x in v)),
        "lr": lambda v: v > 0, "da_lr": lambda v: v > 0, "disc_lr": lambda v: v > 0,
        "momentum": lambda v: 0 <= v < 1,
        "pretrain_iterations": lambda v: v >= 0, "da_iterations": lambda v: v >= 0,
        "source_batch": lambda v: v >= 1, "target_batch": lambda v: v >= 1,
        "repetitions": lambda v: v >= 1, "workers": lambda v: v >= 1,
    }
    for key, fn in checks.items():
        if key in t:
            _range(f"{path}.{key}", fn(t[key]), "out of range")
    for key in ("pretrain_milestones", "da_milestones"):
        if key in t:
            v = t[key]
            _range(f"{path}.{key}", all(isinstance(x, int) and x >= 0 for x in v), "expected non-negative integers")


def _resolve_mode_params(user: dict, train: dict) -> dict:
    out = {}
    for mode, params in user.items():
        path = f"train.mode_params.{mode}"
        if mode not in MODES:
            raise ConfigError(path, "unknown mode")
        if not isinstance(params, dict):
            raise ConfigError(path, "expected an object")
        for key, value in params.items():
            if key not in _MODE_KEYS:
                raise ConfigError(f"{path}.{key}", "unknown key")
            _check_type(f"train.{key}", value, DEFAULTS["train"][key])
        _check_train_values(path, params)
    for mode in train["modes"]:
        defaults = MODE_DEFAULTS[mode]
        resolved = {
            "alpha": train["alpha"] if train["alpha"] is not None else defaults["alpha"],
            "a": train["a"] if train["a"] is not None else list(defaults["a"]),
        }
        resolved.update(copy.deepcopy(user.get(mode, {})))
        out[mode] = resolved
    return out


def resolve(raw: dict, seed: int | None = None, out_dir: str | None = None) -> dict:
    """Validate ``raw`` and return the fully resolved config.

    ``seed`` overrides both the data and the training seed; ``out_dir``
    overrides ``output.dir``. The result is a fixed point: resolving it again
    returns an equal document.
    """
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    cfg = {}
    for section, defaults in DEFAULTS.items():
        cfg[section] = _merge(section, raw.get(section, {}), defaults)
    for key in raw:
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")

    data, train, ev = cfg["data"], cfg["train"], cfg["eval"]
    if seed is not None:
        data["seed"] = train["seed"] = int(seed)
    if out_dir is not None:
        cfg["output"]["dir"] = str(out_dir)

    _range("data.shift", data["shift"] >= 0, "must be non-negative")
    for role, n in data["counts"].items():
        _range(f"data.counts.{role}", isinstance(n, int) and not isinstance(n, bool) and n >= 0,
               "expected a non-negative integer")
    _range("data.counts", set(data["counts"]) == set(ROLES), "needs every dataset role")
    source = _domain("data.source", data["source"] or {}, SOURCE_PARAMS)
    data["source"] = source.to_dict()
    if data["target"] is not None:
        data["target"] = _domain("data.target", data["target"], source).to_dict()

    _check_train_values("train", train)
    for i, mode in enumerate(train["modes"]):
        _range(f"train.modes[{i}]", mode in MODES, f"unknown mode {mode!r}")
    _range("train.modes", len(set(train["modes"])) == len(train["modes"]) and train["modes"], "need distinct modes")
    train["mode_params"] = _resolve_mode_params(train["mode_params"], train)
    try:
        TrainConfig(**train_kwargs(cfg))
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None

    for key in ("iou_threshold", "conf_threshold", "nms_threshold"):
        _range(f"eval.{key}", 0 <= ev[key] <= 1, "must lie in [0, 1]")
    _range("eval.report", ev["report"] == "best_f1", "only 'best_f1' is supported")
    return cfg


def load_config(path=None, seed: int | None = None, out_dir: str | None = None) -> dict:
    """Read, validate and resolve a config file; ``None`` gives pure defaults."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    return resolve(raw, seed, out_dir)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def write_resolved(cfg: dict, directory=None) -> Path:
    out = Path(directory or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# views used by the command line
# ---------------------------------------------------------------------------


def domain_params(cfg: dict) -> tuple[DomainParams, DomainParams]:
    data = cfg["data"]
    source = DomainParams.from_dict(data["source"])
    if data["target"] is not None:
        return source, DomainParams.from_dict(data["target"])
    return domain_pair(data["shift"], source)


def train_kwargs(cfg: dict) -> dict:
    t = cfg["train"]
    kw = {k: (tuple(t[k]) if isinstance(t[k], list) else t[k]) for k in _TRAIN_KEYS}
    kw["seed"] = t["seed"]
    return kw


def train_config(cfg: dict, mode: str | None = None) -> TrainConfig:
    """TrainConfig for ``mode`` (default: the first configured mode) with its per-mode params."""
    mode = mode or cfg["train"]["modes"][0]
    base = TrainConfig(**train_kwargs(cfg))
    params = cfg["train"]["mode_params"].get(mode) or {
        "alpha": cfg["train"]["alpha"], "a": cfg["train"]["a"]}
    return base.for_mode(mode, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items()})


def mode_overrides(cfg: dict) -> list[tuple[str, dict]]:
    return [(m, {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["train"]["mode_params"][m].items()})
            for m in cfg["train"]["modes"]]
