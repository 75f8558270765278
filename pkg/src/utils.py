"""
General Utilities.

Helpers shared across the laboratory: flat config files, seed resolution,
parameter hashing, process fan-out and categorical sampling.
"""

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

import config
from errors import ConfigError
from logger import setup_logger
from models import METHOD_PRESETS, RunConfig

logger = setup_logger(__name__)

load_dotenv()


# --- Flat key = value config files ---

def parse_flat_config(text: str) -> Dict[str, str]:
    """Parses `section.key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def _coerce(value: str):
    lowered = value.lower()
    if lowered in ("none", "null", ""):
        return None
    if lowered in ("on", "yes"):
        return "true"
    if lowered in ("off", "no"):
        return "false"
    if "," in value:
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _nest(flat: Dict[str, str]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError(f"unknown config key '{key}'")
        if len(parts) == 1:
            nested[key] = _coerce(value)
        else:
            section = nested.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"'{parts[0]}' is both a value and a section")
            section[parts[1]] = _coerce(value)
    return nested


def build_run_config(flat: Dict[str, str]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None


def load_run_config(path=None, overrides: Optional[Dict[str, str]] = None,
                    method: Optional[str] = None) -> RunConfig:
    """
    Loads a flat config file, applies a method preset and explicit overrides
    (in that order) and validates the result.
    """
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_flat_config(path.read_text(encoding="utf-8")))
    if method is not None:
        if method not in METHOD_PRESETS:
            raise ConfigError(f"unknown method '{method}'")
        flat.update(METHOD_PRESETS[method])
        flat["method"] = method
    elif "method" in flat:
        preset = METHOD_PRESETS.get(flat["method"], {})
        flat = {**preset, **flat}
    flat.update(overrides or {})
    return build_run_config(flat)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def flatten_run_config(cfg: RunConfig) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for key, value in cfg.model_dump().items():
        if isinstance(value, dict):
            for sub, subvalue in value.items():
                flat[f"{key}.{sub}"] = _format_value(subvalue)
        else:
            flat[key] = _format_value(value)
    return flat


def dump_run_config(cfg: RunConfig) -> str:
    """Canonical sorted flat form (the `config.snapshot` format)."""
    flat = flatten_run_config(cfg)
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


# --- Seeds ---

def resolve_seed(cli_seed: Optional[int], cfg: Optional[RunConfig] = None) -> int:
    """--seed, then train.seed, then $MOPSAN_SEED, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if cfg is not None and cfg.train.seed is not None:
        return int(cfg.train.seed)
    env_seed = os.environ.get("MOPSAN_SEED")
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"MOPSAN_SEED must be an integer, got '{env_seed}'") from None
    return 0


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


# --- Parameters ---

def parameter_hash(named_modules: Dict[str, object]) -> str:
    """sha256 over parameter names and raw float64 bytes, in sorted name order."""
    digest = hashlib.sha256()
    for module_name in sorted(named_modules):
        params = named_modules[module_name].named_parameters()
        for name in sorted(params):
            value = np.ascontiguousarray(params[name].value, dtype="<f8")
            digest.update(f"{module_name}/{name}{value.shape}".encode("utf-8"))
            digest.update(value.tobytes())
    return digest.hexdigest()


# --- Fan-out ---

def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """Maps `fn` over `items` preserving order; `workers == 1` runs in-process."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# --- Sampling ---

def sample_action(probs: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
    """Draws one action from a categorical distribution; returns (action, log-prob)."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs)
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    action = min(action, len(probs) - 1)
    while probs[action] <= 0.0:
        action -= 1
    with np.errstate(divide="ignore"):
        return action, float(np.log(probs[action]))


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """JS divergence (nats) along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def _kl(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
        return terms.sum(axis=-1)

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def iter_jsonl(path) -> Iterable[str]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield line
