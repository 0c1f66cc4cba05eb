import hashlib
import json
import logging
from pathlib import Path

import numpy as np


def configure_logging(level: str = "INFO") -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


class ParalatError(Exception):
    pass


class ConfigurationError(ParalatError, ValueError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class ArgumentError(ParalatError, ValueError):
    pass


class ShapeError(ParalatError, ValueError):
    pass


class NumericError(ParalatError, ArithmeticError):
    pass


class BlowUpError(ParalatError):
    """Solution became non-finite (or the step budget was exhausted)."""

    def __init__(self, step: int, t: float, reason: str = "non-finite values"):
        super().__init__(f"blow-up at step {step} (t={t:.6g}): {reason}")
        self.step = step
        self.t = t


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default).encode()


def _json_default(val):
    if isinstance(val, np.integer):
        return int(val)
    if isinstance(val, np.floating):
        return float(val)
    if isinstance(val, np.ndarray):
        return val.tolist()
    if isinstance(val, Path):
        return str(val)
    raise TypeError(f"not JSON serializable: {val!r}")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(obj) -> str:
    return sha256_hex(canonical_json(obj))[:16]


def parse_seeds(text: str | None) -> list[int] | None:
    """Parse a comma separated seed list such as "1,2,3"."""
    if text is None or not text.strip():
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"invalid seed list {text!r}", path="seeds") from None
