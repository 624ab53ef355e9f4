"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .exceptions import ParameterError


def check_triple(value, name, kind=int, positive=True):
    """Coerce ``value`` to a 3-tuple of ``kind`` and check positivity.

    Accepts a scalar (broadcast to all axes), a sequence, or a comma-separated
    string such as ``"64,64,64"``.
    """
    if isinstance(value, str):
        value = [v for v in value.replace("x", ",").split(",") if v.strip()]
    if isinstance(value, (numbers.Number, np.number)):
        value = [value] * 3
    try:
        out = tuple(kind(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"{name}: cannot parse {value!r}") from exc
    if len(out) != 3:
        raise ParameterError(f"{name}: expected 3 values, got {len(out)}")
    if kind is int and any(float(v) != int(v) for v in value):
        raise ParameterError(f"{name}: expected integers, got {value!r}")
    if positive and any(not v > 0 for v in out):
        raise ParameterError(f"{name}: all values must be positive, got {out}")
    if kind is float and not all(np.isfinite(out)):
        raise ParameterError(f"{name}: values must be finite, got {out}")
    return out


def check_unit_vector(value, name="b0_dir", normalize=False, atol=1e-6):
    v = np.asarray(check_triple(value, name, kind=float, positive=False), dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ParameterError(f"{name}: zero vector")
    if normalize:
        return tuple(float(c) for c in v / n)
    if abs(n - 1.0) > atol:
        raise ParameterError(f"{name}: |v| = {n:.8f}, expected unit length")
    return tuple(float(c) for c in v)


def check_positive(value, name, allow_zero=False):
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"{name}: not a number: {value!r}") from exc
    ok = value >= 0 if allow_zero else value > 0
    if not (ok and np.isfinite(value)):
        bound = ">= 0" if allow_zero else "> 0"
        raise ParameterError(f"{name} must be finite and {bound}, got {value}")
    return value


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed`` (int, None, or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
