"""Single-head attention and the interpolated attention variants.

Every variant takes the querying branch's ``q`` plus the two source
branches' keys/values (``k1, v1`` and ``km, vm``). Fused variants also take
the querying branch's own keys/values, which are appended after the source
block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import softmax_rows

MODES = ("plain", "inner", "outer", "fused_inner", "fused_outer", "guided")
INTERP_MODES = ("inner", "outer", "fused_inner", "fused_outer")
SCOPES = ("cross_attention", "self_attention", "both")


@dataclass(frozen=True)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise DimensionError(
                f"query/key widths differ: {self.w_q.shape[1]} vs {self.w_k.shape[1]}"
            )


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        _check_qkv(self.q, self.k, self.v)


@dataclass(frozen=True)
class ProcessorSelector:
    """How one branch routes its attention layers at a given step.

    ``active_steps`` holds the timestep indices where interpolation is
    applied; ``None`` means every step. ``guided`` makes cross-attention read
    the branch's own condition (set by the caller to the guidance prompt)
    through :func:`guided_cross` regardless of step.
    """

    mode: str = "plain"
    t: float = 0.0
    applies_to: str = "both"
    active_steps: Optional[frozenset] = None
    guided: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        if self.applies_to not in SCOPES:
            raise ConfigError(f"unknown attention scope {self.applies_to!r}")
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError(f"interpolation coefficient {self.t} outside [0, 1]")
        if self.mode == "guided":
            object.__setattr__(self, "guided", True)

    @property
    def interpolating(self) -> bool:
        return self.mode in INTERP_MODES

    @property
    def fused(self) -> bool:
        return self.mode.startswith("fused_")

    def active(self, j: int) -> bool:
        return self.active_steps is None or j in self.active_steps

    def routes_self(self, j: int) -> bool:
        return self.interpolating and self.applies_to != "cross_attention" and self.active(j)

    def routes_cross(self, j: int) -> bool:
        return (
            self.interpolating
            and not self.guided
            and self.applies_to != "self_attention"
            and self.active(j)
        )


def _check_qkv(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"keys and values disagree on length: {k.shape} vs {v.shape}")
    if q.shape[1] == 0:
        raise DimensionError("key width must be positive")


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what} from the two sources differ: {a.shape} vs {b.shape}")


def attention_map(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return softmax_rows(q @ k.T / np.sqrt(k.shape[1]))


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    _check_qkv(q, k, v)
    return attention_map(q, k) @ v


def inner_interp(q_i, k1, km, v1, vm, t: float) -> np.ndarray:
    """One attention map over mixed keys, applied to mixed values."""
    _check_pair(k1, km, "keys")
    _check_pair(v1, vm, "values")
    return attend(q_i, (1.0 - t) * k1 + t * km, (1.0 - t) * v1 + t * vm)


def outer_interp(q_i, k1, km, v1, vm, t: float) -> np.ndarray:
    """Separate attention against each source, outputs mixed."""
    _check_pair(k1, km, "keys")
    _check_pair(v1, vm, "values")
    return (1.0 - t) * attend(q_i, k1, v1) + t * attend(q_i, km, vm)


def _cat(a, b):
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot concatenate rows of width {a.shape[1]} and {b.shape[1]}")
    return np.concatenate([a, b], axis=0)


def fused_inner(q_i, k1, km, v1, vm, k_self, v_self, t: float) -> np.ndarray:
    _check_pair(k1, km, "keys")
    _check_pair(v1, vm, "values")
    k_mix = (1.0 - t) * k1 + t * km
    v_mix = (1.0 - t) * v1 + t * vm
    return attend(q_i, _cat(k_mix, k_self), _cat(v_mix, v_self))


def fused_outer(q_i, k1, km, v1, vm, k_self, v_self, t: float) -> np.ndarray:
    _check_pair(k1, km, "keys")
    _check_pair(v1, vm, "values")
    first = attend(q_i, _cat(k1, k_self), _cat(v1, v_self))
    last = attend(q_i, _cat(km, k_self), _cat(vm, v_self))
    return (1.0 - t) * first + t * last


def guided_cross(q_i, k_g, v_g) -> np.ndarray:
    return attend(q_i, k_g, v_g)


def interpolated(mode: str, q_i, k1, km, v1, vm, t: float, k_self=None, v_self=None):
    """Dispatch to the variant named by ``mode``."""
    if mode == "inner":
        return inner_interp(q_i, k1, km, v1, vm, t)
    if mode == "outer":
        return outer_interp(q_i, k1, km, v1, vm, t)
    if k_self is None or v_self is None:
        raise DimensionError(f"mode {mode!r} needs the branch's own keys and values")
    if mode == "fused_inner":
        return fused_inner(q_i, k1, km, v1, vm, k_self, v_self, t)
    if mode == "fused_outer":
        return fused_outer(q_i, k1, km, v1, vm, k_self, v_self, t)
    raise ConfigError(f"{mode!r} is not an interpolating mode")
