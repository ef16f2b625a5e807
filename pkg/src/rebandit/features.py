"""Binary context triple and the fixed feature/design layout of the reward model.

The reward model is over-parameterized with action centering: a design row is
``[g(S) | (a - pi) f(S) | pi f(S)]`` where the baseline map g and the
advantage map f are the same 8-entry interaction expansion of the context.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

BASE_DIM = 8
PARAM_DIM = 3 * BASE_DIM


class StateTriple(NamedTuple):
    """Binary context observed at a decision point.

    engaged: 1 when the mean of the last (up to) 3 observed raw rewards is >= 2.
    evening: 0 for the morning decision point, 1 for the evening one.
    no_use: 1 unless cannabis use was reported (missing self-report counts as use).
    """

    engaged: int
    evening: int
    no_use: int

    def validate(self) -> "StateTriple":
        for v in self:
            if v not in (0, 1):
                raise ValueError(f"state entries must be binary, got {tuple(self)}")
        return self


def context_features(state: StateTriple) -> np.ndarray:
    """8-entry interaction expansion [1, x1, x2, x3, x1x2, x2x3, x1x3, x1x2x3].

    The baseline and advantage maps are identical by definition, so this one
    function serves both.
    """
    x1, x2, x3 = state
    return np.array(
        [1.0, x1, x2, x3, x1 * x2, x2 * x3, x1 * x3, x1 * x2 * x3], dtype=float
    )


def design_vector(state: StateTriple, action: int, prob: float) -> np.ndarray:
    """Action-centered design row ``[g(S), (a - pi) f(S), pi f(S)]``."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"action probability must lie in [0, 1], got {prob}")
    if action not in (0, 1):
        raise ValueError(f"action must be binary, got {action}")
    f = context_features(state)
    return np.concatenate([f, (action - prob) * f, prob * f])


def advantage_slice(param_dim: int) -> slice:
    """Coordinates of the advantage block inside a stacked parameter vector."""
    if param_dim % 3:
        raise ValueError("parameter dimension must split into three equal blocks")
    q = param_dim // 3
    return slice(q, 2 * q)
