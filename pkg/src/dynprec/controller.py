"""Run-time precision policy driven by the decoder's token count.

A frame is evaluated at half precision when the previous search step left
fewer tokens than the threshold.  The threshold is nudged by an integer step
so the long-run share of half-precision frames tracks a target:

* ``h``   cumulative imbalance (half frames minus base frames),
* ``h_l`` the same imbalance over the last ``window`` decisions,

and every ``update_period`` frames the threshold drops by ``delta`` when both
are positive, rises by ``delta`` when both are negative, and otherwise stays.
All bookkeeping is integer.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .arith import PrecisionMode


@dataclass(frozen=True)
class ControllerConfig:
    target_ratio: float = 0.5
    delta: int = 1
    window: int = 512
    update_period: int = 128
    initial_threshold: float = 1000
    # reset h, window and threshold at every utterance (ablation)
    per_utterance: bool = False

    def __post_init__(self):
        if not 0.0 <= self.target_ratio <= 1.0:
            raise ValueError("target_ratio must be in [0, 1]")
        if self.delta < 0 or int(self.delta) != self.delta:
            raise ValueError("delta must be a non-negative integer")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.initial_threshold < 0:
            raise ValueError("initial_threshold must be >= 0")

    def increments(self) -> tuple[int, int]:
        """Integer (half, base) steps for ``h``.

        With target r = p/q, a half frame adds q-p and a base frame subtracts
        p, so ``h`` stays balanced exactly when the half share equals r.  At
        r = 1/2 this is the plain +1/-1 count.
        """
        r = Fraction(self.target_ratio).limit_denominator(10_000)
        return r.denominator - r.numerator, -r.numerator


@dataclass(frozen=True)
class Decision:
    mode: PrecisionMode
    threshold: float
    token_count: int


@dataclass
class ControllerState:
    threshold: float
    h: int = 0
    window: deque = field(default_factory=deque)
    frames_since_update: int = 0
    frames: int = 0
    half_frames: int = 0

    @classmethod
    def initial(cls, cfg: ControllerConfig) -> "ControllerState":
        # degenerate targets pin the policy: never / always half
        if cfg.target_ratio == 0.0:
            th = 0.0
        elif cfg.target_ratio == 1.0:
            th = math.inf
        else:
            th = cfg.initial_threshold
        return cls(threshold=th, window=deque(maxlen=cfg.window))

    @property
    def h_local(self) -> int:
        return sum(self.window)

    @property
    def ratio(self) -> float:
        return self.half_frames / self.frames if self.frames else 0.0

    def copy(self) -> "ControllerState":
        return ControllerState(self.threshold, self.h, deque(self.window, maxlen=self.window.maxlen),
                               self.frames_since_update, self.frames, self.half_frames)


def decide(state: ControllerState, token_count: int) -> Decision:
    if token_count < 0:
        raise ValueError("token count must be non-negative")
    mode = PrecisionMode.HALF if token_count < state.threshold else PrecisionMode.BASE
    return Decision(mode, state.threshold, token_count)


def apply_rule(threshold: float, h: int, h_local: int, delta: int) -> float:
    if h > 0 and h_local > 0:
        return max(threshold - delta, 0)
    if h < 0 and h_local < 0:
        return threshold + delta
    return threshold


def record_and_update(state: ControllerState, d: Decision, cfg: ControllerConfig) -> ControllerState:
    """Account for one decision; returns the same (mutated) state."""
    up, down = cfg.increments()
    step = up if d.mode is PrecisionMode.HALF else down
    state.h += step
    state.window.append(step)
    state.frames += 1
    state.half_frames += d.mode is PrecisionMode.HALF
    state.frames_since_update += 1
    if state.frames_since_update >= cfg.update_period:
        state.frames_since_update = 0
        state.threshold = apply_rule(state.threshold, state.h, state.h_local, cfg.delta)
    return state


@dataclass
class StreamResult:
    decisions: list[Decision]
    thresholds: np.ndarray  # threshold in force at each decision
    achieved_ratio: float


def run_stream(token_counts, cfg: ControllerConfig, state: ControllerState | None = None) -> StreamResult:
    """Feed a count stream through the controller, one decision per count."""
    counts = list(token_counts)
    if not counts:
        raise ValueError("empty token-count stream")
    state = state or ControllerState.initial(cfg)
    decisions = []
    for c in counts:
        d = decide(state, int(c))
        decisions.append(d)
        record_and_update(state, d, cfg)
    half = sum(d.mode is PrecisionMode.HALF for d in decisions)
    return StreamResult(decisions, np.array([d.threshold for d in decisions], dtype=float),
                        half / len(decisions))


def percentile_threshold(token_counts, percentile: float) -> int:
    """Token count at a percentile of a stream: the static-threshold baseline."""
    return int(np.percentile(np.asarray(token_counts), percentile, method="lower"))
