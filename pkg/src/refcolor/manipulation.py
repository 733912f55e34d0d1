"""Zero-shot text-based editing of token sets.

Global manipulation rewrites the CLS token through projections onto target
and anchor text embeddings; local manipulation adjusts each local token by a
piecewise-linear weight derived from its correlation with a control text.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, ShapeError
from .tokens import TextEmbedding, TokenSet

DEFAULT_THRESHOLDS = (0.5, 0.55, 0.65, 0.95)
DEFAULT_STRENGTH = 2.0
# Recommended target_scale range for visible-but-stable edits; not enforced.
RECOMMENDED_SCALE_RANGE = (4.0, 15.0)


@dataclass
class GlobalStep:
    """One CLS-token edit: target text, optional anchor, scale, enhance flag."""

    target: TextEmbedding
    anchor: Optional[TextEmbedding] = None
    target_scale: float = 8.0
    enhance: bool = False

    def __post_init__(self):
        if not np.isfinite(self.target_scale):
            raise ParameterError("target_scale must be finite")


@dataclass
class LocalStep:
    """One local-token edit: adds a control text, thresholds, and strength."""

    target: TextEmbedding
    control: TextEmbedding
    anchor: Optional[TextEmbedding] = None
    target_scale: float = 8.0
    enhance: bool = False
    thresholds: tuple[float, float, float, float] = DEFAULT_THRESHOLDS
    strength: float = DEFAULT_STRENGTH

    def __post_init__(self):
        validate_thresholds(self.thresholds)
        if self.strength <= 0:
            raise ParameterError(f"strength must be > 0, got {self.strength}")
        if self.enhance and self.anchor is None:
            raise ParameterError("enhance requires an anchor text")


def validate_thresholds(ts) -> tuple[float, float, float, float]:
    ts = tuple(float(v) for v in ts)
    if len(ts) != 4:
        raise ParameterError(f"need 4 thresholds, got {len(ts)}")
    if not (0.0 <= ts[0] < ts[1] < ts[2] < ts[3] <= 1.0):
        raise ParameterError(f"thresholds must satisfy 0 <= ts0 < ts1 < ts2 < ts3 <= 1, got {ts}")
    return ts


# ---------------------------------------------------------------------------
# Global manipulation
# ---------------------------------------------------------------------------

def manipulate_global(cls: np.ndarray, steps: Sequence[GlobalStep]) -> np.ndarray:
    """Apply sequential global steps to a CLS vector.

    Per step: with an anchor and enhance, first remove the anchor component,
    then set the projection on the target to target_scale; with an anchor and
    no enhance, add target_scale * (e - a); without an anchor, enhance adds
    target_scale * e while no-enhance sets the projection to target_scale.
    """
    v = np.asarray(cls, dtype=np.float64).copy()
    if v.ndim != 1:
        raise ShapeError(f"cls must be a vector, got shape {v.shape}")
    for step in steps:
        e = step.target.vec
        if e.shape != v.shape:
            raise ShapeError(f"target dim {e.shape[0]} != cls dim {v.shape[0]}")
        scale = float(step.target_scale)
        if step.anchor is not None:
            a = step.anchor.vec
            if a.shape != v.shape:
                raise ShapeError(f"anchor dim {a.shape[0]} != cls dim {v.shape[0]}")
            if step.enhance:
                v = v - (v @ a) * a
                v = v + (scale - v @ e) * e
            else:
                v = v + scale * (e - a)
        else:
            if step.enhance:
                v = v + scale * e
            else:
                v = v + (scale - v @ e) * e
    return v


# ---------------------------------------------------------------------------
# Position weight vectors
# ---------------------------------------------------------------------------

def compute_m(tokens: TokenSet, control: TextEmbedding) -> np.ndarray:
    """Min-max normalized projections of the local tokens onto a control text.

    Constant projections map to an all-0.5 vector, placing every token in the
    neutral interval.
    """
    if tokens.dim != control.dim:
        raise ShapeError(f"token dim {tokens.dim} != control dim {control.dim}")
    raw = tokens.locals.astype(np.float64) @ control.vec
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def compute_d(cls: np.ndarray, e: TextEmbedding, a: Optional[TextEmbedding],
              target_scale: float, enhance: bool) -> float:
    """Edit magnitude: target_scale minus the CLS projection on the anchor
    (enhance) or the target (otherwise); without an anchor it is target_scale."""
    v = np.asarray(cls, dtype=np.float64)
    if a is None:
        if enhance:
            raise ParameterError("enhance requires an anchor text")
        return float(target_scale)
    if enhance:
        return float(target_scale - v @ a.vec)
    return float(target_scale - v @ e.vec)


def compute_omega(m: np.ndarray, d: float, ts=DEFAULT_THRESHOLDS,
                  r: float = DEFAULT_STRENGTH) -> np.ndarray:
    """Five-interval piecewise-linear weight map over m in [0, 1].

    Continuous, with knots omega(ts0) = -d*r, omega(ts1) = 0,
    omega(ts2) = 0.5*d, omega(ts3) = d. Boundary membership uses the
    closed-left convention (m <= ts_k belongs to the lower branch).
    """
    ts0, ts1, ts2, ts3 = validate_thresholds(ts)
    if r <= 0:
        raise ParameterError(f"strength r must be > 0, got {r}")
    m = np.asarray(m, dtype=np.float64)
    branches = [
        -d * r * np.ones_like(m),
        -d * r + d * r * (m - ts0) / (ts1 - ts0),
        0.5 * d * (m - ts1) / (ts2 - ts1),
        0.5 * d + 0.5 * d * (m - ts2) / (ts3 - ts2),
        d * np.ones_like(m),
    ]
    conds = [m <= ts0,
             (m > ts0) & (m <= ts1),
             (m > ts1) & (m <= ts2),
             (m > ts2) & (m <= ts3),
             m > ts3]
    return np.select(conds, branches)


def manipulate_local(tokens: TokenSet, steps: Sequence[LocalStep]) -> TokenSet:
    """Apply sequential local steps to the local tokens; CLS is read, never written.

    Per step: m from the control text, d from the CLS token, omega from the
    piecewise map, then locals += (omega + beta * (locals . a)) * (e - a) with
    an anchor (beta = 1 if enhance else 0) or locals += omega * e without one.
    """
    locals_v = tokens.locals.astype(np.float64).copy()
    cls_v = tokens.cls.astype(np.float64)
    for step in steps:
        e = step.target.vec
        if e.shape[0] != locals_v.shape[1]:
            raise ShapeError(f"target dim {e.shape[0]} != token dim {locals_v.shape[1]}")
        m = compute_m(TokenSet(cls_v, locals_v, tokens.grid), step.control)
        if step.anchor is not None:
            a = step.anchor.vec
            d = compute_d(cls_v, step.target, step.anchor, step.target_scale, step.enhance)
            omega = compute_omega(m, d, step.thresholds, step.strength)
            beta = 1.0 if step.enhance else 0.0
            coeff = omega + beta * (locals_v @ a)
            locals_v = locals_v + coeff[:, None] * (e - a)[None, :]
        else:
            if step.enhance:
                raise ParameterError("enhance requires an anchor text")
            d = compute_d(cls_v, step.target, None, step.target_scale, step.enhance)
            omega = compute_omega(m, d, step.thresholds, step.strength)
            locals_v = locals_v + omega[:, None] * e[None, :]
    return TokenSet(tokens.cls.copy(), locals_v, tokens.grid)


def dscale(tokens_a: TokenSet, tokens_b: TokenSet, text: TextEmbedding) -> np.ndarray:
    """Per-token projection difference between two token sets along a text."""
    if tokens_a.grid != tokens_b.grid or tokens_a.dim != tokens_b.dim:
        raise ShapeError("token sets must share grid and dimension")
    return (tokens_a.locals.astype(np.float64) - tokens_b.locals.astype(np.float64)) @ text.vec


# ---------------------------------------------------------------------------
# Step-file serialization (text-level, shared by CLI, service, and studio)
# ---------------------------------------------------------------------------

STEP_FILE_VERSION = 1


@dataclass
class StepSpec:
    """Text-level description of a step, resolvable against a text encoder."""

    kind: str                       # "global" | "local"
    target: str
    anchor: Optional[str] = None
    control: Optional[str] = None
    target_scale: float = 8.0
    enhance: bool = False
    thresholds: tuple[float, float, float, float] = DEFAULT_THRESHOLDS
    strength: float = DEFAULT_STRENGTH

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ParameterError(f"step kind must be 'global' or 'local', got {self.kind!r}")
        if self.kind == "local" and not self.control:
            raise ParameterError("local steps need a control text")
        if self.enhance and self.anchor is None:
            raise ParameterError("enhance requires an anchor text")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target, "anchor": self.anchor,
             "target_scale": self.target_scale, "enhance": self.enhance}
        if self.kind == "local":
            d.update(control=self.control, thresholds=list(self.thresholds),
                     strength=self.strength)
        return d

    @staticmethod
    def from_dict(d: dict) -> "StepSpec":
        return StepSpec(kind=d["kind"], target=d["target"], anchor=d.get("anchor"),
                        control=d.get("control"),
                        target_scale=float(d.get("target_scale", 8.0)),
                        enhance=bool(d.get("enhance", False)),
                        thresholds=tuple(d.get("thresholds", DEFAULT_THRESHOLDS)),
                        strength=float(d.get("strength", DEFAULT_STRENGTH)))


def save_steps(path, specs: Sequence[StepSpec]):
    payload = {"version": STEP_FILE_VERSION, "steps": [s.to_dict() for s in specs]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_steps(path) -> list[StepSpec]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [StepSpec.from_dict(d) for d in payload["steps"]]


def resolve_steps(specs: Sequence[StepSpec], embed) -> list[Union[GlobalStep, LocalStep]]:
    """Turn text-level specs into executable steps via an embed(str) callable."""
    steps: list[Union[GlobalStep, LocalStep]] = []
    for s in specs:
        target = embed(s.target)
        anchor = embed(s.anchor) if s.anchor else None
        if s.kind == "global":
            steps.append(GlobalStep(target, anchor, s.target_scale, s.enhance))
        else:
            steps.append(LocalStep(target, embed(s.control), anchor, s.target_scale,
                                   s.enhance, tuple(s.thresholds), s.strength))
    return steps


def apply_steps(tokens: TokenSet, steps: Sequence[Union[GlobalStep, LocalStep]]) -> TokenSet:
    """Run a mixed global/local step sequence in order."""
    out = tokens.copy()
    for step in steps:
        if isinstance(step, GlobalStep):
            out = TokenSet(manipulate_global(out.cls, [step]), out.locals, out.grid)
        elif isinstance(step, LocalStep):
            out = manipulate_local(out, [step])
        else:
            raise ParameterError(f"unknown step type {type(step).__name__}")
    return out


def partition_intervals(m: np.ndarray, ts=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Interval index (0..4) of each m value under the closed-left convention."""
    ts0, ts1, ts2, ts3 = validate_thresholds(ts)
    m = np.asarray(m, dtype=np.float64)
    idx = np.zeros(m.shape, dtype=np.int64)
    idx[m > ts0] = 1
    idx[m > ts1] = 2
    idx[m > ts2] = 3
    idx[m > ts3] = 4
    return idx
