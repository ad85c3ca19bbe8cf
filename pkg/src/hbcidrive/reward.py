"""Hybrid reward: gap-keeping term plus stochastic interest terms per visible object."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .metrics import f1_from_rates


@dataclass(frozen=True)
class SubjectProfile:
    """Labeler quality of one subject; drives the stochastic interest reward."""

    tpr: float
    fpr: float
    name: str = "custom"

    def __post_init__(self):
        if not (0.0 <= self.tpr <= 1.0 and 0.0 <= self.fpr <= 1.0):
            raise ValueError("tpr and fpr must lie in [0, 1]")

    @property
    def f1(self):
        return f1_from_rates(self.tpr, self.fpr)


# per-subject (TPR, FPR, reported F1) of the hBCI+TAG labeler
TABLE1 = {
    1: (0.8343, 0.0125, 0.8896),
    2: (0.9823, 0.9495, 0.4306),
    3: (1.0000, 0.0063, 0.9901),
    4: (0.8745, 0.0115, 0.9182),
    5: (0.8454, 0.0077, 0.9036),
    6: (0.8783, 0.0074, 0.9248),
    7: (0.8257, 0.0177, 0.8802),
    8: (1.0000, 0.9905, 0.4008),
    9: (0.7793, 0.0070, 0.8668),
    10: (0.6250, 0.0269, 0.7324),
}

CONTROL = SubjectProfile(0.5, 0.5, name="control")


def subject_preset(key):
    """Resolve ``1``..``10``, ``"control"`` or ``"[custom:]tpr,fpr"`` into a profile."""
    if isinstance(key, SubjectProfile):
        return key
    text = str(key).strip().lower()
    if text.startswith("custom"):
        text = text[len("custom"):].lstrip(" :=")
    if text == "control":
        return CONTROL
    if "," in text:
        tpr, fpr = (float(v) for v in text.split(","))
        return SubjectProfile(tpr, fpr)
    idx = int(text)
    if idx not in TABLE1:
        raise ValueError(f"no subject preset {key!r}; choose 1-10, control or 'tpr,fpr'")
    tpr, fpr, _ = TABLE1[idx]
    return SubjectProfile(tpr, fpr, name=f"subject{idx}")


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    squash: object = None  # callable applied to the weighted sum; None = identity


def r1(d, min_gap=5.0, max_gap=60.0):
    """+1 while the gap is strictly inside the bounds, -10 otherwise."""
    return 1.0 if min_gap < d < max_gap else -10.0


def r2(wvd_a, omega, tpr):
    """Reward for a visible true target: +3 when classified as target, else -1."""
    if not wvd_a:
        return 0.0
    # omega == tpr is measure-zero; it falls on the +3 branch
    return 3.0 if omega <= tpr and tpr > 0 else -1.0


def r3(wvd_b, omega, fpr):
    """Reward for a visible true nontarget: +3 on a false positive, else -1."""
    if not wvd_b:
        return 0.0
    return 3.0 if omega <= fpr and fpr > 0 else -1.0


def combine(r1_value, r2_sum, r3_sum, weights=RewardWeights()):
    total = weights.w1 * r1_value + weights.w2 * r2_sum + weights.w3 * r3_sum
    return weights.squash(total) if weights.squash is not None else total


class OmegaPolicy:
    """Uniform classification draws for visible objects.

    With ``per_encounter=True`` an object keeps one draw for as long as it
    stays in view and gets a fresh one when it re-enters; otherwise every
    frame draws anew.
    """

    def __init__(self, rng, per_encounter=True):
        self.rng = rng
        self.per_encounter = per_encounter
        self._cache = {}

    def draws(self, visible_ids):
        """Return ``{object_id: omega}`` for the objects visible this frame."""
        visible_ids = [int(i) for i in visible_ids]
        if not self.per_encounter:
            self._cache = {}
        fresh = {}
        for oid in visible_ids:
            fresh[oid] = self._cache[oid] if oid in self._cache else self.rng.random()
        self._cache = fresh
        return dict(fresh)


@dataclass(frozen=True)
class RewardBreakdown:
    r1: float
    r2_sum: float
    r3_sum: float
    total: float


def frame_reward(d, events, omegas, subject, weights=RewardWeights(),
                 min_gap=5.0, max_gap=60.0):
    """Sum per-object interest terms within a frame, then weight and combine."""
    base = r1(d, min_gap, max_gap)
    s2 = s3 = 0.0
    for ev in events:
        w = omegas[ev.object_id]
        if ev.kind == "WVD_a":
            s2 += r2(True, w, subject.tpr)
        else:
            s3 += r3(True, w, subject.fpr)
    return RewardBreakdown(base, s2, s3, combine(base, s2, s3, weights))


def write_breakdown_csv(rows, path):
    """``rows`` are ``(step, RewardBreakdown)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "r1", "r2_sum", "r3_sum", "R"])
        for stepno, b in rows:
            w.writerow([stepno, b.r1, b.r2_sum, b.r3_sum, b.total])


def expected_r2(tpr):
    return 4.0 * tpr - 1.0


def expected_r3(fpr):
    return 4.0 * fpr - 1.0
