"""Synthetic stand-ins for recorded physiology and image descriptors.

Trials are class-conditional Gaussians: targets get a mean shift on the
P300 window of the EEG components, on the late pupil bins and on gaze dwell.
Object features are two Gaussian clusters whose centroid distance is given
in units of the within-cluster standard deviation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

N_EEG_BINS = 9      # 100 ms bins covering 100-1000 ms after fixation
N_PUPIL_BINS = 6    # 500 ms bins covering 0-3000 ms


@dataclass(frozen=True)
class SeparabilityConfig:
    """Class separation of generated trials.

    ``eeg_effect`` and ``pupil_effect`` are standardized mean shifts (in
    noise SDs); ``gaze_effect`` is extra dwell in seconds. Bin indices are
    0-based, so the default P300 window ``(2, 3, 4)`` is 300-600 ms.
    """

    eeg_effect: float = 0.0
    pupil_effect: float = 0.0
    gaze_effect: float = 0.0
    eeg_noise: float = 1.0
    pupil_noise: float = 1.0
    gaze_noise: float = 0.2
    gaze_mean: float = 1.0
    correlation: float = 0.0
    n_components: int = 16
    p300_bins: tuple[int, ...] = (2, 3, 4)
    pupil_bins: tuple[int, ...] = (2, 3, 4, 5)
    eeg_components: tuple[int, ...] = (0,)

    def __post_init__(self):
        if min(self.eeg_noise, self.pupil_noise, self.gaze_noise) <= 0:
            raise ValueError("noise scales must be positive")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if self.n_components < 1:
            raise ValueError("need at least one EEG component")


@dataclass(frozen=True)
class PhysioTrial:
    eeg: np.ndarray       # (9, C)
    pupil: np.ndarray     # (6,)
    gaze_time: float
    category: str


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Array-backed collection of trials; ``label`` is True for targets."""

    trial_id: np.ndarray
    eeg: np.ndarray       # (n, 9, C)
    pupil: np.ndarray     # (n, 6)
    gaze: np.ndarray      # (n,)
    label: np.ndarray

    def __len__(self):
        return len(self.label)

    def __getitem__(self, i):
        return PhysioTrial(self.eeg[i], self.pupil[i], float(self.gaze[i]),
                           "target" if self.label[i] else "nontarget")

    @property
    def n_components(self):
        return self.eeg.shape[2]

    def to_matrix(self):
        """Feature matrix ``[eeg bin-major (9*C), pupil (6), gaze]`` per row."""
        n = len(self)
        return np.hstack([self.eeg.reshape(n, -1), self.pupil, self.gaze[:, None]])

    def subset(self, idx):
        return TrialSet(self.trial_id[idx], self.eeg[idx], self.pupil[idx],
                        self.gaze[idx], self.label[idx])


def gen_trials(n, target_rate, sep=SeparabilityConfig(), seed=0):
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    label = rng.random(n) < target_rate
    return _draw(label, sep, rng)


def gen_trials_for(labels, sep=SeparabilityConfig(), seed=0, trial_id=None):
    """Trials for given classes, e.g. one per object an observer looked at."""
    label = np.asarray(labels, dtype=bool)
    if label.ndim != 1 or label.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    trials = _draw(label, sep, np.random.default_rng(seed))
    if trial_id is None:
        return trials
    return TrialSet(np.asarray(trial_id, dtype=int), trials.eeg, trials.pupil,
                    trials.gaze, trials.label)


def _draw(label, sep, rng):
    n = label.size
    C = sep.n_components
    shared = rng.standard_normal(n)
    a, b = np.sqrt(sep.correlation), np.sqrt(1.0 - sep.correlation)

    def noise(shape, sd):
        eps = rng.standard_normal((n, *shape))
        common = shared.reshape((n,) + (1,) * len(shape))
        return sd * (a * common + b * eps)

    eeg = noise((N_EEG_BINS, C), sep.eeg_noise)
    pupil = noise((N_PUPIL_BINS,), sep.pupil_noise)
    gaze = sep.gaze_mean + noise((), sep.gaze_noise)

    t = label.astype(float)
    for j in sep.p300_bins:
        for c in sep.eeg_components:
            eeg[:, j, c] += sep.eeg_effect * sep.eeg_noise * t
    for j in sep.pupil_bins:
        pupil[:, j] += sep.pupil_effect * sep.pupil_noise * t
    gaze = np.maximum(gaze + sep.gaze_effect * t, 0.0)
    return TrialSet(np.arange(n), eeg, pupil, gaze, label)


def trial_columns(n_components):
    cols = ["trial_id"]
    cols += [f"eeg_b{j + 1}_c{c + 1}" for j in range(N_EEG_BINS) for c in range(n_components)]
    cols += [f"pupil_b{j + 1}" for j in range(N_PUPIL_BINS)]
    return cols + ["gaze", "label"]


def write_trials_csv(trials, path):
    X = trials.to_matrix()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trial_columns(trials.n_components))
        for tid, row, lab in zip(trials.trial_id, X, trials.label):
            w.writerow([int(tid), *map(repr, row.tolist()), int(lab)])


def read_trials_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_feat = len(header) - 2
    C = (n_feat - N_PUPIL_BINS - 1) // N_EEG_BINS
    if header != trial_columns(C):
        raise ValueError(f"{path}: unexpected trial CSV header")
    data = np.array([[float(v) for v in r[1:-1]] for r in rows]).reshape(len(rows), n_feat)
    n = len(rows)
    eeg = data[:, :N_EEG_BINS * C].reshape(n, N_EEG_BINS, C)
    pupil = data[:, N_EEG_BINS * C:N_EEG_BINS * C + N_PUPIL_BINS]
    return TrialSet(np.array([int(r[0]) for r in rows], dtype=int), eeg, pupil,
                    data[:, -1], np.array([r[-1] == "1" for r in rows]))


@dataclass(frozen=True, eq=False)
class ObjectFeatureSet:
    object_id: np.ndarray
    vec: np.ndarray        # (n, D)
    category: np.ndarray   # True = target

    def __len__(self):
        return len(self.object_id)


def gen_object_features(n_objects, target_rate=0.25, cluster_sep=6.0, seed=0, dim=64):
    """Two isotropic unit-variance clusters ``cluster_sep`` SDs apart."""
    if n_objects < 4:
        raise ValueError("need at least 4 objects")
    rng = np.random.default_rng(seed)
    n_targets = int(round(target_rate * n_objects))
    category = np.zeros(n_objects, dtype=bool)
    category[:n_targets] = True
    rng.shuffle(category)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    vec = rng.standard_normal((n_objects, dim))
    vec[category] += cluster_sep * direction
    return ObjectFeatureSet(np.arange(n_objects), vec, category)


def write_objects_csv(objects, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = objects.vec.shape[1]
        w.writerow(["object_id", *[f"f{i + 1}" for i in range(dim)], "label"])
        for oid, row, lab in zip(objects.object_id, objects.vec, objects.category):
            w.writerow([int(oid), *map(repr, row.tolist()), int(lab)])


def read_objects_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if header[0] != "object_id" or header[-1] != "label":
        raise ValueError(f"{path}: unexpected object CSV header")
    vec = np.array([[float(v) for v in r[1:-1]] for r in rows]).reshape(len(rows), len(header) - 2)
    return ObjectFeatureSet(np.array([int(r[0]) for r in rows], dtype=int), vec,
                            np.array([r[-1] == "1" for r in rows]))
