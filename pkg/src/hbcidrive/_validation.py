"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def as_target_mask(y):
    """Boolean target mask from labels given as bool, {0, 1}, {-1, +1} or strings."""
    y = np.asarray(y)
    if y.dtype.kind in "US":
        return y == "target"
    if y.dtype == bool:
        return y
    vals = set(np.unique(y).tolist())
    if not vals <= {0, 1, -1}:
        raise ValueError(f"labels must be binary, got values {sorted(vals)}")
    return y > 0


def check_trial_matrix(X, n_eeg_bins=9, n_pupil_bins=6):
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    extra = X.shape[1] - n_pupil_bins - 1
    if extra < n_eeg_bins or extra % n_eeg_bins:
        raise ValueError(
            f"trial rows need {n_eeg_bins}*C EEG values, {n_pupil_bins} pupil bins "
            f"and a gaze time; got {X.shape[1]} columns")
    return X


def check_features(X):
    return check_array(X, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=2)
