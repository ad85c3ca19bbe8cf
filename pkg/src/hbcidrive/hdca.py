"""Hierarchical discriminant component analysis for EEG, pupil and gaze trials.

First level: a Fisher discriminant per EEG time bin (across components) and
per pupil bin, plus one for gaze time, all fitted on a training split.
Second level: the 16 first-level outputs are divided by their standard
deviation over an evaluation split and combined by L2-regularised logistic
regression (no intercept) fitted on that same evaluation split.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning, NotFittedError

from ._validation import as_target_mask, check_trial_matrix

FEATURE_NAMES = ([f"eeg{j + 1}" for j in range(9)]
                 + [f"pupil{j + 1}" for j in range(6)] + ["gaze"])
MODEL_VERSION = 1


class DegenerateFeatureError(ValueError):
    pass


def _default_ridge(S):
    S = np.atleast_2d(S)
    return 1e-6 * np.trace(S) / S.shape[0]


def flda_weights(pos, neg, ridge=None):
    """Fisher direction ``(S+ + S- + ridge*I)^-1 (mu+ - mu-)``.

    ``pos`` and ``neg`` are ``(n, d)`` (or ``(n,)`` for one feature) arrays of
    training trials. ``ridge=None`` uses ``1e-6 * trace / d`` of the pooled
    covariance.
    """
    pos = np.asarray(pos, dtype=float)
    neg = np.asarray(neg, dtype=float)
    if pos.ndim == 1:
        pos, neg = pos[:, None], neg[:, None]
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("need at least 2 trials per class")
    S = np.atleast_2d(np.cov(pos, rowvar=False)) + np.atleast_2d(np.cov(neg, rowvar=False))
    r = _default_ridge(S) if ridge is None else float(ridge)
    if r < 0:
        raise ValueError("ridge must be >= 0")
    diff = pos.mean(axis=0) - neg.mean(axis=0)
    A = S + r * np.eye(S.shape[0])
    try:
        w = np.linalg.solve(A, diff)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "pooled covariance is singular; use ridge > 0") from exc
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("pooled covariance is singular; use ridge > 0")
    return w


def within_bin_scores(w, x):
    """``w . x`` for every trial row of ``x``."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and w.size == 1:
        x = x[:, None]
    if x.shape[-1] != w.size:
        raise ValueError(f"weight length {w.size} does not match {x.shape[-1]} features")
    return x @ w.reshape(-1)


def rescale_features(raw, names=FEATURE_NAMES):
    """Divide each column by its SD (ddof=1); returns ``(scaled, sds)``."""
    raw = np.asarray(raw, dtype=float)
    sd = raw.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise DegenerateFeatureError(
            f"feature {names[bad[0]]!r} has zero spread over the evaluation trials")
    return raw / sd, sd


def logistic_objective(v, Z, c, lam):
    m = c * (Z @ v)
    return float(np.sum(np.logaddexp(0.0, -m)) + lam * v @ v)


def logistic_gradient(v, Z, c, lam):
    m = c * (Z @ v)
    # d/dm log(1 + e^-m) = -sigmoid(-m)
    s = 0.5 * (1.0 - np.tanh(0.5 * m))
    return -(Z.T @ (c * s)) + 2.0 * lam * v


@dataclass
class LogisticResult:
    v: np.ndarray
    grad_norm: float
    n_iter: int
    converged: bool


def logistic_train(Z, c, lam=10.0, tol=1e-6, max_iter=500):
    """Minimise ``sum log(1 + exp(-c z.v)) + lam ||v||^2`` by accelerated gradient descent.

    Uses the constant-momentum scheme for strongly convex objectives with
    step ``1/L``, ``L = lam_max(Z'Z)/4 + 2 lam`` and modulus ``2 lam``.
    Stops once the gradient max-norm drops below ``tol``.
    """
    Z = np.asarray(Z, dtype=float)
    c = np.asarray(c, dtype=float)
    if not (np.any(c > 0) and np.any(c < 0)):
        raise ValueError("both classes must be present")
    if not np.all(np.isfinite(Z)):
        raise ValueError("features must be finite")
    if lam <= 0:
        raise ValueError("lam must be positive")
    L = 0.25 * np.linalg.eigvalsh(Z.T @ Z)[-1] + 2.0 * lam
    mu = 2.0 * lam
    q = np.sqrt(mu / L)
    beta = (1.0 - q) / (1.0 + q)
    v = np.zeros(Z.shape[1])
    prev = v.copy()
    g = logistic_gradient(v, Z, c, lam)
    it = 0
    while np.max(np.abs(g)) >= tol and it < max_iter:
        y = v + beta * (v - prev)
        prev = v
        v = y - logistic_gradient(y, Z, c, lam) / L
        g = logistic_gradient(v, Z, c, lam)
        it += 1
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm < tol
    if not converged:
        warnings.warn(f"logistic regression stopped after {it} iterations with "
                      f"gradient max-norm {gnorm:.3g}", ConvergenceWarning, stacklevel=2)
    return LogisticResult(v, gnorm, it, converged)


def cross_bin_score(v, z):
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != v.size:
        raise ValueError(f"weight length {v.size} does not match {z.shape[-1]} features")
    return z @ v


def predict_targets(scores, truth=None, n_sd=1.0):
    """Flag scores above ``mean + n_sd * SD`` (ddof=1).

    Returns ``(mask, threshold, tpr, fpr)``; the rates are None without
    ``truth``.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        raise ValueError("need at least 2 scores")
    threshold = scores.mean() + n_sd * scores.std(ddof=1)
    mask = scores > threshold
    if truth is None:
        return mask, float(threshold), None, None
    truth = as_target_mask(truth)
    tpr = float(np.mean(mask[truth])) if truth.any() else 0.0
    fpr = float(np.mean(mask[~truth])) if (~truth).any() else 0.0
    return mask, float(threshold), tpr, fpr


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    evaluation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(map(int, s)) for s in (self.train, self.evaluation, self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split index sets must be disjoint")


def make_split(y, fractions=(0.4, 0.3, 0.3), seed=0):
    """Stratified train / evaluation / test index split."""
    y = as_target_mask(y)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for cls in (True, False):
        idx = rng.permutation(np.flatnonzero(y == cls))
        n = len(idx)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        for part, chunk in zip(parts, (idx[:a], idx[a:b], idx[b:])):
            if len(chunk) == 0 and fractions[parts.index(part)] > 0:
                raise ValueError("each class must be present in every split")
            part.append(chunk)
    return SplitSpec(*(np.sort(np.concatenate(p)) for p in parts))


class HDCA(ClassifierMixin, BaseEstimator):
    """Two-level EEG + pupil + gaze interest classifier.

    Parameters
    ----------
    lam : float, default 10
        L2 penalty of the cross-bin logistic regression.
    ridge : float or None
        Added to the pooled covariance of every Fisher discriminant; None
        uses ``1e-6 * trace / dim``.
    evaluation_fraction : float
        Share of the ``fit`` data held out as the evaluation split when no
        explicit ``split`` is passed (default 3/7, i.e. a 40/30 split).
    tol, max_iter : logistic optimiser stopping rule.
    random_state : int
        Seed of the internal train / evaluation split.

    Input rows follow :meth:`TrialSet.to_matrix`: 9 EEG bins of C
    components (bin-major), 6 pupil bin means, then gaze time.
    """

    def __init__(self, lam=10.0, ridge=None, evaluation_fraction=3 / 7, tol=1e-6,
                 max_iter=500, random_state=0, n_eeg_bins=9, n_pupil_bins=6):
        self.lam = lam
        self.ridge = ridge
        self.evaluation_fraction = evaluation_fraction
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state
        self.n_eeg_bins = n_eeg_bins
        self.n_pupil_bins = n_pupil_bins

    def _blocks(self, X):
        X = check_trial_matrix(X, self.n_eeg_bins, self.n_pupil_bins)
        n = X.shape[0]
        C = (X.shape[1] - self.n_pupil_bins - 1) // self.n_eeg_bins
        eeg = X[:, :self.n_eeg_bins * C].reshape(n, self.n_eeg_bins, C)
        pupil = X[:, self.n_eeg_bins * C:-1]
        return eeg, pupil, X[:, -1], C

    def fit(self, X, y, split=None):
        """Fit first-level discriminants on the train split, rescaling and
        cross-bin weights on the evaluation split.

        ``split`` may be a :class:`SplitSpec`; its test indices are ignored.
        """
        target = as_target_mask(y)
        eeg, pupil, gaze, C = self._blocks(X)
        if len(target) != len(gaze):
            raise ValueError("X and y have different lengths")
        if split is None:
            frac = self.evaluation_fraction
            split = make_split(target, (1 - frac, frac, 0.0), seed=self.random_state)
        tr, ev = np.asarray(split.train), np.asarray(split.evaluation)
        yt = target[tr]
        if yt.all() or not yt.any() or target[ev].all() or not target[ev].any():
            raise ValueError("both classes must appear in the train and evaluation splits")

        self.n_components_ = C
        self.eeg_w_ = np.stack([flda_weights(eeg[tr][yt, j], eeg[tr][~yt, j], self.ridge)
                                for j in range(self.n_eeg_bins)])
        self.pupil_w_ = np.array([flda_weights(pupil[tr][yt, j], pupil[tr][~yt, j],
                                               self.ridge)[0]
                                  for j in range(self.n_pupil_bins)])
        self.gaze_w_ = float(flda_weights(gaze[tr][yt], gaze[tr][~yt], self.ridge)[0])

        raw = self._first_level(eeg[ev], pupil[ev], gaze[ev])
        Z, self.rescale_ = rescale_features(raw, self._names())
        c = np.where(target[ev], 1.0, -1.0)
        fit = logistic_train(Z, c, self.lam, self.tol, self.max_iter)
        self.v_ = fit.v
        self.grad_norm_ = fit.grad_norm
        self.n_iter_ = fit.n_iter
        self.converged_ = fit.converged
        self.threshold_ = predict_targets(Z @ self.v_)[1]
        self.classes_ = np.array([0, 1])
        self.split_ = split
        return self

    def _names(self):
        return ([f"eeg{j + 1}" for j in range(self.n_eeg_bins)]
                + [f"pupil{j + 1}" for j in range(self.n_pupil_bins)] + ["gaze"])

    def _first_level(self, eeg, pupil, gaze):
        z_eeg = np.einsum("njc,jc->nj", eeg, self.eeg_w_)
        z_pupil = pupil * self.pupil_w_
        z_gaze = gaze[:, None] * self.gaze_w_
        return np.hstack([z_eeg, z_pupil, z_gaze])

    def _check_fitted(self):
        if not hasattr(self, "v_"):
            raise NotFittedError("HDCA instance is not fitted yet")

    def within_bin_outputs(self, X):
        """Unscaled first-level outputs, one column per feature."""
        self._check_fitted()
        eeg, pupil, gaze, C = self._blocks(X)
        if C != self.n_components_:
            raise ValueError(f"expected {self.n_components_} EEG components, got {C}")
        return self._first_level(eeg, pupil, gaze)

    def transform(self, X):
        """Rescaled second-level feature vectors ``z_i``."""
        return self.within_bin_outputs(X) / self.rescale_

    def decision_function(self, X):
        """Cross-bin interest score per trial."""
        Z = self.transform(X)
        return cross_bin_score(self.v_, Z)

    def predict(self, X):
        """1 for trials scoring more than one SD above the batch mean."""
        return predict_targets(self.decision_function(X))[0].astype(int)

    def predict_proba(self, X):
        s = self.decision_function(X)
        p = 0.5 * (1.0 + np.tanh(0.5 * s))
        return np.column_stack([1.0 - p, p])

    # plain-text persistence -------------------------------------------------

    def to_text(self):
        self._check_fitted()

        def fmt(a):
            return " ".join(repr(float(x)) for x in np.ravel(a))

        lines = [f"hdca-model {MODEL_VERSION}",
                 f"n_components {self.n_components_}",
                 f"n_eeg_bins {self.n_eeg_bins}",
                 f"n_pupil_bins {self.n_pupil_bins}",
                 f"lambda {float(self.lam)!r}",
                 f"ridge {'auto' if self.ridge is None else repr(float(self.ridge))}",
                 f"threshold {float(self.threshold_)!r}"]
        lines += [f"eeg_w {j + 1} {fmt(w)}" for j, w in enumerate(self.eeg_w_)]
        lines += [f"pupil_w {fmt(self.pupil_w_)}", f"gaze_w {fmt(self.gaze_w_)}",
                  f"rescale {fmt(self.rescale_)}", f"v {fmt(self.v_)}"]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0][0] != "hdca-model":
            raise ValueError("not an HDCA model file")
        if int(rows[0][1]) != MODEL_VERSION:
            raise ValueError(f"unsupported HDCA model version {rows[0][1]}")
        kv = {}
        eeg = []
        for r in rows[1:]:
            if r[0] == "eeg_w":
                eeg.append([float(x) for x in r[2:]])
            else:
                kv[r[0]] = r[1:]
        ridge = None if kv["ridge"][0] == "auto" else float(kv["ridge"][0])
        model = cls(lam=float(kv["lambda"][0]), ridge=ridge,
                    n_eeg_bins=int(kv["n_eeg_bins"][0]),
                    n_pupil_bins=int(kv["n_pupil_bins"][0]))
        model.n_components_ = int(kv["n_components"][0])
        model.threshold_ = float(kv["threshold"][0])
        model.eeg_w_ = np.array(eeg)
        model.pupil_w_ = np.array([float(x) for x in kv["pupil_w"]])
        model.gaze_w_ = float(kv["gaze_w"][0])
        model.rescale_ = np.array([float(x) for x in kv["rescale"]])
        model.v_ = np.array([float(x) for x in kv["v"]])
        model.classes_ = np.array([0, 1])
        return model

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())
