"""Transductive annotation by graph.

A kNN similarity graph over all objects' feature vectors is used to clean up
the set of neurally predicted targets (swap weakly connected members for
strongly connected outsiders), to spread that set's membership over the
whole graph by a random walk with restart, and finally to cut the resulting
scores with a two-Gaussian mixture.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.stats import norm
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import as_target_mask, check_features
from .metrics import rates


class PropagationError(RuntimeError):
    pass


class GmmError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    """Symmetric sparse weight matrix with zero diagonal."""

    weights: sparse.csr_matrix
    k: int
    bandwidth: np.ndarray

    @property
    def n(self):
        return self.weights.shape[0]

    @property
    def degree(self):
        return np.asarray(self.weights.sum(axis=1)).ravel()

    def edges(self):
        """Upper-triangle ``(i, j, w)`` triples in row-major order."""
        upper = sparse.triu(self.weights, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return list(zip(upper.row[order].tolist(), upper.col[order].tolist(),
                        upper.data[order].tolist()))

    def is_connected(self):
        return connected_components(self.weights, directed=False)[0] == 1


def default_k(n):
    return int(math.ceil(math.log2(n))) + 1


def _knn_graph(D, k):
    n = len(D)
    off = D + np.diag(np.full(n, np.inf))
    ordered = np.sort(off, axis=1)
    kth = ordered[:, k - 1]
    sigma = ordered[:, int(math.ceil(k / 2)) - 1].copy()
    zero = sigma <= 0
    if zero.any():
        finite = off[np.isfinite(off)]
        med = float(np.median(finite)) if finite.size else 0.0
        sigma[zero] = med if med > 0 else 1.0
    # ties at the k-th distance are all kept, so identical points form a clique
    mask = off <= kth[:, None]
    mask = mask | mask.T
    W = np.where(mask, np.exp(-D ** 2 / np.outer(sigma, sigma)), 0.0)
    np.fill_diagonal(W, 0.0)
    return sparse.csr_matrix(W), sigma


def build_graph(features, k=None, max_doublings=10):
    """Gaussian-kernel kNN graph with per-node adaptive bandwidths.

    ``w_ij = exp(-d_ij^2 / (s_i s_j))`` where ``s_i`` is the distance to the
    ``ceil(k/2)``-th neighbour of ``i``. An edge is kept when either end
    has the other among its ``k`` nearest neighbours. ``k`` defaults to
    ``ceil(log2 n) + 1`` and is doubled until the graph is connected.
    """
    X = check_features(features)
    n = len(X)
    k = default_k(n) if k is None else int(k)
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    D = cdist(X, X)
    for _ in range(max_doublings + 1):
        W, sigma = _knn_graph(D, k)
        graph = SimilarityGraph(W, k, sigma)
        if graph.is_connected() or k >= n - 1:
            return graph
        k = min(2 * k, n - 1)
    return graph


def connectivity(graph, members):
    """``c(i) = sum_{j in S, j != i} w_ij`` for every node ``i``."""
    y = np.zeros(graph.n)
    y[np.asarray(list(members), dtype=int)] = 1.0
    return graph.weights @ y


@dataclass(frozen=True)
class TunedSet:
    members: frozenset
    swaps: list = field(default_factory=list)   # (removed, added)

    def __len__(self):
        return len(self.members)

    def indicator(self, n):
        y = np.zeros(n, dtype=bool)
        y[sorted(self.members)] = True
        return y


def tune_labels(graph, predicted, max_swaps=None):
    """Swap the least connected member for the best connected outsider.

    A swap is made only when it raises the set's total internal
    connectivity, i.e. when ``c(n) - w_nm > c(m)``; the loop stops at the
    first non-improving step or after ``max_swaps`` swaps (default |S|).
    """
    S = set(int(i) for i in predicted)
    if not 0 < len(S) < graph.n:
        raise ValueError("predicted set must be non-empty and smaller than the graph")
    max_swaps = len(S) if max_swaps is None else int(max_swaps)
    W = graph.weights
    inside = np.zeros(graph.n, dtype=bool)
    inside[list(S)] = True
    c = W @ inside.astype(float)
    swaps = []
    for _ in range(max_swaps):
        # lowest index wins ties on both sides
        cm = np.where(inside, c, np.inf)
        cn = np.where(inside, -np.inf, c)
        m = int(np.argmin(cm))
        nn_ = int(np.argmax(cn))
        if not cn[nn_] - W[nn_, m] > cm[m]:
            break
        inside[m], inside[nn_] = False, True
        c += W[:, [nn_]].toarray().ravel() - W[:, [m]].toarray().ravel()
        swaps.append((m, nn_))
    return TunedSet(frozenset(np.flatnonzero(inside).tolist()), swaps)


@dataclass
class Propagation:
    scores: np.ndarray
    residuals: list
    n_iter: int


def propagate(graph, tuned, alpha=0.15, tol=1e-8, max_iter=1000, return_history=False):
    """Random walk with restart to the tuned set.

    Iterates ``s <- (1 - alpha) W D^-1 s + alpha y`` from ``s = y`` where
    ``y`` is the member indicator normalised to sum 1, until the largest
    change is below ``tol``. Scores are nonnegative and sum to 1.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    members = tuned.members if isinstance(tuned, TunedSet) else set(tuned)
    if not members:
        raise ValueError("tuned set is empty")
    n = graph.n
    y = np.zeros(n)
    y[sorted(members)] = 1.0
    y /= y.sum()
    deg = graph.degree
    if np.any(deg <= 0):
        raise ValueError("graph has isolated nodes")
    P = graph.weights @ sparse.diags(1.0 / deg)
    s = y.copy()
    history = []
    for it in range(1, max_iter + 1):
        new = (1.0 - alpha) * (P @ s) + alpha * y
        delta = new - s
        history.append(float(np.abs(delta).sum()))
        s = new
        if np.max(np.abs(delta)) < tol:
            break
    else:
        raise PropagationError(
            f"propagation did not converge in {max_iter} iterations "
            f"(residual {np.max(np.abs(delta)):.3g})")
    result = Propagation(s, history, it)
    return result if return_history else s


@dataclass(frozen=True)
class GmmFit:
    pi: tuple
    mu: tuple
    sigma: tuple
    cutoff: float
    log_likelihood: tuple = ()
    cutoff_exact: bool = True

    def to_text(self):
        lines = ["{"]
        for i in range(2):
            lines.append(f'  "component{i + 1}": {{"pi": {self.pi[i]!r}, '
                         f'"mu": {self.mu[i]!r}, "sigma": {self.sigma[i]!r}}},')
        lines.append(f'  "cutoff": {self.cutoff!r},')
        lines.append(f'  "cutoff_exact": {"true" if self.cutoff_exact else "false"},')
        lines.append(f'  "iterations": {len(self.log_likelihood)}')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _em(x, mu, sigma, pi, tol, max_iter, tied=False):
    lls = []
    for _ in range(max_iter):
        logp = np.log(pi) + norm.logpdf(x[:, None], mu, sigma)
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        ll = float(lse.sum())
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            return None, lls
        pi = nk / len(x)
        mu = (resp * x[:, None]).sum(axis=0) / nk
        sq = (resp * (x[:, None] - mu) ** 2).sum(axis=0)
        sigma = np.full(2, np.sqrt(sq.sum() / len(x))) if tied else np.sqrt(sq / nk)
        if np.any(sigma < 1e-12):
            return None, lls
        converged = bool(lls) and abs(ll - lls[-1]) < tol
        lls.append(ll)
        if converged:
            break
    return (pi, mu, sigma), lls


def _log_ratio(x, pi, mu, sigma):
    return (np.log(pi[0]) + norm.logpdf(x, mu[0], sigma[0])
            - np.log(pi[1]) - norm.logpdf(x, mu[1], sigma[1]))


def gmm_cutoff(pi, mu, sigma, xtol=1e-10):
    """Crossing of the two weighted densities between the means.

    Returns ``(cutoff, exact)``; when the densities do not cross inside
    ``(mu1, mu2)`` the point of smallest log-density gap is returned with
    ``exact=False``.
    """
    lo, hi = float(mu[0]), float(mu[1])
    flo, fhi = _log_ratio(lo, pi, mu, sigma), _log_ratio(hi, pi, mu, sigma)
    if flo > 0 > fhi:
        while hi - lo > xtol * max(1.0, abs(lo), abs(hi)):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if _log_ratio(mid, pi, mu, sigma) > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi), True
    grid = np.linspace(mu[0], mu[1], 1003)[1:-1]
    return float(grid[np.argmin(np.abs(_log_ratio(grid, pi, mu, sigma)))]), False


def fit_gmm2(scores, tol=1e-9, max_iter=500, max_restarts=5, seed=0, tied=False):
    """Two-component 1-D Gaussian mixture by EM, components sorted by mean.

    ``tied=True`` shares one standard deviation between the components,
    which keeps a skewed majority group from being split into a narrow
    core plus a broad tail.
    """
    x = np.asarray(scores, dtype=float).ravel()
    if np.unique(x).size < 4:
        raise ValueError("need at least 4 distinct scores")
    # two-means refinement of a split at the median
    thr = np.median(x)
    for _ in range(100):
        new = 0.5 * (x[x <= thr].mean() + x[x > thr].mean())
        if new == thr or not (x > new).any():
            break
        thr = new
    lo, hi = x[x <= thr], x[x > thr]
    mu = np.array([lo.mean(), hi.mean()])
    sigma = np.array([max(lo.std(), 1e-6 * x.std()), max(hi.std(), 1e-6 * x.std())])
    pi = np.array([len(lo), len(hi)], dtype=float) / len(x)
    rng = np.random.default_rng(seed)
    for _ in range(max_restarts + 1):
        if tied:
            sigma = np.full(2, np.sqrt(np.sum(pi * sigma ** 2)))
        params, lls = _em(x, mu, sigma, pi, tol, max_iter, tied)
        if params is not None:
            break
        mu = np.sort(rng.choice(x, 2, replace=False)) + rng.normal(0, 0.1 * x.std(), 2)
        sigma = np.full(2, x.std())
        pi = np.array([0.5, 0.5])
    else:
        raise GmmError("mixture component collapsed on every restart")
    pi, mu, sigma = params
    order = np.argsort(mu)
    pi, mu, sigma = pi[order], mu[order], sigma[order]
    cutoff, exact = gmm_cutoff(pi, mu, sigma)
    if not exact:
        warnings.warn("mixture densities do not cross between the means; "
                      "using the closest approach", RuntimeWarning, stacklevel=2)
    return GmmFit(tuple(map(float, pi)), tuple(map(float, mu)), tuple(map(float, sigma)),
                  float(cutoff), tuple(lls), exact)


def cv_scores(graph, scores, tuned=None, alpha=0.15):
    """Log of the mass each node receives from its neighbours per unit degree.

    Raw walk scores grow with degree, so hubs far from the tuned set can
    outscore weakly connected members; dividing by the degree removes that
    bias. The restart share ``alpha * y`` of tuned members is subtracted
    first so that they do not form a separate high mode. The log makes the
    two groups roughly Gaussian.
    """
    received = np.array(scores, dtype=float)
    if tuned is not None:
        members = sorted(tuned.members if isinstance(tuned, TunedSet) else tuned)
        received[members] -= alpha / len(members)
    ratio = received / graph.degree
    return np.log(np.maximum(ratio, np.finfo(float).tiny))


@dataclass
class LabelResult:
    labels: np.ndarray           # True = target
    tpr: float | None
    fpr: float | None
    f1: float | None


def cv_predicted_targets(scores, fit, truth=None):
    """Objects scoring above the mixture cutoff are labelled targets."""
    labels = np.asarray(scores, dtype=float) > fit.cutoff
    if truth is None:
        return LabelResult(labels, None, None, None)
    tpr, fpr, f1 = rates(labels, as_target_mask(truth))
    return LabelResult(labels, tpr, fpr, f1)


class TransductiveTagger(ClassifierMixin, BaseEstimator):
    """Graph-based label extrapolation from a few neurally flagged objects.

    ``fit(X, predicted)`` takes every object's feature vector and the
    indices (or a boolean mask) of objects flagged as targets; it builds
    the graph, tunes the flagged set, propagates it and fits the mixture
    cutoff. Since the method is transductive, ``predict`` only accepts the
    training matrix.
    """

    def __init__(self, k=None, alpha=0.15, max_swaps=None, tol=1e-8, max_iter=1000,
                 tied=True):
        self.k = k
        self.tied = tied
        self.alpha = alpha
        self.max_swaps = max_swaps
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, predicted):
        X = check_features(X)
        predicted = np.asarray(predicted)
        if predicted.dtype == bool:
            predicted = np.flatnonzero(predicted)
        self.graph_ = build_graph(X, self.k)
        self.tuned_ = tune_labels(self.graph_, predicted, self.max_swaps)
        prop = propagate(self.graph_, self.tuned_, self.alpha, self.tol, self.max_iter,
                         return_history=True)
        self.walk_scores_ = prop.scores
        self.scores_ = cv_scores(self.graph_, prop.scores, self.tuned_, self.alpha)
        self.residuals_ = prop.residuals
        self.gmm_ = fit_gmm2(self.scores_, tied=self.tied)
        self.labels_ = self.scores_ > self.gmm_.cutoff
        self.classes_ = np.array([0, 1])
        self._X = X
        return self

    def _check_same(self, X):
        X = check_features(X)
        if X.shape != self._X.shape or not np.array_equal(X, self._X):
            raise ValueError("transductive model only labels the objects it was fitted on")

    def decision_function(self, X):
        self._check_same(X)
        return self.scores_

    def predict(self, X):
        self._check_same(X)
        return self.labels_.astype(int)

    def fit_predict(self, X, predicted):
        return self.fit(X, predicted).labels_.astype(int)


def write_edges_csv(graph, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "w"])
        for i, j, wt in graph.edges():
            w.writerow([i, j, repr(float(wt))])


def write_labels_csv(object_ids, scores, labels, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "cv_score", "label"])
        for oid, s, lab in zip(object_ids, scores, labels):
            w.writerow([int(oid), repr(float(s)), "target" if lab else "nontarget"])


def read_labels_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if rows and set(rows[0]) != {"object_id", "cv_score", "label"}:
        raise ValueError(f"{path}: unexpected label CSV header")
    ids = np.array([int(r["object_id"]) for r in rows], dtype=int)
    labels = np.array([r["label"] == "target" for r in rows])
    return ids, labels
