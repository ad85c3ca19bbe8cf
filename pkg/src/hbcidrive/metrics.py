"""Dwell times, run-time / Q-value summaries, classifier metrics and report output."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

CATEGORIES = ("target", "nontarget", "empty")


def f1_from_rates(tpr, fpr, prevalence=0.25, return_flag=False):
    """F1 score implied by a labeler's TPR/FPR at a given target prevalence.

    Precision is ``tpr*p / (tpr*p + fpr*(1-p))`` and recall is ``tpr``. When
    both rates are zero F1 is undefined; 0.0 is returned and, with
    ``return_flag=True``, the flag is set.
    """
    for name, v in (("tpr", tpr), ("fpr", fpr), ("prevalence", prevalence)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    p = prevalence
    hits = tpr * p
    predicted = hits + fpr * (1.0 - p)
    undefined = predicted == 0 or tpr == 0
    if undefined:
        return (0.0, True) if return_flag else 0.0
    precision = hits / predicted
    f1 = 2 * precision * tpr / (precision + tpr)
    return (f1, False) if return_flag else f1


def rates(predicted, truth):
    """(TPR, FPR, F1) of boolean predictions against boolean ground truth."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = np.sum(predicted & truth)
    fp = np.sum(predicted & ~truth)
    fn = np.sum(~predicted & truth)
    pos, neg = truth.sum(), (~truth).sum()
    tpr = tp / pos if pos else 0.0
    fpr = fp / neg if neg else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) else 0.0
    return float(tpr), float(fpr), float(f1)


class DwellTracker:
    """Accumulate in-view intervals per object and per empty alley during an episode."""

    def __init__(self, world, config):
        self.dt = config.sim_dt
        self.radius = config.visual_radius
        self.positions = np.concatenate([world.position, world.empty_alley_position])
        cats = np.where(world.true_category, 0, 1)
        self.kind = np.concatenate([cats, np.full(len(world.empty_alley_position), 2)])
        self.current = np.zeros(len(self.positions))
        self.samples = {c: [] for c in CATEGORIES}

    def update(self, passenger_position):
        inside = np.abs(self.positions - passenger_position) <= self.radius
        self.current[inside] += self.dt
        ended = ~inside & (self.current > 0)
        self._flush(ended)

    def _flush(self, mask):
        for k in np.flatnonzero(mask):
            self.samples[CATEGORIES[self.kind[k]]].append(round(self.current[k], 9))
            self.current[k] = 0.0

    def close(self):
        self._flush(self.current > 0)
        return self.samples


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    run_time_s: float
    total_reward: float
    terminal_cause: str
    dwell: dict = field(default_factory=dict)   # category -> per-interval seconds

    def mean_dwell(self, category):
        vals = self.dwell.get(category, [])
        return float(np.mean(vals)) if vals else float("nan")

    def row(self):
        return {
            "episode": self.episode,
            "steps": self.steps,
            "run_time_s": _fmt(self.run_time_s),
            "total_reward": _fmt(self.total_reward),
            "terminal_cause": self.terminal_cause,
            "dwell_target_s": _fmt(self.mean_dwell("target")),
            "dwell_nontarget_s": _fmt(self.mean_dwell("nontarget")),
            "dwell_empty_s": _fmt(self.mean_dwell("empty")),
        }


EPISODE_FIELDS = ["episode", "steps", "run_time_s", "total_reward", "terminal_cause",
                  "dwell_target_s", "dwell_nontarget_s", "dwell_empty_s"]


def _fmt(x):
    return "nan" if x != x else f"{x:.6f}"


def write_episode_log(logs, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_FIELDS, lineterminator="\n")
        w.writeheader()
        for log in logs:
            w.writerow(log.row())


def write_dwell_samples(logs, path):
    """One row per in-view interval: episode, category, seconds."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "category", "dwell_s"])
        for log in logs:
            for cat in CATEGORIES:
                for v in log.dwell.get(cat, []):
                    w.writerow([log.episode, cat, f"{v:.6f}"])


def read_dwell_samples(path):
    logs = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ep = int(row["episode"])
            log = logs.setdefault(ep, EpisodeLog(ep, 0, 0.0, 0.0, "",
                                                 {c: [] for c in CATEGORIES}))
            log.dwell[row["category"]].append(float(row["dwell_s"]))
    return [logs[k] for k in sorted(logs)]


def read_episode_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class DwellReport:
    mean: dict
    sd: dict
    count: dict
    samples: dict
    per_episode: dict

    @property
    def separation(self):
        """Relative excess of target over nontarget dwell."""
        nt = self.mean["nontarget"]
        if not nt or nt != nt:
            return float("nan")
        return (self.mean["target"] - nt) / nt

    def standard_error(self, category):
        n = self.count[category]
        return self.sd[category] / math.sqrt(n) if n > 1 else float("nan")


def dwell_times(logs):
    """Pool per-interval dwell samples of finished episodes by true category."""
    if not logs:
        raise ValueError("need at least one episode")
    samples = {c: [] for c in CATEGORIES}
    per_episode = {c: [] for c in CATEGORIES}
    for log in logs:
        for c in CATEGORIES:
            vals = log.dwell.get(c, [])
            samples[c].extend(vals)
            if vals:
                per_episode[c].append(float(np.mean(vals)))
    mean, sd, count = {}, {}, {}
    for c in CATEGORIES:
        arr = np.asarray(samples[c], dtype=float)
        count[c] = arr.size
        mean[c] = float(arr.mean()) if arr.size else 0.0
        sd[c] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return DwellReport(mean, sd, count, samples, per_episode)


def significance(a, b):
    """Two-sided Mann-Whitney rank-test p-value for two dwell samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 10 or b.size < 10:
        raise ValueError("need at least 10 samples per group")
    if np.all(a == a[0]) and np.all(b == a[0]):
        return 1.0
    return float(stats.mannwhitneyu(a, b, alternative="two-sided",
                                    method="asymptotic").pvalue)


def plateau_slope(trace, tail=0.2):
    """Change across the final ``tail`` fraction predicted by a linear fit."""
    trace = np.asarray(trace, dtype=float)
    start = int(math.floor(len(trace) * (1 - tail)))
    seg = trace[start:]
    if seg.size < 2:
        return 0.0
    t = np.linspace(0.0, 1.0, seg.size)
    slope = np.polyfit(t, seg, 1)[0]
    return float(slope)


def qtrace_summary(trace, tail=0.2, tolerance=0.1):
    """Return ``(plateau, normalized_trace)``.

    The trace has plateaued when the linear-fit change over its final
    ``tail`` fraction is smaller than ``tolerance`` times its global range.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.size < 100:
        raise ValueError("Q-trace must have at least 100 points")
    lo, hi = trace.min(), trace.max()
    span = hi - lo
    norm = (trace - lo) / span if span > 0 else np.zeros_like(trace)
    if span == 0:
        return True, norm
    return bool(abs(plateau_slope(trace, tail)) < tolerance * span), norm


def runtime_ratio(run_times, fraction=0.1):
    """Mean run time of the last ``fraction`` of episodes over that of the first."""
    rt = np.asarray(run_times, dtype=float)
    k = max(1, int(round(len(rt) * fraction)))
    return float(rt[-k:].mean() / rt[:k].mean())


def write_report_csv(report, path, p_value=None, significant_at=0.05):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "n", "mean_s", "sd_s", "se_s"])
        for c in CATEGORIES:
            w.writerow([c, report.count[c], f"{report.mean[c]:.6f}",
                        f"{report.sd[c]:.6f}", _fmt(report.standard_error(c))])
        w.writerow([])
        w.writerow(["separation", _fmt(report.separation)])
        if p_value is not None:
            w.writerow(["p_value", f"{p_value:.6g}"])
            w.writerow(["significant", int(p_value < significant_at)])


def write_svg_charts(report, run_times, qtrace, out_dir):
    """Dwell bars with SE whiskers, run-time curve and normalised Q-trace as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hbcidrive"
    paths = []
    meta = {"Date": None}

    fig, ax = plt.subplots(figsize=(4, 3))
    means = [report.mean[c] for c in CATEGORIES]
    ses = [0.0 if report.standard_error(c) != report.standard_error(c)
           else report.standard_error(c) for c in CATEGORIES]
    ax.bar(CATEGORIES, means, yerr=ses, capsize=4, color=["#2a9d8f", "#e76f51", "#999999"])
    ax.set_ylabel("dwell time (s)")
    fig.tight_layout()
    paths.append(out_dir / "dwell.svg")
    fig.savefig(paths[-1], metadata=meta)
    plt.close(fig)

    if len(run_times):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(np.arange(1, len(run_times) + 1), run_times, lw=1)
        ax.set_xlabel("episode")
        ax.set_ylabel("run time (s)")
        fig.tight_layout()
        paths.append(out_dir / "runtime.svg")
        fig.savefig(paths[-1], metadata=meta)
        plt.close(fig)

    if len(qtrace):
        q = np.asarray(qtrace, dtype=float)
        span = q.max() - q.min()
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot((q - q.min()) / span if span > 0 else q * 0, lw=1)
        ax.set_xlabel("probe evaluation")
        ax.set_ylabel("normalised mean max Q")
        fig.tight_layout()
        paths.append(out_dir / "qtrace.svg")
        fig.savefig(paths[-1], metadata=meta)
        plt.close(fig)
    if any(len(v) == 0 for v in (report.samples["target"],)):
        warnings.warn("no target dwell samples; dwell chart is empty", stacklevel=2)
    return paths
