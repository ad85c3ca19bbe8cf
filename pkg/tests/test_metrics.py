import csv

import numpy as np
import pytest
from scipy import stats

from hbcidrive import metrics
from hbcidrive.env import WorldConfig, World
from hbcidrive.reward import TABLE1


# subject 2's reported F1 is 0.024 above what its rates imply at prevalence 0.25,
# and no common prevalence fits rows 2 and 8 together
TABLE_ROWS = [pytest.param(k, marks=pytest.mark.xfail(strict=True, reason="row inconsistent"))
              if k == 2 else k for k in sorted(TABLE1)]


@pytest.mark.parametrize("subject", TABLE_ROWS)
def test_f1_reproduces_table(subject):
    tpr, fpr, f1 = TABLE1[subject]
    assert metrics.f1_from_rates(tpr, fpr, 0.25) == pytest.approx(f1, abs=0.02)


def test_f1_examples():
    assert metrics.f1_from_rates(1.0, 0.0063) == pytest.approx(0.9906, abs=1e-4)
    assert metrics.f1_from_rates(0.8343, 0.0125) == pytest.approx(0.8916, abs=5e-4)
    for p in (0.05, 0.25, 0.9):
        assert metrics.f1_from_rates(1.0, 0.0, p) == 1.0
    assert metrics.f1_from_rates(0.0, 0.0, return_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        metrics.f1_from_rates(1.1, 0.0)


def test_f1_monotone_on_grid():
    grid = np.linspace(0.01, 1, 40)
    f = np.array([[metrics.f1_from_rates(t, r) for r in grid] for t in grid])
    assert np.all(np.diff(f, axis=0) > 0)        # increasing in tpr
    assert np.all(np.diff(f, axis=1) < 0)        # decreasing in fpr


def test_rates():
    truth = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    pred = np.array([1, 1, 1, 0, 1, 0, 0, 0], bool)
    tpr, fpr, f1 = metrics.rates(pred, truth)
    assert (tpr, fpr) == (0.75, 0.25)
    assert f1 == pytest.approx(0.75)


def _world(positions, targets, empty=()):
    n = len(positions)
    return World(np.arange(n), np.arange(n), np.asarray(positions, float),
                 np.zeros(n, int), np.asarray(targets, bool), np.asarray(targets, bool),
                 np.asarray(empty, float))


def _drive(tracker, speeds, dt, x=0.0):
    for v in speeds:
        x += v * dt
        tracker.update(x)
    return tracker.close()


@pytest.mark.parametrize("v", [5.0, 8.0, 12.5])
def test_dwell_constant_speed_matches_kinematics(v):
    cfg = WorldConfig()
    tracker = metrics.DwellTracker(_world([100.0, 200.0], [True, False], [300.0]), cfg)
    samples = _drive(tracker, [v] * int(400 / (v * cfg.sim_dt)), cfg.sim_dt)
    expected = 2 * cfg.visual_radius / v
    for c in metrics.CATEGORIES:
        assert len(samples[c]) == 1
        assert abs(samples[c][0] - expected) <= cfg.sim_dt + 1e-9


def test_dwell_halving_speed_in_view_doubles_it():
    cfg = WorldConfig()
    w = _world([100.0], [True])

    def dwell(slow):
        tr = metrics.DwellTracker(w, cfg)
        x, dt = 0.0, cfg.sim_dt
        while x < 150:
            v = 5.0 if slow and abs(x - 100) <= cfg.visual_radius else 10.0
            x += v * dt
            tr.update(x)
        return tr.close()["target"][0]

    assert abs(dwell(True) - 2 * dwell(False)) <= 2 * cfg.sim_dt


def test_no_objects_gives_zero_dwell():
    log = metrics.EpisodeLog(0, 10, 1.0, 0.0, "too_far", {c: [] for c in metrics.CATEGORIES})
    rep = metrics.dwell_times([log])
    assert rep.mean["target"] == 0 and rep.mean["nontarget"] == 0
    with pytest.raises(ValueError):
        metrics.dwell_times([])


def test_dwell_report_pools_intervals():
    logs = [metrics.EpisodeLog(0, 1, 1.0, 0.0, "", {"target": [2.0, 4.0], "nontarget": [2.0]}),
            metrics.EpisodeLog(1, 1, 1.0, 0.0, "", {"target": [3.0], "nontarget": [2.0, 3.0]})]
    rep = metrics.dwell_times(logs)
    assert rep.mean["target"] == 3.0 and rep.count["nontarget"] == 3
    assert rep.separation == pytest.approx((3.0 - 7 / 3) / (7 / 3))
    assert rep.per_episode["target"] == [3.0, 3.0]
    assert rep.standard_error("target") == pytest.approx(1.0 / np.sqrt(3))


def test_significance_examples():
    a = np.linspace(1, 2, 30)
    assert metrics.significance(a, a) == pytest.approx(1.0)
    assert metrics.significance(np.full(12, 2.0), np.full(12, 2.0)) == 1.0
    assert metrics.significance(a, a + 10) < 1e-3
    with pytest.raises(ValueError):
        metrics.significance(a[:5], a)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_significance_matches_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.exponential(2.0, 30)
    b = rng.exponential(2.4, 30)
    ranks = stats.rankdata(np.r_[a, b])
    rank_res = stats.permutation_test((ranks[:30], ranks[30:]),
                                      lambda x, y: np.sum(x), n_resamples=20_000,
                                      random_state=seed)
    assert abs(metrics.significance(a, b) - rank_res.pvalue) < 0.02


def test_qtrace_examples():
    t = np.arange(400)
    assert metrics.qtrace_summary(1 - np.exp(-t / 40))[0]
    assert not metrics.qtrace_summary(t * 0.5)[0]
    flat, norm = metrics.qtrace_summary(np.full(200, 3.0))
    assert flat and np.all(norm == 0)
    _, norm = metrics.qtrace_summary(t * 2.0 + 1)
    assert norm.min() == 0 and norm.max() == 1
    with pytest.raises(ValueError):
        metrics.qtrace_summary(np.zeros(50))


def test_runtime_ratio():
    rt = np.r_[np.full(10, 2.0), np.full(80, 5.0), np.full(10, 8.0)]
    assert metrics.runtime_ratio(rt) == 4.0


def test_episode_and_dwell_csv_roundtrip(tmp_path):
    logs = [metrics.EpisodeLog(0, 20, 2.0, 15.5, "too_far",
                               {"target": [1.5], "nontarget": [1.0, 2.0], "empty": []})]
    metrics.write_episode_log(logs, tmp_path / "ep.csv")
    row = metrics.read_episode_log(tmp_path / "ep.csv")[0]
    assert list(row) == metrics.EPISODE_FIELDS
    assert row["dwell_nontarget_s"] == "1.500000" and row["dwell_empty_s"] == "nan"
    metrics.write_dwell_samples(logs, tmp_path / "dw.csv")
    back = metrics.read_dwell_samples(tmp_path / "dw.csv")
    assert back[0].dwell["nontarget"] == [1.0, 2.0]


def test_report_csv_and_svg(tmp_path):
    rep = metrics.dwell_times([metrics.EpisodeLog(
        0, 1, 1.0, 0.0, "", {"target": [2.0, 2.5], "nontarget": [1.0, 2.0], "empty": [1.0]})])
    metrics.write_report_csv(rep, tmp_path / "report.csv", p_value=0.003)
    rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert rows[0] == ["category", "n", "mean_s", "sd_s", "se_s"]
    assert ["significant", "1"] in rows
    paths = metrics.write_svg_charts(rep, [1.0, 2.0, 3.0], np.linspace(0, 1, 120), tmp_path)
    assert [p.name for p in paths] == ["dwell.svg", "runtime.svg", "qtrace.svg"]
    first = (tmp_path / "dwell.svg").read_bytes()
    metrics.write_svg_charts(rep, [1.0, 2.0, 3.0], np.linspace(0, 1, 120), tmp_path)
    assert (tmp_path / "dwell.svg").read_bytes() == first
