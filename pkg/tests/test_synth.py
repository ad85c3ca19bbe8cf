import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from hbcidrive import synth
from hbcidrive.synth import SeparabilityConfig


def test_zero_effect_class_means_match():
    t = synth.gen_trials(10_000, 0.25, SeparabilityConfig(), seed=0)
    X = t.to_matrix()
    pos, neg = X[t.label], X[~t.label]
    pooled = np.sqrt((pos.var(axis=0, ddof=1) + neg.var(axis=0, ddof=1)) / 2)
    assert np.all(np.abs(pos.mean(0) - neg.mean(0)) < 0.1 * pooled)


def test_p300_bin_auc():
    t = synth.gen_trials(4000, 0.25, SeparabilityConfig(eeg_effect=2.0), seed=1)
    # bin 4 (400-500 ms), component 1
    auc = roc_auc_score(t.label, t.eeg[:, 3, 0])
    assert auc >= 0.9
    assert abs(auc - 0.9214) < 0.02     # Phi(2 / sqrt 2)


def test_same_seed_same_dataset():
    sep = SeparabilityConfig(eeg_effect=1.0, correlation=0.3)
    a = synth.gen_trials(50, 0.3, sep, seed=4).to_matrix()
    b = synth.gen_trials(50, 0.3, sep, seed=4).to_matrix()
    assert a.tobytes() == b.tobytes()
    fa = synth.gen_object_features(40, seed=2).vec
    assert fa.tobytes() == synth.gen_object_features(40, seed=2).vec.tobytes()


def _moment_zscores(seed):
    sep = SeparabilityConfig(eeg_effect=1.5, pupil_effect=0.5, gaze_effect=0.2,
                             eeg_noise=2.0, pupil_noise=0.5)
    t = synth.gen_trials(10_000, 0.5, sep, seed=seed)
    pos, neg = t.label, ~t.label
    checks = [
        (t.eeg[pos, 3, 0], 1.5 * 2.0, 2.0),
        (t.eeg[neg, 3, 0], 0.0, 2.0),
        (t.eeg[pos, 7, 0], 0.0, 2.0),
        (t.eeg[pos, 3, 5], 0.0, 2.0),
        (t.pupil[pos, 4], 0.5 * 0.5, 0.5),
        (t.pupil[pos, 0], 0.0, 0.5),
        (t.gaze[neg], 1.0, 0.2),
        (t.gaze[pos], 1.2, 0.2),
    ]
    z = []
    for x, mu, sd in checks:
        z.append((x.mean() - mu) / (sd / np.sqrt(x.size)))
        z.append((x.std(ddof=1) - sd) / (sd / np.sqrt(2 * (x.size - 1))))
    return z


def test_moments_converge():
    # 160 checks at 3 standard errors: about 0.4 exceedances expected
    z = np.concatenate([_moment_zscores(seed) for seed in range(10)])
    assert np.sum(np.abs(z) > 3) <= 2
    assert abs(z.mean()) < 0.3 and 0.7 < z.std() < 1.3


def test_correlation_couples_modalities():
    t = synth.gen_trials(10_000, 0.25, SeparabilityConfig(correlation=0.5), seed=0)
    r = np.corrcoef(t.eeg[:, 0, 0], t.pupil[:, 0])[0, 1]
    assert abs(r - 0.5) < 0.03


def test_trial_shapes_and_gaze_nonnegative():
    t = synth.gen_trials(200, 0.25, SeparabilityConfig(gaze_effect=-5.0), seed=0)
    assert t.eeg.shape == (200, 9, 16) and t.pupil.shape == (200, 6)
    assert np.all(t.gaze >= 0)
    assert t[0].category in ("target", "nontarget")


@pytest.mark.parametrize("bad", [dict(n=0, target_rate=0.5), dict(n=10, target_rate=1.0)])
def test_gen_trials_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        synth.gen_trials(**bad)


def _nearest_centroid_scores(sep, seed):
    obj = synth.gen_object_features(2000, 0.25, sep, seed=seed)
    fit, held = np.arange(1000), np.arange(1000, 2000)
    c1 = obj.vec[fit][obj.category[fit]].mean(0)
    c0 = obj.vec[fit][~obj.category[fit]].mean(0)
    x, y = obj.vec[held], obj.category[held]
    pred = np.linalg.norm(x - c1, axis=1) < np.linalg.norm(x - c0, axis=1)
    tpr, tnr = pred[y].mean(), (~pred[~y]).mean()
    return (pred == y).mean(), (tpr + tnr) / 2


def test_nearest_centroid_chance_without_separation():
    _, balanced = _nearest_centroid_scores(0.0, seed=0)
    assert abs(balanced - 0.5) < 0.05


def test_nearest_centroid_accurate_at_six_sd():
    acc, _ = _nearest_centroid_scores(6.0, seed=0)
    assert acc >= 0.99


def test_object_target_fraction_and_separation():
    obj = synth.gen_object_features(401, 0.25, 6.0, seed=5, dim=16)
    assert obj.category.sum() == round(0.25 * 401)
    gap = obj.vec[obj.category].mean(0) - obj.vec[~obj.category].mean(0)
    assert abs(np.linalg.norm(gap) - 6.0) < 0.5


def test_trial_csv_roundtrip(tmp_path):
    t = synth.gen_trials_for([True, False, True], SeparabilityConfig(n_components=2),
                             seed=1, trial_id=[7, 3, 9])
    synth.write_trials_csv(t, tmp_path / "t.csv")
    back = synth.read_trials_csv(tmp_path / "t.csv")
    assert list(back.trial_id) == [7, 3, 9]
    assert np.array_equal(back.to_matrix(), t.to_matrix())
    assert list(back.label) == [True, False, True]
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 1 + 9 * 2 + 6 + 1 + 1


def test_object_csv_roundtrip(tmp_path):
    obj = synth.gen_object_features(10, seed=0, dim=3)
    synth.write_objects_csv(obj, tmp_path / "o.csv")
    back = synth.read_objects_csv(tmp_path / "o.csv")
    assert np.array_equal(back.vec, obj.vec)
    assert np.array_equal(back.category, obj.category)
