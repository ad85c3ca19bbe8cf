"""Command-line driver: one subcommand per stage plus an end-to-end ``pipeline``.

Stages hand off through files in the output directory::

    synth  -> objects.csv, calibration_trials.csv, viewed_trials.csv
    hdca   -> hdca_model.txt, hdca_scores.csv
    tag    -> tag_labels.csv, tag_graph.csv, tag_gmm.txt
    train  -> qnet.bin (+ .txt), train_episodes.csv, train_dwell.csv, qtrace.csv
    eval   -> eval_episodes.csv, eval_dwell.csv
    report -> report.csv, dwell.svg, runtime.svg, qtrace.svg

Every run also writes ``manifest.json`` with the resolved configuration, its
hash, the seed and library versions.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import dqn, env, hdca, metrics, nn, reward, synth, tag
from .config import ConfigError, coerce_dataclass, dataclass_to_text, parse_key_values

log = logging.getLogger("hbcidrive")

STAGES = ("synth", "hdca", "tag", "train", "eval", "report")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class SynthSettings:
    n_calibration: int = 600
    calibration_target_rate: float = 0.25
    viewed_fraction: float = 0.5
    eeg_effect: float = 1.5
    pupil_effect: float = 0.5
    gaze_effect: float = 0.2
    correlation: float = 0.0
    n_components: int = 16
    cluster_sep: float = 6.0
    feature_dim: int = 64

    def separability(self):
        return synth.SeparabilityConfig(eeg_effect=self.eeg_effect,
                                        pupil_effect=self.pupil_effect,
                                        gaze_effect=self.gaze_effect,
                                        correlation=self.correlation,
                                        n_components=self.n_components)


@dataclass(frozen=True)
class HdcaSettings:
    lam: float = 10.0
    train_fraction: float = 0.4
    evaluation_fraction: float = 0.3
    test_fraction: float = 0.3


@dataclass(frozen=True)
class TagSettings:
    k: int = 0                 # 0 = ceil(log2 n) + 1
    alpha: float = 0.15
    tied: bool = True


@dataclass(frozen=True)
class RewardSettings:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def weights(self):
        return reward.RewardWeights(self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class MetricsSettings:
    eval_episodes: int = 50
    eval_seed: int = 10_000
    significance: float = 0.01


# Settings for a single desktop CPU: 32 px frames, the reduced network and
# a coarser time step so that vehicle motion spans whole pixels.
DESK_WORLD = env.WorldConfig(frame_size=32, sim_dt=0.2, speed_delta=1.0)
DESK_TRAIN = dqn.TrainConfig(gamma=0.95, lr=2.5e-4, train_every=2, buffer_capacity=50_000,
                             total_steps=80_000, sync_every=500)


@dataclass
class PipelineConfig:
    preset: str = "desk"
    seed: int | None = None
    subject: str = ""          # empty = measured hBCI+TAG rates
    synth: SynthSettings = field(default_factory=SynthSettings)
    hdca: HdcaSettings = field(default_factory=HdcaSettings)
    tag: TagSettings = field(default_factory=TagSettings)
    env: env.WorldConfig = field(default_factory=lambda: DESK_WORLD)
    reward: RewardSettings = field(default_factory=RewardSettings)
    dqn: dqn.TrainConfig = field(default_factory=lambda: DESK_TRAIN)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)

    SECTIONS = ("synth", "hdca", "tag", "env", "reward", "dqn", "metrics")

    @property
    def arch(self):
        base = nn.DESK_ARCH if self.preset == "desk" else nn.PAPER_ARCH
        n = self.env.frame_size
        return dataclasses.replace(base, input_shape=(3, n, n))

    def to_text(self):
        head = [f"preset = {self.preset}", f"seed = {self.seed}",
                f"subject = {self.subject}", ""]
        body = [dataclass_to_text(_plain(getattr(self, s)), s) for s in self.SECTIONS]
        return "\n".join(head) + "\n".join(body)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _plain(obj):
    # TrainConfig carries no callables, WorldConfig neither; both print as-is
    return obj


def preset_config(name):
    if name == "desk":
        return PipelineConfig(preset="desk")
    if name == "paper":
        return PipelineConfig(preset="paper", env=env.WorldConfig(),
                              dqn=dqn.TrainConfig())
    raise ConfigError(f"unknown preset {name!r}; choose desk or paper")


def load_config(path=None, preset=None):
    """Preset defaults overridden by a ``key = value`` file with one section per stage."""
    sections = {"": {}}
    source = str(path) if path else "<defaults>"
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        sections = parse_key_values(p.read_text(), source=source)
    top = sections.get("", {})
    unknown = set(sections) - {"", *PipelineConfig.SECTIONS}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    name = preset or str(top.get("preset", "desk"))
    cfg = preset_config(name)
    for key, raw in top.items():
        if key == "preset":
            continue
        if key == "seed":
            try:
                cfg.seed = int(raw)
            except ValueError:
                raise ConfigError(f"{source}:{raw.lineno}: seed must be an integer") from None
        elif key == "subject":
            cfg.subject = str(raw)
        else:
            raise ConfigError(f"{source}:{raw.lineno}: unknown top-level key {key!r}")
    for sec in PipelineConfig.SECTIONS:
        if sec in sections:
            try:
                value = coerce_dataclass(getattr(cfg, sec), sections[sec], source)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc)) from None
            setattr(cfg, sec, value)
    return cfg


def stage_seed(seed, stage):
    """Independent per-stage seed derived from the global seed and the stage name."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# stages

def _need(stage, *paths):
    for p in paths:
        if not Path(p).is_file():
            raise StageError(stage, f"missing input {p}")


def cmd_synth(cfg, out):
    s = cfg.synth
    seed = stage_seed(cfg.seed, "synth")
    ss = np.random.SeedSequence(seed).spawn(3)
    n_obj = cfg.env.n_occupied
    objects = synth.gen_object_features(n_obj, cfg.env.target_ratio, s.cluster_sep,
                                        seed=int(ss[0].generate_state(1)[0]),
                                        dim=s.feature_dim)
    calib = synth.gen_trials(s.n_calibration, s.calibration_target_rate, s.separability(),
                             seed=int(ss[1].generate_state(1)[0]))
    rng = np.random.default_rng(ss[2])
    n_viewed = max(2, int(round(s.viewed_fraction * n_obj)))
    viewed_ids = np.sort(rng.choice(n_obj, n_viewed, replace=False))
    viewed = synth.gen_trials_for(objects.category[viewed_ids], s.separability(),
                                  seed=int(rng.integers(2 ** 32)), trial_id=viewed_ids)
    synth.write_objects_csv(objects, out / "objects.csv")
    synth.write_trials_csv(calib, out / "calibration_trials.csv")
    synth.write_trials_csv(viewed, out / "viewed_trials.csv")
    return {"objects": n_obj, "calibration_trials": len(calib), "viewed_trials": n_viewed}


def cmd_hdca(cfg, out):
    calib_p, viewed_p = out / "calibration_trials.csv", out / "viewed_trials.csv"
    _need("hdca", calib_p, viewed_p)
    h = cfg.hdca
    calib = synth.read_trials_csv(calib_p)
    split = hdca.make_split(calib.label, (h.train_fraction, h.evaluation_fraction,
                                          h.test_fraction), seed=stage_seed(cfg.seed, "hdca"))
    model = hdca.HDCA(lam=h.lam).fit(calib.to_matrix(), calib.label, split=split)
    test_scores = model.decision_function(calib.to_matrix()[split.test])
    _, _, tpr, fpr = hdca.predict_targets(test_scores, calib.label[split.test])
    viewed = synth.read_trials_csv(viewed_p)
    scores = model.decision_function(viewed.to_matrix())
    flagged, threshold, v_tpr, v_fpr = hdca.predict_targets(scores, viewed.label)
    model.threshold_ = threshold
    model.save(out / "hdca_model.txt")
    with open(out / "hdca_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "score", "predicted"])
        for tid, sc, fl in zip(viewed.trial_id, scores, flagged):
            w.writerow([int(tid), repr(float(sc)), int(fl)])
    return {"test_tpr": tpr, "test_fpr": fpr, "viewed_tpr": v_tpr, "viewed_fpr": v_fpr,
            "n_predicted": int(flagged.sum()), "converged": bool(model.converged_)}


def _read_flagged(path):
    with open(path, newline="") as fh:
        return np.array([int(r["trial_id"]) for r in csv.DictReader(fh)
                         if r["predicted"] == "1"], dtype=int)


def cmd_tag(cfg, out):
    obj_p, score_p = out / "objects.csv", out / "hdca_scores.csv"
    _need("tag", obj_p, score_p)
    objects = synth.read_objects_csv(obj_p)
    flagged = _read_flagged(score_p)
    if flagged.size == 0:
        raise StageError("tag", "the hBCI stage flagged no objects; nothing to propagate")
    index = {int(o): i for i, o in enumerate(objects.object_id)}
    try:
        predicted = [index[int(t)] for t in flagged]
    except KeyError as exc:
        raise StageError("tag", f"scored trial {exc} has no matching object") from None
    t = cfg.tag
    tagger = tag.TransductiveTagger(k=t.k or None, alpha=t.alpha, tied=t.tied)
    tagger.fit(objects.vec, predicted)
    labels = tagger.labels_
    tpr, fpr, f1 = metrics.rates(labels, objects.category)
    tag.write_labels_csv(objects.object_id, tagger.scores_, labels, out / "tag_labels.csv")
    tag.write_edges_csv(tagger.graph_, out / "tag_graph.csv")
    (out / "tag_gmm.txt").write_text(tagger.gmm_.to_text())
    return {"tpr": tpr, "fpr": fpr, "f1": f1, "swaps": len(tagger.tuned_.swaps)}


def _object_labels(out, stage):
    obj_p, lab_p = out / "objects.csv", out / "tag_labels.csv"
    _need(stage, obj_p, lab_p)
    objects = synth.read_objects_csv(obj_p)
    ids, assigned = tag.read_labels_csv(lab_p)
    if not np.array_equal(ids, objects.object_id):
        raise StageError(stage, f"{lab_p} does not list the objects of {obj_p}")
    return env.ObjectLabels(objects.category, assigned)


def _subject(cfg, labels):
    if cfg.subject:
        return reward.subject_preset(cfg.subject)
    tpr, fpr, _ = metrics.rates(labels.assigned, labels.true_category)
    return reward.SubjectProfile(tpr, fpr, name="measured")


def cmd_train(cfg, out):
    labels = _object_labels(out, "train")
    subject = _subject(cfg, labels)
    train_cfg = dataclasses.replace(cfg.dqn, seed=stage_seed(cfg.seed, "train"))

    def progress(ep_log, t, eps):
        if ep_log.episode % 25 == 0:
            log.info("episode %d  step %d  eps %.2f  run %.1fs  cause %s",
                     ep_log.episode, t, eps, ep_log.run_time_s, ep_log.terminal_cause)

    result = dqn.run_training(cfg.env, labels, subject, train_cfg, cfg.arch,
                              cfg.reward.weights(), progress)
    nn.save(result.online, out / "qnet.bin")
    metrics.write_episode_log(result.episodes, out / "train_episodes.csv")
    metrics.write_dwell_samples(result.episodes, out / "train_dwell.csv")
    dqn.write_qtrace(result.qtrace, out / "qtrace.csv")
    return {"subject": dataclasses.asdict(subject), "episodes": len(result.episodes),
            "runtime_ratio": metrics.runtime_ratio(result.run_times)}


def cmd_eval(cfg, out, checkpoint=None):
    ckpt = Path(checkpoint) if checkpoint else out / "qnet.bin"
    if not ckpt.is_file():
        raise StageError("eval", f"missing checkpoint {ckpt}")
    try:
        net = nn.load(ckpt)
    except nn.CheckpointError as exc:
        raise StageError("eval", f"{ckpt}: {exc}") from None
    labels = _object_labels(out, "eval")
    subject = _subject(cfg, labels)
    m = cfg.metrics
    logs = dqn.evaluate(net, cfg.env, labels, subject, m.eval_episodes, seed=m.eval_seed,
                        weights=cfg.reward.weights())
    metrics.write_episode_log(logs, out / "eval_episodes.csv")
    metrics.write_dwell_samples(logs, out / "eval_dwell.csv")
    return {"episodes": len(logs),
            "mean_run_time_s": float(np.mean([lg.run_time_s for lg in logs]))}


def _read_qtrace(path):
    with open(path, newline="") as fh:
        return [float(r["mean_max_q"]) for r in csv.DictReader(fh)]


def cmd_report(cfg, out):
    dwell_p = out / "eval_dwell.csv"
    _need("report", dwell_p)
    logs = metrics.read_dwell_samples(dwell_p)
    rep = metrics.dwell_times(logs)
    try:
        p = metrics.significance(rep.samples["target"], rep.samples["nontarget"])
    except ValueError:
        p = None
    metrics.write_report_csv(rep, out / "report.csv", p, cfg.metrics.significance)
    run_times, qtrace = [], []
    if (out / "train_episodes.csv").is_file():
        run_times = [float(r["run_time_s"])
                     for r in metrics.read_episode_log(out / "train_episodes.csv")]
    if (out / "qtrace.csv").is_file():
        qtrace = _read_qtrace(out / "qtrace.csv")
    metrics.write_svg_charts(rep, run_times, qtrace, out)
    plateau = metrics.qtrace_summary(qtrace)[0] if len(qtrace) >= 100 else None
    return {"separation": rep.separation, "p_value": p,
            "significant": None if p is None else bool(p < cfg.metrics.significance),
            "mean_dwell": rep.mean, "q_plateau": plateau}


def cmd_pipeline(cfg, out):
    return {name: STAGE_FUNCS[name](cfg, out) for name in STAGES}


STAGE_FUNCS = {"synth": cmd_synth, "hdca": cmd_hdca, "tag": cmd_tag, "train": cmd_train,
               "eval": cmd_eval, "report": cmd_report}


# ---------------------------------------------------------------------------
# manifest and entry point

def _versions():
    import matplotlib
    import scipy
    import sklearn
    return {"hbcidrive": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(cfg, out, command, results):
    manifest = {"command": command, "seed": cfg.seed, "preset": cfg.preset,
                "config_sha256": cfg.digest(), "config": cfg.to_text(),
                "versions": _versions(), "results": results}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    (out / "config.resolved.txt").write_text(cfg.to_text())
    return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    return str(x)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    common.add_argument("--subject",
                        help="reward profile: 1-10, control or custom:TPR,FPR "
                             "(default: rates measured by the tag stage)")
    common.add_argument("--preset", choices=("paper", "desk"), help="default settings")
    common.add_argument("--strict-repro", action="store_true",
                        help="require an explicit seed and a single BLAS thread")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="hbcidrive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, help="network file (default OUT/qnet.bin)")
    return parser


def _blas_threads():
    try:
        from threadpoolctl import threadpool_info
    except ImportError:
        return None
    return max((i.get("num_threads", 1) for i in threadpool_info()), default=1)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = load_config(args.config, args.preset)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.subject is not None:
            cfg.subject = args.subject
        if cfg.subject:
            reward.subject_preset(cfg.subject)
        if args.strict_repro:
            if cfg.seed is None:
                raise ConfigError("--strict-repro needs a seed (--seed or 'seed =' in the config)")
            threads = _blas_threads()
            if threads not in (None, 1):
                raise ConfigError(f"--strict-repro needs one BLAS thread, found {threads}; "
                                  "set OMP_NUM_THREADS=1")
        if cfg.seed is None:
            cfg.seed = 0
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "pipeline":
            results = cmd_pipeline(cfg, out)
        elif args.command == "eval":
            results = {"eval": cmd_eval(cfg, out, args.checkpoint)}
        else:
            results = {args.command: STAGE_FUNCS[args.command](cfg, out)}
    except StageError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"error in stage {args.command}: {exc}", file=sys.stderr)
        return 1
    write_manifest(cfg, out, args.command, results)
    for stage, res in results.items():
        print(f"{stage}: " + ", ".join(f"{k}={_short(v)}" for k, v in res.items()))
    return 0


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


if __name__ == "__main__":
    sys.exit(main())
