"""Command-line interface: ``rewardgaze <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training diverged.
Settings resolve as command-line flag > environment variable > config file >
built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, cues, evalrep, pipeline
from . import data as datamod
from .cues import CueProviderConfig, ProviderError
from .data import DataParseError, DataValidationError, SyntheticSpec
from .nets import GazeEstimatorParams
from .pipeline import TrainConfig, TrainingDiverged

log = logging.getLogger("rewardgaze")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
ENV_SEED = "OMNIGAZE_SEED"
CONFIG_SECTIONS = ("train", "synthetic", "cues", "paths")


class ConfigError(ValueError):
    pass


class IOFailure(OSError):
    pass


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    synthetic: SyntheticSpec
    cues: CueProviderConfig
    paths: dict


def _section(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in config section '{section}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config section '{section}': {e}") from None


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or defaults) and apply env + flag overrides to the train section."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise IOFailure(f"cannot read config {path}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown top-level config key(s): {', '.join(unknown)}")
    train = dict(raw.get("train") or {})
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            train["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{ENV_SEED}={env_seed!r} is not an integer") from None
    train.update({k: v for k, v in (overrides or {}).items() if v is not None})
    paths = raw.get("paths") or {}
    if not isinstance(paths, dict):
        raise ConfigError("config section 'paths' must be an object")
    return RunConfig(_section(TrainConfig, train, "train"), _section(SyntheticSpec, raw.get("synthetic"), "synthetic"),
                     _section(CueProviderConfig, raw.get("cues"), "cues"), dict(paths))


def _train_overrides(args) -> dict:
    out = {}
    for key in ("seed", "tau", "teacher_epochs", "ssl_epochs", "batch_size"):
        out[key] = getattr(args, key, None)
    k = getattr(args, "refresh_interval", None)
    if k is not None:
        out["refresh_interval"] = None if k == 0 else k
    return out


# Data access


def _load_dataset(path, name: str | None = None) -> datamod.Dataset:
    return datamod.load_jsonl(path, name)


def _load_estimator(path) -> GazeEstimatorParams:
    models, _ = checkpoint.load(path)
    for name in ("student", "teacher"):
        if isinstance(models.get(name), GazeEstimatorParams):
            return models[name]
    raise checkpoint.CheckpointError(f"{path}: no estimator in checkpoint (has {sorted(models)})")


def _provider(rc: RunConfig, data_dir: Path, feature_width: int):
    desc_path = data_dir / "descriptions.jsonl"
    desc = cues.load_descriptions(desc_path) if desc_path.exists() else {}
    return cues.make_provider(rc.cues, rc.train.seed, feature_width, desc)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_history(path, *histories: pipeline.TrainHistory) -> None:
    records = [r for h in histories for r in h.to_list()]
    _write_json(records, path)


# Commands


def cmd_datagen(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as e:
            raise IOFailure(f"cannot read spec {args.spec}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {e}") from None
        spec = _section(SyntheticSpec, raw, "synthetic")
    seed = _seed(args)
    if args.n_labeled < 0 or args.n_unlabeled < 0 or args.n_test < 0:
        raise ConfigError("sample counts must be non-negative")
    lab, _, oracle = datamod.generate_synthetic(spec, args.n_labeled, args.n_unlabeled + args.n_test, seed)
    unl_oracle = oracle.subset(range(args.n_unlabeled), "unlabeled.oracle")
    test = oracle.subset(range(args.n_unlabeled, args.n_unlabeled + args.n_test), "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datamod.save_jsonl(lab, out / "labeled.jsonl")
    datamod.save_jsonl(unl_oracle.without_labels(), out / "unlabeled.jsonl")
    datamod.save_jsonl(unl_oracle, out / "unlabeled.oracle.jsonl")
    if args.n_test:
        datamod.save_jsonl(test, out / "test.jsonl")
    # gaze descriptions are precomputed so training never needs oracle labels
    gaze = {s.id: s.label for s in lab}
    gaze.update({s.id: s.label for s in oracle})
    cues.save_descriptions(cues.describe_all(gaze, seed, CueProviderConfig().p_desc), out / "descriptions.jsonl")
    _write_json({"spec": spec.to_dict(), "seed": seed}, out / "spec.json")
    print(f"labeled {len(lab)}")
    print(f"unlabeled {len(unl_oracle)}")
    if args.n_test:
        print(f"test {len(test)}")
    return EXIT_OK


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(ENV_SEED)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{ENV_SEED}={env!r} is not an integer") from None


def cmd_train_teacher(args) -> int:
    rc = load_run_config(args.config, _train_overrides(args))
    data_dir = Path(args.data)
    lab = _load_dataset(data_dir / "labeled.jsonl", "labeled")
    if len(lab) == 0 or not lab.is_labeled:
        raise ConfigError(f"{data_dir / 'labeled.jsonl'} has no labeled samples")
    t = time.monotonic()
    teacher, hist = pipeline.train_teacher(lab, rc.train)
    log.info("teacher trained in %.1fs", time.monotonic() - t)
    out = Path(args.out)
    checkpoint.save(out, {"teacher": teacher}, rc.train.digest(), rc.train.teacher_epochs)
    _save_history(out.with_name(out.name + ".history.json"), hist)
    print(f"teacher checkpoint {out}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    teacher = _load_estimator(args.teacher)
    unl = _load_dataset(args.unlabeled)
    labels = pipeline.generate_pseudo_labels(teacher, unl).as_dict() if len(unl) else {}
    datamod.save_labels_jsonl(labels, args.out)
    print(f"pseudo-labels {len(labels)}")
    return EXIT_OK


def cmd_train_ssl(args) -> int:
    rc = load_run_config(args.config, _train_overrides(args))
    data_dir = Path(args.data)
    lab = _load_dataset(data_dir / "labeled.jsonl", "labeled")
    unl = _load_dataset(data_dir / "unlabeled.jsonl", "unlabeled")
    teacher = _load_estimator(args.teacher) if args.teacher else None
    provider = _provider(rc, data_dir, lab.feature_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = time.monotonic()
    res = pipeline.run_selftraining(lab, unl.without_labels(), provider, rc.train, teacher=teacher)
    log.info("self-training finished in %.1fs", time.monotonic() - t)
    h = rc.train.digest()
    checkpoint.save(out / "student.ckpt", {"student": res.student, "teacher": res.teacher}, h, rc.train.ssl_epochs)
    checkpoint.save(out / "reward.ckpt", {"reward": res.reward}, h, rc.train.ssl_epochs)
    _save_history(out / "history.json", res.teacher_history, res.history)
    test_path, oracle_path = data_dir / "test.jsonl", data_dir / "unlabeled.oracle.jsonl"
    if test_path.exists():
        rep = evalrep.evaluate(res.student, _load_dataset(test_path, "test"), config_hash=h, seed=rc.train.seed)
        _write_json(rep.to_dict(), out / "eval.json")
    elif oracle_path.exists():
        rep = evalrep.evaluate(res.student, unl.without_labels(), _load_dataset(oracle_path), h, rc.train.seed)
        _write_json(rep.to_dict(), out / "eval.json")
    else:
        rep = None
    print(f"student checkpoint {out / 'student.ckpt'}")
    if rep is not None:
        print(f"mean angular error {rep.mean_deg:.4f} deg on {rep.dataset} (n={rep.n})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_estimator(args.model)
    _, meta = checkpoint.load(args.model)
    ds = _load_dataset(args.data)
    oracle = _load_dataset(args.oracle) if args.oracle else None
    rep = evalrep.evaluate(model, ds, oracle, meta.get("config_hash", ""))
    _write_json(rep.to_dict(), args.out)
    print(f"mean angular error {rep.mean_deg:.4f} deg (n={rep.n})")
    return EXIT_OK


def cmd_score(args) -> int:
    from .reward import RewardModelParams, score_samples

    models, _ = checkpoint.load(args.reward)
    rm = models.get("reward")
    if not isinstance(rm, RewardModelParams):
        raise checkpoint.CheckpointError(f"{args.reward}: no reward model in checkpoint")
    student = _load_estimator(args.student)
    ds = _load_dataset(args.data)
    if args.labels:
        cand = datamod.load_labels_jsonl(args.labels)
        missing = [i for i in ds.ids if i not in cand]
        if missing:
            raise ConfigError(f"{args.labels} lacks candidate labels for {len(missing)} samples")
        labels = np.array([[cand[i].yaw, cand[i].pitch] for i in ds.ids])
    elif ds.is_labeled:
        labels = ds.labels()
    else:
        raise ConfigError("unlabeled data needs --labels with candidate labels to score")
    rc = load_run_config(args.config, _train_overrides(args))
    desc_path = Path(args.descriptions) if args.descriptions else Path(args.data).parent / "descriptions.jsonl"
    provider = cues.make_provider(rc.cues, rc.train.seed, ds.feature_width, cues.load_descriptions(desc_path))
    sc = score_samples(rm, provider, list(ds), labels, student)
    rows = [{"id": i, "initial": float(a), "final": float(b)}
            for i, a, b in zip(ds.ids, sc.initial.data, sc.final.data)]
    _write_json(rows, args.out)
    print(f"scored {len(rows)} samples")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config, _train_overrides(args))
    grid = evalrep.AblationGrid()
    if args.grid:
        try:
            raw = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        except OSError as e:
            raise IOFailure(f"cannot read grid {args.grid}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"grid {args.grid} is not valid JSON: {e}") from None
        try:
            grid = evalrep.AblationGrid.from_dict(raw)
        except (ValueError, AttributeError, TypeError) as e:
            raise ConfigError(f"grid {args.grid}: {e}") from None
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds {args.seeds!r} must be a comma-separated list of integers") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    if args.data:
        d = Path(args.data)
        lab = _load_dataset(d / "labeled.jsonl", "labeled")
        unl = _load_dataset(d / "unlabeled.jsonl", "unlabeled")
        test = _load_dataset(d / "test.jsonl" if (d / "test.jsonl").exists() else d / "unlabeled.oracle.jsonl", "test")
        task = evalrep.AblationData(lab, unl.without_labels(), test, _provider(rc, d, lab.feature_width))
    else:
        task = evalrep.reference_task
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = evalrep.run_ablation(grid, task, rc.train, seeds, jobs=args.jobs)
    rows = res.rows()
    evalrep.write_report(rows, out / "ablation.json", "json")
    evalrep.write_report(rows, out / "ablation.csv", "csv")
    evalrep.write_report(rows, out / "ablation.md", "markdown")
    _write_json({"summary": res.summary, "verdicts": [{"check": n, "passed": ok, "detail": d} for n, ok, d in res.verdicts],
                 "errors": [dataclasses.asdict(c) for c in res.cells if c.error]}, out / "verdicts.json")
    for name, s in res.summary.items():
        sd = "" if s["sd_deg"] is None else f" +- {s['sd_deg']:.3f}"
        mean = "failed" if s["mean_deg"] is None else f"{s['mean_deg']:.3f}{sd}"
        print(f"{name}: {mean}")
    for name, ok, detail in res.verdicts:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK


# Parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--config", help="JSON run config with sections train/synthetic/cues/paths")
    p.add_argument("--seed", type=int, help=f"run seed (env {ENV_SEED}; default {d.seed})")
    p.add_argument("--tau", type=float, help=f"confidence threshold for pseudo-labels (default {d.tau})")
    p.add_argument("--teacher-epochs", type=int, help=f"teacher epochs (default {d.teacher_epochs})")
    p.add_argument("--ssl-epochs", type=int, help=f"self-training epochs (default {d.ssl_epochs})")
    p.add_argument("--batch-size", type=int, help=f"minibatch size (default {d.batch_size}; 512 at full scale)")
    p.add_argument("--refresh-interval", type=int,
                   help=f"epochs between teacher refreshes, 0 = never (default {d.refresh_interval})")


def build_parser() -> argparse.ArgumentParser:
    d = TrainConfig()
    parser = argparse.ArgumentParser(
        prog="rewardgaze",
        description="Reward-gated self-training for gaze regression.",
        epilog=(f"Precedence: flag > env ({ENV_SEED}, {cues.ENV_URL}) > --config file > defaults. "
                f"Defaults: lr teacher {d.lr_teacher} (source value), student {d.lr_student}, reward "
                f"{d.lr_reward}, weight decay {d.weight_decay}, objective weights {list(d.objective_weights)}. "
                "Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence."),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic source/target data",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--spec", help="JSON synthetic spec (keys of SyntheticSpec)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-labeled", type=int, default=500)
    p.add_argument("--n-unlabeled", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=0, help="extra held-out shifted-domain samples (test.jsonl)")
    p.add_argument("--seed", type=int, help=f"data seed (env {ENV_SEED}; default 0)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train-teacher", help="supervised teacher on labeled.jsonl",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="data directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("pseudo-label", help="label unlabeled data with a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-ssl", help="reward-gated self-training",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="data directory")
    p.add_argument("--teacher", help="teacher checkpoint; trains one when omitted")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_ssl)

    p = sub.add_parser("eval", help="mean angular error of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", help="labels for an unlabeled --data file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="reward-model confidence for candidate labels",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_train_flags(p)
    p.add_argument("--reward", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="JSONL candidate labels (default: labels in --data)")
    p.add_argument("--descriptions", help="descriptions.jsonl (default: next to --data)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="run the ablation grid",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_train_flags(p)
    p.add_argument("--grid", help="JSON {name: overrides}; default is the built-in grid")
    p.add_argument("--data", help="data directory (default: regenerate the reference task per seed)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataParseError, DataValidationError, checkpoint.CheckpointError, ProviderError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
