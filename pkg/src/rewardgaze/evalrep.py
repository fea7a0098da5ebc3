"""Evaluation, reward-discrimination AUC, ablation grid and report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import geometry
from .cues import CueProviderConfig, SyntheticCueProvider
from .data import Dataset, SyntheticSpec, generate_synthetic
from .nets import GazeEstimatorParams, predict
from .pipeline import TrainConfig, TrainingDiverged, run_selftraining

REPORT_FIELDS = ("config", "seed", "mean_deg", "sd_deg", "n", "retained_fraction_final")
DECILES = tuple(q / 10 for q in range(1, 10))


@dataclass
class EvalReport:
    dataset: str
    n: int
    mean_deg: float
    deciles: list[float]
    config_hash: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("an evaluation report needs at least one sample")
        if not 0.0 <= self.mean_deg <= 180.0:
            raise ValueError(f"mean error {self.mean_deg} outside [0, 180]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(params: GazeEstimatorParams, dataset: Dataset, oracle: Dataset | None = None,
             config_hash: str = "", seed: int | None = None) -> EvalReport:
    """Mean angular error (degrees) of ``params`` on ``dataset``.

    Labels come from ``dataset`` or, for an unlabeled set, from ``oracle``
    (matched by id). The mean is an exactly rounded sum, so it does not
    depend on sample order.
    """
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.name!r} is empty")
    if not dataset.is_labeled:
        if oracle is None:
            raise ValueError(f"dataset {dataset.name!r} is unlabeled and no oracle was supplied")
        truth = {s.id: s.label for s in oracle}
        missing = [s.id for s in dataset if truth.get(s.id) is None]
        if missing:
            raise ValueError(f"oracle lacks labels for {len(missing)} samples, e.g. {missing[0]!r}")
        dataset = dataset.with_labels(truth)
    errs = geometry.angular_errors(predict(params, dataset.features()), dataset.labels())
    mean = math.fsum(errs.tolist()) / len(errs)
    deciles = [float(v) for v in np.quantile(errs, DECILES)] if len(errs) else []
    return EvalReport(dataset.name, len(errs), mean, deciles, config_hash, seed)


def discrimination_auc(scores, corrupted) -> float:
    """Mann-Whitney AUC of ``scores`` with clean samples as the positive class.

    ``corrupted`` is a boolean mask (True = corrupted label). Ties count 0.5.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    bad = np.asarray(corrupted, dtype=bool).reshape(-1)
    if s.shape != bad.shape:
        raise ValueError(f"{s.size} scores but {bad.size} mask entries")
    n_pos, n_neg = int(np.sum(~bad)), int(np.sum(bad))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both clean and corrupted samples")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[~bad].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# Ablation harness

SWITCHES = ("objective_weights", "filter", "reweight", "score_variant", "refresh_interval", "tau")

DEFAULT_CONFIGS: dict[str, dict] = {
    "baseline": {"objective_weights": [1.0, 0.0]},
    "nofilter": {"filter": False, "reweight": False},
    "full": {},
    "filter_only": {"reweight": False},
    "reweight_only": {"filter": False},
    "rhat_only": {"score_variant": "initial"},
    "refresh_1": {"refresh_interval": 1},
    "refresh_10": {"refresh_interval": 10},
    "no_refresh": {"refresh_interval": None},
}


@dataclass
class AblationGrid:
    """Named configs, each a set of overrides restricted to :data:`SWITCHES`."""

    configs: dict[str, dict] = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_CONFIGS.items()})

    def __post_init__(self):
        if not self.configs:
            raise ValueError("ablation grid is empty")
        for name, over in self.configs.items():
            extra = sorted(set(over) - set(SWITCHES))
            if extra:
                raise ValueError(f"config {name!r} changes undeclared keys {extra}")

    def subset(self, names: Sequence[str]) -> "AblationGrid":
        return AblationGrid({n: dict(self.configs[n]) for n in names})

    def resolve(self, name: str, base: TrainConfig, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**base.to_dict(), **self.configs[name], "seed": seed})

    @classmethod
    def from_dict(cls, d: Mapping) -> "AblationGrid":
        return cls({str(k): dict(v) for k, v in d.items()})


@dataclass
class AblationData:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    provider: object


def reference_task(seed: int, spec: SyntheticSpec | None = None, n_labeled: int = 500,
                   n_unlabeled: int = 2000, n_test: int = 1000) -> AblationData:
    """Labeled source set, unlabeled shifted set and a held-out shifted test set."""
    spec = spec or REFERENCE_SPEC
    lab, _, oracle = generate_synthetic(spec, n_labeled, n_unlabeled + n_test, seed)
    test = oracle.subset(range(n_unlabeled, n_unlabeled + n_test), "test")
    unl = oracle.subset(range(n_unlabeled), "unlabeled").without_labels()
    gaze = {s.id: s.label for s in lab}
    gaze.update({s.id: s.label for s in oracle})
    provider = SyntheticCueProvider.from_gaze(CueProviderConfig(), seed, gaze, spec.d_x)
    return AblationData(lab, unl, test, provider)


REFERENCE_SPEC = SyntheticSpec(label_noise_deg=6.0)


@dataclass
class Cell:
    config: str
    seed: int
    mean_deg: float | None = None
    n: int = 0
    retained_fraction_final: float | None = None
    error: str | None = None

    def row(self) -> dict:
        return {"config": self.config, "seed": self.seed, "mean_deg": self.mean_deg, "sd_deg": None,
                "n": self.n, "retained_fraction_final": self.retained_fraction_final}


@dataclass
class AblationResult:
    cells: list[Cell]
    summary: dict[str, dict]
    verdicts: list[tuple[str, bool, str]]

    def rows(self) -> list[dict]:
        """Per-cell rows followed by one seed-aggregate row per config (seed = number of seeds)."""
        out = [c.row() for c in self.cells if c.error is None]
        for name, s in self.summary.items():
            if s["mean_deg"] is not None:
                out.append({"config": name, "seed": s["n_seeds"], "mean_deg": s["mean_deg"], "sd_deg": s["sd_deg"],
                            "n": s["n"], "retained_fraction_final": s["retained_fraction_final"]})
        return out


def _run_cell(args) -> Cell:
    name, cfg, data, seed = args
    try:
        d = data(seed) if callable(data) else data
        res = run_selftraining(d.labeled, d.unlabeled, d.provider, cfg)
        rep = evaluate(res.student, d.test, seed=seed, config_hash=cfg.digest())
        last = res.history.records[-1].retained_fraction if res.history.records else None
        return Cell(name, seed, rep.mean_deg, rep.n, last)
    except (TrainingDiverged, ValueError, ArithmeticError, KeyError, OSError) as e:
        return Cell(name, seed, error=f"{type(e).__name__}: {e}")


def summarize(cells: Sequence[Cell]) -> dict[str, dict]:
    out = {}
    for name in sorted({c.config for c in cells}):
        ok = [c for c in cells if c.config == name and c.error is None]
        errs = [c.mean_deg for c in ok]
        kept = [c.retained_fraction_final for c in ok if c.retained_fraction_final is not None]
        out[name] = {
            "n_seeds": len(ok),
            "mean_deg": statistics.fmean(errs) if errs else None,
            "sd_deg": statistics.stdev(errs) if len(errs) > 1 else None,
            "n": ok[0].n if ok else 0,
            "retained_fraction_final": statistics.fmean(kept) if kept else None,
            "failed": [c.seed for c in cells if c.config == name and c.error is not None],
        }
    return out


def ordering_verdicts(summary: Mapping[str, Mapping], margin: float = 0.2) -> list[tuple[str, bool, str]]:
    """Directional checks on seed-mean errors; configs absent from ``summary`` are skipped."""
    m = {k: v["mean_deg"] for k, v in summary.items() if v.get("mean_deg") is not None}
    sd = {k: v.get("sd_deg") for k, v in summary.items()}
    out = []

    def have(*names):
        return all(n in m for n in names)

    if have("baseline", "nofilter", "full"):
        ok = m["nofilter"] < m["baseline"] - margin and m["full"] < m["nofilter"] - margin
        out.append(("core_components", ok, f"full {m['full']:.3f} < nofilter {m['nofilter']:.3f} "
                                           f"< baseline {m['baseline']:.3f} (gaps > {margin})"))
    if have("filter_only", "reweight_only", "nofilter", "full"):
        ok = (m["filter_only"] < m["nofilter"] and m["reweight_only"] < m["nofilter"]
              and m["full"] < m["filter_only"] and m["full"] < m["reweight_only"])
        out.append(("filtering_strategy", ok, f"filter_only {m['filter_only']:.3f}, reweight_only "
                                              f"{m['reweight_only']:.3f}, nofilter {m['nofilter']:.3f}, full {m['full']:.3f}"))
    if have("full", "rhat_only"):
        out.append(("confidence_score", m["full"] <= m["rhat_only"],
                    f"final score {m['full']:.3f} <= initial score {m['rhat_only']:.3f}"))
    if have("refresh_1", "refresh_10", "no_refresh"):
        ok = m["refresh_10"] <= m["no_refresh"]
        out.append(("refresh_interval", ok, f"K=10 {m['refresh_10']:.3f} <= no refresh {m['no_refresh']:.3f}"))
        sds = {k: sd.get(k) for k in ("refresh_1", "refresh_10", "no_refresh")}
        if all(v is not None for v in sds.values()):
            largest = max(sds, key=sds.get)
            out.append(("refresh_variance", largest == "refresh_1",
                        "seed sd " + ", ".join(f"{k} {v:.3f}" for k, v in sds.items())))
    return out


def run_ablation(grid: AblationGrid, data: AblationData | Callable[[int], AblationData], cfg: TrainConfig,
                 seeds: Sequence[int], jobs: int = 1) -> AblationResult:
    """Train and evaluate every config for every seed.

    ``data`` is either a fixed task or a function of the seed. Configs that
    resolve to identical training configs are run once per seed and shared.
    A failing cell is recorded with its error; other cells are unaffected.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    jobs_by_key: dict[tuple[str, int], tuple] = {}
    owners: list[tuple[str, int, tuple[str, int]]] = []
    for name in sorted(grid.configs):
        for seed in seeds:
            c = grid.resolve(name, cfg, seed)
            key = (c.digest(), seed)
            jobs_by_key.setdefault(key, (name, c, data, seed))
            owners.append((name, seed, key))
    keys = list(jobs_by_key)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = dict(zip(keys, pool.map(_run_cell, [jobs_by_key[k] for k in keys])))
    else:
        done = {k: _run_cell(jobs_by_key[k]) for k in keys}
    cells = [dataclasses.replace(done[key], config=name) for name, seed, key in owners]
    summary = summarize(cells)
    return AblationResult(cells, summary, ordering_verdicts(summary))


# Report files


def _normalise(row: Mapping) -> dict:
    unknown = sorted(set(row) - set(REPORT_FIELDS))
    if unknown:
        raise ValueError(f"unknown report fields {unknown}")
    return {k: row.get(k) for k in REPORT_FIELDS}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_report(rows: Sequence[Mapping], fmt: str = "json") -> str:
    rows = [_normalise(r) for r in rows]
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(REPORT_FIELDS) + " |", "|" + "---|" * len(REPORT_FIELDS)]
        lines += ["| " + " | ".join(_fmt(r[k]) for k in REPORT_FIELDS) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(rows: Sequence[Mapping], path, fmt: str = "json") -> Path:
    text = render_report(rows, fmt)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e.strerror or e}") from e
    return path


def read_report(path) -> list[dict]:
    return [_normalise(r) for r in json.loads(Path(path).read_text(encoding="utf-8"))]
