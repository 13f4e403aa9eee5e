"""Metrics, experiment protocols and reports.

Every protocol runs on the synthetic benchmark described by a
:class:`~free_env.config.RunConfig`: simulated labels for pretraining,
perturbed observations for fine-tuning and testing, split by date.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, to_dict
from .core import (ADDITIONAL_FEATURES, METEOROLOGICAL_FEATURES, Dataset, half_up, select_sites, split_by_date,
                   subsample_labels)
from .describe import Describer
from .estimator import describe_dataset
from .simulate import build_benchmark
from .train import FreeModel, descriptions_hash, finetune, predict, pretrain, train_from_scratch

log = logging.getLogger(__name__)

Key = Tuple[str, dt.date]
SUMMER = (6, 7, 8)
WINTER = (12, 1, 2)


def rmse(predictions, observations, mask=None) -> float:
    p = np.asarray(predictions, dtype=float)
    o = np.asarray(observations, dtype=float)
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("rmse needs at least one masked element")
    d = p[m] - o[m]
    return math.sqrt(float(np.mean(d * d)))


def dataset_rmse(preds: Mapping[Key, float], ds: Dataset) -> float:
    keys = [s.key for s in ds if s.observed_label is not None]
    if not keys:
        raise ValueError("no observed labels to evaluate against")
    return rmse([preds[k] for k in keys], [ds[k].observed_label for k in keys])


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict
    rows: List[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    created: str = ""
    metric: str = "rmse"
    models: Dict[str, FreeModel] = field(default_factory=dict, repr=False, compare=False)

    def summary(self) -> Dict[str, float]:
        groups: Dict[str, List[float]] = {}
        for r in self.rows:
            groups.setdefault(r["condition"], []).append(r[self.metric])
        return {c: float(np.mean(v)) for c, v in groups.items()}

    def by_seed(self, condition: str) -> Dict[int, float]:
        return {r["seed"]: r[self.metric] for r in self.rows if r["condition"] == condition}

    def wins(self, better: str, worse: str, strict: bool = True) -> int:
        """Seeds on which ``better`` beats ``worse`` (lower RMSE, or higher accuracy)."""
        a, b = self.by_seed(better), self.by_seed(worse)
        if self.metric == "accuracy":
            a, b = b, a
        return sum((a[s] < b[s]) if strict else (a[s] <= b[s]) for s in a if s in b)

    def to_json(self) -> str:
        return json.dumps({"experiment_id": self.experiment_id, "config": self.config, "rows": self.rows,
                           "summary": self.summary(), "provenance": self.provenance, "created": self.created,
                           "metric": self.metric},
                          indent=2, sort_keys=True)

    def write(self, out_dir, save_models: bool = True) -> Path:
        """Write report.json, table.csv (per condition) and long.csv (condition, seed, metric).

        With ``save_models`` every evaluated model goes to
        ``checkpoints/<hash>.ckpt`` so each row can be re-evaluated later.
        """
        d = Path(out_dir) / self.experiment_id
        d.mkdir(parents=True, exist_ok=True)
        for h, model in (self.models.items() if save_models else ()):
            save_checkpoint(model, d / "checkpoints" / f"{h}.ckpt")
        (d / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with (d / "table.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", f"mean_{self.metric}", "n_seeds"])
            counts: Dict[str, int] = {}
            for r in self.rows:
                counts[r["condition"]] = counts.get(r["condition"], 0) + 1
            for cond, mean in self.summary().items():
                w.writerow([cond, f"{mean:.6f}", counts[cond]])
        with (d / "long.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", "seed", self.metric])
            for r in self.rows:
                w.writerow([r["condition"], r["seed"], repr(r[self.metric])])
        return d


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()


def _key_hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


class Harness:
    """Shared data, descriptions and pretrained checkpoints for the protocols."""

    def __init__(self, cfg: RunConfig, data: Optional[Dataset] = None):
        self.cfg = cfg
        self.data = data if data is not None else build_benchmark(cfg.n_sites, cfg.days, cfg.weather, cfg.sim, cfg.obs)
        start, _ = self.data.date_range
        self.boundary = start + dt.timedelta(days=cfg.train_days - 1)
        self.train, self.test = split_by_date(self.data, self.boundary)
        self.describer = Describer(cfg.prompt)
        self._pretrained: Dict[str, FreeModel] = {}

    def texts(self, ds: Dataset, subsets=None, aux=None) -> Dict[Key, str]:
        return describe_dataset(ds, self.describer, subsets, aux)

    def pretrained(self, train: Dataset, texts: Mapping[Key, str], seed: int) -> FreeModel:
        """Pretrain (or fetch an identical earlier pretraining) on simulated labels."""
        cfg = replace(self.cfg.pretrain, seed=seed, phase="pretrain")
        key = _key_hash(train.content_hash(), descriptions_hash({s.key: texts[s.key] for s in train}),
                        asdict(cfg), asdict(self.cfg.model))
        if key in self._pretrained:
            return self._pretrained[key]
        path = Path(self.cfg.cache_dir) / f"pretrain-{key[:16]}.ckpt" if self.cfg.cache_dir else None
        if path is not None and path.exists():
            model = load_checkpoint(path)
        else:
            model, _ = pretrain(train, texts, cfg, self.cfg.model)
            if path is not None:
                save_checkpoint(model, path)
        self._pretrained[key] = model
        return model

    def scratch(self, train: Dataset, texts: Mapping[Key, str], seed: int) -> FreeModel:
        cfg = replace(self.cfg.scratch, seed=seed, phase="finetune")
        model, _ = train_from_scratch(train, texts, cfg, self.cfg.model)
        return model

    def tune(self, start: FreeModel, train: Dataset, texts: Mapping[Key, str], seed: int) -> FreeModel:
        cfg = replace(self.cfg.finetune, seed=seed, phase="finetune")
        model, _ = finetune(start, train, texts, cfg)
        return model

    def score(self, model: FreeModel, test: Dataset, texts: Mapping[Key, str]) -> float:
        return dataset_rmse(predict(model, test, texts), test)

    def row(self, condition: str, seed: int, model: FreeModel, test: Dataset, texts, **extra) -> dict:
        return {"condition": condition, "seed": seed, "rmse": self.score(model, test, texts),
                "checkpoint": checkpoint_hash(model), "_model": model, **extra}

    def report(self, experiment_id: str, rows: List[dict], metric: str = "rmse") -> ExperimentReport:
        rows = sorted(rows, key=lambda r: (r["condition"], r["seed"]))
        models = {}
        for r in rows:
            m = r.pop("_model", None)
            if m is not None:
                models[r["checkpoint"]] = m
        return ExperimentReport(experiment_id, to_dict(self.cfg), rows,
                                {"data_hash": self.data.content_hash(), "boundary": self.boundary.isoformat()},
                                _now(), metric, models)


def _by_seed(fn: Callable[[int], List[dict]], seeds: Sequence[int], workers: int) -> List[dict]:
    if workers <= 1 or len(seeds) <= 1:
        return [r for s in seeds for r in fn(s)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for rows in pool.map(fn, seeds) for r in rows]


def frac_label(f: float) -> str:
    return f"{f * 100:g}%"


class _SparsityRun:
    def __init__(self, h: Harness, fractions):
        self.h, self.fractions = h, fractions

    def __call__(self, seed: int) -> List[dict]:
        h = self.h
        texts = h.texts(h.data)
        base = h.pretrained(h.train, texts, seed)
        rows = []
        for f in self.fractions:
            sparse = subsample_labels(h.train, f, seed)
            rows.append(h.row(f"FREE@{frac_label(f)}", seed, h.tune(base, sparse, texts, seed), h.test, texts,
                              arm="pretrained", fraction=f))
            if h.cfg.include_scratch:
                rows.append(h.row(f"FREE-nprt@{frac_label(f)}", seed, h.scratch(sparse, texts, seed), h.test, texts,
                                  arm="scratch", fraction=f))
        return rows


def run_sparsity(cfg: RunConfig, fractions: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None,
                 harness: Optional[Harness] = None) -> ExperimentReport:
    """Fine-tuned-from-pretrained vs from-scratch test RMSE across label fractions."""
    h = harness or Harness(cfg)
    fractions = tuple(fractions if fractions is not None else cfg.fractions)
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    rows = _by_seed(_SparsityRun(h, fractions), seeds, cfg.workers)
    return h.report("sparsity", rows)


def observable_subset(ds: Dataset, fraction: float, seed: int) -> Dict[Key, float]:
    """Observed labels flagged observable at test time (a seeded uniform subset)."""
    labeled = [s for s in ds if s.observed_label is not None]
    if fraction >= 1.0:
        return {s.key: s.observed_label for s in labeled}
    if fraction <= 0.0:
        return {}
    rng = np.random.default_rng([seed, 0x0B5])
    idx = rng.choice(len(labeled), half_up(fraction * len(labeled)), replace=False)
    return {labeled[i].key: labeled[i].observed_label for i in sorted(idx)}


class _AuxRun:
    def __init__(self, h: Harness):
        self.h = h

    def __call__(self, seed: int) -> List[dict]:
        h, cfg = self.h, self.h.cfg
        plain = h.texts(h.data)
        sparse = subsample_labels(h.train, cfg.aux_fraction, seed)
        if cfg.aux_withhold:
            obs_aux: Dict[Key, float] = {}
        else:
            obs_aux = {s.key: s.observed_label for s in sparse if s.observed_label is not None}
            obs_aux.update(observable_subset(h.test, cfg.aux_observable_fraction, seed))
        # pretraining sees the simulated value wherever an observation would be available
        sim_aux = {k: h.train[k].simulated_label for k in obs_aux if k in h.train}
        aux_pre = h.texts(h.train, aux=sim_aux)
        aux_obs = h.texts(h.data, aux=obs_aux)

        base = h.pretrained(h.train, plain, seed)
        free = h.tune(base, sparse, plain, seed)
        base_c = h.pretrained(h.train, aux_pre, seed)
        free_c = h.tune(base_c, sparse, aux_obs, seed)
        n_aux = sum(1 for s in h.test if plain[s.key] != aux_obs[s.key])
        return [h.row("FREE", seed, free, h.test, plain, arm="FREE"),
                h.row("FREE-C", seed, free_c, h.test, aux_obs, arm="FREE-C", test_with_aux=n_aux)]


def run_auxiliary(cfg: RunConfig, seeds: Optional[Sequence[int]] = None,
                  harness: Optional[Harness] = None) -> ExperimentReport:
    """FREE vs FREE-C (prior-day current-site observation in the description)."""
    h = harness or Harness(cfg)
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    return h.report("auxiliary", _by_seed(_AuxRun(h), seeds, cfg.workers))


def feature_subsets(ds: Dataset, m: int, seed: int) -> Dict[Key, Tuple[str, ...]]:
    """Meteorological features plus ``m`` additional features drawn per sample."""
    if not (0 <= m <= len(ADDITIONAL_FEATURES)):
        raise ValueError(f"m must lie in [0, {len(ADDITIONAL_FEATURES)}], got {m}")
    rng = np.random.default_rng([seed, m, 0xFEA7])
    out = {}
    for s in ds:
        if m == len(ADDITIONAL_FEATURES):
            extra = ADDITIONAL_FEATURES
        else:
            pick = set(rng.choice(len(ADDITIONAL_FEATURES), m, replace=False).tolist()) if m else set()
            extra = tuple(f for i, f in enumerate(ADDITIONAL_FEATURES) if i in pick)
        out[s.key] = METEOROLOGICAL_FEATURES + extra
    return out


class _FeatureRun:
    def __init__(self, h: Harness, m_values):
        self.h, self.m_values = h, m_values

    def __call__(self, seed: int) -> List[dict]:
        h = self.h
        sparse = subsample_labels(h.train, h.cfg.feature_fraction, seed)
        rows = []
        for m in self.m_values:
            texts = h.texts(h.data, subsets=feature_subsets(h.data, m, seed))
            base = h.pretrained(h.train, texts, seed)
            rows.append(h.row(f"FREE-A{m}", seed, h.tune(base, sparse, texts, seed), h.test, texts, m=m))
        return rows


def run_feature_sets(cfg: RunConfig, m_values: Optional[Sequence[int]] = None, seeds: Optional[Sequence[int]] = None,
                     harness: Optional[Harness] = None) -> ExperimentReport:
    """FREE-A<m>: meteorological drivers plus m randomly chosen additional features per sample."""
    m_values = tuple(m_values if m_values is not None else cfg.m_values)
    for m in m_values:
        if not (0 <= m <= len(ADDITIONAL_FEATURES)):
            raise ValueError(f"m={m} exceeds the {len(ADDITIONAL_FEATURES)} available additional features")
    h = harness or Harness(cfg)
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    return h.report("features", _by_seed(_FeatureRun(h, m_values), seeds, cfg.workers))


class _TransferRun:
    def __init__(self, h: Harness, sources, targets, fractions):
        self.h, self.sources, self.targets, self.fractions = h, sources, targets, fractions

    def __call__(self, seed: int) -> List[dict]:
        h = self.h
        texts = h.texts(h.data)
        src_train = select_sites(h.train, self.sources)
        tgt_train = select_sites(h.train, self.targets)
        tgt_test = select_sites(h.test, self.targets)
        src_model = h.pretrained(src_train, texts, seed)
        tgt_model = h.pretrained(tgt_train, texts, seed)
        rows = []
        for f in self.fractions:
            sparse = subsample_labels(tgt_train, f, seed)
            lab = frac_label(f)
            rows.append(h.row(f"FREE_trs@{lab}", seed, h.tune(src_model, sparse, texts, seed), tgt_test, texts,
                              arm="source-pretrained", fraction=f))
            rows.append(h.row(f"FREE@{lab}", seed, h.tune(tgt_model, sparse, texts, seed), tgt_test, texts,
                              arm="target-pretrained", fraction=f))
            rows.append(h.row(f"FREE-nprt@{lab}", seed, h.scratch(sparse, texts, seed), tgt_test, texts,
                              arm="scratch", fraction=f))
        return rows


def run_transfer(cfg: RunConfig, sources: Optional[Sequence[str]] = None, targets: Optional[Sequence[str]] = None,
                 fractions: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None,
                 harness: Optional[Harness] = None) -> ExperimentReport:
    """Source-pretrained vs target-pretrained vs from-scratch on held-out target sites."""
    sources = tuple(sources if sources is not None else cfg.transfer_sources)
    targets = tuple(targets if targets is not None else cfg.transfer_targets)
    overlap = set(sources) & set(targets)
    if overlap:
        raise ValueError(f"source and target sites overlap: {sorted(overlap)}")
    h = harness or Harness(cfg)
    missing = (set(sources) | set(targets)) - set(h.data.sites)
    if missing:
        raise ValueError(f"unknown sites {sorted(missing)}")
    fractions = tuple(fractions if fractions is not None else cfg.transfer_fractions)
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    return h.report("transfer", _by_seed(_TransferRun(h, sources, targets, fractions), seeds, cfg.workers))


def season_of(date: dt.date) -> Optional[str]:
    if date.month in SUMMER:
        return "summer"
    if date.month in WINTER:
        return "winter"
    return None


def probe_embeddings(model: FreeModel, texts: Sequence[str], seasons: Sequence[str], seed: int = 0,
                     export_path=None, keys: Optional[Sequence[Key]] = None) -> float:
    """Held-out accuracy of a least-squares linear summer/winter classifier on embeddings."""
    labels = np.array([1.0 if s == "summer" else -1.0 for s in seasons])
    if len(set(seasons)) < 2:
        raise ValueError("probe needs both summer and winter samples")
    emb = model.embed([model.tokenize(t) for t in texts]).astype(np.float64)
    if export_path is not None:
        export_embeddings(export_path, emb, seasons, keys)
    rng = np.random.default_rng([seed, 0x9B0E])
    train_idx, test_idx = [], []
    for cls in (1.0, -1.0):
        idx = rng.permutation(np.nonzero(labels == cls)[0])
        half = len(idx) // 2
        train_idx += idx[:half].tolist()
        test_idx += idx[half:].tolist()
    X = np.hstack([emb, np.ones((len(emb), 1))])
    w, *_ = np.linalg.lstsq(X[train_idx], labels[train_idx], rcond=None)
    pred = np.where(X[test_idx] @ w > 0, 1.0, -1.0)
    return float(np.mean(pred == labels[test_idx]))


def export_embeddings(path, emb: np.ndarray, tags: Sequence[str], keys: Optional[Sequence[Key]] = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "date", "tag"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, row in enumerate(emb):
            site, date = keys[i] if keys is not None else ("", "")
            w.writerow([site, date.isoformat() if date else "", tags[i]] + [f"{v:.7g}" for v in row])


def season_sample(ds: Dataset, per_season: int, seed: int) -> List[Tuple[Key, str]]:
    """Up to ``per_season`` random samples from each of summer and winter."""
    rng = np.random.default_rng([seed, 0x5EA5])
    out = []
    for season in ("summer", "winter"):
        keys = [s.key for s in ds if season_of(s.date) == season]
        if len(keys) < per_season:
            raise ValueError(f"only {len(keys)} {season} samples, {per_season} requested")
        pick = sorted(rng.choice(len(keys), per_season, replace=False))
        out += [(keys[i], season) for i in pick]
    return out


class _ProbeRun:
    def __init__(self, h: Harness, export_dir):
        self.h, self.export_dir = h, export_dir

    def __call__(self, seed: int) -> List[dict]:
        h = self.h
        texts = h.texts(h.data)
        model = h.pretrained(h.train, texts, seed)
        random_model = FreeModel.initialize(model.config, model.vocab, seed)
        picks = season_sample(h.test, h.cfg.probe_per_season, seed)
        keys = [k for k, _ in picks]
        tags = [s for _, s in picks]
        sel = [texts[k] for k in keys]
        rows = []
        for name, m in (("pretrained", model), ("random-init", random_model)):
            path = None if self.export_dir is None else Path(self.export_dir) / f"embeddings-{name}-seed{seed}.csv"
            acc = probe_embeddings(m, sel, tags, seed, path, keys)
            rows.append({"condition": name, "seed": seed, "accuracy": acc,
                         "checkpoint": checkpoint_hash(m)})
        return rows


def run_probe(cfg: RunConfig, seeds: Optional[Sequence[int]] = None, harness: Optional[Harness] = None,
              export_dir=None) -> ExperimentReport:
    h = harness or Harness(cfg)
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    return h.report("probe", _by_seed(_ProbeRun(h, export_dir), seeds, cfg.workers), metric="accuracy")


PROTOCOLS = {
    "sparsity": run_sparsity,
    "auxiliary": run_auxiliary,
    "features": run_feature_sets,
    "transfer": run_transfer,
    "probe": run_probe,
}
