"""Data model: samples, datasets, site graphs, label subsampling and date splits."""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SITE_COL = "site_id"
DATE_COL = "date"
OBS_COL = "observed_label"
SIM_COL = "simulated_label"

# canonical unit strings for the built-in stream features
FEATURE_UNITS: Dict[str, str] = {
    "rainfall": "mm",
    "air_temperature": "degC",
    "solar_radiation": "W/m2",
    "cloud_cover": "fraction",
    "groundwater_temperature": "degC",
    "subsurface_temperature": "degC",
    "potential_evapotranspiration": "mm",
}

METEOROLOGICAL_FEATURES: Tuple[str, ...] = ("rainfall", "air_temperature", "solar_radiation")
ADDITIONAL_FEATURES: Tuple[str, ...] = (
    "cloud_cover",
    "groundwater_temperature",
    "subsurface_temperature",
    "potential_evapotranspiration",
)
STREAM_SCHEMA: Tuple[str, ...] = METEOROLOGICAL_FEATURES + ADDITIONAL_FEATURES


class IngestionError(ValueError):
    """Raised when a dataset file or sample collection violates the data model."""


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


@dataclass(frozen=True)
class Sample:
    """One (site, date) record.

    ``features`` keeps insertion order; a missing feature is simply absent.
    """

    site_id: str
    date: dt.date
    features: Mapping[str, float] = field(default_factory=dict)
    observed_label: Optional[float] = None
    simulated_label: Optional[float] = None

    def __post_init__(self):
        feats = dict(self.features)
        for name, value in feats.items():
            if not name:
                raise IngestionError("empty feature name")
            if not math.isfinite(value):
                raise IngestionError(f"non-finite value for feature {name!r}")
        object.__setattr__(self, "features", feats)
        for label in (self.observed_label, self.simulated_label):
            if label is not None and not math.isfinite(label):
                raise IngestionError("non-finite label")

    @property
    def key(self) -> Tuple[str, dt.date]:
        return (self.site_id, self.date)

    def with_features(self, names: Iterable[str]) -> "Sample":
        keep = set(names)
        return replace(self, features={k: v for k, v in self.features.items() if k in keep})


@dataclass(frozen=True)
class SplitSpec:
    train_end: dt.date
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.label_fraction)


def check_fraction(fraction: float, name: str = "fraction") -> float:
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {fraction}")
    return float(fraction)


class Dataset:
    """Immutable collection of samples, at most one per (site, date), daily-contiguous per site."""

    def __init__(self, samples: Iterable[Sample], units: Optional[Mapping[str, str]] = None):
        self._samples: Tuple[Sample, ...] = tuple(samples)
        self.units: Dict[str, str] = dict(FEATURE_UNITS if units is None else units)
        self._index: Dict[Tuple[str, dt.date], int] = {}
        by_site: Dict[str, List[dt.date]] = {}
        for row, s in enumerate(self._samples):
            if s.key in self._index:
                raise IngestionError(f"duplicate (site, date) {s.site_id},{s.date} at sample {row}")
            self._index[s.key] = row
            by_site.setdefault(s.site_id, []).append(s.date)
        for site, dates in by_site.items():
            dates.sort()
            for a, b in zip(dates, dates[1:]):
                if (b - a).days != 1:
                    raise IngestionError(f"gap in dates for site {site} between {a} and {b}")
        self._site_dates = by_site

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def __getitem__(self, key: Tuple[str, dt.date]) -> Sample:
        return self._samples[self._index[key]]

    def __contains__(self, key) -> bool:
        return key in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._samples == other._samples

    def __repr__(self) -> str:
        return f"Dataset(n_samples={len(self)}, n_sites={len(self.sites)})"

    @property
    def samples(self) -> Tuple[Sample, ...]:
        return self._samples

    @property
    def sites(self) -> List[str]:
        """Site ids in first-appearance order."""
        return list(self._site_dates)

    @property
    def date_range(self) -> Optional[Tuple[dt.date, dt.date]]:
        if not self._samples:
            return None
        lo = min(d[0] for d in self._site_dates.values())
        hi = max(d[-1] for d in self._site_dates.values())
        return lo, hi

    @property
    def feature_names(self) -> List[str]:
        names: Dict[str, None] = {}
        for s in self._samples:
            for k in s.features:
                names.setdefault(k, None)
        return list(names)

    def site_samples(self, site_id: str) -> List[Sample]:
        """Samples of one site sorted by date."""
        dates = self._site_dates.get(site_id, [])
        return [self[(site_id, d)] for d in dates]

    def n_observed(self) -> int:
        return sum(s.observed_label is not None for s in self._samples)

    def n_simulated(self) -> int:
        return sum(s.simulated_label is not None for s in self._samples)

    def map(self, fn) -> "Dataset":
        return Dataset((fn(s) for s in self._samples), units=self.units)

    def filter(self, pred) -> "Dataset":
        return Dataset((s for s in self._samples if pred(s)), units=self.units)

    def to_csv(self, path=None, schema: Optional[Sequence[str]] = None) -> str:
        """Serialize to the standard CSV layout; returns the text and writes it if ``path`` is given."""
        schema = list(schema) if schema is not None else self.feature_names
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([SITE_COL, DATE_COL, *schema, OBS_COL, SIM_COL])
        for s in self._samples:
            w.writerow(
                [s.site_id, s.date.isoformat()]
                + [_fmt(s.features.get(k)) for k in schema]
                + [_fmt(s.observed_label), _fmt(s.simulated_label)]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def load_dataset(csv_path, schema: Optional[Sequence[str]] = None, units: Optional[Mapping[str, str]] = None) -> Dataset:
    """Read the standard CSV layout.

    Empty feature cells become absent features and empty label cells absent
    labels. Errors name the 1-based file row (the header is row 1).
    """
    path = Path(csv_path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if schema is None:
            schema = [h for h in header if h not in (SITE_COL, DATE_COL, OBS_COL, SIM_COL)]
        missing = [c for c in (SITE_COL, DATE_COL, *schema) if c not in header]
        if missing:
            raise IngestionError(f"{path}: header lacks columns {missing}")
        col = {name: header.index(name) for name in header}
        samples: List[Sample] = []
        seen: Dict[Tuple[str, dt.date], int] = {}
        last: Dict[str, dt.date] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"row {rowno}: expected {len(header)} cells, got {len(row)}")
            site = row[col[SITE_COL]].strip()
            try:
                date = parse_date(row[col[DATE_COL]])
            except ValueError:
                raise IngestionError(f"row {rowno}: malformed date {row[col[DATE_COL]]!r}") from None
            if (site, date) in seen:
                raise IngestionError(f"row {rowno}: duplicate (site, date) {site},{date} (first at row {seen[(site, date)]})")
            prev = last.get(site)
            if prev is not None and (date - prev).days != 1:
                raise IngestionError(f"gap at row {rowno}: site {site} jumps from {prev} to {date}")
            seen[(site, date)] = rowno
            last[site] = date
            feats = {}
            for name in schema:
                cell = row[col[name]].strip()
                if cell:
                    feats[name] = _parse_number(cell, rowno, name)
            labels = []
            for name in (OBS_COL, SIM_COL):
                cell = row[col[name]].strip() if name in col else ""
                labels.append(_parse_number(cell, rowno, name) if cell else None)
            samples.append(Sample(site, date, feats, labels[0], labels[1]))
    return Dataset(samples, units=units)


def _parse_number(cell: str, rowno: int, name: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise IngestionError(f"row {rowno}: non-numeric value {cell!r} in column {name}") from None
    if not math.isfinite(value):
        raise IngestionError(f"row {rowno}: non-finite value {cell!r} in column {name}")
    return value


def half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``round(fraction * L)`` of the L observed labels, chosen uniformly without replacement."""
    check_fraction(fraction)
    labeled = [i for i, s in enumerate(ds) if s.observed_label is not None]
    n_keep = half_up(fraction * len(labeled))
    if n_keep == len(labeled):
        return ds
    rng = np.random.default_rng(seed)
    keep = set(np.asarray(labeled)[rng.choice(len(labeled), size=n_keep, replace=False)].tolist())
    return Dataset(
        (s if (s.observed_label is None or i in keep) else replace(s, observed_label=None) for i, s in enumerate(ds)),
        units=ds.units,
    )


def split_by_date(ds: Dataset, boundary: dt.date) -> Tuple[Dataset, Dataset]:
    """Split into (date <= boundary, date > boundary)."""
    rng = ds.date_range
    if rng is None or not (rng[0] <= boundary <= rng[1]):
        raise ValueError(f"boundary {boundary} outside date range {rng}")
    return ds.filter(lambda s: s.date <= boundary), ds.filter(lambda s: s.date > boundary)


def select_sites(ds: Dataset, sites: Iterable[str]) -> Dataset:
    keep = set(sites)
    return ds.filter(lambda s: s.site_id in keep)


class SiteGraph:
    """Directed neighbor lists, canonicalized to lexicographic order."""

    def __init__(self, neighbors: Mapping[str, Iterable[str]], sites: Optional[Iterable[str]] = None):
        known = set(sites) if sites is not None else None
        canon: Dict[str, List[str]] = {}
        for site, nbrs in neighbors.items():
            nbrs = sorted(set(nbrs))
            if site in nbrs:
                raise IngestionError(f"self-loop at site {site}")
            if known is not None:
                unknown = [n for n in [site, *nbrs] if n not in known]
                if unknown:
                    raise IngestionError(f"unknown sites in neighbor graph: {unknown}")
            canon[site] = nbrs
        self.neighbors = canon

    def __getitem__(self, site: str) -> List[str]:
        return self.neighbors.get(site, [])

    def __eq__(self, other):
        return isinstance(other, SiteGraph) and self.neighbors == other.neighbors


def load_site_graph(csv_path, dataset: Optional[Dataset] = None) -> SiteGraph:
    edges: Dict[str, List[str]] = {}
    with Path(csv_path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"site_id", "neighbor_id"} <= set(reader.fieldnames):
            raise IngestionError(f"{csv_path}: header must contain site_id,neighbor_id")
        for row in reader:
            edges.setdefault(row["site_id"].strip(), []).append(row["neighbor_id"].strip())
    return SiteGraph(edges, sites=dataset.sites if dataset is not None else None)
