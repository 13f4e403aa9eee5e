"""Turn samples into ordered ``(key, value)`` pairs, optionally prefixed by auxiliary observations."""
from __future__ import annotations

import datetime as dt
import enum
import json
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import FEATURE_UNITS, Sample

DATE_KEY = "date"


class Relation(str, enum.Enum):
    CURRENT_SITE = "current_site"
    NEIGHBOR = "neighbor"


@dataclass(frozen=True)
class AuxObservation:
    source_site: str
    date: dt.date
    value: Optional[float]
    relation: Relation = Relation.CURRENT_SITE


@dataclass(frozen=True)
class LinearizedRecord:
    """Ordered key/value pairs for one sample.

    ``units`` maps a feature key to its unit string and ``names`` maps it back
    to the raw feature name; both are side metadata for the describer and are
    not part of the serialized form.
    """

    pairs: Tuple[Tuple[str, str], ...]
    sample_ref: Tuple[str, str]
    units: Mapping[str, str] = field(default_factory=dict, compare=False)
    names: Mapping[str, str] = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        return json.dumps({"sample": list(self.sample_ref), "pairs": [list(p) for p in self.pairs]},
                          ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LinearizedRecord":
        obj = json.loads(text)
        return cls(tuple((k, v) for k, v in obj["pairs"]), tuple(obj["sample"]))

    def prompt_lines(self) -> List[str]:
        return [f"[{k}: {v}]" for k, v in self.pairs]


def format_value(x: float) -> str:
    """Two fixed decimals, with a trailing ``.00`` dropped (``0``, ``151.14``, ``-3.36``)."""
    text = f"{x:.2f}"
    if text.endswith(".00"):
        text = text[:-3]
    if text == "-0":
        text = "0"
    return text


def feature_key(name: str) -> str:
    return name.replace("_", " ")


def aux_key(target: str, site: str, relation: Relation) -> str:
    if relation is Relation.NEIGHBOR:
        return f"observed {target} at neighbor site {site}"
    return f"observed {target} at site {site}"


def _feature_pairs(sample: Sample, subset: Optional[AbstractSet[str]], units: Mapping[str, str]):
    pairs, unit_map, names = [], {}, {}
    for name, value in sample.features.items():
        if subset is not None and name not in subset:
            continue
        key = feature_key(name)
        pairs.append((key, format_value(value)))
        names[key] = name
        if name in units:
            unit_map[key] = units[name]
    return pairs, unit_map, names


def linearize(
    sample: Sample,
    feature_subset: Optional[Iterable[str]] = None,
    units: Optional[Mapping[str, str]] = None,
) -> LinearizedRecord:
    """``[date: t]`` followed by one pair per present feature, in stored order."""
    subset = None if feature_subset is None else frozenset(feature_subset)
    units = FEATURE_UNITS if units is None else units
    pairs, unit_map, names = _feature_pairs(sample, subset, units)
    names[DATE_KEY] = DATE_KEY
    return LinearizedRecord(
        ((DATE_KEY, sample.date.isoformat()), *pairs),
        (sample.site_id, sample.date.isoformat()),
        unit_map,
        names,
    )


def linearize_with_auxiliary(
    sample: Sample,
    aux: Sequence[AuxObservation],
    target: str = "water temperature",
    feature_subset: Optional[Iterable[str]] = None,
    units: Optional[Mapping[str, str]] = None,
) -> LinearizedRecord:
    """Prefix earlier target observations, grouped under their own date pair.

    Observations without a value are skipped; a date with no surviving
    observation emits no date pair, so an empty ``aux`` reduces exactly to
    :func:`linearize`.
    """
    for a in aux:
        if a.date >= sample.date:
            raise ValueError(f"auxiliary observation dated {a.date} does not precede sample date {sample.date}")
    base = linearize(sample, feature_subset, units)
    groups: Dict[dt.date, List[Tuple[str, str]]] = {}
    for a in aux:
        if a.value is None:
            continue
        groups.setdefault(a.date, []).append((aux_key(target, a.source_site, Relation(a.relation)), format_value(a.value)))
    if not groups:
        return base
    prefix: List[Tuple[str, str]] = []
    names = dict(base.names)
    for date in sorted(groups):
        prefix.append((DATE_KEY, date.isoformat()))
        for key, value in groups[date]:
            prefix.append((key, value))
            names[key] = "aux"
    units_map = dict(base.units)
    return LinearizedRecord(tuple(prefix) + base.pairs, base.sample_ref, units_map, names)


def previous_day_aux(
    sample: Sample,
    lookup: Mapping[Tuple[str, dt.date], float],
    neighbors: Sequence[str] = (),
) -> List[AuxObservation]:
    """Prior-day observations of the sample's own site then its neighbors, where available."""
    prev = sample.date - dt.timedelta(days=1)
    out = [AuxObservation(sample.site_id, prev, lookup.get((sample.site_id, prev)), Relation.CURRENT_SITE)]
    out += [AuxObservation(j, prev, lookup.get((j, prev)), Relation.NEIGHBOR) for j in neighbors]
    return out
