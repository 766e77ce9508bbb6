"""The 58-entry feature catalog and per-key feature extraction."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .core import DT_S, WindowKey
from .errors import IntegrityError, SchemaError
from .events import FIXATION, SACCADE

CATALOG_VERSION = 1
N_FEATURES = 58
EVENT_KINDS = {"Fix": FIXATION, "Sac": SACCADE}
KEY_COLUMNS = ("subject_id", "session", "round", "task")


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    event: str
    measure: str
    channel: str
    agg: str

    @property
    def measure_key(self) -> str:
        return f"{self.measure}_{self.channel}"


@dataclass(frozen=True)
class FeatureCatalog:
    entries: tuple
    version: int = CATALOG_VERSION

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.entries)


def _validate(entries) -> None:
    if len(entries) != N_FEATURES:
        raise SchemaError(f"feature catalog must list exactly {N_FEATURES} entries, found {len(entries)}")
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise SchemaError("feature catalog names must be unique")
    known = _known_measures()
    for e in entries:
        if e.event not in EVENT_KINDS or e.channel not in ("H", "V", "R") or e.agg not in ("Md", "Rate"):
            raise SchemaError(f"malformed catalog entry {e}")
        expected = f"{e.event}_Rate" if e.agg == "Rate" else f"{e.event}_{e.measure}_{e.channel}_{e.agg}"
        if e.name != expected:
            raise SchemaError(f"catalog name {e.name!r} does not follow the naming grammar ({expected!r})")
        if e.agg == "Md" and e.measure_key not in known:
            raise SchemaError(f"catalog entry {e.name} binds to unknown measure {e.measure_key}")


@lru_cache(maxsize=1)
def _known_measures() -> frozenset:
    from .core import VelocitySignal
    from .events import event_measures

    z = np.zeros(8)
    return frozenset(event_measures(0, 8, VelocitySignal(z, z), np.zeros((2, 8))))


def read_catalog(path) -> FeatureCatalog:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    entries = tuple(CatalogEntry(r["name"], r["event"], r["measure"], r["channel"], r["agg"]) for r in rows)
    _validate(entries)
    return FeatureCatalog(entries)


@lru_cache(maxsize=1)
def load_catalog() -> FeatureCatalog:
    """The shipped, versioned catalog."""
    ref = resources.files("gazepriv") / "data" / f"feature_catalog_v{CATALOG_VERSION}.csv"
    with resources.as_file(ref) as path:
        return read_catalog(path)


@dataclass
class FeatureVector:
    key: WindowKey
    values: np.ndarray
    present: np.ndarray

    def __getitem__(self, name: str) -> float:
        i = load_catalog().index(name)
        return float(self.values[i]) if self.present[i] else float("nan")


def extract(segs, catalog: FeatureCatalog | None = None) -> FeatureVector:
    """Pool events across all windows of one key: rates per second, medians per measure."""
    catalog = catalog or load_catalog()
    segs = list(segs)
    if not segs:
        raise ValueError("extract needs at least one segmentation")
    keys = {s.key for s in segs}
    if len(keys) != 1:
        raise IntegrityError(f"segmentations span several keys: {sorted(map(str, keys))}")
    seconds = sum(s.n_samples for s in segs) * DT_S
    by_kind = {kind: [e for s in segs for e in s.events if e.kind == kind] for kind in (FIXATION, SACCADE)}
    values = np.full(len(catalog), np.nan)
    present = np.zeros(len(catalog), dtype=bool)
    for i, entry in enumerate(catalog.entries):
        events = by_kind[EVENT_KINDS[entry.event]]
        if entry.agg == "Rate":
            values[i] = len(events) / seconds
            present[i] = True
        elif events:
            values[i] = float(np.median([e.measures[entry.measure_key] for e in events]))
            present[i] = bool(np.isfinite(values[i]))
    return FeatureVector(WindowKey(*segs[0].key), values, present)


def _key_sort(key):
    return (str(key[0]), int(key[1]), int(key[2]), str(key[3]))


@dataclass
class FeatureTable:
    keys: list
    values: np.ndarray
    present: np.ndarray
    names: list

    def __len__(self):
        return len(self.keys)

    def column(self, name: str) -> np.ndarray:
        i = self.names.index(name)
        return np.where(self.present[:, i], self.values[:, i], np.nan)

    def filter(self, task=None, rounds=None) -> "FeatureTable":
        keep = [i for i, k in enumerate(self.keys)
                if (task is None or k[3] == task) and (rounds is None or k[2] in rounds)]
        return FeatureTable([self.keys[i] for i in keep], self.values[keep], self.present[keep], self.names)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(KEY_COLUMNS) + self.names + [f"{n}__present" for n in self.names])
            for k, vals, pres in zip(self.keys, self.values, self.present):
                cells = [repr(float(v)) if p else "" for v, p in zip(vals, pres)]
                w.writerow(list(k) + cells + [int(p) for p in pres])

    @classmethod
    def read_csv(cls, path) -> "FeatureTable":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty feature table")
        names = header[len(KEY_COLUMNS):len(KEY_COLUMNS) + N_FEATURES]
        if list(header[:len(KEY_COLUMNS)]) != list(KEY_COLUMNS) or len(header) != len(KEY_COLUMNS) + 2 * N_FEATURES:
            raise SchemaError(f"{path}: not a feature table")
        keys, values, present = [], [], []
        for row in reader:
            keys.append(WindowKey(row[0], int(row[1]), int(row[2]), row[3]))
            feats = row[4:4 + N_FEATURES]
            values.append([float(c) if c else np.nan for c in feats])
            present.append([c == "1" for c in row[4 + N_FEATURES:]])
        return cls(keys, np.array(values, dtype=float).reshape(-1, N_FEATURES),
                   np.array(present, dtype=bool).reshape(-1, N_FEATURES), names)


def feature_table(vectors, catalog: FeatureCatalog | None = None) -> FeatureTable:
    """Stack feature vectors into a table sorted by key; duplicate keys are an error."""
    catalog = catalog or load_catalog()
    vectors = sorted(vectors, key=lambda fv: _key_sort(fv.key))
    keys = [WindowKey(*fv.key) for fv in vectors]
    if len(set(keys)) != len(keys):
        seen, dup = set(), None
        for k in keys:
            if k in seen:
                dup = k
                break
            seen.add(k)
        raise IntegrityError(f"duplicate feature key {dup}")
    values = np.array([fv.values for fv in vectors], dtype=float).reshape(-1, len(catalog))
    present = np.array([fv.present for fv in vectors], dtype=bool).reshape(-1, len(catalog))
    return FeatureTable(keys, values, present, catalog.names)


def extract_all(segmentations, catalog: FeatureCatalog | None = None) -> FeatureTable:
    """Group segmentations by key, extract each group, and build the table."""
    groups = {}
    for seg in segmentations:
        groups.setdefault(WindowKey(*seg.key), []).append(seg)
    return feature_table([extract(g, catalog) for g in groups.values()], catalog)

