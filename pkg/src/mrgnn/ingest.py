"""Raw records to normalized, windowed demand tensors.

Channel 0 of every tensor is inflow (drop-offs, subway entries), channel 1
is outflow (pick-ups, subway exits).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from mrgnn._archive import ArchiveError, read_archive, write_archive
from mrgnn.graphs import NodeSet, project_lonlat

log = logging.getLogger(__name__)

TRIP_COLUMNS = ("pickup_time", "pickup_id", "dropoff_time", "dropoff_id")
TURNSTILE_COLUMNS = ("station_id", "period_start", "entries", "exits")
REGISTRY_COLUMNS = ("node_id", "lon", "lat")

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "mrgnn-dataset"
DATASET_VERSION = 1

SUBWAY_ZERO_RUN = 42  # 7 days of 4 h bins
BIKE_MIN_PER_HOUR = 3.0


class IngestError(ValueError):
    """Bad raw input.  ``file`` and ``column`` name the offending source when known."""

    def __init__(self, message, file=None, column=None):
        super().__init__(message)
        self.file = None if file is None else str(file)
        self.column = column


@dataclass(frozen=True)
class DemandTensor:
    mode: str
    node_ids: tuple[str, ...]
    bin_start: datetime
    bin_width: timedelta
    values: np.ndarray = field(repr=False)  # [T, N, 2]

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 3 or v.shape[1:] != (len(self.node_ids), 2):
            raise ValueError(f"{self.mode}: values shape {v.shape} inconsistent with {len(self.node_ids)} nodes")

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    def bin_times(self) -> np.ndarray:
        start = np.datetime64(self.bin_start, "s")
        width = np.timedelta64(int(self.bin_width.total_seconds()), "s")
        return start + width * np.arange(self.n_bins)

    def slice_bins(self, a: int, b: int) -> DemandTensor:
        return replace(self, bin_start=self.bin_start + a * self.bin_width, values=self.values[a:b])

    def select_nodes(self, keep) -> DemandTensor:
        keep = set(keep)
        idx = [i for i, n in enumerate(self.node_ids) if n in keep]
        return replace(self, node_ids=tuple(self.node_ids[i] for i in idx), values=self.values[:, idx])


@dataclass(frozen=True)
class NormalizationStats:
    mode: str
    min: float
    max: float

    def normalize(self, v):
        if self.max == self.min:
            return np.zeros_like(np.asarray(v, dtype=np.float64))
        return (np.asarray(v, dtype=np.float64) - self.min) / (self.max - self.min)

    def denormalize(self, v):
        return np.asarray(v, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass
class WindowedDataset:
    split: str
    inputs: dict[str, np.ndarray]   # mode -> [S, T, N, 2]
    targets: dict[str, np.ndarray]  # mode -> [S, N, 2]
    target_times: np.ndarray        # datetime64[s], [S]

    def __len__(self):
        return len(self.target_times)

    @property
    def modes(self) -> list[str]:
        return list(self.inputs)

    def batch(self, idx) -> WindowedDataset:
        return WindowedDataset(
            self.split,
            {m: x[idx] for m, x in self.inputs.items()},
            {m: y[idx] for m, y in self.targets.items()},
            self.target_times[idx],
        )

    def select(self, modes) -> WindowedDataset:
        return WindowedDataset(
            self.split,
            {m: self.inputs[m] for m in modes},
            {m: self.targets[m] for m in modes},
            self.target_times,
        )


# ---------------------------------------------------------------- parsing


def _open_rows(path, required):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}", file=path) from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise IngestError(f"{path}: empty file", file=path)
        header = [h.strip() for h in header]
        reader.fieldnames = header
        for col in required:
            if col not in header:
                raise IngestError(f"{path}: missing required column {col!r}", file=path, column=col)
        yield from reader


def _parse_time(s):
    return datetime.fromisoformat(s.strip())


@dataclass
class TripLoad:
    events: list  # (pickup_time, pickup_node, dropoff_time, dropoff_node)
    skipped: int


def load_trip_records(path, known_nodes=None, schema: str = "bike") -> TripLoad:
    """Read a trip file.  Rows with bad timestamps or unknown node ids are skipped."""
    if schema not in ("bike", "ridehail"):
        raise ValueError(f"unknown trip schema {schema!r}")
    known = None if known_nodes is None else {str(n) for n in known_nodes}
    events, skipped, rows = [], 0, 0
    for row in _open_rows(path, TRIP_COLUMNS):
        rows += 1
        try:
            pu_t = _parse_time(row["pickup_time"])
            do_t = _parse_time(row["dropoff_time"])
        except (ValueError, AttributeError):
            skipped += 1
            continue
        pu, do = (row["pickup_id"] or "").strip(), (row["dropoff_id"] or "").strip()
        if not pu or not do or (known is not None and (pu not in known or do not in known)):
            skipped += 1
            continue
        events.append((pu_t, pu, do_t, do))
    if rows == 0:
        raise IngestError(f"{path}: no data rows", file=path)
    if skipped:
        log.info("%s: skipped %d of %d rows", path, skipped, rows)
    return TripLoad(events, skipped)


@dataclass
class TurnstileLoad:
    records: list  # (station_id, period_start, entries, exits), all nonnegative
    anomalies: int  # negative deltas clamped to zero
    skipped: int


def load_turnstile_counts(path, cumulative: bool = True, known_nodes=None) -> TurnstileLoad:
    """Read subway counts, differencing cumulative counters per turnstile stream.

    A cumulative delta between consecutive readings is credited to the period
    starting at the earlier reading.  An optional ``turnstile_id`` column splits a
    station into independent streams.
    """
    known = None if known_nodes is None else {str(n) for n in known_nodes}
    streams: dict[tuple[str, str], list] = {}
    skipped, rows = 0, 0
    for row in _open_rows(path, TURNSTILE_COLUMNS):
        rows += 1
        try:
            t = _parse_time(row["period_start"])
            ent, ext = float(row["entries"]), float(row["exits"])
        except (ValueError, AttributeError, TypeError):
            skipped += 1
            continue
        station = (row["station_id"] or "").strip()
        if not station or (known is not None and station not in known) or not np.isfinite([ent, ext]).all():
            skipped += 1
            continue
        turnstile = (row.get("turnstile_id") or "").strip()
        streams.setdefault((station, turnstile), []).append((t, ent, ext))
    if rows == 0:
        raise IngestError(f"{path}: no data rows", file=path)

    records, anomalies = [], 0
    for (station, turnstile), readings in streams.items():
        times = [r[0] for r in readings]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise IngestError(
                f"{path}: timestamps not strictly increasing for station {station!r} turnstile {turnstile!r}",
                file=path,
                column="period_start",
            )
        if cumulative:
            pairs = [(a[0], b[1] - a[1], b[2] - a[2]) for a, b in zip(readings, readings[1:])]
        else:
            pairs = readings
        for t, ent, ext in pairs:
            if ent < 0:
                anomalies += 1
                ent = 0.0
            if ext < 0:
                anomalies += 1
                ext = 0.0
            records.append((station, t, ent, ext))
    return TurnstileLoad(records, anomalies, skipped)


def read_registry(path) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    """Node ids with lon/lat, in file order."""
    ids, lon, lat = [], [], []
    for row in _open_rows(path, REGISTRY_COLUMNS):
        try:
            lon.append(float(row["lon"]))
            lat.append(float(row["lat"]))
        except (TypeError, ValueError) as exc:
            raise IngestError(f"{path}: bad coordinate for node {row['node_id']!r}", file=path, column="lon") from exc
        ids.append(row["node_id"].strip())
    if not ids:
        raise IngestError(f"{path}: no nodes", file=path)
    if len(set(ids)) != len(ids):
        raise IngestError(f"{path}: duplicate node ids", file=path, column="node_id")
    return tuple(ids), np.array(lon), np.array(lat)


def load_registry(path, mode: str, origin=None) -> NodeSet:
    ids, lon, lat = read_registry(path)
    return NodeSet(mode, ids, project_lonlat(lon, lat, origin))


# ---------------------------------------------------------------- binning


def _n_bins(span, bin_width: timedelta) -> int:
    start, end = span
    total = (end - start).total_seconds()
    w = bin_width.total_seconds()
    if w <= 0 or total <= 0:
        raise ValueError("bin width and span must be positive")
    n, rem = divmod(total, w)
    if rem != 0:
        raise ValueError(f"bin width {bin_width} does not divide span {end - start}")
    return int(n)


def _bin_index(times, start: datetime, bin_width: timedelta, n_bins: int):
    t = np.array(times, dtype="datetime64[s]").astype(np.int64)
    s = np.datetime64(start, "s").astype(np.int64)
    off = t - s
    idx = np.floor_divide(off, int(bin_width.total_seconds()))
    ok = (off >= 0) & (idx < n_bins)
    return idx, ok


def _accumulate(n_bins, node_ids, times, nodes, weights, start, bin_width):
    pos = {n: i for i, n in enumerate(node_ids)}
    out = np.zeros((n_bins, len(node_ids)))
    if not len(times):
        return out, 0
    idx, ok = _bin_index(times, start, bin_width, n_bins)
    col = np.array([pos.get(n, -1) for n in nodes])
    ok &= col >= 0
    np.add.at(out, (idx[ok], col[ok]), np.asarray(weights, dtype=np.float64)[ok])
    return out, int((~ok).sum())


def bin_demand(events, node_set, bin_width: timedelta, span, mode=None) -> tuple[DemandTensor, int]:
    """Count pick-ups (outflow) and drop-offs (inflow) per node per bin.

    Each side of a trip is binned on its own timestamp; sides outside the span
    are dropped and counted.
    """
    node_ids = tuple(getattr(node_set, "node_ids", node_set))
    mode = mode or getattr(node_set, "mode", "unknown")
    n = _n_bins(span, bin_width)
    ones = np.ones(len(events))
    pu_t = [e[0] for e in events]
    pu_n = [e[1] for e in events]
    do_t = [e[2] for e in events]
    do_n = [e[3] for e in events]
    outflow, d1 = _accumulate(n, node_ids, pu_t, pu_n, ones, span[0], bin_width)
    inflow, d2 = _accumulate(n, node_ids, do_t, do_n, ones, span[0], bin_width)
    return DemandTensor(mode, node_ids, span[0], bin_width, np.stack([inflow, outflow], axis=-1)), d1 + d2


def bin_counts(records, node_set, bin_width: timedelta, span, mode="subway") -> tuple[DemandTensor, int]:
    """Sum (entries, exits) records into bins; entries are inflow, exits outflow."""
    node_ids = tuple(getattr(node_set, "node_ids", node_set))
    n = _n_bins(span, bin_width)
    t = [r[1] for r in records]
    nodes = [r[0] for r in records]
    inflow, d = _accumulate(n, node_ids, t, nodes, [r[2] for r in records], span[0], bin_width)
    outflow, _ = _accumulate(n, node_ids, t, nodes, [r[3] for r in records], span[0], bin_width)
    return DemandTensor(mode, node_ids, span[0], bin_width, np.stack([inflow, outflow], axis=-1)), d


# ---------------------------------------------------------------- filtering


def _longest_zero_run(series: np.ndarray) -> np.ndarray:
    """Longest run of zeros along axis 0 for each column."""
    best = np.zeros(series.shape[1], dtype=int)
    cur = np.zeros(series.shape[1], dtype=int)
    for row in series == 0:
        cur = np.where(row, cur + 1, 0)
        best = np.maximum(best, cur)
    return best


def filter_nodes(tensor: DemandTensor, rule: str) -> tuple[DemandTensor, tuple[str, ...]]:
    if rule not in ("bike", "subway", "ridehail"):
        raise ValueError(f"unknown filter rule {rule!r}")
    if rule != tensor.mode:
        raise ValueError(f"filter rule {rule!r} does not apply to mode {tensor.mode!r}")
    v = tensor.values
    if rule == "bike":
        hours = tensor.n_bins * tensor.bin_width.total_seconds() / 3600.0
        keep = v.sum(axis=(0, 2)) / hours >= BIKE_MIN_PER_HOUR
    elif rule == "subway":
        keep = _longest_zero_run(v.sum(axis=2)) < SUBWAY_ZERO_RUN
    else:
        keep = np.ones(v.shape[1], dtype=bool)
    kept = tuple(n for n, k in zip(tensor.node_ids, keep) if k)
    return tensor.select_nodes(kept), kept


# ---------------------------------------------------------------- splitting


def split_sizes(n_bins: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n_train = int(np.floor(ratios[0] * n_bins + 1e-9))
    n_val = int(np.floor(ratios[1] * n_bins + 1e-9))
    n_test = n_bins - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n_bins} bins are too few for a train/val/test split")
    return n_train, n_val, n_test


def split_tensor(tensor: DemandTensor, ratios=(0.6, 0.2, 0.2)) -> tuple[DemandTensor, DemandTensor, DemandTensor]:
    a, b, _ = split_sizes(tensor.n_bins, ratios)
    return tensor.slice_bins(0, a), tensor.slice_bins(a, a + b), tensor.slice_bins(a + b, tensor.n_bins)


def split_and_normalize(tensor: DemandTensor, ratios=(0.6, 0.2, 0.2)):
    """Chronological split; min-max statistics from the training part only."""
    train, val, test = split_tensor(tensor, ratios)
    stats = NormalizationStats(tensor.mode, float(train.values.min()), float(train.values.max()))
    scaled = tuple(replace(s, values=stats.normalize(s.values)) for s in (train, val, test))
    return scaled, stats


def make_windows(split_tensors: dict[str, DemandTensor], T: int = 6, split: str = "train") -> WindowedDataset:
    """Input bins t-T+1..t for every mode, target bin t+1."""
    if T < 1:
        raise ValueError("T must be >= 1")
    tensors = list(split_tensors.values())
    ref = tensors[0]
    for t in tensors[1:]:
        if (t.bin_start, t.bin_width, t.n_bins) != (ref.bin_start, ref.bin_width, ref.n_bins):
            raise ValueError(f"modes {ref.mode} and {t.mode} do not share a bin axis")
    L = ref.n_bins
    if L < T + 1:
        raise ValueError(f"{split} split has {L} bins, needs at least T+1={T + 1}")
    S = L - T
    starts = np.arange(S)[:, None] + np.arange(T)[None, :]
    inputs = {m: t.values[starts] for m, t in split_tensors.items()}
    targets = {m: t.values[T:] for m, t in split_tensors.items()}
    return WindowedDataset(split, inputs, targets, ref.bin_times()[T:])


# ---------------------------------------------------------------- prepared data


@dataclass
class PreparedData:
    """Filtered raw tensors plus everything derived from them for training."""

    tensors: dict[str, DemandTensor]
    node_sets: dict[str, NodeSet]
    ratios: tuple[float, float, float]
    T: int
    stats: dict[str, NormalizationStats] = field(init=False)
    windows: dict[str, WindowedDataset] = field(init=False)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        for m, t in self.tensors.items():
            if self.node_sets[m].node_ids != t.node_ids:
                raise ValueError(f"{m}: node set and tensor node order differ")
        scaled, self.stats = {}, {}
        for m, t in self.tensors.items():
            scaled[m], self.stats[m] = split_and_normalize(t, self.ratios)
        self.windows = {
            s: make_windows({m: scaled[m][i] for m in self.tensors}, self.T, s) for i, s in enumerate(SPLITS)
        }

    @property
    def modes(self) -> list[str]:
        return list(self.tensors)

    def raw_split(self, mode: str, split: str) -> DemandTensor:
        return split_tensor(self.tensors[mode], self.ratios)[SPLITS.index(split)]

    def select(self, modes) -> PreparedData:
        missing = [m for m in modes if m not in self.tensors]
        if missing:
            raise ValueError(f"modes {missing} not in dataset")
        return PreparedData(
            {m: self.tensors[m] for m in modes},
            {m: self.node_sets[m] for m in modes},
            self.ratios,
            self.T,
            dict(self.summary),
        )


def save_dataset(data: PreparedData, path) -> None:
    arrays = {}
    for m, t in data.tensors.items():
        arrays[f"raw.{m}"] = t.values
        arrays[f"coords.{m}"] = data.node_sets[m].coords
    for s, w in data.windows.items():
        arrays[f"win.{s}.times"] = w.target_times.astype(np.int64)
        for m in data.modes:
            arrays[f"win.{s}.{m}.x"] = w.inputs[m]
            arrays[f"win.{s}.{m}.y"] = w.targets[m]
    ref = next(iter(data.tensors.values()))
    body = {
        "modes": data.modes,
        "node_ids": {m: list(t.node_ids) for m, t in data.tensors.items()},
        "bin_start": ref.bin_start.isoformat(),
        "bin_width_s": ref.bin_width.total_seconds(),
        "ratios": list(data.ratios),
        "T": data.T,
        "stats": {m: [s.min, s.max] for m, s in data.stats.items()},
        "summary": data.summary,
    }
    write_archive(Path(path), DATASET_FORMAT, DATASET_VERSION, body, arrays)


def load_dataset(path) -> PreparedData:
    body, arrays = read_archive(Path(path), DATASET_FORMAT, DATASET_VERSION)
    try:
        start = datetime.fromisoformat(body["bin_start"])
        width = timedelta(seconds=body["bin_width_s"])
        tensors, node_sets = {}, {}
        for m in body["modes"]:
            tensors[m] = DemandTensor(m, body["node_ids"][m], start, width, arrays[f"raw.{m}"])
            node_sets[m] = NodeSet(m, tuple(body["node_ids"][m]), arrays[f"coords.{m}"])
        data = PreparedData(tensors, node_sets, tuple(body["ratios"]), int(body["T"]), body.get("summary", {}))
    except (KeyError, ValueError, TypeError) as exc:
        raise ArchiveError(f"{path}: invalid dataset ({exc})") from exc
    # derived parts must agree with what was stored
    for m, (lo, hi) in body["stats"].items():
        if (data.stats[m].min, data.stats[m].max) != (lo, hi):
            raise ArchiveError(f"{path}: stored normalization stats for {m} do not match data")
    for s, w in data.windows.items():
        same = np.array_equal(arrays[f"win.{s}.times"], w.target_times.astype(np.int64)) and all(
            np.array_equal(arrays[f"win.{s}.{m}.x"], w.inputs[m]) and np.array_equal(arrays[f"win.{s}.{m}.y"], w.targets[m])
            for m in data.modes
        )
        if not same:
            raise ArchiveError(f"{path}: stored {s} windows do not match data")
    return data
