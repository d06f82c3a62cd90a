"""Synthetic multimodal demand with a planted subway→bike dependency.

Bike inflow at station i, bin t is ``alpha * subway_outflow[link[i], t-1]``
plus a seasonal base plus noise.  Subway and ride-hail demand carry an
unpredictable component (``driver_std``) so the planted term is only
recoverable from the subway history, not from bike history alone.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from mrgnn.graphs import NodeSet, unproject_xy
from mrgnn.ingest import DemandTensor

ORIGIN = (-73.98, 40.75)  # lon, lat used when writing registries


@dataclass
class SynthSpec:
    n_bike: int = 20
    n_subway: int = 10
    n_ridehail: int = 6
    n_bins: int = 600
    bin_hours: int = 4
    start: str = "2018-03-01T00:00:00"
    level: dict = field(default_factory=lambda: {"bike": 20.0, "subway": 60.0, "ridehail": 40.0})
    amplitude: dict = field(default_factory=lambda: {"bike": 0.5, "subway": 0.5, "ridehail": 0.5})
    noise: float = 1.0
    driver_std: float = 10.0
    alpha: float = 1.0
    spacing_m: float = 1500.0

    def validate(self):
        for name in ("n_bike", "n_subway", "n_ridehail", "n_bins", "bin_hours"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if 24 % self.bin_hours:
            raise ValueError("bin_hours must divide 24")
        if self.noise < 0 or self.driver_std < 0 or self.spacing_m <= 0:
            raise ValueError("noise, driver_std must be >= 0 and spacing_m > 0")
        for d in (self.level, self.amplitude):
            missing = {"bike", "subway", "ridehail"} - set(d)
            if missing:
                raise ValueError(f"level/amplitude missing modes {sorted(missing)}")
        datetime.fromisoformat(self.start)

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec fields {sorted(unknown)}")
        spec = cls(**d)
        base = cls()
        spec.level = {**base.level, **spec.level}
        spec.amplitude = {**base.amplitude, **spec.amplitude}
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    tensors: dict[str, DemandTensor]
    node_sets: dict[str, NodeSet]
    link_map: dict[str, str]  # bike station -> subway station
    alpha: float
    spec: SynthSpec


def _counts(x):
    return np.maximum(np.rint(x), 0.0)


def generate_synthetic(spec: SynthSpec, seed: int) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n_bins
    per_day = 24 // spec.bin_hours
    t = np.arange(-1, n)  # one warm-up bin for the lagged term

    def seasonal(mode, count):
        phase = rng.uniform(0, 2 * np.pi, size=(count, 2))
        scale = rng.uniform(0.7, 1.3, size=(count, 2))
        wave = np.sin(2 * np.pi * t[:, None, None] / per_day + phase[None])
        return spec.level[mode] * scale[None] * (1 + spec.amplitude[mode] * wave)

    sub = _counts(seasonal("subway", spec.n_subway) + rng.normal(0, spec.driver_std, (n + 1, spec.n_subway, 2)))
    hail = _counts(seasonal("ridehail", spec.n_ridehail) + rng.normal(0, spec.driver_std, (n + 1, spec.n_ridehail, 2)))

    link = rng.permutation(np.resize(np.arange(spec.n_subway), spec.n_bike))
    bike_base = seasonal("bike", spec.n_bike)
    bike = np.empty((n, spec.n_bike, 2))
    bike[:, :, 0] = _counts(
        spec.alpha * sub[:-1, link, 1] + bike_base[1:, :, 0] + rng.normal(0, spec.noise, (n, spec.n_bike))
    )
    bike[:, :, 1] = _counts(bike_base[1:, :, 1] + rng.normal(0, spec.noise, (n, spec.n_bike)))

    # subway stations on a jittered grid, bikes next to their linked station
    side = int(np.ceil(np.sqrt(spec.n_subway)))
    grid = np.array([(i % side, i // side) for i in range(spec.n_subway)], dtype=float)
    sub_xy = grid * spec.spacing_m + rng.uniform(-0.1, 0.1, grid.shape) * spec.spacing_m
    bike_xy = sub_xy[link] + rng.uniform(-80, 80, (spec.n_bike, 2))
    extent = max(side - 1, 1) * spec.spacing_m
    hail_xy = rng.uniform(0, extent, (spec.n_ridehail, 2))

    ids = {
        "bike": tuple(f"b{i:03d}" for i in range(spec.n_bike)),
        "subway": tuple(f"s{i:03d}" for i in range(spec.n_subway)),
        "ridehail": tuple(f"h{i:03d}" for i in range(spec.n_ridehail)),
    }
    start = datetime.fromisoformat(spec.start)
    width = timedelta(hours=spec.bin_hours)
    values = {"bike": bike, "subway": sub[1:], "ridehail": hail[1:]}
    coords = {"bike": bike_xy, "subway": sub_xy, "ridehail": hail_xy}
    tensors = {m: DemandTensor(m, ids[m], start, width, values[m]) for m in ids}
    node_sets = {m: NodeSet(m, ids[m], coords[m]) for m in ids}
    link_map = {ids["bike"][i]: ids["subway"][j] for i, j in enumerate(link)}
    return SyntheticData(tensors, node_sets, link_map, spec.alpha, spec)


# ---------------------------------------------------------------- raw files


def _trip_rows(tensor: DemandTensor, rng) -> list[tuple]:
    """Realize per-bin inflow/outflow counts as individual trips.

    Pick-ups and drop-offs are paired in time order; unmatched sides are
    paired with a partner outside the span so they do not affect binning.
    """
    width = int(tensor.bin_width.total_seconds())
    start = np.datetime64(tensor.bin_start, "s")
    end = start + np.timedelta64(width * tensor.n_bins, "s")
    sides = []
    for ch in (1, 0):  # outflow = pick-ups, inflow = drop-offs
        counts = tensor.values[:, :, ch].astype(np.int64)
        b, i = np.nonzero(counts)
        reps = counts[b, i]
        bins = np.repeat(b, reps)
        nodes = np.repeat(i, reps)
        times = start + (bins * width + rng.integers(0, width, len(bins))).astype("timedelta64[s]")
        order = np.lexsort((nodes, times))
        sides.append((times[order], nodes[order]))
    (pt, pn), (dt, dn) = sides
    k = min(len(pt), len(dt))
    ids = tensor.node_ids
    rows = [(pt[j], ids[pn[j]], dt[j], ids[dn[j]]) for j in range(k)]
    after, before = end + np.timedelta64(3600, "s"), start - np.timedelta64(3600, "s")
    rows += [(pt[j], ids[pn[j]], after, ids[pn[j]]) for j in range(k, len(pt))]
    rows += [(before, ids[dn[j]], dt[j], ids[dn[j]]) for j in range(k, len(dt))]
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def _iso(t) -> str:
    return str(np.datetime64(t, "s"))


def write_raw_files(data: SyntheticData, out_dir, seed: int) -> dict:
    """Write trips, subway counters, registries, and the link map.  Returns file paths and totals."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 1])
    files = {}

    for mode in ("bike", "ridehail"):
        path = out / f"{mode}_trips.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pickup_time", "pickup_id", "dropoff_time", "dropoff_id"])
            for pt, pn, dt, dn in _trip_rows(data.tensors[mode], rng):
                w.writerow([_iso(pt), pn, _iso(dt), dn])
        files[f"{mode}_trips"] = path

    sub = data.tensors["subway"]
    path = out / "subway_counts.csv"
    times = sub.bin_times()
    times = np.append(times, times[-1] + np.timedelta64(int(sub.bin_width.total_seconds()), "s"))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "turnstile_id", "period_start", "entries", "exits"])
        for j, sid in enumerate(sub.node_ids):
            base = rng.integers(10_000, 1_000_000, 2)
            cum = np.vstack([base, base + np.cumsum(sub.values[:, j, :].astype(np.int64), axis=0)])
            for k, tm in enumerate(times):
                w.writerow([sid, "00", _iso(tm), int(cum[k, 0]), int(cum[k, 1])])
    files["subway_counts"] = path

    for mode, ns in data.node_sets.items():
        path = out / f"{mode}_nodes.csv"
        lon, lat = unproject_xy(ns.coords, ORIGIN)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "lon", "lat"])
            for nid, x, y in zip(ns.node_ids, lon, lat):
                w.writerow([nid, f"{x:.7f}", f"{y:.7f}"])
        files[f"{mode}_nodes"] = path

    path = out / "link_map.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bike_id", "subway_id", "alpha"])
        for b, s in data.link_map.items():
            w.writerow([b, s, data.alpha])
    files["link_map"] = path

    totals = {
        m: {"inflow": int(t.values[:, :, 0].sum()), "outflow": int(t.values[:, :, 1].sum())}
        for m, t in data.tensors.items()
    }
    return {"files": {k: str(v) for k, v in files.items()}, "totals": totals}
