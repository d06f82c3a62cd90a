"""Intra- and inter-modal relation matrices.

Each mode (bike, subway, ridehail) owns a :class:`NodeSet`.  A
:class:`GraphSet` holds, for a chosen target mode, a geographic and a
semantic matrix for every intra-modal graph and for every auxiliary→target
inter-modal graph.  Rows of every matrix index the receiving mode.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mrgnn._archive import ArchiveError, read_archive, write_archive

MODES = ("bike", "subway", "ridehail")
KINDS = ("geo", "sem")

EARTH_RADIUS_M = 6_371_008.8

GRAPH_FORMAT = "mrgnn-graphset"
GRAPH_VERSION = 1


class DegenerateInputError(ValueError):
    """Inputs for which a relation matrix is undefined."""


@dataclass(frozen=True)
class NodeSet:
    mode: str
    node_ids: tuple[str, ...]
    coords: np.ndarray = field(repr=False)  # [N, 2], planar meters

    def __post_init__(self):
        ids = tuple(str(i) for i in self.node_ids)
        object.__setattr__(self, "node_ids", ids)
        coords = np.asarray(self.coords, dtype=np.float64).reshape(len(ids), 2)
        object.__setattr__(self, "coords", coords)
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.mode}: duplicate node ids")
        if not np.all(np.isfinite(coords)):
            raise ValueError(f"{self.mode}: non-finite coordinates")

    def __len__(self):
        return len(self.node_ids)

    def __eq__(self, other):
        return (
            isinstance(other, NodeSet)
            and self.mode == other.mode
            and self.node_ids == other.node_ids
            and np.array_equal(self.coords, other.coords)
        )

    def subset(self, keep) -> NodeSet:
        keep = set(keep)
        idx = [i for i, n in enumerate(self.node_ids) if n in keep]
        return NodeSet(self.mode, tuple(self.node_ids[i] for i in idx), self.coords[idx])

    def permuted(self, perm) -> NodeSet:
        perm = np.asarray(perm)
        return NodeSet(self.mode, tuple(self.node_ids[i] for i in perm), self.coords[perm])


def project_lonlat(lon, lat, origin: tuple[float, float] | None = None) -> np.ndarray:
    """Local equirectangular projection to meters around ``origin`` (lon, lat).

    Accurate to well under 0.1% over a city-sized extent.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if origin is None:
        origin = (float(np.mean(lon)), float(np.mean(lat)))
    lon0, lat0 = origin
    x = np.radians(lon - lon0) * EARTH_RADIUS_M * np.cos(np.radians(lat0))
    y = np.radians(lat - lat0) * EARTH_RADIUS_M
    return np.stack([x, y], axis=-1)


def unproject_xy(xy, origin: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=np.float64)
    lon0, lat0 = origin
    lat = lat0 + np.degrees(xy[..., 1] / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(xy[..., 0] / (EARTH_RADIUS_M * np.cos(np.radians(lat0))))
    return lon, lat


@dataclass(frozen=True)
class RelationGraph:
    src_mode: str
    dst_mode: str
    kind: str
    weights: np.ndarray = field(repr=False)  # [N_dst, N_src]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.src_mode, self.dst_mode, self.kind)

    @property
    def intra(self) -> bool:
        return self.src_mode == self.dst_mode

    def validate(self, n_dst: int | None = None, n_src: int | None = None) -> None:
        w = self.weights
        if w.ndim != 2:
            raise ValueError(f"{self.key}: weights must be 2-D")
        if n_dst is not None and w.shape != (n_dst, n_src):
            raise ValueError(f"{self.key}: shape {w.shape} != ({n_dst}, {n_src})")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError(f"{self.key}: weights must be finite and nonnegative")
        if self.intra and self.kind == "geo" and not np.all(np.diag(w) == 1.0):
            raise ValueError(f"{self.key}: intra-modal geographic diagonal must be 1")


def _pairwise_distances(src: NodeSet, dst: NodeSet) -> np.ndarray:
    diff = dst.coords[:, None, :] - src.coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def build_geo_adjacency(src: NodeSet, dst: NodeSet, eps: float = 0.1) -> RelationGraph:
    """Thresholded Gaussian distance kernel exp(-d^2 / sigma^2).

    sigma is the standard deviation of the pairwise distances between the two
    sets (distinct unordered pairs for the intra-modal case).  Weights below
    ``eps`` are zeroed.
    """
    if len(src) == 0 or len(dst) == 0:
        raise DegenerateInputError("empty node set")
    intra = src.mode == dst.mode
    if intra and src != dst:
        raise ValueError(f"{src.mode}: intra-modal graph needs a single node set")
    d = _pairwise_distances(src, dst)
    if intra:
        if len(src) == 1:
            return RelationGraph(src.mode, dst.mode, "geo", np.ones((1, 1)))
        pairs = d[np.triu_indices(len(src), k=1)]
    else:
        pairs = d.ravel()
    # sorted so sigma does not depend on node order
    sigma = float(np.std(np.sort(pairs)))
    if not sigma > 0:
        raise DegenerateInputError(
            f"{src.mode}->{dst.mode}: all nodes co-located, distance scale is zero"
        )
    w = np.exp(-((d / sigma) ** 2))
    w[w < eps] = 0.0
    if intra:
        np.fill_diagonal(w, 1.0)
    return RelationGraph(src.mode, dst.mode, "geo", w)


def _profiles(demand) -> np.ndarray:
    v = np.asarray(getattr(demand, "values", demand), dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 2:
        raise ValueError(f"demand must be [T, N, 2], got {v.shape}")
    # concatenate the inflow series with the outflow series per node
    return np.concatenate([v[:, :, 0].T, v[:, :, 1].T], axis=1)


def pearson_matrix(dst_profiles: np.ndarray, src_profiles: np.ndarray) -> np.ndarray:
    """Pearson correlation of every dst row with every src row; 0 if either is constant."""

    def standardize(p):
        c = p - p.mean(axis=1, keepdims=True)
        norm = np.sqrt(np.sum(c * c, axis=1, keepdims=True))
        ok = norm[:, 0] > 0
        out = np.zeros_like(c)
        out[ok] = c[ok] / norm[ok]
        return out

    return np.clip(standardize(dst_profiles) @ standardize(src_profiles).T, -1.0, 1.0)


def top_k_rows(w: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries per row (ties broken by lower column index)."""
    if k >= w.shape[1]:
        return w.copy()
    order = np.argsort(-w, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(w)
    rows = np.arange(w.shape[0])[:, None]
    out[rows, order] = w[rows, order]
    return out


def build_semantic_adjacency(src_demand, dst_demand, k: int = 5, *, src_mode="src", dst_mode="dst") -> RelationGraph:
    """Clipped Pearson similarity of demand profiles, sparsified to top-k per row."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for attr in ("bin_start", "bin_width"):
        a, b = getattr(src_demand, attr, None), getattr(dst_demand, attr, None)
        if a != b:
            raise ValueError(f"demand time axes differ in {attr}: {a} vs {b}")
    src_mode = getattr(src_demand, "mode", src_mode)
    dst_mode = getattr(dst_demand, "mode", dst_mode)
    ps, pd = _profiles(src_demand), _profiles(dst_demand)
    if ps.shape[1] != pd.shape[1]:
        raise ValueError(f"demand time axes differ: {ps.shape[1] // 2} vs {pd.shape[1] // 2} bins")
    w = np.maximum(pearson_matrix(pd, ps), 0.0)
    intra = src_mode == dst_mode
    if intra:
        np.fill_diagonal(w, 0.0)
    w = top_k_rows(w, k)
    if intra:
        np.fill_diagonal(w, 1.0)
    return RelationGraph(src_mode, dst_mode, "sem", w)


def row_normalize(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("row_normalize needs finite nonnegative entries")
    s = a.sum(axis=1, keepdims=True)
    out = np.zeros_like(a)
    np.divide(a, s, out=out, where=s > 0)
    return out


def relation_count(n_modes: int) -> int:
    return 2 * (n_modes + n_modes - 1)


@dataclass
class GraphSet:
    target: str
    node_sets: dict[str, NodeSet]
    relations: dict[tuple[str, str, str], RelationGraph]
    params: dict = field(default_factory=dict)

    @property
    def modes(self) -> list[str]:
        """Target first, then auxiliaries in canonical order."""
        aux = [m for m in MODES if m in self.node_sets and m != self.target]
        aux += sorted(m for m in self.node_sets if m not in MODES and m != self.target)
        return [self.target] + aux

    @property
    def auxiliary(self) -> list[str]:
        return self.modes[1:]

    def expected_keys(self) -> list[tuple[str, str, str]]:
        keys = [(m, m, kind) for m in self.modes for kind in KINDS]
        keys += [(a, self.target, kind) for a in self.auxiliary for kind in KINDS]
        return keys

    def validate(self) -> None:
        if self.target not in self.node_sets:
            raise ValueError(f"target mode {self.target!r} has no node set")
        expected = set(self.expected_keys())
        if set(self.relations) != expected:
            missing = sorted(expected - set(self.relations))
            extra = sorted(set(self.relations) - expected)
            raise ValueError(f"relation set mismatch: missing {missing}, unexpected {extra}")
        for (src, dst, _), rel in self.relations.items():
            rel.validate(len(self.node_sets[dst]), len(self.node_sets[src]))

    def normalized(self) -> dict[tuple[str, str, str], np.ndarray]:
        return {key: row_normalize(rel.weights) for key, rel in self.relations.items()}

    def census(self) -> dict:
        return {
            "target": self.target,
            "modes": self.modes,
            "relations": len(self.relations),
            "nonzeros": {
                f"{s}->{d}.{k}": int(np.count_nonzero(self.relations[(s, d, k)].weights))
                for (s, d, k) in self.expected_keys()
            },
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.target.encode())
        for m in self.modes:
            h.update(m.encode())
            h.update("\x00".join(self.node_sets[m].node_ids).encode())
        for key in self.expected_keys():
            h.update(".".join(key).encode())
            h.update(np.ascontiguousarray(self.relations[key].weights).tobytes())
        return h.hexdigest()


def assemble_graph_set(target: str, node_sets: dict, training_demand: dict, eps: float = 0.1, k: int = 5) -> GraphSet:
    """Build every intra-modal graph and every auxiliary->target inter-modal graph."""
    if target not in node_sets:
        raise ValueError(f"target mode {target!r} not among {sorted(node_sets)}")
    missing = [m for m in node_sets if m not in training_demand]
    if missing:
        raise ValueError(f"missing training demand for modes {missing}")
    gs = GraphSet(target, dict(node_sets), {}, {"eps": eps, "k": k})
    for m in gs.modes:
        ns = node_sets[m]
        gs.relations[(m, m, "geo")] = build_geo_adjacency(ns, ns, eps)
        gs.relations[(m, m, "sem")] = build_semantic_adjacency(
            training_demand[m], training_demand[m], k, src_mode=m, dst_mode=m
        )
        _check_nodes(training_demand[m], ns)
    tgt = node_sets[target]
    for a in gs.auxiliary:
        gs.relations[(a, target, "geo")] = build_geo_adjacency(node_sets[a], tgt, eps)
        gs.relations[(a, target, "sem")] = build_semantic_adjacency(
            training_demand[a], training_demand[target], k, src_mode=a, dst_mode=target
        )
    gs.validate()
    return gs


def _check_nodes(demand, ns: NodeSet) -> None:
    ids = getattr(demand, "node_ids", None)
    if ids is not None and tuple(ids) != ns.node_ids:
        raise ValueError(f"{ns.mode}: demand node order differs from node set")
    n = np.shape(getattr(demand, "values", demand))[1]
    if n != len(ns):
        raise ValueError(f"{ns.mode}: demand has {n} nodes, node set has {len(ns)}")


def save_graph_set(gs: GraphSet, path) -> None:
    gs.validate()
    arrays = {f"coords.{m}": gs.node_sets[m].coords for m in gs.modes}
    for s, d, k in gs.expected_keys():
        arrays[f"rel.{s}.{d}.{k}"] = gs.relations[(s, d, k)].weights
    body = {
        "target": gs.target,
        "modes": gs.modes,
        "node_ids": {m: list(gs.node_sets[m].node_ids) for m in gs.modes},
        "params": gs.params,
        "layout": "float64 row-major, rows = receiving mode",
    }
    write_archive(Path(path), GRAPH_FORMAT, GRAPH_VERSION, body, arrays)


def load_graph_set(path) -> GraphSet:
    body, arrays = read_archive(Path(path), GRAPH_FORMAT, GRAPH_VERSION)
    try:
        node_sets = {
            m: NodeSet(m, tuple(body["node_ids"][m]), arrays[f"coords.{m}"]) for m in body["modes"]
        }
        gs = GraphSet(body["target"], node_sets, {}, dict(body["params"]))
        if gs.modes != body["modes"]:
            raise ArchiveError(f"{path}: mode order {body['modes']} is not canonical")
        for s, d, k in gs.expected_keys():
            gs.relations[(s, d, k)] = RelationGraph(s, d, k, arrays[f"rel.{s}.{d}.{k}"])
        gs.validate()
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ArchiveError):
            raise
        raise ArchiveError(f"{path}: invalid graph set ({exc})") from exc
    return gs
