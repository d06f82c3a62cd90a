"""ST-MR blocks, prediction heads, and the full forward/backward pass."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mrgnn._archive import ArchiveError, read_archive, write_archive
from mrgnn.graphs import KINDS
from mrgnn.model import layers as L

CHECKPOINT_FORMAT = "mrgnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    modes: tuple[str, ...]  # target first
    T: int = 6
    channels: tuple[int, ...] = (32, 64)
    kt: int = 2
    head_hidden: int = 64
    dropout: float = 0.3
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.modes or len(set(self.modes)) != len(self.modes):
            raise ValueError("modes must be a non-empty list of distinct mode ids")
        if self.kt < 1 or min(self.channels, default=0) < 1 or self.head_hidden < 1:
            raise ValueError("kernel width and all channel widths must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.remaining_length < 1:
            raise ValueError(
                f"T={self.T} too short for {self.n_blocks} blocks of two width-{self.kt} causal convs"
            )

    @property
    def target(self) -> str:
        return self.modes[0]

    @property
    def auxiliary(self) -> tuple[str, ...]:
        return self.modes[1:]

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def remaining_length(self) -> int:
        return self.T - self.n_blocks * 2 * (self.kt - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"], d["channels"] = list(self.modes), list(self.channels)
        return d


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in initialization order."""
    shapes = {}
    c_prev = cfg.in_channels
    t = cfg.target
    for l, c in enumerate(cfg.channels):
        p = f"b{l}."
        for m in cfg.modes:
            shapes[p + f"{m}.tcn1.W"] = (cfg.kt, c_prev, 2 * c)
            shapes[p + f"{m}.tcn1.b"] = (2 * c,)
        for m in cfg.modes:
            for kind in KINDS:
                shapes[p + f"gc.{m}.intra.{kind}.W"] = (c, c)
                shapes[p + f"gc.{m}.intra.{kind}.b"] = (c,)
        for a in cfg.auxiliary:
            for kind in KINDS:
                for flavor in ("sim", "diff"):
                    shapes[p + f"gc.{t}.{a}.{kind}.{flavor}.W"] = (c, c)
                    shapes[p + f"gc.{t}.{a}.{kind}.{flavor}.b"] = (c,)
        for m in cfg.modes:
            shapes[p + f"{m}.tcn2.W"] = (cfg.kt, c, 2 * c)
            shapes[p + f"{m}.tcn2.b"] = (2 * c,)
            shapes[p + f"{m}.ln.gamma"] = (c,)
            shapes[p + f"{m}.ln.beta"] = (c,)
        c_prev = c
    h = cfg.head_hidden
    for m in cfg.modes:
        shapes[f"head.{m}.tconv.W"] = (cfg.remaining_length, c_prev, 2 * h)
        shapes[f"head.{m}.tconv.b"] = (2 * h,)
        shapes[f"head.{m}.fc1.W"] = (h, h)
        shapes[f"head.{m}.fc1.b"] = (h,)
        shapes[f"head.{m}.fc2.W"] = (h, cfg.out_channels)
        shapes[f"head.{m}.fc2.b"] = (cfg.out_channels,)
    return shapes


def expected_param_count(cfg: ModelConfig) -> int:
    """Number of parameter arrays implied by the architecture."""
    M, L_ = len(cfg.modes), cfg.n_blocks
    per_block = M * 4 + M * 2 * 2 + (M - 1) * 2 * 2 * 2 + M * 2
    return L_ * per_block + M * 6


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return name.endswith(".W")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    graph_fingerprint: str | None = None

    def __post_init__(self):
        shapes = _param_shapes(self.config)
        if len(shapes) != expected_param_count(self.config) or set(shapes) != set(self.params):
            raise ValueError("parameter census does not match the architecture")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ValueError(f"{k}: shape {self.params[k].shape} != {s}")

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed, self.graph_fingerprint)

    def n_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(cfg: ModelConfig, seed: int = 0, graph_fingerprint: str | None = None) -> ModelState:
    """Glorot-uniform weights, zero biases, unit layer-norm scale."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".W"):
            fan_in = int(np.prod(shape[:-1]))
            fan_out = shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(cfg, params, seed, graph_fingerprint)


# ---------------------------------------------------------------- MRGNN layer


def _gc_terms(cfg: ModelConfig):
    """(dst, name prefix suffix, flavor, src, kind) for every graph conv in a layer."""
    t = cfg.target
    for m in cfg.modes:
        for kind in KINDS:
            yield m, f"gc.{m}.intra.{kind}", "intra", m, kind
    for a in cfg.auxiliary:
        for kind in KINDS:
            yield t, f"gc.{t}.{a}.{kind}.sim", "sim", a, kind
            yield t, f"gc.{t}.{a}.{kind}.diff", "diff", a, kind


def mrgnn_forward(cfg, P, prefix, H, adj):
    """Sum of every intra-/inter-modal conv output per receiving mode.

    Inter-modal convs smooth over the target's intra-modal matrix of the same
    kind as the cross-modal matrix.
    """
    out = {m: 0.0 for m in cfg.modes}
    caches = []
    t = cfg.target
    for dst, name, flavor, src, kind in _gc_terms(cfg):
        W, b = P[prefix + name + ".W"], P[prefix + name + ".b"]
        if flavor == "intra":
            z, c = L.intra_conv_forward(H[dst], adj[(dst, dst, kind)], W, b)
        elif flavor == "sim":
            z, c = L.similarity_conv_forward(H[src], adj[(t, t, kind)], adj[(src, t, kind)], W, b)
        else:
            z, c = L.difference_conv_forward(H[src], H[t], adj[(t, t, kind)], adj[(src, t, kind)], W, b)
        out[dst] = out[dst] + z
        caches.append(c)
    return out, caches


def mrgnn_backward(cfg, prefix, dout, caches, grads):
    dH = {m: 0.0 for m in cfg.modes}
    t = cfg.target
    for (dst, name, flavor, src, _), c in zip(_gc_terms(cfg), caches):
        if flavor == "intra":
            dh, dW, db = L.intra_conv_backward(dout[dst], c)
            dH[dst] = dH[dst] + dh
        elif flavor == "sim":
            dh, dW, db = L.similarity_conv_backward(dout[t], c)
            dH[src] = dH[src] + dh
        else:
            dha, dht, dW, db = L.difference_conv_backward(dout[t], c)
            dH[src] = dH[src] + dha
            dH[t] = dH[t] + dht
        grads[prefix + name + ".W"] = dW
        grads[prefix + name + ".b"] = db
    return dH


def mrgnn_layer(cfg, P, prefix, H, adj):
    return mrgnn_forward(cfg, P, prefix, H, adj)[0]


# ---------------------------------------------------------------- ST-MR block


def block_forward(cfg, P, l, H, adj, training=False, rng=None, acts=None):
    """TCN -> MRGNN -> (+ residual) -> TCN -> layer norm, per mode."""
    p = f"b{l}."
    U, c1 = {}, {}
    for m in cfg.modes:
        U[m], c1[m] = L.gated_conv_forward(H[m], P[p + f"{m}.tcn1.W"], P[p + f"{m}.tcn1.b"])
    M, cg = mrgnn_forward(cfg, P, p, U, adj)
    masks, c2, cn, out = {}, {}, {}, {}
    for m in cfg.modes:
        if training and cfg.dropout > 0:
            masks[m] = (rng.random(U[m].shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            Md = M[m] * masks[m]
        else:
            masks[m] = None
            Md = M[m]
        V, c2[m] = L.gated_conv_forward(U[m] + Md, P[p + f"{m}.tcn2.W"], P[p + f"{m}.tcn2.b"])
        out[m], cn[m] = L.layer_norm_forward(V, P[p + f"{m}.ln.gamma"], P[p + f"{m}.ln.beta"])
        if acts is not None:
            acts[p + f"{m}.tcn1"] = U[m]
            acts[p + f"{m}.mrgnn"] = M[m]
            acts[p + f"{m}.tcn2"] = V
            acts[p + f"{m}.out"] = out[m]
    return out, (c1, cg, masks, c2, cn)


def block_backward(cfg, l, dout, cache, grads):
    c1, cg, masks, c2, cn = cache
    p = f"b{l}."
    dU, dM = {}, {}
    for m in cfg.modes:
        dV, grads[p + f"{m}.ln.gamma"], grads[p + f"{m}.ln.beta"] = L.layer_norm_backward(dout[m], cn[m])
        dR, grads[p + f"{m}.tcn2.W"], grads[p + f"{m}.tcn2.b"] = L.gated_conv_backward(dV, c2[m])
        dU[m] = dR
        dM[m] = dR if masks[m] is None else dR * masks[m]
    dU_g = mrgnn_backward(cfg, p, dM, cg, grads)
    dH = {}
    for m in cfg.modes:
        dH[m], grads[p + f"{m}.tcn1.W"], grads[p + f"{m}.tcn1.b"] = L.gated_conv_backward(dU[m] + dU_g[m], c1[m])
    return dH


def st_mr_block(cfg, P, l, H, adj, training=False, rng=None):
    return block_forward(cfg, P, l, H, adj, training, rng)[0]


# ---------------------------------------------------------------- full model


@dataclass
class Tape:
    blocks: list
    heads: dict
    acts: dict = field(default_factory=dict)


def forward(model: ModelState, inputs: dict, adj: dict, training=False, rng=None, record=False):
    """Predict the next bin for every mode.

    ``inputs`` maps mode -> [B, T, N, 2] normalized windows; ``adj`` maps
    relation keys to row-normalized matrices.  Returns (predictions, tape),
    predictions mapping mode -> [B, N, 2].
    """
    cfg, P = model.config, model.params
    missing = [m for m in cfg.modes if m not in inputs]
    if missing:
        raise ValueError(f"inputs missing modes {missing}")
    for m in cfg.modes:
        x = inputs[m]
        if x.ndim != 4 or x.shape[1] != cfg.T or x.shape[3] != cfg.in_channels:
            raise ValueError(f"{m}: input shape {x.shape} does not match [B, {cfg.T}, N, {cfg.in_channels}]")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    acts = {} if record else None
    H = {m: np.asarray(inputs[m], dtype=np.float64) for m in cfg.modes}
    blocks = []
    for l in range(cfg.n_blocks):
        H, c = block_forward(cfg, P, l, H, adj, training, rng, acts)
        blocks.append(c)
    preds, heads = {}, {}
    for m in cfg.modes:
        z, ct = L.gated_conv_forward(H[m], P[f"head.{m}.tconv.W"], P[f"head.{m}.tconv.b"])
        z = z[:, 0]
        z1, cf1 = L.dense_forward(z, P[f"head.{m}.fc1.W"], P[f"head.{m}.fc1.b"], relu=True)
        preds[m], cf2 = L.dense_forward(z1, P[f"head.{m}.fc2.W"], P[f"head.{m}.fc2.b"])
        heads[m] = (ct, cf1, cf2)
        if record:
            acts[f"head.{m}.tconv"] = z[:, None]
    return preds, Tape(blocks, heads, acts or {})


def backward(model: ModelState, tape: Tape, dpreds: dict) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter, given dLoss/dpredictions."""
    cfg = model.config
    grads = {}
    dH = {}
    for m in cfg.modes:
        ct, cf1, cf2 = tape.heads[m]
        dz1, grads[f"head.{m}.fc2.W"], grads[f"head.{m}.fc2.b"] = L.dense_backward(dpreds[m], cf2)
        dz, grads[f"head.{m}.fc1.W"], grads[f"head.{m}.fc1.b"] = L.dense_backward(dz1, cf1)
        dH[m], grads[f"head.{m}.tconv.W"], grads[f"head.{m}.tconv.b"] = L.gated_conv_backward(dz[:, None], ct)
    for l in reversed(range(cfg.n_blocks)):
        dH = block_backward(cfg, l, dH, tape.blocks[l], grads)
    return grads


def predict(model: ModelState, inputs: dict, adj: dict, batch_size: int = 256) -> dict:
    n = len(next(iter(inputs.values())))
    out = {m: [] for m in model.config.modes}
    for s in range(0, n, batch_size):
        p, _ = forward(model, {m: x[s : s + batch_size] for m, x in inputs.items()}, adj)
        for m in out:
            out[m].append(p[m])
    return {m: np.concatenate(v) for m, v in out.items()}


# ---------------------------------------------------------------- checkpoints


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: ModelState, stats: dict | None = None, extra: dict | None = None,
                    extra_arrays: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra.{k}"] = v
    body = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "graph_fingerprint": model.graph_fingerprint,
        "stats": {m: [s.min, s.max] for m, s in (stats or {}).items()},
        "extra": extra or {},
    }
    write_archive(Path(path), CHECKPOINT_FORMAT, CHECKPOINT_VERSION, body, arrays)


def load_checkpoint(path, graph_fingerprint: str | None = None):
    """Returns (model, stats as {mode: (min, max)}, extra, extra_arrays).

    With ``graph_fingerprint`` given, a checkpoint trained on a different graph
    set is rejected.
    """
    body, arrays = read_archive(Path(path), CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    try:
        cfg = ModelConfig(**body["config"])
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        model = ModelState(cfg, params, body["seed"], body["graph_fingerprint"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: invalid checkpoint ({exc})") from exc
    if graph_fingerprint is not None and model.graph_fingerprint != graph_fingerprint:
        raise ArchiveError(f"{path}: checkpoint was trained on a different graph set")
    extra_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, {m: tuple(v) for m, v in body["stats"].items()}, body["extra"], extra_arrays
