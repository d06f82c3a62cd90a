import numpy as np
import pytest

from mrgnn._archive import ArchiveError
from mrgnn.ingest import NormalizationStats
from mrgnn.model.network import (
    ModelConfig,
    ModelState,
    backward,
    block_forward,
    expected_param_count,
    forward,
    init_model,
    load_checkpoint,
    mrgnn_forward,
    predict,
    save_checkpoint,
)

from conftest import jitter, random_graph_set
from oracles import finite_difference, forward_loop, gradient_mismatches, kink_margin


def sq_loss(preds, y, scale=1.0):
    return scale * sum(float(((preds[m] - y[m]) ** 2).sum()) for m in preds)


def sq_grad(preds, y, scale=1.0):
    return {m: 2 * scale * (preds[m] - y[m]) for m in preds}


# ---------------------------------------------------------------- config and census


def test_temporal_budget():
    assert ModelConfig(("bike",)).remaining_length == 2
    with pytest.raises(ValueError):
        ModelConfig(("bike",), T=4, kt=2, channels=(8, 8, 8))
    with pytest.raises(ValueError):
        ModelConfig(("bike",), channels=(0, 4))


@pytest.mark.parametrize("modes", [("bike",), ("bike", "subway"), ("bike", "subway", "ridehail")])
def test_param_census(modes):
    cfg = ModelConfig(modes, channels=(4, 4), head_hidden=4)
    model = init_model(cfg, seed=0)
    assert len(model.params) == expected_param_count(cfg)
    n_gc = sum(1 for k in model.params if k.startswith("b0.gc.") and k.endswith(".W"))
    assert n_gc == 2 * len(modes) + 4 * (len(modes) - 1)
    bad = dict(model.params)
    bad.pop("head.bike.fc2.b")
    with pytest.raises(ValueError):
        ModelState(cfg, bad)


def test_init_is_seeded_glorot():
    cfg = ModelConfig(("bike", "subway"), channels=(4, 6), head_hidden=5)
    a, b = init_model(cfg, seed=1), init_model(cfg, seed=1)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    W = a.params["b1.gc.bike.subway.geo.sim.W"]
    assert np.abs(W).max() <= np.sqrt(6 / 12)
    assert not a.params["b0.bike.tcn1.b"].any()
    np.testing.assert_array_equal(a.params["b0.bike.ln.gamma"], 1.0)


# ---------------------------------------------------------------- forward


def test_output_shapes(small_setup):
    gs, model, x, _ = small_setup
    preds, _ = forward(model, x, gs.normalized())
    assert {m: p.shape for m, p in preds.items()} == {"bike": (3, 6, 2), "subway": (3, 4, 2), "ridehail": (3, 3, 2)}


def test_zero_params_predict_final_bias(small_setup):
    gs, model, x, _ = small_setup
    zero = model.copy()
    for v in zero.params.values():
        v[...] = 0
    zero.params["head.subway.fc2.b"][:] = [0.25, -1.5]
    preds, _ = forward(zero, x, gs.normalized())
    np.testing.assert_array_equal(preds["subway"], np.broadcast_to([0.25, -1.5], (3, 4, 2)))
    np.testing.assert_array_equal(preds["bike"], 0.0)


def test_zero_params_mrgnn_output_zero(small_setup):
    gs, model, x, _ = small_setup
    P = {k: np.zeros_like(v) for k, v in model.params.items()}
    H = {m: np.random.default_rng(0).normal(size=(2, 5, v.shape[2], 8)) for m, v in x.items()}
    out, _ = mrgnn_forward(model.config, P, "b0.", H, gs.normalized())
    for m in out:
        np.testing.assert_array_equal(out[m], 0.0)


def test_mrgnn_term_counts(small_setup):
    gs, model, x, _ = small_setup
    _, caches = mrgnn_forward(model.config, model.params, "b0.",
                              {m: np.ones((1, 5, v.shape[2], 8)) for m, v in x.items()}, gs.normalized())
    assert len(caches) == 2 * 3 + 4 * 2  # 10 convs land on bike, 2 on each auxiliary mode


def test_single_mode_mrgnn_is_two_intra_convs(rng):
    gs = random_graph_set(rng, {"bike": 5})
    cfg = ModelConfig(("bike",), channels=(3, 3), head_hidden=3)
    model = jitter(init_model(cfg, 0), rng)
    H = {"bike": rng.normal(size=(2, 4, 5, 3))}
    adj = gs.normalized()
    out, _ = mrgnn_forward(cfg, model.params, "b0.", H, adj)
    P = model.params
    want = sum(
        np.maximum(adj[("bike", "bike", k)] @ H["bike"] @ P[f"b0.gc.bike.intra.{k}.W"] + P[f"b0.gc.bike.intra.{k}.b"], 0)
        for k in ("geo", "sem")
    )
    np.testing.assert_allclose(out["bike"], want, atol=1e-12)


def test_block_shrinks_time_and_normalizes(small_setup):
    gs, model, x, _ = small_setup
    cfg = model.config
    P = {k: v.copy() for k, v in model.params.items()}
    for m in cfg.modes:
        P[f"b0.{m}.ln.gamma"][:] = 1
        P[f"b0.{m}.ln.beta"][:] = 0
    out, _ = block_forward(cfg, P, 0, x, gs.normalized())
    for m, h in out.items():
        assert h.shape[1] == 4
        assert np.abs(h.mean(axis=-1)).max() < 1e-6


def test_forward_matches_loop_replay(rng):
    sizes = {"bike": 4, "subway": 3, "ridehail": 3}
    gs = random_graph_set(rng, sizes)
    cfg = ModelConfig(tuple(gs.modes), channels=(3, 4), head_hidden=3, dropout=0.0)
    model = jitter(init_model(cfg, seed=9), rng, 0.2)
    x = {m: rng.uniform(0, 1, (2, 6, n, 2)) for m, n in sizes.items()}
    adj = gs.normalized()
    got, _ = forward(model, x, adj)
    want = forward_loop(model, x, adj)
    for m in got:
        np.testing.assert_allclose(got[m], want[m], rtol=0, atol=1e-10)


def test_forward_rejects_bad_inputs(small_setup):
    gs, model, x, _ = small_setup
    with pytest.raises(ValueError):
        forward(model, {"bike": x["bike"]}, gs.normalized())
    with pytest.raises(ValueError):
        forward(model, dict(x, bike=x["bike"][:, :5]), gs.normalized())


def test_dropout_zero_repeatable_and_dropout_changes_training_pass(small_setup):
    gs, model, x, _ = small_setup
    adj = gs.normalized()
    a, _ = forward(model, x, adj, training=True, rng=np.random.default_rng(0))
    b, _ = forward(model, x, adj, training=True, rng=np.random.default_rng(0))
    for m in a:
        assert a[m].tobytes() == b[m].tobytes()
    from dataclasses import replace

    drop = type(model)(replace(model.config, dropout=0.5), model.params)
    c, _ = forward(drop, x, adj, training=True, rng=np.random.default_rng(0))
    d, _ = forward(drop, x, adj, training=True, rng=np.random.default_rng(1))
    assert not np.allclose(c["bike"], d["bike"])
    e, _ = forward(drop, x, adj)
    np.testing.assert_array_equal(e["bike"], a["bike"])


def test_predict_batches_agree(small_setup):
    gs, model, x, _ = small_setup
    adj = gs.normalized()
    full, _ = forward(model, x, adj)
    chunked = predict(model, x, adj, batch_size=2)
    for m in full:
        np.testing.assert_allclose(chunked[m], full[m], atol=1e-14)


# ---------------------------------------------------------------- invariants


@pytest.mark.parametrize("t_prime", [0, 2, 5])
def test_causality(small_setup, t_prime):
    gs, model, x, _ = small_setup
    adj = gs.normalized()
    _, tape = forward(model, x, adj, record=True)
    x2 = {m: v.copy() for m, v in x.items()}
    x2["subway"][:, t_prime] += 0.7
    _, tape2 = forward(model, x2, adj, record=True)
    T = model.config.T
    for name, act in tape.acts.items():
        offset = T - act.shape[1]  # index i of this activation ends at input bin i + offset
        early = max(0, t_prime - offset)
        np.testing.assert_array_equal(tape2.acts[name][:, :early], act[:, :early], err_msg=name)
    assert not np.array_equal(tape2.acts["b1.bike.out"], tape.acts["b1.bike.out"])


def _permute_adj(adj, mode, perm):
    out = {}
    for (src, dst, kind), A in adj.items():
        if dst == mode:
            A = A[perm]
        if src == mode:
            A = A[:, perm]
        out[(src, dst, kind)] = A
    return out


@pytest.mark.parametrize("mode", ["bike", "subway"])
def test_permutation_equivariance(small_setup, mode):
    gs, model, x, _ = small_setup
    adj = gs.normalized()
    n = x[mode].shape[2]
    perm = np.random.default_rng(1).permutation(n)
    base, _ = forward(model, x, adj)
    xp = dict(x, **{mode: x[mode][:, :, perm]})
    moved, _ = forward(model, xp, _permute_adj(adj, mode, perm))
    for m in base:
        want = base[m][:, perm] if m == mode else base[m]
        np.testing.assert_allclose(moved[m], want, rtol=0, atol=1e-9)


# ---------------------------------------------------------------- backward


def _kink_free_setup(seed):
    """Small model and batch whose ReLU/abs inputs all sit well away from zero."""
    sizes = {"bike": 6, "subway": 4, "ridehail": 3}
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        gs = random_graph_set(rng, sizes)
        cfg = ModelConfig(tuple(gs.modes), channels=(8, 8), head_hidden=8, dropout=0.0)
        model = jitter(init_model(cfg, seed), rng)
        x = {m: rng.uniform(0, 1, (1, 6, n, 2)) for m, n in sizes.items()}
        y = {m: rng.uniform(0, 1, (1, n, 2)) for m, n in sizes.items()}
        adj = gs.normalized()
        _, tape = forward(model, x, adj)
        if kink_margin(tape) > 1e-4:
            return model, x, y, adj
    raise RuntimeError("no kink-free sample found")


def test_gradients_match_finite_differences_on_heads_and_first_block():
    model, x, y, adj = _kink_free_setup(0)
    preds, tape = forward(model, x, adj)
    grads = backward(model, tape, sq_grad(preds, y))
    names = [k for k in model.params if k.startswith("head.") or k.startswith("b0.gc.bike.subway")]
    names += ["b0.bike.tcn1.W", "b1.subway.ln.gamma", "b0.ridehail.tcn2.b"]
    for name in names:
        num = finite_difference(lambda: sq_loss(forward(model, x, adj)[0], y), model.params[name])
        assert len(gradient_mismatches(grads[name], num)) == 0, name


def test_unused_parameter_gradient_exactly_zero(small_setup):
    gs, model, x, y = small_setup
    preds, tape = forward(model, x, gs.normalized())
    dp = {m: np.zeros_like(p) for m, p in preds.items()}
    dp["bike"] = 2 * (preds["bike"] - y["bike"])
    grads = backward(model, tape, dp)
    for k, g in grads.items():
        if k.startswith("head.subway") or k.startswith("head.ridehail"):
            assert not g.any(), k
    assert grads["b0.gc.bike.subway.geo.sim.W"].any()


def test_gradient_linear_in_loss_scale(small_setup):
    gs, model, x, y = small_setup
    preds, tape = forward(model, x, gs.normalized())
    g1 = backward(model, tape, sq_grad(preds, y))
    g2 = backward(model, tape, sq_grad(preds, y, scale=2.0))
    assert set(g1) == set(model.params)
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2 * g1[k])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_and_fingerprint(tmp_path, small_setup):
    gs, model, x, _ = small_setup
    model.graph_fingerprint = gs.fingerprint()
    stats = {"bike": NormalizationStats("bike", 0.0, 42.0)}
    save_checkpoint(tmp_path / "c.npz", model, stats, {"epoch": 3}, {"aux": np.arange(3.0)})
    back, st, extra, arrays = load_checkpoint(tmp_path / "c.npz", gs.fingerprint())
    assert back.config == model.config and st == {"bike": (0.0, 42.0)} and extra == {"epoch": 3}
    np.testing.assert_array_equal(arrays["aux"], np.arange(3.0))
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    other = random_graph_set(np.random.default_rng(99), {"bike": 6, "subway": 4, "ridehail": 3})
    with pytest.raises(ArchiveError):
        load_checkpoint(tmp_path / "c.npz", other.fingerprint())
