import csv
from datetime import datetime, timedelta

import numpy as np
import pytest

from mrgnn.ingest import bin_counts, bin_demand, load_registry, load_trip_records, load_turnstile_counts
from mrgnn.synthetic import SynthSpec, generate_synthetic, write_raw_files


def small_spec(**kw):
    base = dict(n_bike=6, n_subway=3, n_ridehail=2, n_bins=60)
    base.update(kw)
    return SynthSpec(**base)


def test_planted_identity_without_noise():
    spec = small_spec(noise=0.0, alpha=1.0, level={"bike": 0.0, "subway": 60.0, "ridehail": 40.0})
    data = generate_synthetic(spec, seed=3)
    bike, sub = data.tensors["bike"].values, data.tensors["subway"].values
    cols = [data.tensors["subway"].node_ids.index(data.link_map[b]) for b in data.tensors["bike"].node_ids]
    np.testing.assert_array_equal(bike[1:, :, 0], sub[:-1, cols, 1])


def test_same_seed_bit_identical():
    a = generate_synthetic(small_spec(), seed=11)
    b = generate_synthetic(small_spec(), seed=11)
    for m in a.tensors:
        assert a.tensors[m].values.tobytes() == b.tensors[m].values.tobytes()
        np.testing.assert_array_equal(a.node_sets[m].coords, b.node_sets[m].coords)
    assert a.link_map == b.link_map
    c = generate_synthetic(small_spec(), seed=12)
    assert c.tensors["bike"].values.tobytes() != a.tensors["bike"].values.tobytes()


def deseason(x, period=6):
    slots = np.arange(len(x)) % period
    means = np.array([x[slots == k].mean() for k in range(period)])
    return x - means[slots]


def test_alpha_zero_decouples_planted_pairs():
    spec = SynthSpec(n_bike=20, n_subway=10, n_ridehail=6, n_bins=600, alpha=0.0)
    data = generate_synthetic(spec, seed=0)
    bike, sub = data.tensors["bike"].values, data.tensors["subway"].values
    ids = data.tensors["subway"].node_ids
    for i, b in enumerate(data.tensors["bike"].node_ids):
        j = ids.index(data.link_map[b])
        # both series share a daily cycle by construction, so compare deviations from the bin-of-day means
        x = deseason(bike[1:, i, 0])
        y = deseason(sub[:-1, j, 1])
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.1


def test_alpha_strong_couples_planted_pairs():
    data = generate_synthetic(small_spec(n_bins=300), seed=0)
    bike, sub = data.tensors["bike"].values, data.tensors["subway"].values
    j = data.tensors["subway"].node_ids.index(data.link_map["b000"])
    assert np.corrcoef(bike[1:, 0, 0], sub[:-1, j, 1])[0, 1] > 0.5


@pytest.mark.parametrize("field", ["n_bike", "n_bins", "bin_hours"])
def test_invalid_sizes(field):
    with pytest.raises(ValueError):
        generate_synthetic(small_spec(**{field: 0}), seed=0)


def test_spec_dict_roundtrip():
    spec = small_spec(alpha=0.3)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"bogus": 1})


def test_raw_files_reproduce_tensors(tmp_path):
    data = generate_synthetic(small_spec(), seed=4)
    info = write_raw_files(data, tmp_path, seed=4)
    spec = data.spec
    start = datetime.fromisoformat(spec.start)
    width = timedelta(hours=spec.bin_hours)
    span = (start, start + spec.n_bins * width)
    for mode in ("bike", "ridehail"):
        ns = data.node_sets[mode]
        load = load_trip_records(info["files"][f"{mode}_trips"], ns.node_ids, mode)
        assert load.skipped == 0
        t, _ = bin_demand(load.events, ns, width, span, mode)
        np.testing.assert_array_equal(t.values, data.tensors[mode].values)
        assert t.values[:, :, 0].sum() == info["totals"][mode]["inflow"]
    sub = load_turnstile_counts(info["files"]["subway_counts"])
    t, _ = bin_counts(sub.records, data.node_sets["subway"], width, span)
    np.testing.assert_array_equal(t.values, data.tensors["subway"].values)
    with open(info["files"]["link_map"]) as fh:
        pairs = {(r["bike_id"], r["subway_id"]) for r in csv.DictReader(fh)}
    assert pairs == set(data.link_map.items())
    ns = load_registry(info["files"]["bike_nodes"], "bike", origin=None)
    assert ns.node_ids == data.node_sets["bike"].node_ids


def test_raw_files_deterministic(tmp_path):
    data = generate_synthetic(small_spec(), seed=4)
    write_raw_files(data, tmp_path / "a", seed=4)
    write_raw_files(data, tmp_path / "b", seed=4)
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
