import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnlab.data import (
    ClickEvent,
    DataError,
    EventTable,
    ImpressionSet,
    IngestError,
    SplitError,
    SyntheticSpec,
    Vocab,
    bin_index,
    binning,
    build_impressions,
    gen_synthetic,
    ingest_taobao,
    simulate_synthetic,
    split_events,
    time_split,
)


def test_binning_examples():
    assert binning(5.0, 1) == "6"
    assert binning(0.0, 1) == "1"
    assert binning(0.987, 0.01) == "99"
    assert binning(-0.5, 0.01) == "-49"
    # oracle: the double-precision quotient floors the same way
    assert math.floor(0.987 / 0.01) == 98
    assert math.floor(Fraction(-1, 2) / Fraction(1, 100)) + 1 == -49


def test_bin_index_matches_scalar():
    xs = np.linspace(-1, 1, 57)
    assert bin_index(xs, 0.01).tolist() == [int(binning(x, 0.01)) for x in xs]
    with pytest.raises(ValueError):
        binning(1.0, 0.0)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_binning_monotone(a, b):
    if a <= b:
        assert int(binning(a, 0.5)) <= int(binning(b, 0.5))


@given(st.integers(-10_000, 10_000), st.integers(1, 99))
def test_binning_shift(k, frac):
    # a point safely inside a bin (away from edges)
    z = 0.25
    x = (k + frac / 100) * z
    assert int(binning(x, z)) == int(binning(x + z, z)) - 1


def test_click_event_validation():
    with pytest.raises(DataError):
        ClickEvent(1, 1, 0)
    with pytest.raises(DataError):
        ClickEvent(1, 1, 5, behavior="buy")


def test_vocab_round_trip(tmp_path):
    v = Vocab(["x9", "a", "x9", "17"])
    assert len(v) == 3 and v.to_dense["a"] == 2
    v.save(tmp_path / "v.tsv")
    w = Vocab.load(tmp_path / "v.tsv")
    assert w.to_raw == v.to_raw
    assert all(w.raw(w.to_dense[r]) == r for r in ["x9", "a", "17"])


def _write_csv(path, rows):
    path.write_text("".join(",".join(map(str, r)) + "\n" for r in rows))


def test_ingest_valid_rows(tmp_path):
    f = tmp_path / "ub.csv"
    _write_csv(f, [(10, 500, 7, "pv", 100), (11, 501, 7, "pv", 101), (10, 502, 8, "pv", 102)])
    ev = ingest_taobao(f, tmp_path / "out")
    assert len(ev) == 3
    assert len(ev.vocabs["user"]) == 2 and len(ev.vocabs["item"]) == 3 and len(ev.vocabs["category"]) == 2
    assert (tmp_path / "out" / "vocab_item.tsv").exists()
    assert ev.seq_types == ("item", "category")


def test_ingest_rejects_bad_timestamp(tmp_path):
    f = tmp_path / "ub.csv"
    rows = [(1, i, 1, "pv", 100 + i) for i in range(199)]
    rows.insert(50, (1, 3, 1, "pv", "yesterday"))
    _write_csv(f, rows)
    ev = ingest_taobao(f, tmp_path)
    assert len(ev) == 199 and len(ev.rejects) == 1
    assert ev.rejects[0][0] == 51
    lines = (tmp_path / "rejects.tsv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("51\t")


def test_ingest_too_many_rejects(tmp_path):
    f = tmp_path / "ub.csv"
    _write_csv(f, [(1, 1, 1, "pv", 5), (1, 2, 1, "pv", "x"), (2, 2, 1, "pv", 6)])
    with pytest.raises(IngestError):
        ingest_taobao(f)


def test_ingest_click_filter(tmp_path):
    f = tmp_path / "ub.csv"
    _write_csv(f, [(1, 1, 1, "pv", 5), (1, 2, 1, "buy", 6), (1, 3, 1, "cart", 7), (2, 2, 1, "pv", 8)])
    ev = ingest_taobao(f)
    assert len(ev) == 2 and ev.click_only
    assert ingest_taobao(f, click_only=False).item.size == 4


def test_build_impressions_simple_history():
    ev = EventTable([1, 1], [1, 2], [10, 20], [True, True], category=[1, 1])
    imp = build_impressions(ev, max_len=100, negative_ratio=0)
    rec = imp[1]
    assert rec.target["item"] == 2 and rec.sequences["item"].entity_ids == [1]
    assert imp[0].sequences["item"].entity_ids == []


def test_negative_ratio_count():
    ev = EventTable([1] * 10, list(range(1, 11)), list(range(1, 11)), [True] * 10)
    imp = build_impressions(ev, negative_ratio=4, seed=3)
    assert len(imp) == 50 and int(imp.label.sum()) == 10
    neg = imp.label == 0
    pos_item = np.repeat(imp.target["item"][imp.label == 1], 5)
    assert np.all(imp.target["item"][neg] != pos_item[neg])


def test_negatives_carry_side_info():
    ev = EventTable([1, 1, 2], [1, 2, 3], [1, 2, 3], [True] * 3, category=[5, 6, 7])
    imp = build_impressions(ev, negative_ratio=2)
    side = {1: 5, 2: 6, 3: 7}
    assert all(side[i] == c for i, c in zip(imp.target["item"], imp.target["category"]))


def test_max_len_keeps_most_recent():
    ev = EventTable([1] * 6, [1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6], [True] * 6)
    imp = build_impressions(ev, max_len=3, negative_ratio=0)
    assert imp[5].sequences["item"].entity_ids == [3, 4, 5]


def test_display_log_labels_and_histories():
    ev = EventTable([1, 1, 1], [1, 2, 3], [1, 2, 3], [True, False, True])
    imp = build_impressions(ev, negative_ratio=4)
    assert len(imp) == 3 and imp.label.tolist() == [1, 0, 1]
    assert imp[2].sequences["item"].entity_ids == [1]


def test_equal_timestamps_are_not_history():
    ev = EventTable([1, 1], [1, 2], [5, 5], [True, True])
    imp = build_impressions(ev, negative_ratio=0)
    assert imp.length.tolist() == [0, 0]


def test_no_leakage_on_large_corpus():
    spec = SyntheticSpec(n_users=150, n_items=300, n_categories=10, events_per_user=80, seed=4)
    ev, _ = gen_synthetic(spec)
    imp = build_impressions(ev, max_len=50)
    assert len(imp) >= 10_000
    # exhaustive scan oracle
    bad = 0
    for i in range(len(imp)):
        k = imp.length[i]
        bad += int(np.sum(imp.seq_ts[i, :k] >= imp.timestamp[i]))
    assert bad == 0 == imp.leakage_violations()


def test_impressions_binary_round_trip(tmp_path):
    ev = EventTable([1, 1, 2, 2], [1, 2, 3, 1], [1, 2, 3, 4], [True] * 4, category=[1, 1, 2, 1])
    imp = build_impressions(ev, negative_ratio=1, seed=1)
    imp.write(tmp_path / "imp.bin")
    back = ImpressionSet.read(tmp_path / "imp.bin")
    for a, b in zip(imp, back):
        assert a == b
    assert (tmp_path / "imp.bin.schema.json").exists()


def test_time_split_partition():
    ev = EventTable([1] * 10, list(range(1, 11)), list(range(1, 11)), [True] * 10)
    imp = build_impressions(ev, negative_ratio=0)
    train, test = time_split(imp, 8)
    assert len(train) == 7 and len(test) == 3
    assert sorted(train.timestamp.tolist() + test.timestamp.tolist()) == imp.timestamp.tolist()
    with pytest.raises(SplitError):
        time_split(imp, 100)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=40), st.integers(1, 50))
def test_time_split_property(ts, boundary):
    n = len(ts)
    ev = EventTable([1] * n, list(range(1, n + 1)), ts, [True] * n)
    imp = build_impressions(ev, negative_ratio=0)
    try:
        train, test = time_split(imp, boundary)
    except SplitError:
        assert all(t < boundary for t in ts) or all(t >= boundary for t in ts)
        return
    assert np.all(train.timestamp < boundary) and np.all(test.timestamp >= boundary)
    assert len(train) + len(test) == n
    assert np.all(np.diff(train.timestamp) >= 0)


def test_split_events():
    ev = EventTable([1, 2, 3], [1, 2, 3], [5, 10, 15], [True] * 3)
    a, b = split_events(ev, 10)
    assert a.timestamp.tolist() == [5] and b.timestamp.tolist() == [10, 15]


def test_synthetic_boost_one_is_flat():
    d = simulate_synthetic(SyntheticSpec(n_users=50, n_items=100, n_categories=10, events_per_user=40, retarget_boost=1.0))
    assert np.allclose(d.click_prob, 0.05)


def test_synthetic_determinism(tmp_path):
    spec = SyntheticSpec(n_users=40, n_items=80, n_categories=8, events_per_user=30, seed=9)
    a, la = gen_synthetic(spec)
    b, lb = gen_synthetic(spec)
    a.to_tsv(tmp_path / "a.tsv")
    b.to_tsv(tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert la.tobytes() == lb.tobytes()


def test_synthetic_retargeted_ctr_exceeds_overall():
    d = simulate_synthetic(SyntheticSpec())
    ev = d.events.sorted()
    assert len(ev) >= 100_000
    seen = {}
    retargeted = np.zeros(len(ev), bool)
    for i, (u, it, c) in enumerate(zip(ev.user.tolist(), ev.item.tolist(), ev.click.tolist())):
        s = seen.setdefault(u, set())
        retargeted[i] = it in s
        if c:
            s.add(it)
    assert retargeted.sum() > 1000
    assert ev.click[retargeted].mean() > ev.click.mean()


def test_synthetic_spec_validation():
    with pytest.raises(DataError) as e:
        SyntheticSpec(retarget_boost=0.5, base_ctr=2.0).validate()
    assert "retarget_boost" in str(e.value) and "base_ctr" in str(e.value)


def test_synthetic_latents_cluster_by_category():
    d = simulate_synthetic(SyntheticSpec(n_users=20, events_per_user=10))
    L = d.latents[1:]
    cat = d.item_category[1:]
    sim = L @ L.T
    same = cat[:, None] == cat[None, :]
    np.fill_diagonal(same, False)
    assert sim[same].mean() > sim[~same & ~np.eye(len(cat), dtype=bool)].mean() + 0.3
