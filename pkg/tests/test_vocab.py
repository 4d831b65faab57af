"""Delta vocabulary: build, encode/decode, refresh, lookup filter."""

import numpy as np

from prefetchlab.address import TableDelta
from prefetchlab.vocab import (DeltaVocabulary, TableDeltaLookup, build_vocab,
                               decode_top_deltas, encode_bi_delta,
                               lookup_filter, refresh_vocab)


def test_class_layout():
    v = DeltaVocabulary(ds=3)
    assert v.num_classes == 7
    assert v.default_class_index == 3
    assert v.deltas == [None, None, None]


def test_build_vocab_frequency_order_and_ties():
    # freqs: 5 -> 3 times, -2 and 2 -> 2 times, 9 -> once
    sets = [{5, 2, -2}, {5, 2, -2}, {5, 9}]
    v = build_vocab(sets, ds=3)
    # tie between 2 and -2 broken by + before -
    assert v.deltas == [5, 2, -2]
    assert v.class_of(5) == 0
    assert v.class_of(9) is None


def test_build_vocab_short_stream_leaves_unassigned():
    v = build_vocab([{1}], ds=4)
    assert v.deltas == [1, None, None, None]


def test_encode_bi_delta():
    v = build_vocab([{1, 2}, {1}], ds=2)
    bits = encode_bi_delta({1, 7}, v)
    assert bits[v.class_of(1)] == 1.0
    assert bits[v.default_class_index] == 1.0  # 7 is out of vocabulary
    assert bits.sum() == 2.0
    assert encode_bi_delta(set(), v).sum() == 0.0


def test_decode_top_deltas_skips_default_and_unassigned():
    v = build_vocab([{1, 2}], ds=3)  # slot 2 unassigned
    probs = np.zeros(v.num_classes)
    probs[v.class_of(1)] = 0.2
    probs[v.class_of(2)] = 0.9
    probs[v.default_class_index] = 0.99
    assert decode_top_deltas(probs, 2, v) == [2, 1]
    assert decode_top_deltas(probs, 10, v) == [2, 1]  # clamps
    assert decode_top_deltas(probs, 0, v) == []


def test_refresh_vocab_keeps_surviving_indices():
    v = build_vocab([{1, 2, 3}], ds=3)
    old_index_of_2 = v.class_of(2)
    new, remap = refresh_vocab(v, [{2, 50}, {2, 50}, {2}])
    assert new.class_of(2) == old_index_of_2
    # 50 lands in a void slot (actives are full and all survive in-window)
    assert any(new_off == 50 for _i, _old, new_off in remap)
    assert new.class_of(50) is not None


def test_refresh_vocab_no_change_is_empty_remap():
    v = build_vocab([{1, 2}], ds=2)
    new, remap = refresh_vocab(v, [{1, 2}, {1}])
    assert remap == []
    assert new.deltas == v.deltas


def test_refresh_vocab_evicts_lowest_recent_frequency():
    v = build_vocab([{1, 2, 3}], ds=3)
    # fill the void slots first so eviction is forced
    v.slots[4], v.slots[5], v.slots[6] = 10, 11, 12
    new, remap = refresh_vocab(v, [{7, 1, 10, 11, 12}] * 3 + [{2}, {2}, {3}])
    # 7 is newly frequent; 3 has the lowest recent count among evictables
    evicted = [(i, old) for i, old, new_off in remap if new_off == 7]
    assert evicted and evicted[0][1] == 3


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab([{1, 2, -4}, {1}], ds=3)
    v.slots[5] = 99  # a void assignment survives the round trip
    p = tmp_path / "vocab.txt"
    v.save(str(p))
    back = DeltaVocabulary.load(str(p))
    assert back.ds == v.ds
    assert back.slots == v.slots
    assert back.freq[1] == v.freq[1]


def test_table_delta_lookup_sliding_window():
    lk = TableDeltaLookup(window=2, min_count=2)
    lk.observe([TableDelta(0, 5)])
    lk.observe([TableDelta(0, 5)])
    assert lk.count(0, 5) == 2
    lk.observe([TableDelta(1, 3)])  # pushes the first observation out
    assert lk.count(0, 5) == 1


def test_lookup_filter():
    lk = TableDeltaLookup(window=10, min_count=2)
    for _ in range(2):
        lk.observe([TableDelta(0, 5)])
    cands = [TableDelta(0, 5), TableDelta(0, 6), TableDelta(1, 5)]
    assert lookup_filter(cands, lk) == [TableDelta(0, 5)]
    lk0 = TableDeltaLookup(window=10, min_count=0)
    assert lookup_filter(cands, lk0) == cands
