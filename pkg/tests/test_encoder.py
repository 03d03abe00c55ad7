"""Feature encoding: layout widths, normalization, bitmaps, join bits, files."""

import numpy as np
import pytest

from nngp_card.encoder import (
    EncodingError,
    build_layout,
    denormalize_features,
    encode,
    encode_batch,
    load_encoded,
    normalize_features,
    save_encoded,
)
from nngp_card.queries import InFilter, JoinCondition, Query, RangeFilter
from nngp_card.relstore import SchemaCatalog, register_join_pair, synth_relation
from nngp_card.workload import finalize, gen_single_relation

from conftest import make_relation


def categorical_relation(name, m, seed=0):
    values = [f"v{i:02d}" for i in range(m)]
    rel = synth_relation(
        seed,
        200,
        [
            {"name": "c", "kind": "categorical", "values": values},
            {"name": "a", "kind": "uniform", "lo": 0, "hi": 100},
        ],
        name=name,
    )
    assert rel.type_of("c").size == m  # all values observed
    return rel


class TestLayout:
    def test_single_numerical_attribute(self):
        rel = make_relation("r", numeric=[0.0, 1.0])
        layout = build_layout(SchemaCatalog((rel,)))
        assert layout.dim == 2
        assert layout.segments[0].kind == "range"

    def test_small_domain_uses_bitmap(self):
        rel = categorical_relation("r", 5)
        layout = build_layout(SchemaCatalog((rel,)), bitmap_threshold=8)
        seg = layout.segment_for("r.c")
        assert seg.kind == "bitmap"
        assert seg.width == 5

    def test_large_domain_uses_factorized_chunks(self):
        rel = categorical_relation("r", 12)
        layout = build_layout(SchemaCatalog((rel,)), chunk_size=4, bitmap_threshold=8)
        seg = layout.segment_for("r.c")
        assert seg.kind == "factorized"
        assert seg.width == 3  # ceil(12 / 4)

    def test_segments_contiguous_cover_dimension(self):
        rel = categorical_relation("r", 20)
        rel2 = make_relation("s", numeric=[0.0, 5.0])
        catalog = register_join_pair(SchemaCatalog((rel, rel2)), "r.a", "s.a")
        layout = build_layout(catalog)
        spans = [(s.offset, s.offset + s.width) for s in layout.segments]
        spans += [(j.offset, j.offset + 3) for j in layout.join_segments]
        spans.sort()
        assert spans[0][0] == 0
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert end == start
        assert spans[-1][1] == layout.dim

    def test_chunk_size_validated(self):
        rel = make_relation("r", numeric=[0.0, 1.0])
        with pytest.raises(EncodingError):
            build_layout(SchemaCatalog((rel,)), chunk_size=0)


class TestRangeEncoding:
    @pytest.fixture
    def setup(self):
        rel = make_relation("r", numeric=[0.0, 50.0, 100.0])
        catalog = SchemaCatalog((rel,))
        return catalog, build_layout(catalog)

    def test_normalized_bounds(self, setup):
        catalog, layout = setup
        q = Query(("r",), (("r.a", RangeFilter(25.0, 50.0)),))
        assert encode(q, layout, catalog).tolist() == [0.25, 0.5]

    def test_unconstrained_attribute_is_full_range(self, setup):
        catalog, layout = setup
        assert encode(Query(("r",)), layout, catalog).tolist() == [0.0, 1.0]

    def test_order_preserving(self, setup):
        catalog, layout = setup
        lows = []
        for lb in (0.0, 10.0, 30.0, 77.0):
            q = Query(("r",), (("r.a", RangeFilter(lb, 100.0)),))
            lows.append(encode(q, layout, catalog)[0])
        assert lows == sorted(lows)
        assert len(set(lows)) == len(lows)

    def test_constant_column_encodes_full_range(self):
        rel = make_relation("r", numeric=[3.0, 3.0])
        catalog = SchemaCatalog((rel,))
        layout = build_layout(catalog)
        q = Query(("r",), (("r.a", RangeFilter(3.0, 3.0)),))
        assert encode(q, layout, catalog).tolist() == [0.0, 1.0]


class TestBitmapEncoding:
    def test_plain_bitmap_bits(self):
        rel = categorical_relation("r", 5)
        catalog = SchemaCatalog((rel,))
        layout = build_layout(catalog, bitmap_threshold=8)
        q = Query(("r",), (("r.c", InFilter(("v00", "v03"))),))
        seg = layout.segment_for("r.c")
        vec = encode(q, layout, catalog)
        assert vec[seg.offset : seg.offset + 5].tolist() == [1, 0, 0, 1, 0]

    def test_unconstrained_bitmap_all_ones(self):
        rel = categorical_relation("r", 5)
        catalog = SchemaCatalog((rel,))
        layout = build_layout(catalog, bitmap_threshold=8)
        seg = layout.segment_for("r.c")
        vec = encode(Query(("r",)), layout, catalog)
        assert vec[seg.offset : seg.offset + 5].tolist() == [1] * 5

    def test_factorized_chunk_integers(self):
        # m=8, s=4, C = {c_1, c_3} -> bitmap 10100000 -> chunks (1010, 0000)
        # Independent conversion: int("1010", 2) == 10, int("0000", 2) == 0.
        rel = categorical_relation("r", 8)
        catalog = SchemaCatalog((rel,))
        layout = build_layout(catalog, chunk_size=4, bitmap_threshold=4)
        q = Query(("r",), (("r.c", InFilter(("v00", "v02"))),))
        seg = layout.segment_for("r.c")
        vec = encode(q, layout, catalog)

        bitmap = "".join("1" if f"v{i:02d}" in ("v00", "v02") else "0" for i in range(8))
        expected = [int(bitmap[i : i + 4], 2) for i in range(0, 8, 4)]
        assert expected == [10, 0]
        assert vec[seg.offset : seg.offset + 2].tolist() == expected

    def test_factorized_neutral_partial_chunk(self):
        # m=10, s=4: neutral all-ones bitmap -> chunks 1111 1111 11 -> 15, 15, 3
        rel = categorical_relation("r", 10)
        catalog = SchemaCatalog((rel,))
        layout = build_layout(catalog, chunk_size=4, bitmap_threshold=4)
        seg = layout.segment_for("r.c")
        vec = encode(Query(("r",)), layout, catalog)
        assert vec[seg.offset : seg.offset + 3].tolist() == [15.0, 15.0, 3.0]


class TestJoinBits:
    @pytest.fixture
    def setup(self):
        r1 = make_relation("r1", numeric=[0.0, 1.0])
        r2 = make_relation("r2", numeric=[0.0, 1.0])
        catalog = register_join_pair(SchemaCatalog((r1, r2)), "r1.a", "r2.a")
        return catalog, build_layout(catalog)

    @pytest.mark.parametrize(
        "op, bits",
        [
            ("<", [1, 0, 0]),
            ("<=", [1, 1, 0]),
            ("=", [0, 1, 0]),
            (">=", [0, 1, 1]),
            (">", [0, 0, 1]),
            ("!=", [1, 0, 1]),
        ],
    )
    def test_op_bit_patterns(self, setup, op, bits):
        catalog, layout = setup
        q = Query(("r1", "r2"), joins=(JoinCondition(0, op),))
        vec = encode(q, layout, catalog)
        assert vec[-3:].tolist() == bits

    def test_no_join_is_zero_bits(self, setup):
        catalog, layout = setup
        vec = encode(Query(("r1",)), layout, catalog)
        assert vec[-3:].tolist() == [0, 0, 0]


class TestNormalization:
    @pytest.fixture
    def setup(self):
        rel = categorical_relation("r", 20)
        catalog = SchemaCatalog((rel,))
        return catalog, build_layout(catalog, chunk_size=8, bitmap_threshold=16)

    def test_extremes(self, setup):
        catalog, layout = setup
        slots = layout.factorized_slots()
        raw = np.zeros((2, layout.dim))
        raw[1, slots] = 2**8 - 1
        normed = normalize_features(raw, layout)
        assert np.all(normed[0, slots] == 0.0)
        assert np.all(normed[1, slots] == 1.0)

    def test_round_trip_bijective(self, setup):
        catalog, layout = setup
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(5, layout.dim)).astype(float)
        assert np.allclose(denormalize_features(normalize_features(raw, layout), layout), raw)

    def test_non_factorized_slots_untouched(self, setup):
        catalog, layout = setup
        q = Query(("r",), (("r.a", RangeFilter(10.0, 20.0)),))
        raw = encode(q, layout, catalog)
        normed = normalize_features(raw, layout)
        seg = layout.segment_for("r.a")
        assert np.array_equal(raw[seg.offset : seg.offset + 2], normed[seg.offset : seg.offset + 2])


@pytest.fixture(scope="module")
def pipeline():
    rel = synth_relation(
        77,
        400,
        [
            {"name": "a1", "kind": "uniform", "lo": 0, "hi": 10},
            {"name": "a2", "kind": "uniform", "lo": 0, "hi": 10},
            {"name": "c1", "kind": "categorical", "values": [f"k{i}" for i in range(20)]},
        ],
        name="rel",
    )
    catalog = SchemaCatalog((rel,))
    labeled = finalize(
        gen_single_relation(rel, 2, 150, seed=1) + gen_single_relation(rel, 3, 150, seed=2),
        catalog,
    )
    return catalog, build_layout(catalog), labeled


class TestBatchProperties:

    def test_vectors_equal_length_regardless_of_conditions(self, pipeline):
        catalog, layout, labeled = pipeline
        mat = encode_batch(labeled.queries(), layout, catalog)
        assert mat.shape == (len(labeled), layout.dim)

    def test_injective_over_deduplicated_workload(self, pipeline):
        catalog, layout, labeled = pipeline
        mat = encode_batch(labeled.queries(), layout, catalog)
        assert len(np.unique(mat, axis=0)) == len(labeled)

    def test_empty_batch(self, pipeline):
        catalog, layout, _ = pipeline
        assert encode_batch([], layout, catalog).shape == (0, layout.dim)

    def test_layout_catalog_mismatch_rejected(self, pipeline):
        catalog, layout, labeled = pipeline
        other = SchemaCatalog((make_relation("rel", numeric=[0.0, 1.0]),))
        with pytest.raises(EncodingError, match="different catalog"):
            encode(labeled.queries()[0], layout, other)


class TestEncodedFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        mat = rng.uniform(size=(7, 4))
        ids = np.arange(7, dtype=np.int64) * 3
        targets = rng.uniform(0, 9, size=7)
        path = tmp_path / "enc.bin"
        save_encoded(path, mat, "deadbeef", ids=ids, targets_log=targets)
        mat2, ids2, targets2, header = load_encoded(path)
        assert np.array_equal(mat, mat2)
        assert np.array_equal(ids, ids2)
        assert np.array_equal(targets, targets2)
        assert header["layout_hash"] == "deadbeef"

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "enc.bin"
        save_encoded(path, np.zeros((4, 3)), "x")
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(EncodingError, match="truncated"):
            load_encoded(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "enc.bin"
        path.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(EncodingError, match="unexpected format"):
            load_encoded(path)

    def test_layout_hash_differs_when_chunk_size_differs(self):
        rel = categorical_relation("r", 20)
        catalog = SchemaCatalog((rel,))
        h1 = build_layout(catalog, chunk_size=8).hash()
        h2 = build_layout(catalog, chunk_size=4).hash()
        assert h1 != h2
