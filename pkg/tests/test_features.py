from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from autoft.errors import ConfigError, DataError, SchemaError, ShapeError
from autoft.features import (OOV, Arity, Domain, DomainDataset, EncodedInstance, FieldSchema, Schema, Split,
                             Vocabulary, build_vocab, embed_batch, embed_lookup, encode_instance, pack,
                             read_csv_rows, scatter_embedding_grad)
from autoft.numerics import SeededRng

ONE = Schema((FieldSchema("f"),))
TWO = Schema((FieldSchema("u"), FieldSchema("tags", Arity.MULTI_HOT)))


def rows(*values):
    return [{"f": v, "label": "0"} for v in values]


class TestBuildVocab:
    def test_counting(self):
        v = build_vocab(rows("a", "b", "a"), ONE)
        assert v.maps == [{"a": 1, "b": 2}]
        assert v.sizes == [3]

    def test_min_count(self):
        v = build_vocab(rows("a", "b", "a"), ONE, min_count=2)
        assert v.maps == [{"a": 1}]
        assert v.index(0, "b") == OOV
        assert v.sizes == [2]

    def test_empty(self):
        assert build_vocab([], ONE).sizes == [1]

    def test_missing_column_names_field(self):
        with pytest.raises(SchemaError, match="tags"):
            build_vocab([{"u": "x", "label": "1"}], TWO)

    def test_first_appearance_order_across_multi_hot(self):
        v = build_vocab([{"u": "x", "tags": "b|a"}, {"u": "y", "tags": "c|a"}], TWO)
        assert v.maps[1] == {"b": 1, "a": 2, "c": 3}

    @given(st.lists(st.sampled_from("abcdefg"), max_size=40), st.integers(0, 4))
    def test_indices_dense_and_oov_reserved(self, values, min_count):
        v = build_vocab(rows(*values), ONE, min_count)
        assert sorted(v.maps[0].values()) == list(range(1, v.size(0)))
        assert OOV not in v.maps[0].values()

    def test_json_round_trip(self, tmp_path):
        v = build_vocab([{"u": "x", "tags": "b|a"}], TWO)
        v.save(tmp_path / "v.json")
        w = Vocabulary.load(tmp_path / "v.json")
        assert w == v and w.digest() == v.digest()

    def test_bad_vocab_file(self, tmp_path):
        (tmp_path / "v.json").write_text("{")
        with pytest.raises(ConfigError):
            Vocabulary.load(tmp_path / "v.json")


class TestEncode:
    def setup_method(self):
        self.vocab = Vocabulary([{"a": 1}, {"x": 1, "y": 2}])

    def test_one_hot(self):
        assert encode_instance({"u": "a", "tags": "x", "label": "1"}, TWO, self.vocab).indices[0] == (1,)

    def test_unseen_is_oov(self):
        assert encode_instance({"u": "zzz", "tags": "x", "label": "1"}, TWO, self.vocab).indices[0] == (0,)

    def test_multi_hot(self):
        inst = encode_instance({"u": "a", "tags": "x|y", "label": "0"}, TWO, self.vocab)
        assert inst.indices[1] == (1, 2)
        assert inst.label == 0

    def test_multi_hot_duplicates_kept(self):
        assert encode_instance({"u": "a", "tags": "x|x|y", "label": "0"}, TWO, self.vocab).indices[1] == (1, 1, 2)

    def test_empty_multi_hot_is_oov(self):
        assert encode_instance({"u": "a", "tags": "", "label": "0"}, TWO, self.vocab).indices[1] == (0,)

    def test_max_len_keeps_most_recent(self):
        schema = Schema((FieldSchema("u"), FieldSchema("tags", Arity.MULTI_HOT, max_len=2)))
        assert encode_instance({"u": "a", "tags": "y|x|y", "label": "0"}, schema, self.vocab).indices[1] == (2, 1)

    def test_bad_label_has_row_number(self):
        with pytest.raises(DataError, match="row 17"):
            encode_instance({"u": "a", "tags": "x", "label": "yes"}, TWO, self.vocab, row_number=17)

    def test_non_binary_label(self):
        with pytest.raises(DataError):
            encode_instance({"u": "a", "tags": "x", "label": "2"}, TWO, self.vocab)

    def test_rating_threshold(self):
        schema = Schema(TWO.fields, "rating", rating_threshold=3.0)
        labels = [encode_instance({"u": "a", "tags": "x", "rating": r}, schema, self.vocab).label for r in "12345"]
        assert labels == [0, 0, 0, 1, 1]

    @given(st.text("abxy|", max_size=12), st.text("ab", max_size=3))
    def test_total_and_deterministic(self, tags, user):
        row = {"u": user, "tags": tags, "label": "1"}
        a = encode_instance(row, TWO, self.vocab)
        assert a == encode_instance(row, TWO, self.vocab)
        assert all(len(f) >= 1 for f in a.indices)
        assert all(i < n for f, n in zip(a.indices, self.vocab.sizes) for i in f)
        assert len(a.indices[0]) == 1


class TestSchema:
    def test_duplicate_names(self):
        with pytest.raises(ConfigError):
            Schema((FieldSchema("a"), FieldSchema("a")))

    def test_ini_round_trip(self, tmp_path):
        s = Schema((FieldSchema("u"), FieldSchema("tags", Arity.MULTI_HOT, ";", 7)), "rating", 3.0)
        (tmp_path / "s.ini").write_text(s.to_ini())
        assert Schema.load(tmp_path / "s.ini") == s

    def test_unknown_arity(self):
        with pytest.raises(ConfigError):
            Schema.from_ini("[label]\ncolumn = y\n[field:a]\narity = trihot\n")

    @pytest.mark.parametrize("text", [
        "[label]\ncolumn = y\nthreshold = high\n[field:a]\narity = onehot\n",
        "[label]\ncolumn = y\n[field:a]\narity = multihot\nmax_len = lots\n",
    ])
    def test_bad_numbers(self, text):
        with pytest.raises(ConfigError):
            Schema.from_ini(text)

    @pytest.mark.parametrize("delim", [";", "#", "|", ","])
    def test_delimiter_survives_round_trip(self, delim):
        s = Schema((FieldSchema("tags", Arity.MULTI_HOT, delim, 4),))
        assert Schema.from_ini(s.to_ini()).fields[0].delimiter == delim

    def test_movielens_style_schema(self):
        text = ("[label]\ncolumn = rating\nthreshold = 3\n"
                "[field:user_id]\narity = onehot\n"
                "[field:movie_id]\narity = onehot\n"
                "[field:genres]\narity = multihot\ndelimiter = |\n")
        s = Schema.from_ini(text)
        assert s.names == ["user_id", "movie_id", "genres"]
        assert s.fields[2].arity is Arity.MULTI_HOT and s.rating_threshold == 3.0


class TestCsv:
    def test_quoted_cells(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text('u,tags,label\n"a,b","x|y",1\n', encoding="utf-8")
        assert read_csv_rows(p) == [{"u": "a,b", "tags": "x|y", "label": "1"}]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="nope.csv"):
            read_csv_rows(tmp_path / "nope.csv")

    def test_dataset_from_csv(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("u,tags,label\na,x|y,1\nq,,0\n", encoding="utf-8")
        vocab = Vocabulary([{"a": 1}, {"x": 1, "y": 2}])
        ds = DomainDataset.from_csv(p, TWO, vocab, Domain.TARGET, Split.TEST)
        assert [i.indices for i in ds.instances] == [((1,), (1, 2)), ((0,), (0,))]
        assert ds.labels.tolist() == [1.0, 0.0] and ds.vocab_digest == vocab.digest()

    def test_concat_rejects_mixed_vocab(self):
        a = DomainDataset([], Domain.SOURCE, Split.TRAIN, "x")
        b = DomainDataset([], Domain.TARGET, Split.TRAIN, "y")
        with pytest.raises(ConfigError):
            DomainDataset.concat([a, b], Domain.SOURCE, Split.TRAIN)


class TestEmbedLookup:
    def test_one_hot_row_verbatim(self):
        V = SeededRng(0).normal((4, 3))
        inst = EncodedInstance(((2,),), 0)
        assert np.array_equal(embed_lookup([V], inst), V[2])

    def test_multi_hot_mean(self):
        V = np.array([[9.0, 9.0], [1.0, 0.0], [0.0, 1.0]])
        assert embed_lookup([V], EncodedInstance(((1, 2),), 0)).tolist() == [0.5, 0.5]

    def test_concatenation_order(self):
        V1 = np.array([[0.0, 0.0], [1.0, 2.0]])
        V2 = np.array([[3.0, 4.0], [5.0, 6.0]])
        out = embed_lookup([V1, V2], EncodedInstance(((1,), (0,)), 0))
        assert out.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            embed_lookup([np.zeros((2, 2))], EncodedInstance(((5,),), 0))

    @given(st.floats(-10, 10), st.integers(0, 1000))
    def test_linear_in_table(self, alpha, seed):
        rng = SeededRng(seed)
        V = [rng.normal((5, 3)), rng.normal((4, 3))]
        inst = EncodedInstance(((1,), (0, 3, 3)), 1)
        np.testing.assert_allclose(embed_lookup([alpha * v for v in V], inst), alpha * embed_lookup(V, inst),
                                   rtol=1e-12, atol=1e-12)

    def test_batch_matches_per_instance(self):
        rng = SeededRng(3)
        V = [rng.normal((5, 3)), rng.normal((4, 3))]
        insts = [EncodedInstance(((1,), (0, 3)), 1), EncodedInstance(((4,), (2,)), 0)]
        e = embed_batch(V, pack(insts))
        for b, inst in enumerate(insts):
            np.testing.assert_allclose(e[b].ravel(), embed_lookup(V, inst), rtol=0, atol=1e-15)

    def test_scatter_grad_is_adjoint(self):
        # <d, embed(V)> is linear in V; its gradient is what scatter_embedding_grad builds
        rng = SeededRng(8)
        V = [rng.normal((5, 3)), rng.normal((4, 3))]
        batch = pack([EncodedInstance(((1,), (0, 3, 3)), 1), EncodedInstance(((1,), (2,)), 0)])
        d = rng.normal((2, 2, 3))
        grads = [np.zeros_like(v) for v in V]
        scatter_embedding_grad(grads, batch, d)
        for i in range(2):
            for r in range(V[i].shape[0]):
                for c in range(3):
                    W = [v.copy() for v in V]
                    W[i][r, c] += 1.0
                    delta = float(np.sum(d * (embed_batch(W, batch) - embed_batch(V, batch))))
                    assert abs(delta - grads[i][r, c]) < 1e-12
