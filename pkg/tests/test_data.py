"""Corpus generation, serialization round-trips, and batching."""

import numpy as np
import pytest

from ctxalign import data

SMALL = data.CorpusSpec(n_classes=4, n_pairs=10, d_img=16, vocab_size=64,
                        tokens_per_caption=6, class_token_block=4,
                        noise_sigma=0.1, seed=3)


class TestCorpusSpec:
    @pytest.mark.parametrize("kwargs", [
        {"n_classes": 0}, {"n_pairs": -1}, {"tokens_per_caption": 0},
        {"class_token_block": 0}, {"noise_sigma": -0.1},
        {"n_classes": 32, "class_token_block": 8, "vocab_size": 128},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            data.CorpusSpec(**kwargs)

    def test_default_fits_vocab(self):
        spec = data.CorpusSpec()
        assert spec.n_classes * spec.class_token_block + \
            data.RESERVED_TOKENS <= spec.vocab_size


class TestGenerate:
    def test_deterministic(self):
        assert data.generate(SMALL) == data.generate(SMALL)

    def test_seed_changes_corpus(self):
        other = data.CorpusSpec(**{**SMALL.__dict__, "seed": 4})
        assert data.generate(SMALL) != data.generate(other)

    def test_round_robin_classes(self):
        corpus = data.generate(SMALL)
        np.testing.assert_array_equal(
            corpus.class_ids(), np.arange(10) % SMALL.n_classes)

    def test_images_unit_norm(self):
        corpus = data.generate(SMALL)
        np.testing.assert_allclose(
            np.linalg.norm(corpus.images(), axis=1), np.ones(len(corpus)),
            atol=1e-12)

    def test_sigma_zero_reproduces_prototypes(self):
        spec = data.CorpusSpec(**{**SMALL.__dict__, "noise_sigma": 0.0})
        corpus = data.generate(spec)
        protos = data.class_prototypes(spec)
        for r in corpus.records:
            np.testing.assert_allclose(r.image, protos[r.class_id], atol=1e-12)

    def test_prototypes_well_separated(self):
        protos = data.class_prototypes(data.CorpusSpec())
        cos = protos @ protos.T
        off = cos[~np.eye(len(cos), dtype=bool)]
        assert np.abs(off).max() < 0.5

    def test_tokens_within_class_block_or_stop_pool(self):
        corpus = data.generate(SMALL)
        for r in corpus.records:
            lo, hi = data.class_token_range(SMALL, r.class_id)
            for t in r.tokens:
                assert t in data.STOP_TOKENS or lo <= t < hi
            assert any(lo <= t < hi for t in r.tokens), \
                "caption must carry at least one class token"

    def test_class_blocks_disjoint(self):
        ranges = [data.class_token_range(SMALL, c)
                  for c in range(SMALL.n_classes)]
        for (lo1, hi1), (lo2, hi2) in zip(ranges, ranges[1:]):
            assert hi1 == lo2
        assert ranges[0][0] == data.RESERVED_TOKENS
        assert ranges[-1][1] <= SMALL.vocab_size

    def test_pad_never_generated(self):
        corpus = data.generate(SMALL)
        assert all(data.PAD_ID not in r.tokens for r in corpus.records)

    def test_empty_corpus(self):
        spec = data.CorpusSpec(**{**SMALL.__dict__, "n_pairs": 0})
        corpus = data.generate(spec)
        assert len(corpus) == 0
        assert corpus.images().shape == (0, SMALL.d_img)


class TestSerialization:
    def test_round_trip_equality(self, tmp_path):
        corpus = data.generate(SMALL)
        path = tmp_path / "corpus.jsonl"
        data.save_corpus(corpus, path)
        assert data.load_corpus(path) == corpus

    def test_round_trip_bit_exact_floats(self, tmp_path):
        corpus = data.generate(SMALL)
        path = tmp_path / "corpus.jsonl"
        data.save_corpus(corpus, path)
        loaded = data.load_corpus(path)
        for a, b in zip(corpus.records, loaded.records):
            assert np.array_equal(a.image, b.image)

    def test_truncated_line_reports_line_number(self, tmp_path):
        corpus = data.generate(SMALL)
        path = tmp_path / "corpus.jsonl"
        data.save_corpus(corpus, path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2][: len(lines[2]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(data.CorpusFormatError, match="line 3"):
            data.load_corpus(path)

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text('{"id": 0, "class": 1, "tokens": [5], "caption": "x"}\n')
        with pytest.raises(data.CorpusFormatError, match="line 1"):
            data.load_corpus(path)

    def test_blank_line_rejected(self, tmp_path):
        corpus = data.generate(SMALL)
        path = tmp_path / "corpus.jsonl"
        data.save_corpus(corpus, path)
        path.write_text(path.read_text() + "\n")
        with pytest.raises(data.CorpusFormatError):
            data.load_corpus(path)

    def test_mixed_image_widths_rejected(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text(
            '{"id": 0, "class": 0, "image": [1.0, 0.0], "tokens": [5], "caption": "a"}\n'
            '{"id": 1, "class": 0, "image": [1.0], "tokens": [5], "caption": "b"}\n')
        with pytest.raises(data.CorpusFormatError, match="line 2"):
            data.load_corpus(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text("")
        corpus = data.load_corpus(path, d_img=16)
        assert len(corpus) == 0
        assert corpus.spec_d_img == 16


class TestPaddedTokens:
    def test_pads_to_longest(self):
        corpus = data.PairCorpus(4, [
            data.PairRecord(0, 0, np.zeros(4), [5, 6], "a"),
            data.PairRecord(1, 0, np.zeros(4), [7, 8, 9], "b"),
        ])
        np.testing.assert_array_equal(
            corpus.padded_tokens(), [[5, 6, data.PAD_ID], [7, 8, 9]])


class TestBatchIter:
    def test_sizes_with_remainder(self):
        corpus = data.generate(SMALL)  # 10 pairs
        sizes = [len(b.ids) for b in data.batch_iter(corpus, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_epoch_is_a_permutation(self):
        corpus = data.generate(SMALL)
        seen = np.concatenate(
            [b.ids for b in data.batch_iter(corpus, 3, seed=1)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_deterministic_per_seed(self):
        corpus = data.generate(SMALL)
        a = [b.ids.tolist() for b in data.batch_iter(corpus, 4, seed=9)]
        b = [b.ids.tolist() for b in data.batch_iter(corpus, 4, seed=9)]
        assert a == b

    def test_no_shuffle_preserves_order(self):
        corpus = data.generate(SMALL)
        first = next(iter(data.batch_iter(corpus, 4, shuffle=False)))
        assert first.ids.tolist() == [0, 1, 2, 3]

    def test_batch_rows_align(self):
        corpus = data.generate(SMALL)
        for batch in data.batch_iter(corpus, 4, seed=2):
            for i, rid in enumerate(batch.ids):
                rec = corpus.records[rid]
                assert batch.class_ids[i] == rec.class_id
                np.testing.assert_array_equal(batch.images[i], rec.image)

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            next(data.batch_iter(data.generate(SMALL), 0))
