import numpy as np
import pytest

from memground.synthdata import (Corpus, CorpusConfig, CorpusConfigError,
                                 GroundingSample, Vocabulary, generate_corpus,
                                 generate_sample, label_rarity, load_corpus,
                                 sample_words, save_corpus, zipf_probabilities)


def tiny_config(**overrides):
    base = dict(num_train=40, num_val=10, num_test=10, t_range=(8, 12),
                n_range=(2, 4), vocab_size=30, zipf_exponent=1.0, noise=0.05,
                rare_threshold=3, d_raw=6, seed=13)
    base.update(overrides)
    return CorpusConfig(**base)


class TestConfig:
    def test_rejects_bad_ranges(self):
        with pytest.raises(CorpusConfigError):
            tiny_config(t_range=(10, 5))
        with pytest.raises(CorpusConfigError):
            tiny_config(n_range=(0, 3))
        with pytest.raises(CorpusConfigError):
            tiny_config(rare_threshold=0)

    def test_rejects_query_wider_than_vocab(self):
        with pytest.raises(CorpusConfigError):
            tiny_config(n_range=(2, 30), vocab_size=30)


class TestZipf:
    def test_zero_exponent_uniform(self):
        probs = zipf_probabilities(8, 0.0)
        assert np.allclose(probs, 1 / 8)

    def test_harmonic_values(self):
        probs = zipf_probabilities(4, 1.0)
        h4 = 1 + 1 / 2 + 1 / 3 + 1 / 4
        assert np.allclose(probs, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / h4)
        assert probs == pytest.approx([0.480, 0.240, 0.160, 0.120], abs=5e-4)

    def test_empirical_frequencies_match(self):
        cfg = tiny_config(vocab_size=6, zipf_exponent=1.0)
        rng = np.random.default_rng(0)
        counts = np.zeros(6)
        draws = 100_000
        for _ in range(draws // 2):
            for w in sample_words(cfg, rng, 2):
                counts[w] += 1
        # drawing 2 without replacement biases mildly; compare against a
        # simulated oracle of the same scheme rather than the marginal law
        oracle = np.zeros(6)
        rng2 = np.random.default_rng(1)
        probs = zipf_probabilities(6, 1.0)
        for _ in range(draws // 2):
            for w in rng2.choice(6, size=2, replace=False, p=probs):
                oracle[w] += 1
        sigma = np.sqrt(draws * probs * (1 - probs)) + 1e-9
        assert np.all(np.abs(counts - oracle) <= 3.5 * sigma)

    def test_words_within_query_distinct(self):
        cfg = tiny_config()
        rng = np.random.default_rng(2)
        for _ in range(200):
            words = sample_words(cfg, rng, 4)
            assert len(set(words)) == 4

    def test_too_many_words_rejected(self):
        cfg = tiny_config()
        with pytest.raises(CorpusConfigError):
            sample_words(cfg, np.random.default_rng(0), 31)


class TestGenerateSample:
    def test_noiseless_single_word_frames_equal_concept(self):
        cfg = tiny_config(noise=0.0, n_range=(1, 1))
        vocab = Vocabulary.build(cfg)
        sample = generate_sample(cfg, vocab, np.random.default_rng(3))
        tau_s, tau_e = sample.gt
        for t in range(tau_s, tau_e + 1):
            assert np.allclose(sample.frames[t], vocab.concepts[sample.words[0]],
                               atol=1e-12)

    def test_gt_always_in_bounds_and_nonempty(self):
        cfg = tiny_config()
        vocab = Vocabulary.build(cfg)
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            s = generate_sample(cfg, vocab, rng)
            tau_s, tau_e = s.gt
            t_total = s.frames.shape[0]
            assert 0 <= tau_s <= tau_e <= t_total - 1
            assert tau_e > tau_s  # spans at least ceil(T/8) >= 1

    def test_noiseless_nearest_concept_decoder_recovers_interval(self):
        cfg = tiny_config(noise=0.0)
        vocab = Vocabulary.build(cfg)
        rng = np.random.default_rng(5)
        for _ in range(300):
            s = generate_sample(cfg, vocab, rng)
            target = vocab.concepts[s.words].mean(axis=0)
            inside = [t for t in range(s.frames.shape[0])
                      if np.linalg.norm(s.frames[t] - target) < 1e-9]
            assert inside == list(range(s.gt[0], s.gt[1] + 1))

    def test_vocab_rows_unit_norm(self):
        vocab = Vocabulary.build(tiny_config())
        assert np.allclose(np.linalg.norm(vocab.concepts, axis=1), 1.0, atol=1e-9)


class TestRarity:
    def test_threshold_one_marks_no_training_sample(self):
        cfg = tiny_config(rare_threshold=1, num_val=0, num_test=0)
        corpus = generate_corpus(cfg)
        assert not any(s.rare for s in corpus.split("train"))

    def test_single_sample_corpus_is_rare(self):
        cfg = tiny_config(num_train=1, num_val=0, num_test=0, rare_threshold=10)
        corpus = generate_corpus(cfg)
        assert corpus.samples[0].rare

    def test_flags_match_bruteforce_recount(self):
        cfg = tiny_config(num_train=100, num_val=20, num_test=20)
        corpus = generate_corpus(cfg)
        counts = {}
        for s in corpus.samples:
            if s.split == "train":
                for w in s.words:
                    counts[w] = counts.get(w, 0) + 1
        for s in corpus.samples:
            expected = any(counts.get(w, 0) < cfg.rare_threshold for w in s.words)
            assert s.rare == expected

    def test_empty_corpus_rejected(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            label_rarity(Corpus(cfg, Vocabulary.build(cfg)))

    def test_flags_deterministic_across_regeneration(self):
        cfg = tiny_config()
        flags_a = [s.rare for s in generate_corpus(cfg).samples]
        flags_b = [s.rare for s in generate_corpus(cfg).samples]
        assert flags_a == flags_b

    def test_rare_fraction_nondecreasing_in_exponent(self):
        fractions = []
        for s_exp in (0.0, 0.8, 1.2):
            cfg = CorpusConfig(num_train=2000, num_val=0, num_test=0,
                               zipf_exponent=s_exp, seed=17)
            corpus = generate_corpus(cfg)
            fractions.append(np.mean([s.rare for s in corpus.samples]))
        assert fractions[0] <= fractions[1] <= fractions[2]

    def test_frequency_table_totals(self):
        cfg = tiny_config()
        corpus = generate_corpus(cfg)
        total_occurrences = sum(len(s.words) for s in corpus.split("train"))
        assert corpus.vocab.frequency.sum() == total_occurrences


class TestSplitsAndDeterminism:
    def test_splits_disjoint_by_id(self):
        corpus = generate_corpus(tiny_config())
        ids = {name: {s.sample_id for s in corpus.split(name)}
               for name in ("train", "val", "test")}
        assert not ids["train"] & ids["val"]
        assert not ids["train"] & ids["test"]
        assert not ids["val"] & ids["test"]

    def test_split_sizes(self):
        corpus = generate_corpus(tiny_config())
        assert len(corpus.split("train")) == 40
        assert len(corpus.split("val")) == 10
        assert len(corpus.split("test")) == 10

    def test_unknown_split_rejected(self):
        corpus = generate_corpus(tiny_config())
        with pytest.raises(ValueError):
            corpus.split("dev")

    def test_same_seed_identical_corpus(self):
        a = generate_corpus(tiny_config())
        b = generate_corpus(tiny_config())
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.frames, sb.frames)
            assert sa.words == sb.words and sa.gt == sb.gt


class TestContainer:
    def test_roundtrip_exact(self, tmp_path):
        corpus = generate_corpus(tiny_config())
        path = tmp_path / "corpus.bin"
        save_corpus(path, corpus)
        loaded = load_corpus(path)
        assert loaded.config == corpus.config
        assert np.array_equal(loaded.vocab.concepts, corpus.vocab.concepts)
        assert len(loaded.samples) == len(corpus.samples)
        for sa, sb in zip(corpus.samples, loaded.samples):
            assert np.array_equal(sa.frames, sb.frames)
            assert sa.words == sb.words
            assert sa.gt == sb.gt
            assert sa.rare == sb.rare
            assert sa.split == sb.split

    def test_same_seed_byte_identical_files(self, tmp_path):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_corpus(p1, generate_corpus(tiny_config()))
        save_corpus(p2, generate_corpus(tiny_config()))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTACORP" + b"\0" * 16)
        with pytest.raises(ValueError):
            load_corpus(path)
