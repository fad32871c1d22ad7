import numpy as np
import pytest

from promptdt import pretrain as pt
from promptdt import transformer as tf
from promptdt.errors import ConfigError, ContractError


@pytest.fixture(scope="module")
def corpus():
    text = pt.bundled_corpus_path().read_text(encoding="utf-8")
    return pt.CharCorpus.from_text(text[:20_000])


@pytest.fixture
def small_cfg():
    return tf.TransformerConfig(n_layers=1, n_heads=2, d_model=32, max_seq_len=64, dropout=0.0)


class TestCharCorpus:
    def test_vocab_sorted_unique(self):
        c = pt.CharCorpus.from_text("banana cab")
        assert c.vocab == sorted(set("banana cab"))

    def test_ids_round_trip(self):
        text = "hello world, hello"
        c = pt.CharCorpus.from_text(text)
        assert "".join(c.vocab[i] for i in c.ids) == text

    def test_split_fraction(self):
        c = pt.CharCorpus.from_text("x" * 1000, val_fraction=0.1)
        assert c.split == 900

    def test_vocab_cap(self):
        text = "".join(chr(i) for i in range(300))
        with pytest.raises(ConfigError):
            pt.CharCorpus.from_text(text)

    def test_bundled_corpus(self):
        path = pt.bundled_corpus_path()
        text = path.read_text(encoding="utf-8")
        assert len(text) > 100_000
        c = pt.CharCorpus.from_text(text)
        assert c.vocab_size <= pt.MAX_VOCAB
        assert all(ord(ch) < 128 for ch in c.vocab)


class TestLmPretrain:
    def test_zero_steps_is_random_init_bitwise(self, small_cfg, corpus):
        result = pt.lm_pretrain(small_cfg, corpus, steps=0, seed=7)
        ref = tf.init_random(small_cfg, 7)
        for name in ref.tensors:
            assert np.array_equal(result.weights[name].data, ref[name].data), name
        assert len(result.history) == 1

    def test_determinism(self, small_cfg, corpus):
        a = pt.lm_pretrain(small_cfg, corpus, steps=5, seed=3, eval_every=5)
        b = pt.lm_pretrain(small_cfg, corpus, steps=5, seed=3, eval_every=5)
        assert a.history == b.history
        for name in a.weights.tensors:
            assert np.array_equal(a.weights[name].data, b.weights[name].data)
        assert np.array_equal(a.out_proj.data, b.out_proj.data)

    def test_validation_loss_decreases(self, small_cfg, corpus):
        result = pt.lm_pretrain(small_cfg, corpus, steps=150, seed=0, eval_every=150)
        assert result.final_val_loss < result.initial_val_loss

    def test_seq_len_exceeds_window(self, small_cfg, corpus):
        with pytest.raises(ConfigError):
            pt.lm_pretrain(small_cfg, corpus, steps=1, seed=0, seq_len=128)

    def test_corpus_too_short(self, small_cfg):
        tiny = pt.CharCorpus.from_text("ab" * 10)
        with pytest.raises(ContractError):
            pt.lm_pretrain(small_cfg, tiny, steps=1, seed=0)


class TestPerplexity:
    def test_uniform_model_perplexity_equals_vocab(self, small_cfg, corpus):
        result = pt.lm_pretrain(small_cfg, corpus, steps=0, seed=1)
        result.out_proj.data[:] = 0.0  # all-zero logits: exactly uniform predictions
        ppl = pt.perplexity(result, corpus.ids[corpus.split : corpus.split + 500])
        assert ppl == pytest.approx(corpus.vocab_size, rel=1e-5)

    def test_exp_of_validation_loss(self, small_cfg, corpus):
        result = pt.lm_pretrain(small_cfg, corpus, steps=0, seed=2)
        result.out_proj.data[:] = 0.0
        vl = pt.validation_loss(result.weights, result.char_embed, result.out_proj, corpus)
        assert np.exp(vl) == pytest.approx(corpus.vocab_size, rel=1e-5)

    def test_improves_with_training(self, small_cfg, corpus):
        before = pt.lm_pretrain(small_cfg, corpus, steps=0, seed=4)
        after = pt.lm_pretrain(small_cfg, corpus, steps=150, seed=4, eval_every=150)
        val = corpus.ids[corpus.split :][:1000]
        assert pt.perplexity(after, val) < pt.perplexity(before, val)

    def test_too_few_tokens(self, small_cfg, corpus):
        result = pt.lm_pretrain(small_cfg, corpus, steps=0, seed=5)
        with pytest.raises(ContractError):
            pt.perplexity(result, np.array([1]))


class TestBodyExport:
    def test_body_loads_into_downstream_model(self, corpus):
        from promptdt import model as md

        tcfg = tf.TransformerConfig(n_layers=1, n_heads=2, d_model=16, max_seq_len=96, dropout=0.0)
        result = pt.lm_pretrain(tcfg, corpus, steps=2, seed=0, seq_len=32, eval_every=2)
        config = md.ModelConfig(transformer=tcfg, ds=4, da=2, k_star=2, context_len=4)
        model = md.PromptDTModel.create(config, seed=0, base_weights=result.weights)
        for name in result.weights.tensors:
            assert np.array_equal(model.weights[name].data, result.weights[name].data)
        from test_model import make_batch

        out = model.forward(make_batch(config, b=2))
        assert np.all(np.isfinite(out.predicted_actions.data))

    def test_round_trip_through_weight_file(self, small_cfg, corpus, tmp_path):
        result = pt.lm_pretrain(small_cfg, corpus, steps=1, seed=6, eval_every=1)
        tf.save_weights(result.weights, tmp_path / "body.nt")
        loaded = tf.load_weights(tmp_path / "body.nt", small_cfg)
        for name in result.weights.tensors:
            assert np.array_equal(loaded[name].data, result.weights[name].data)
