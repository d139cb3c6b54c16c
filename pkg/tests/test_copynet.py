import math

import numpy as np
import pytest

from qops import autodiff as ad
from qops.autodiff import Tensor
from qops.copynet import (
    CONDITIONING,
    USE_CURRENT,
    USE_NEXT,
    AlignmentState,
    CopyExample,
    CopyNetConfig,
    DecodeTrace,
    advance_alignment,
    align_action,
    build_word_vocab,
    copy_gen_dist,
    enhanced_loss,
    evaluate_copynet,
    example_log_likelihood,
    from_break_record,
    gold_sop,
    greedy_decode,
    init_copynet,
    load_copynet,
    read_copy_jsonl,
    save_copynet,
    train_copynet,
    write_copy_jsonl,
    zero_conditioning,
)
from qops.data import OPERATORS, UNK_ID, Vocab

CORPUS = [
    CopyExample("a", ("papers", "by", "smith"), ("return", "papers", ";", "return", "#1", "by", "smith"),
                ("select", "filter")),
    CopyExample("b", ("how", "many", "rivers"), ("return", "rivers", ";", "return", "number", "of", "#1"),
                ("select", "aggregate")),
    CopyExample("c", ("largest", "state"), ("return", "states", ";", "return", "#1", "with", "largest", "area"),
                ("select", "project", "superlative")),
]
OP_VOCAB = Vocab(OPERATORS)


def setup(seed=0, vocab=None):
    vocab = vocab or build_word_vocab(CORPUS)
    cfg = CopyNetConfig(word_vocab_size=len(vocab), op_vocab_size=len(OP_VOCAB), emb_dim=4, enc_hid_dim=4,
                        dec_hid_dim=4, sop_dim=3, action_hidden=5)
    return init_copynet(cfg, seed), vocab


class TestAlignment:
    def test_zero_weights_even_split(self):
        params, _ = setup()
        zero_conditioning(params)
        pi = align_action(Tensor(np.ones((1, 4))), 5, params)
        assert pi.data.tolist() == [[0.5, 0.5]]

    def test_advance(self):
        sop = [4, 5, 6]
        s = AlignmentState.start(sop)
        assert (s.cursor, s.alsop) == (0, 4)
        s = advance_alignment(s, USE_NEXT, sop)
        assert (s.cursor, s.alsop) == (1, 5)
        assert advance_alignment(s, USE_CURRENT, sop) == s

    def test_clamped_at_end(self):
        s = AlignmentState(2, 6)
        assert advance_alignment(s, USE_NEXT, [4, 5, 6]) == s

    def test_errors(self):
        with pytest.raises(ad.DomainError):
            AlignmentState.start([])
        with pytest.raises(ad.DomainError):
            advance_alignment(AlignmentState(3, 4), USE_CURRENT, [4, 5])
        with pytest.raises(ValueError):
            advance_alignment(AlignmentState(0, 4), 2, [4, 5])


class TestMixture:
    def dist(self, params, vocab, source, alsop=True):
        rng = np.random.default_rng(0)
        s, c = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
        H = Tensor(rng.normal(size=(len(source), 4)))
        e = ad.embedding_lookup(params["E_sop"], 5) if alsop else None
        return copy_gen_dist(s, c, H, e, params, vocab, source)

    def test_normalised(self):
        params, vocab = setup()
        d = self.dist(params, vocab, ("papers", "by", "zzz"))
        assert d.probs.shape == (1, len(vocab) + 3)
        assert abs(d.probs.data.sum() - 1) < 1e-12
        assert abs(sum(d.collapsed().values()) - 1) < 1e-12

    def test_repeated_tokens_collapse(self):
        params, vocab = setup()
        d = self.dist(params, vocab, ("zzz", "by", "zzz"))
        p = d.probs.data[0]
        V = len(vocab)
        assert d.collapsed()["zzz"] == pytest.approx(p[V] + p[V + 2], abs=1e-15)
        assert d.word_prob("zzz").item() == pytest.approx(p[V] + p[V + 2], abs=1e-15)
        assert d.word_prob("by").item() == pytest.approx(p[vocab.id("by")] + p[V + 1], abs=1e-15)

    def test_out_of_vocab_falls_back_to_unk(self):
        params, vocab = setup()
        d = self.dist(params, vocab, ("papers",))
        assert d.word_prob("qqq").item() == d.probs.data[0, UNK_ID]

    def test_depends_on_operator_embedding(self):
        params, vocab = setup()
        a = self.dist(params, vocab, ("papers", "by")).probs.data.copy()
        params["E_sop"].data[5] += 1.0
        b = self.dist(params, vocab, ("papers", "by")).probs.data
        assert np.abs(a - b).max() > 1e-6

    def test_empty_source(self):
        params, vocab = setup()
        with pytest.raises(ad.DomainError):
            copy_gen_dist(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                          None, params, vocab, ())


class TestLoss:
    def test_duplicating_batch_keeps_mean(self):
        params, vocab = setup()
        sop = gold_sop(CORPUS, OP_VOCAB)
        a = enhanced_loss(CORPUS, sop, params, vocab).item()
        b = enhanced_loss(CORPUS + CORPUS, sop + sop, params, vocab).item()
        assert abs(a - b) < 1e-12

    def test_sum_over_steps(self):
        params, vocab = setup()
        sop = gold_sop(CORPUS[:1], OP_VOCAB)
        ll = example_log_likelihood(CORPUS[0], sop[0], params, vocab).item()
        assert enhanced_loss(CORPUS[:1], sop, params, vocab).item() == pytest.approx(-ll, abs=1e-15)
        # each word is at most certain, so the loss is positive and bounded by T * log(V + T_src)
        T = len(CORPUS[0].target) + 1
        assert 0 < -ll < T * math.log(len(vocab) + len(CORPUS[0].source)) * 3

    def test_gradcheck(self):
        # wider weights than the default init keep every gradient entry far above round-off
        params, vocab = setup(seed=1)
        rng = np.random.default_rng(1)
        for p in params.tensors():
            p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
        sop = gold_sop(CORPUS[:2], OP_VOCAB)
        err = ad.grad_check(lambda: enhanced_loss(CORPUS[:2], sop, params, vocab), params.tensors())
        assert err <= 1e-4

    def test_ablation_identity(self):
        params, vocab = setup(seed=2)
        zero_conditioning(params)
        sop = gold_sop(CORPUS, OP_VOCAB)
        a = enhanced_loss(CORPUS, sop, params, vocab).item()
        b = enhanced_loss(CORPUS, None, params, vocab).item()
        assert abs(a - b) <= 1e-12

    def test_conditioning_receives_gradient(self):
        params, vocab = setup(seed=3)
        loss = enhanced_loss(CORPUS, gold_sop(CORPUS, OP_VOCAB), params, vocab)
        ad.backward(loss)
        for name in CONDITIONING:
            assert np.abs(params[name].grad).max() > 0, name

    def test_cursor_trace_monotone(self):
        params, vocab = setup(seed=4)
        trace = DecodeTrace()
        sop = gold_sop(CORPUS[2:], OP_VOCAB)[0]
        example_log_likelihood(CORPUS[2], sop, params, vocab, trace)
        steps = np.diff(trace.cursors)
        assert trace.cursors[0] == 0 and np.all((steps == 0) | (steps == 1))
        assert len(trace.cursors) == len(CORPUS[2].target) + 1


class TestTraining:
    def test_overfits_and_round_trips(self, tmp_path):
        sop = gold_sop(CORPUS[:2], OP_VOCAB)
        cfg = CopyNetConfig(emb_dim=6, enc_hid_dim=6, dec_hid_dim=6, sop_dim=3, action_hidden=6)
        model, losses = train_copynet(CORPUS[:2], sop, cfg, epochs=80, lr=0.1, batch_size=2, seed=0)
        assert losses[-1] < 0.1 * losses[0]
        report = evaluate_copynet(model, CORPUS[:2], sop)
        assert report["exact_match"] == 1.0 and report["cursor_monotone"]
        save_copynet(model, tmp_path / "c.bin")
        back = load_copynet(tmp_path / "c.bin")
        assert greedy_decode(CORPUS[0].source, sop[0], back.params, back.vocab).words == list(CORPUS[0].target)


class TestData:
    def test_jsonl_round_trip(self, tmp_path):
        items = CORPUS + [CopyExample("d", ("x",), ("return", "x"), ("select",), ("NOUN",))]
        assert write_copy_jsonl(items, tmp_path / "c.jsonl") == 4
        assert read_copy_jsonl(tmp_path / "c.jsonl") == items

    def test_from_break_record(self):
        rec = {"id": "q", "question": "Papers by Smith?", "steps": ["return papers", "return #1 by smith"],
               "ops": ["select", "filter"]}
        ex = from_break_record(rec)
        assert ex.source == ("papers", "by", "smith", "?")
        assert ex.target == ("return", "papers", ";", "return", "#1", "by", "smith")

    def test_vocab_cap(self):
        v = build_word_vocab(CORPUS, max_size=8)
        assert len(v) == 8 and v.symbol(4) == "return"
