import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfvc import tensor as T
from mcfvc.errors import ContractError, DimensionError, DomainError
from mcfvc.model import (BOS_ID, EOS_ID, PAD_ID, UNK_ID, Captioner, Glossary, ModelDims, beam_search, caption_loss,
                         decoder_step, encode_visual, glossary_extend, grow_vocab, gumbel_select,
                         lstm_cell, semantic_attention, structured_dropout, zero_state)


def tiny_model(seed=0, words=("cat", "runs", "fast"), scale=1.0, straight_through=True):
    rng = np.random.default_rng(seed)
    g = Glossary().extend([list(words)])
    dims = ModelDims(d2=3, d3=2, d_model=4, hidden=3)
    m = Captioner.create(g, dims, rng, dropout=0.0)
    m.straight_through = straight_through
    for n in m.params:
        m.params.replace(n, rng.normal(scale=scale, size=m.params[n].shape))
    return m


def toy_batch(model, rng, frames=4):
    V = len(model.glossary)
    f2d = rng.normal(size=(2, frames, model.dims.d2))
    f3d = rng.normal(size=(2, frames, model.dims.d3))
    inputs = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 6, PAD_ID, PAD_ID]])
    targets = np.array([[4, 5, 6, EOS_ID], [6, EOS_ID, PAD_ID, PAD_ID]])
    assert targets.max() < V
    return f2d, f3d, inputs, targets


class TestEncodeVisual:
    def test_concat(self):
        out = encode_visual(np.array([[1.0, 2.0]]), np.array([[3.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])

    def test_zero_block(self):
        out = encode_visual(np.zeros((2, 2)), np.ones((2, 1)))
        np.testing.assert_array_equal(out.data, [[0, 0, 1], [0, 0, 1]])

    def test_frame_mismatch(self):
        with pytest.raises(DimensionError):
            encode_visual(np.zeros((3, 2)), np.zeros((2, 2)))


class TestGumbel:
    def test_degenerate_attention_ignores_noise(self, rng):
        V = T.Tensor(rng.normal(size=(3, 2)))
        AT = T.Tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        for _ in range(20):
            fwd, _ = gumbel_select(V, AT, rng=rng)
            np.testing.assert_array_equal(fwd.data, V.data[[1, 0]])

    def test_no_noise_picks_attention_argmax(self, rng):
        V = T.Tensor(rng.normal(size=(3, 2)))
        AT = T.Tensor([[0.2, 0.5, 0.3]])
        fwd, soft = gumbel_select(V, AT)
        np.testing.assert_array_equal(fwd.data, V.data[[1]])
        np.testing.assert_allclose(soft.data, AT.data @ V.data, atol=1e-15)

    def test_straight_through_matches_soft_gradient_for_linear_loss(self, rng):
        V = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        logits = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        AT = T.softmax(logits, axis=-1)
        noise = rng.gumbel(size=(2, 4))
        C = T.Tensor(rng.normal(size=(2, 3)))
        fwd, soft = gumbel_select(V, AT, gamma=0.7, noise=noise)
        g_hard = T.backward(T.tsum(fwd * C))
        fwd2, soft2 = gumbel_select(V, AT, gamma=0.7, noise=noise)
        g_soft = T.backward(T.tsum(soft2 * C))
        for leaf in (V, logits):
            np.testing.assert_allclose(g_hard[leaf], g_soft[leaf], atol=1e-14)

    def test_monte_carlo_frequencies_follow_attention(self):
        rng = np.random.default_rng(7)
        AT = np.array([[0.1, 0.2, 0.3, 0.4]])
        V = T.Tensor(np.eye(4))  # the selected row is a one-hot frame id
        n = 10_000
        counts = np.zeros(4)
        for _ in range(n):
            fwd, _ = gumbel_select(V, T.Tensor(AT), rng=rng)
            counts += fwd.data[0]
        freq = counts / n
        sigma = np.sqrt(AT[0] * (1 - AT[0]) / n)
        assert np.all(np.abs(freq - AT[0]) <= 3 * sigma), (freq, AT[0])

    def test_bad_gamma(self):
        with pytest.raises(DomainError):
            gumbel_select(T.Tensor(np.eye(2)), T.Tensor(np.full((1, 2), 0.5)), gamma=0.0)


def loop_semantic_attention(V, P, Wv):
    d = V.shape[1]
    out = np.zeros((P.shape[0], Wv.shape[1]))
    for j in range(P.shape[0]):
        scores = [sum(P[j, k] * V[i, k] for k in range(d)) / math.sqrt(d) for i in range(V.shape[0])]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        tot = sum(w)
        for i in range(V.shape[0]):
            val = [sum(V[i, k] * Wv[k, c] for k in range(d)) for c in range(Wv.shape[1])]
            for c in range(Wv.shape[1]):
                out[j, c] += w[i] / tot * val[c]
    return out


class TestSemanticAttention:
    def test_against_loop_oracle(self, rng):
        V, P, Wv = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=(8, 8))
        out = semantic_attention(T.Tensor(V), T.Tensor(P), T.Tensor(Wv)).data
        np.testing.assert_allclose(out, loop_semantic_attention(V, P, Wv), atol=1e-10)

    def test_orthogonal_phrase_gives_uniform_average(self, rng):
        V = np.array([[1.0, 0.0, 2.0], [3.0, 0.0, -1.0]])
        P = np.array([[0.0, 5.0, 0.0]])
        out = semantic_attention(T.Tensor(V), T.Tensor(P)).data
        np.testing.assert_allclose(out, V.mean(axis=0, keepdims=True), atol=1e-15)

    def test_identical_frames_return_that_frame(self, rng):
        row = rng.normal(size=5)
        V = np.tile(row, (3, 1))
        out = semantic_attention(T.Tensor(V), T.Tensor(rng.normal(size=(2, 5)))).data
        np.testing.assert_allclose(out, np.tile(row, (2, 1)), atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            semantic_attention(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((1, 4))))


class TestStructuredDropout:
    def test_all_ones_is_identity(self, rng):
        o = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(structured_dropout(T.Tensor(o), 0.3, R=np.ones((3, 4))).data, o)

    def test_half_mask_doubles_kept(self):
        o = np.arange(1.0, 5.0)
        R = np.array([1.0, 0.0, 1.0, 0.0])
        np.testing.assert_array_equal(structured_dropout(T.Tensor(o), 0.5, R=R).data, [2, 0, 6, 0])

    def test_eval_is_identity(self, rng):
        o = T.Tensor(rng.normal(size=5))
        assert structured_dropout(o, 0.5, rng, training=False) is o

    def test_unbiased_mean(self):
        rng = np.random.default_rng(3)
        o = np.linspace(0.5, 2.0, 10)
        acc = np.zeros(10)
        n = 100_000
        R = (rng.random((n, 10)) >= 0.3).astype(float)
        R = R[R.sum(axis=1) > 0]
        for r in R:
            acc += structured_dropout(T.Tensor(o), 0.3, R=r).data
        mean = acc / len(R)
        assert np.all(np.abs(mean - o) / o < 0.01)

    def test_sampled_mask_is_scaled(self, rng):
        out = structured_dropout(T.Tensor(np.ones(1000)), 0.3, rng).data
        kept = out[out > 0]
        assert np.allclose(kept, 1000 / kept.size)

    @pytest.mark.parametrize("rate", [1.0, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(DomainError):
            structured_dropout(T.Tensor(np.ones(3)), rate, np.random.default_rng(0))


def hand_lstm(x, h, c, W_ih, W_hh, b):
    def sig(z):
        return 1 / (1 + math.exp(-z))

    H = len(h)
    z = [sum(x[k] * W_ih[k, j] for k in range(len(x))) + sum(h[k] * W_hh[k, j] for k in range(H)) + b[j]
         for j in range(4 * H)]
    c_new, h_new = [], []
    for u in range(H):
        i, f, g, o = sig(z[u]), sig(z[H + u]), math.tanh(z[2 * H + u]), sig(z[3 * H + u])
        c_new.append(f * c[u] + i * g)
        h_new.append(o * math.tanh(c_new[-1]))
    return np.array(h_new), np.array(c_new)


class TestDecoder:
    def test_zero_weights_give_zero_logits(self):
        m = tiny_model()
        for n in m.params:
            m.params.replace(n, np.zeros(m.params[n].shape))
        state, logits = decoder_step(m.params, zero_state(m.params, (1,)), T.Tensor(np.ones((1, 4))),
                                     T.Tensor(np.ones((1, 4))), len(m.glossary))
        np.testing.assert_array_equal(logits.data, np.zeros((1, len(m.glossary))))

    def test_lstm_against_hand_computation(self, rng):
        m = tiny_model(1)
        p = m.params
        x, h, c = rng.normal(size=8), rng.normal(size=3), rng.normal(size=3)
        h1, c1 = lstm_cell(p, (T.Tensor(h[None]), T.Tensor(c[None])), T.Tensor(x[None]))
        eh, ec = hand_lstm(x, h, c, p["lstm.W_ih"].data, p["lstm.W_hh"].data, p["lstm.b"].data)
        np.testing.assert_allclose(h1.data[0], eh, atol=1e-12)
        np.testing.assert_allclose(c1.data[0], ec, atol=1e-12)

    def test_pure(self, rng):
        m = tiny_model(2)
        state = (T.Tensor(rng.normal(size=(1, 3))), T.Tensor(rng.normal(size=(1, 3))))
        emb, ctx = T.Tensor(rng.normal(size=(1, 4))), T.Tensor(rng.normal(size=(1, 4)))
        snap = [s.data.copy() for s in state]
        (h1, _), l1 = decoder_step(m.params, state, emb, ctx)
        (h2, _), l2 = decoder_step(m.params, state, emb, ctx)
        np.testing.assert_array_equal(l1.data, l2.data)
        np.testing.assert_array_equal(state[0].data, snap[0])

    def test_vocab_width_check(self):
        m = tiny_model()
        with pytest.raises(ContractError):
            decoder_step(m.params, zero_state(m.params, (1,)), T.Tensor(np.ones((1, 4))), T.Tensor(np.ones((1, 4))), 99)


class TestGlossary:
    def test_reserved_ids(self):
        g = Glossary()
        assert [g.index[w] for w in ("<bos>", "<eos>", "<pad>", "<unk>")] == [BOS_ID, EOS_ID, PAD_ID, UNK_ID]

    def test_extend_appends_and_keeps_indices(self):
        g1 = Glossary().extend([["a", "dog"]])
        g2 = glossary_extend(g1, [["a", "cat"], ["dog", "runs"]])
        assert g2.words[: len(g1)] == g1.words
        assert g2.words[len(g1):] == ["cat", "runs"]
        assert len(g1) == 6  # the original is not mutated

    def test_unknown_and_decode(self):
        g = Glossary().extend([["a", "dog"]])
        ids = g.encode(["a", "zebra"])
        assert ids[1] == UNK_ID
        assert g.decode([BOS_ID, g.index["dog"], EOS_ID, g.index["a"]]) == ["dog"]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.text("abc", min_size=1, max_size=3), max_size=5), max_size=5),
           st.lists(st.lists(st.text("abcd", min_size=1, max_size=3), max_size=5), max_size=5))
    def test_prefix_stable(self, first, second):
        g1 = Glossary().extend(first)
        g2 = g1.extend(second)
        assert g2.words[: len(g1)] == g1.words
        for w in g1.words:
            assert g2.index[w] == g1.index[w]

    def test_grow_vocab_copies_rows(self, rng):
        m = tiny_model()
        p2 = grow_vocab(m.params, len(m.glossary) + 2, rng)
        np.testing.assert_array_equal(p2["emb.W"].data[: len(m.glossary)], m.params["emb.W"].data)
        np.testing.assert_array_equal(p2["out.b"].data[len(m.glossary):], [0, 0])
        with pytest.raises(ContractError):
            grow_vocab(m.params, 2, rng)


class TestCaptionLoss:
    def test_certain_prediction_is_zero(self):
        logits = np.full((1, 2, 5), -1000.0)
        logits[0, 0, 4] = logits[0, 1, EOS_ID] = 0.0
        assert caption_loss(T.Tensor(logits), np.array([[4, EOS_ID]])).item() == 0.0

    def test_uniform_is_log_vocab(self):
        assert caption_loss(T.Tensor(np.zeros((1, 3, 4))), np.array([[1, 0, PAD_ID]])).item() == pytest.approx(
            math.log(4), abs=1e-12)

    def test_against_oracle(self, rng):
        logits = rng.normal(size=(2, 3, 6))
        gold = np.array([[4, 5, 1], [5, 1, PAD_ID]])
        terms = []
        for b in range(2):
            for t in range(3):
                if gold[b, t] == PAD_ID:
                    continue
                row = logits[b, t]
                terms.append(-(row[gold[b, t]] - math.log(sum(math.exp(v) for v in row))))
        assert caption_loss(T.Tensor(logits), gold).item() == pytest.approx(np.mean(terms), abs=1e-12)
        assert caption_loss(T.Tensor(logits), gold, reduction="sum").item() == pytest.approx(sum(terms), abs=1e-12)

    def test_bad_gold(self):
        with pytest.raises(ContractError):
            caption_loss(T.Tensor(np.zeros((1, 2, 4))), np.array([[1, 9]]))
        with pytest.raises(DimensionError):
            caption_loss(T.Tensor(np.zeros((1, 2, 4))), np.array([1, 2]))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

BANNED = {BOS_ID, PAD_ID, UNK_ID}


def sequence_logprob(model, f2d, f3d, seq):
    inputs = np.array([[BOS_ID] + seq[:-1]])
    targets = np.array([seq])
    out = model.forward(f2d[None], f3d[None], inputs, targets, training=False)
    return -caption_loss(out.logits, targets, reduction="sum").item()


def allowed(model):
    return [i for i in range(len(model.glossary)) if i not in BANNED]


def greedy_oracle(model, f2d, f3d, max_len):
    seq = []
    for _ in range(max_len):
        best, best_lp = None, -np.inf
        for tok in allowed(model):
            lp = sequence_logprob(model, f2d, f3d, seq + [tok])
            if lp > best_lp:
                best, best_lp = tok, lp
        seq.append(best)
        if best == EOS_ID:
            break
    return seq, sequence_logprob(model, f2d, f3d, seq)


def exhaustive_oracle(model, f2d, f3d, max_len):
    """Best complete caption: words then EOS, or any max_len tokens."""
    words = [i for i in allowed(model) if i != EOS_ID]
    cands = [list(w) + [EOS_ID] for k in range(max_len) for w in itertools.product(words, repeat=k)]
    cands += [list(w) for w in itertools.product(allowed(model), repeat=max_len) if EOS_ID not in w[:-1]]
    scored = [(sequence_logprob(model, f2d, f3d, c), c) for c in cands]
    return max(scored, key=lambda s: s[0])


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(4))
    def test_beam_one_is_greedy(self, seed):
        m = tiny_model(seed, scale=1.5)
        rng = np.random.default_rng(seed)
        f2d, f3d = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        hyp = beam_search(m, f2d, f3d, beam=1, max_len=4)
        seq, lp = greedy_oracle(m, f2d, f3d, 4)
        assert hyp.tokens == seq
        assert hyp.log_prob == pytest.approx(lp, abs=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_wider_beam_never_worse(self, seed):
        m = tiny_model(seed, scale=1.5)
        rng = np.random.default_rng(100 + seed)
        f2d, f3d = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        b1 = beam_search(m, f2d, f3d, beam=1, max_len=5)
        b5 = beam_search(m, f2d, f3d, beam=5, max_len=5)
        assert b5.log_prob >= b1.log_prob

    @pytest.mark.parametrize("seed", range(3))
    def test_full_beam_matches_exhaustive_enumeration(self, seed):
        m = tiny_model(seed, scale=2.0)
        rng = np.random.default_rng(200 + seed)
        f2d, f3d = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        lp, seq = exhaustive_oracle(m, f2d, f3d, 3)
        hyp = beam_search(m, f2d, f3d, beam=64, max_len=3)
        assert hyp.tokens == seq
        assert hyp.log_prob == pytest.approx(lp, abs=1e-9)

    def test_bad_beam(self):
        m = tiny_model()
        with pytest.raises(DomainError):
            beam_search(m, np.zeros((2, 3)), np.zeros((2, 2)), beam=0)


# ---------------------------------------------------------------------------
# whole-model gradients
# ---------------------------------------------------------------------------

def fd_check_entries(model, f2d, f3d, inputs, targets, names, n_entries, rng, h=1e-6):
    def loss():
        out = model.forward(f2d, f3d, inputs, targets, training=False)
        return caption_loss(out.logits, targets)

    grads = {t: g for t, g in T.backward(loss()).items()}
    worst = 0.0
    for _ in range(n_entries):
        name = names[rng.integers(len(names))]
        t = model.params[name]
        idx = tuple(rng.integers(s) for s in t.shape)
        g = grads.get(t, np.zeros(t.shape))[idx]
        old = t.data[idx]
        t.data[idx] = old + h
        lp = loss().item()
        t.data[idx] = old - h
        lm = loss().item()
        t.data[idx] = old
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(g - num) / max(abs(g), abs(num), 1e-7))
    return worst


DOWNSTREAM = ["sem.Wv", "emb.W", "lstm.W_ih", "lstm.W_hh", "lstm.b", "out.W", "out.b"]


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradients_soft_selection(seed):
    m = tiny_model(seed, straight_through=False)
    rng = np.random.default_rng(seed)
    batch = toy_batch(m, rng)
    assert fd_check_entries(m, *batch, m.params.names(), 5, rng) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradients_straight_through(seed):
    # parameters downstream of the hard selection see exact gradients
    m = tiny_model(seed)
    rng = np.random.default_rng(seed)
    batch = toy_batch(m, rng)
    assert fd_check_entries(m, *batch, DOWNSTREAM, 5, rng) < 1e-3


def test_attention_rows_are_distributions(rng):
    m = tiny_model(3)
    f2d, f3d, inputs, targets = toy_batch(m, rng)
    out = m.forward(f2d, f3d, inputs, targets, rng=rng)
    AT = out.attention.AT.data
    assert np.all(AT >= 0)
    np.testing.assert_allclose(AT.sum(axis=-1), 1.0, atol=1e-12)
    assert out.logits.shape == (2, 4, len(m.glossary))
