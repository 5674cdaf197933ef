from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from fastnmt.compute import (Linear, ModelRuntime, Shortlist, SourceCache, StepFlags, attend,
                             att_gru_step, context_vectors, decoder_step, encode_source,
                             fc_stack_apply, output_logits)
from fastnmt.exceptions import InputError
from fastnmt.model import Model, generate_random_model
from fastnmt.tensor import gemm_f32, log_softmax

from conftest import TINY

NO_QUANT = StepFlags(False, True, True, True, True)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


# --- plain float64 transcription of the network equations -------------------

def gru_ref(g, h, x, c=None):
    f = lambda a: np.asarray(a, dtype=np.float64)
    pre_u = f(g.W_u) @ h + f(g.V_u) @ x + f(g.b_u)
    pre_r = f(g.W_r) @ h + f(g.V_r) @ x + f(g.b_r)
    pre_h = f(g.V_h) @ x + f(g.b_h)
    if c is not None:
        pre_u += f(g.U_u) @ c
        pre_r += f(g.U_r) @ c
        pre_h += f(g.U_h) @ c
    u = sig(pre_u)
    r = sig(pre_r)
    hh = np.tanh(r * (f(g.W_h) @ h) + pre_h)
    return u * h + (1 - u) * hh


def encode_ref(model, ids):
    x = [model.src_embeddings[i].astype(np.float64) for i in ids]
    for fwd, bwd in zip(model.src_fwd, model.src_bwd):
        S = len(x)
        hf, hb = [None] * S, [None] * S
        h = np.zeros(fwd.W_u.shape[0])
        for j in range(S):
            h = hf[j] = gru_ref(fwd, h, x[j])
        h = np.zeros(bwd.W_u.shape[0])
        for j in reversed(range(S)):
            h = hb[j] = gru_ref(bwd, h, x[j])
        x = [np.concatenate([hf[j], hb[j]]) for j in range(S)]
    return np.array(x)


def att_step_ref(model, h_prev, prev_id, ann):
    a = model.attention
    x = model.trg_embeddings[prev_id].astype(np.float64)
    q = np.tanh(a.W_a.astype(np.float64) @ h_prev + a.V_a.astype(np.float64) @ x)
    keys = np.tanh(ann @ a.U_a.astype(np.float64).T)
    d = keys @ q
    alpha = np.exp(d - d.max())
    alpha /= alpha.sum()
    c = alpha @ ann
    return gru_ref(model.trg_att_gru, h_prev, x, c), alpha


def zero_model(spec):
    m = generate_random_model(spec, 0)
    zeros = OrderedDict((k, np.zeros_like(v)) for k, v in m.tensors.items())
    return replace(m, tensors=zeros)


class TestFlags:
    def test_parse(self):
        assert StepFlags.parse("none") == StepFlags()
        assert all(vars(StepFlags.parse("all")).values())
        f = StepFlags.parse("lut, quant16")
        assert f.use_lut_activations and f.use_quant16 and not f.merge_recurrent
        assert f.names == "quant16,lut"
        with pytest.raises(InputError):
            StepFlags.parse("turbo")


class TestEncode:
    def test_zero_weights(self):
        rt = ModelRuntime(zero_model(TINY))
        for flags in (StepFlags(), StepFlags.parse("all")):
            cache = encode_source(rt, [5, 9, 3], flags)
            assert not cache.annotations.any()

    def test_single_word(self, tiny_runtime):
        cache = encode_source(tiny_runtime, [7])
        assert cache.annotations.shape == (1, TINY.src_hidden)
        assert len(cache) == 1

    def test_matches_transcription(self, tiny_model, tiny_runtime, rng):
        for _ in range(5):
            ids = rng.integers(0, TINY.src_vocab_size, int(rng.integers(1, 9)))
            got = encode_source(tiny_runtime, ids).annotations
            assert np.abs(got - encode_ref(tiny_model, ids)).max() <= 1e-5

    def test_precompute_attention_toggles_proj(self, tiny_runtime):
        assert encode_source(tiny_runtime, [4, 5]).att_proj is None
        proj = encode_source(tiny_runtime, [4, 5], StepFlags.parse("preatt")).att_proj
        assert proj.shape == (2, 3 * TINY.trg_hidden)

    @pytest.mark.parametrize("ids", [[], [3, 60], [-1]])
    def test_bad_ids(self, tiny_runtime, ids):
        with pytest.raises(InputError):
            encode_source(tiny_runtime, ids)

    def test_uncovered_words_fall_back(self, tiny_model):
        # half the vocabulary precomputed: output identical to no table
        rt = ModelRuntime(tiny_model, precompute_k=30)
        ids = [3, 40, 29, 30, 59]
        a = encode_source(rt, ids).annotations
        b = encode_source(rt, ids, StepFlags.parse("preemb")).annotations
        np.testing.assert_array_equal(a, b)


class TestAttention:
    def test_single_position(self, rng):
        ann = rng.standard_normal((1, 6)).astype(np.float32)
        cache = SourceCache(ann, rng.standard_normal((1, 4)).astype(np.float32))
        U = Linear(np.eye(6, dtype=np.float32))
        alpha, uc = attend(rng.standard_normal((2, 4)), cache.att_keys, ann, U)
        assert alpha.tolist() == [[1.0], [1.0]]
        np.testing.assert_array_equal(context_vectors(alpha, cache), np.vstack([ann, ann]))

    def test_identical_annotations(self, rng):
        row = rng.standard_normal(4).astype(np.float32)
        keys = np.vstack([row, row])
        alpha, _ = attend(rng.standard_normal((1, 4)), keys, np.ones((2, 3), np.float32),
                          Linear(np.eye(3, dtype=np.float32)))
        assert alpha.tolist() == [[0.5, 0.5]]

    def test_refactoring_identity(self, rng):
        for a, d, out, S in [(8, 6, 12, 5), (64, 128, 96, 17), (256, 200, 300, 9)]:
            ann = rng.uniform(-1, 1, (S, d)).astype(np.float32)
            keys = np.tanh(rng.uniform(-1, 1, (S, a))).astype(np.float32)
            U = Linear(rng.uniform(-0.1, 0.1, (out, d)).astype(np.float32))
            q = np.tanh(rng.uniform(-1, 1, (3, a))).astype(np.float32)
            _, direct = attend(q, keys, ann, U)
            alpha, pre = attend(q, keys, ann, U, proj=U(ann))
            assert np.abs(direct - pre).max() <= 1e-4
            assert np.abs(alpha.sum(axis=1) - 1).max() <= 1e-6 and (alpha >= 0).all()


class TestAttGruStep:
    def test_zero_weights(self):
        rt = ModelRuntime(zero_model(TINY))
        cache = encode_source(rt, [4, 5])
        h, _ = att_gru_step(rt, np.zeros((2, TINY.trg_hidden), np.float32), [0, 7], cache)
        assert not h.any()

    def test_matches_transcription(self, tiny_model, tiny_runtime, rng):
        ids = [5, 17, 33, 8]
        cache = encode_source(tiny_runtime, ids)
        ann = cache.annotations.astype(np.float64)
        h_prev = rng.uniform(-1, 1, (3, TINY.trg_hidden)).astype(np.float32)
        prev = np.array([0, 12, 49])
        h, alpha = att_gru_step(tiny_runtime, h_prev, prev, cache)
        for j in range(3):
            h_ref, a_ref = att_step_ref(tiny_model, h_prev[j].astype(np.float64), prev[j], ann)
            assert np.abs(h[j] - h_ref).max() <= 1e-5
            assert np.abs(alpha[j] - a_ref).max() <= 1e-5

    def test_fast_flags_close_to_reference(self, tiny_runtime, rng):
        worst = 0.0
        for _ in range(100):
            ids = rng.integers(3, TINY.src_vocab_size, int(rng.integers(1, 10)))
            ref_cache = encode_source(tiny_runtime, ids)
            fast_cache = encode_source(tiny_runtime, ids, NO_QUANT)
            h_prev = rng.uniform(-1, 1, (10, TINY.trg_hidden)).astype(np.float32)
            prev = rng.integers(0, TINY.trg_vocab_size, 10)
            a, _ = att_gru_step(tiny_runtime, h_prev, prev, ref_cache)
            b, _ = att_gru_step(tiny_runtime, h_prev, prev, fast_cache, NO_QUANT)
            worst = max(worst, float(np.abs(a - b).max()))
        assert worst <= 1e-4

    def test_saturated_update_gate(self, tiny_model, rng):
        t = OrderedDict(tiny_model.tensors)
        t["trg.att_gru.b_u"] = np.full(TINY.trg_hidden, 1e4, np.float32)
        rt = ModelRuntime(replace(tiny_model, tensors=t))
        cache = encode_source(rt, [3, 4, 5])
        h_prev = rng.uniform(-1, 1, (4, TINY.trg_hidden)).astype(np.float32)
        h, _ = att_gru_step(rt, h_prev, [0, 1, 2, 3], cache)
        np.testing.assert_array_equal(h, h_prev)

    def test_merge_gather_is_bitwise(self, tiny_runtime, rng):
        cache = encode_source(tiny_runtime, [3, 8, 13])
        uniq = rng.uniform(-1, 1, (3, TINY.trg_hidden)).astype(np.float32)
        gather = np.array([0, 0, 1, 2, 2, 2])
        prev = np.array([4, 5, 6, 7, 8, 9])
        for flags in (StepFlags(), StepFlags.parse("quant16,lut")):
            a, _ = att_gru_step(tiny_runtime, uniq[gather], prev, cache, flags)
            b, _ = att_gru_step(tiny_runtime, uniq, prev, cache, flags, gather=gather)
            assert a.tobytes() == b.tobytes()


class TestFcStack:
    SPEC5 = replace(TINY, fc_layers=5, fc_dim=(12, 9, 12, 7, 12))

    def transcription(self, model, h_B):
        # h1 = relu(W1 hB); h2 = relu(W2 h1); h3 = relu(W3 h2 + h1);
        # h4 = relu(W4 h3); h5 = relu(W5 h4 + h3); hT = tanh(WT h5)
        def mm(W, h):
            return gemm_f32(W, h.T).T

        def relu(z):
            return np.minimum(np.maximum(z, np.float32(0)), np.float32(10))

        W = model.fc_stack
        h1 = relu(mm(W[0], h_B))
        h2 = relu(mm(W[1], h1))
        h3 = relu(mm(W[2], h2) + h1)
        h4 = relu(mm(W[3], h3))
        h5 = relu(mm(W[4], h4) + h3)
        return [h1, h2, h3, h4, h5], np.tanh(mm(model.top_fc, h5))

    def test_five_layer_transcription_bitwise(self, rng):
        model = generate_random_model(self.SPEC5, 8)
        rt = ModelRuntime(model)
        h_B = rng.uniform(-1, 1, (4, TINY.trg_hidden)).astype(np.float32)
        layers = []
        h_T, top = fc_stack_apply(rt, h_B, collect=layers)
        ref_layers, ref_T = self.transcription(model, h_B)
        assert top is None
        for a, b in zip(layers, ref_layers):
            assert a.tobytes() == b.tobytes()
        assert h_T.tobytes() == ref_T.tobytes()

    def test_zero_skip_layer_passes_through(self, rng):
        model = generate_random_model(self.SPEC5, 9)
        t = OrderedDict(model.tensors)
        t["trg.fc3.W"] = np.zeros_like(t["trg.fc3.W"])
        rt = ModelRuntime(replace(model, tensors=t))
        layers = []
        fc_stack_apply(rt, rng.uniform(-1, 1, (3, TINY.trg_hidden)).astype(np.float32),
                       collect=layers)
        assert layers[2].tobytes() == layers[0].tobytes()

    def test_no_fc_layers(self, rng):
        model = generate_random_model(replace(TINY, fc_layers=0, fc_dim=0), 2)
        rt = ModelRuntime(model)
        h_B = rng.uniform(-1, 1, (2, TINY.trg_hidden)).astype(np.float32)
        h_T, _ = fc_stack_apply(rt, h_B)
        ref = np.tanh(gemm_f32(model.top_fc, h_B.T).T)
        assert h_T.tobytes() == ref.tobytes()

    def test_relu_clipped(self, rng):
        model = generate_random_model(TINY, 4)
        t = OrderedDict(model.tensors)
        t["trg.fc1.W"] = np.full_like(t["trg.fc1.W"], 0.1)
        rt = ModelRuntime(replace(model, tensors=t))
        layers = []
        fc_stack_apply(rt, np.full((1, TINY.trg_hidden), 1e3, np.float32), collect=layers)
        assert layers[0].max() == 10.0

    def test_gru_top_carries_state(self, rng):
        model = generate_random_model(replace(TINY, top_layer="gru", top_dim=20), 3)
        rt = ModelRuntime(model)
        h_B = rng.uniform(-1, 1, (2, TINY.trg_hidden)).astype(np.float32)
        h1, s1 = fc_stack_apply(rt, h_B)
        h2, s2 = fc_stack_apply(rt, h_B, top_prev=s1)
        assert h1.shape == (2, 20) and s1 is h1
        assert not np.array_equal(h1, h2)
        # the state is a GRU over the stack output
        layers = []
        fc_stack_apply(rt, h_B, collect=layers)
        ref = gru_ref(model.top_gru, np.zeros(20), layers[-1][0].astype(np.float64))
        assert np.abs(h1[0] - ref).max() <= 1e-5


class TestOutput:
    def test_single_candidate(self, tiny_runtime, rng):
        lp = output_logits(tiny_runtime, rng.uniform(-1, 1, (2, 24)).astype(np.float32), [7])
        assert lp.tolist() == [[0.0], [0.0]]

    def test_full_vocab(self, tiny_model, tiny_runtime, rng):
        h = rng.uniform(-1, 1, (3, 24)).astype(np.float32)
        lp = output_logits(tiny_runtime, h, np.arange(TINY.trg_vocab_size))
        ref = log_softmax(gemm_f32(tiny_model.output, h.T).T)
        assert np.abs(lp - ref).max() <= 1e-6

    def test_restricted_argmax(self, tiny_runtime, rng):
        full = np.arange(TINY.trg_vocab_size)
        for _ in range(20):
            h = rng.uniform(-1, 1, (1, 24)).astype(np.float32)
            best = int(np.argmax(output_logits(tiny_runtime, h, full)))
            cand = np.union1d(rng.choice(full, 10, replace=False), [best])
            lp = output_logits(tiny_runtime, h, cand)
            assert cand[int(np.argmax(lp))] == best

    @pytest.mark.parametrize("ids", [[], [3, 3], [5, 4], [0, 50]])
    def test_bad_candidates(self, tiny_runtime, ids):
        with pytest.raises(InputError):
            Shortlist(tiny_runtime, ids)

    def test_decoder_step(self, tiny_runtime):
        cache = encode_source(tiny_runtime, [3, 4, 5, 6])
        out = decoder_step(tiny_runtime, np.zeros((2, 24), np.float32), [0, 0], cache,
                           Shortlist(tiny_runtime, [1, 2, 10, 20]))
        assert out.logits.shape == (2, 4) and out.alpha.shape == (2, 4)
        assert np.abs(out.alpha.sum(axis=1) - 1).max() <= 1e-6
        assert np.abs(np.exp(out.logits).sum(axis=1) - 1).max() <= 1e-5


def test_quantized_twins_from_file_are_used(tiny_model):
    q = tiny_model.quantize(12, 10)
    rt = ModelRuntime(q)
    assert rt.has_quant and rt.out.Q.frac_bits_w == 12
    rt_default = ModelRuntime(tiny_model)
    assert rt_default.out.Q.frac_bits_w == 10


def test_model_unchanged_by_runtime(tiny_model):
    before = {k: v.copy() for k, v in tiny_model.tensors.items()}
    rt = ModelRuntime(tiny_model)
    encode_source(rt, [3, 4], StepFlags.parse("all"))
    assert all(np.array_equal(before[k], tiny_model.tensors[k]) for k in before)
    assert isinstance(tiny_model, Model)
