"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL`` line; the lines are
repeated in the terminal summary. Run with ``pytest tests/test_acceptance.py``.
"""

import json
import math
import time
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fastnmt.cli import main
from fastnmt.compute import ModelRuntime, StepFlags, att_gru_step, encode_source, fc_stack_apply
from fastnmt.decoder import beam_search
from fastnmt.estimator import BeamSearchTranslator
from fastnmt.model import (ModelSpec, generate_random_model, load_model, model_to_bytes,
                           save_model)
from fastnmt.quant import gemm_i16, quantize_activations, quantize_weights
from fastnmt.tensor import LUT_DOMAINS, activate, gemm_f32

from conftest import MICRO, exact_config, exhaustive_best

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "suite_model.yaml"
FAST = "preemb,preatt,lut,merge"


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    """Seeded suite model, 200 sentences of length 5-20 and a lexical table."""
    d = tmp_path_factory.mktemp("suite")
    assert main(["gen-model", "--spec", str(CONFIG), "--seed", "1",
                 "--out", str(d / "m.nmt")]) == 0
    assert main(["gen-corpus", "--model", str(d / "m.nmt"), "--n", "200", "--seed", "7",
                 "--min-len", "5", "--max-len", "20", "--out", str(d / "src.txt")]) == 0
    assert main(["gen-lex", "--model", str(d / "m.nmt"), "--seed", "3",
                 "--out", str(d / "lex.tsv")]) == 0
    return d


def suite_args(d, command, *extra):
    return [command, "--model", str(d / "m.nmt"), "--input", str(d / "src.txt"),
            "--lex", str(d / "lex.tsv"), "--cand-per-word", "20", *extra]


def read_report(path):
    text = path.read_text()
    return json.loads(text[text.index("{"):])


@pytest.fixture(scope="module")
def suite_translator(suite):
    return BeamSearchTranslator(str(suite / "m.nmt"), lex=str(suite / "lex.tsv"),
                                cand_per_word=20).fit()


def test_c1_output_preservation(suite, criterion):
    rep = suite / "verify_fast.txt"
    t0 = time.perf_counter()
    code = main(suite_args(suite, "verify", "--opts", FAST, "--no-attribution",
                           "--report", str(rep)))
    elapsed = time.perf_counter() - t0
    r = read_report(rep)
    ok = (r["identical_fraction"] >= 0.999 and r["max_logit_diff"] <= 1e-3
          and elapsed <= 120 and code == 0)
    criterion(1, ok, f"identical={r['identical_fraction']:.4f} (>=0.999) "
                     f"max_diff={r['max_logit_diff']:.2e} (<=1e-3) runtime={elapsed:.1f}s (<=120)")
    assert ok


def test_c2_quantization(suite, criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        W = rng.uniform(-1, 1, (512, 512)).astype(np.float32)
        X = rng.uniform(-1, 1, (512, 6)).astype(np.float32)
        ref = gemm_f32(W, X)
        got = gemm_i16(quantize_weights(W), quantize_activations(X.T))
        worst = max(worst, float(np.abs(got - ref).max() / np.abs(ref).max()))

    rep = suite / "verify_all.txt"
    main(suite_args(suite, "verify", "--opts", "all", "--no-attribution",
                    "--report", str(rep)))
    r = read_report(rep)
    ok = r["identical_fraction"] >= 0.99 and worst <= 0.01
    criterion(2, ok, f"identical={r['identical_fraction']:.4f} (>=0.99) "
                     f"max_diff={r['max_logit_diff']:.2e} gemm_rel_err={worst:.2e} (<=1e-2)")
    assert worst <= 0.01
    assert r["identical_fraction"] >= 0.99


def test_c3_kernel_speed(criterion):
    reps = 10_000
    rng = np.random.default_rng(3)
    ratios = {}
    t_start = time.perf_counter()
    for m in (512, 1024):
        W = rng.uniform(-1, 1, (m, m)).astype(np.float32)
        Wq = quantize_weights(W)
        for n in (2, 4, 8):
            X = rng.uniform(-1, 1, (m, n)).astype(np.float32)
            XT = np.ascontiguousarray(X.T)
            gemm_f32(W, X)
            gemm_i16(Wq, quantize_activations(XT))
            t0 = time.perf_counter()
            for _ in range(reps):
                gemm_f32(W, X)
            t_f = time.perf_counter() - t0
            t0 = time.perf_counter()
            for _ in range(reps):
                gemm_i16(Wq, quantize_activations(XT))
            t_i = time.perf_counter() - t0
            ratios[(m, n)] = t_f / t_i
    elapsed = time.perf_counter() - t_start
    worst = min(ratios.values())
    ok = worst >= 1.5 and elapsed <= 300
    detail = " ".join(f"{m}x{n}:{r:.2f}x" for (m, n), r in ratios.items())
    criterion(3, ok, f"min_speedup={worst:.2f}x (>=1.5) [{detail}] runtime={elapsed:.0f}s (<=300)")
    assert ok


def test_c4_end_to_end_speedup(suite, criterion):
    rep = suite / "bench.txt"
    # three interleaved passes per rung; a single pass is noise-dominated on a shared host
    assert main(suite_args(suite, "bench", "--opts", "all", "--ladder", "--repeat", "3",
                           "--report", str(rep))) == 0
    rows = read_report(rep)["configs"]
    wps = [r["words_per_sec"] for r in rows]
    total = wps[-1] / wps[0]
    steps = [b / a for a, b in zip(wps, wps[1:])]
    ok = total >= 2.0 and min(steps) >= 0.95
    ladder = " ".join(f"{r['opts'].split(',')[-1]}={r['words_per_sec']:.0f}" for r in rows)
    criterion(4, ok, f"speedup={total:.2f}x (>=2.0) worst_step={min(steps):.3f} (>=0.95) "
                     f"words/sec [{ladder}]")
    assert ok


def random_attention_spec(rng):
    def dim(lo=8, hi=1024):
        return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
    return ModelSpec(src_vocab_size=40, trg_vocab_size=40, embed_dim=dim(),
                     src_layers=1, src_hidden=2 * dim(4, 512), trg_hidden=dim())


def test_c5_attention_refactoring(criterion):
    rng = np.random.default_rng(5)
    direct, pre = StepFlags(), StepFlags.parse("preatt")
    worst, count, dims = 0.0, 0, []
    for m in range(10):
        spec = random_attention_spec(rng)
        if m == 0:
            spec = replace(spec, embed_dim=1024, src_hidden=1024, trg_hidden=1024, top_dim=1024)
        dims.append((spec.src_hidden, spec.trg_hidden))
        rt = ModelRuntime(generate_random_model(spec, 100 + m))
        for _ in range(100):
            src = rng.integers(3, spec.src_vocab_size, rng.integers(1, 30)).tolist()
            h_prev = rng.uniform(-1, 1, (1, spec.trg_hidden)).astype(np.float32)
            prev = [int(rng.integers(0, spec.trg_vocab_size))]
            a, _ = att_gru_step(rt, h_prev, prev, encode_source(rt, src, direct), direct)
            b, _ = att_gru_step(rt, h_prev, prev, encode_source(rt, src, pre), pre)
            worst = max(worst, float(np.abs(a - b).max()))
            count += 1
    ok = count == 1000 and worst <= 1e-4
    criterion(5, ok, f"triples={count} max_abs_diff={worst:.2e} (<=1e-4) "
                     f"largest_dims={max(dims)}")
    assert ok


def test_c6_beam_oracle(criterion):
    t0 = time.perf_counter()
    agree = 0
    for seed in range(100):
        rt = ModelRuntime(generate_random_model(MICRO, seed))
        rng = np.random.default_rng(seed)
        src = rng.integers(3, 8, int(rng.integers(1, 5))).tolist()
        score, seq = exhaustive_best(rt, src, 4)
        r = beam_search(rt, src, exact_config(4096, 4))
        agree += (not r.fallback and tuple(r.best.token_ids) == seq
                  and abs(r.best.logscore - score) <= 1e-5)
    elapsed = time.perf_counter() - t0
    ok = agree == 100 and elapsed <= 60
    criterion(6, ok, f"agree={agree}/100 runtime={elapsed:.1f}s (<=60)")
    assert ok


def test_c7_residual_identities(rng, criterion):
    spec = ModelSpec(src_vocab_size=30, trg_vocab_size=30, embed_dim=16, src_layers=1,
                     src_hidden=16, trg_hidden=24, fc_layers=5, fc_dim=(12, 9, 12, 7, 12))
    model = generate_random_model(spec, 7)
    h_B = rng.uniform(-1, 1, (4, 24)).astype(np.float32)

    t = OrderedDict(model.tensors)
    t["trg.fc3.W"] = np.zeros_like(t["trg.fc3.W"])
    layers = []
    fc_stack_apply(ModelRuntime(replace(model, tensors=t)), h_B, collect=layers)
    skip_ok = layers[2].tobytes() == layers[0].tobytes()

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
    ref_T = np.tanh(mm(model.top_fc, h5))
    layers = []
    h_T, _ = fc_stack_apply(ModelRuntime(model), h_B, collect=layers)
    block_ok = all(a.tobytes() == b.tobytes() for a, b in zip(layers, [h1, h2, h3, h4, h5]))
    block_ok = block_ok and h_T.tobytes() == ref_T.tobytes()
    ok = skip_ok and block_ok
    criterion(7, ok, f"zero_W3_passthrough={skip_ok} transcription_bitwise={block_ok}")
    assert ok


def test_c8_merge_identity(suite_translator, suite, criterion):
    sents = (suite / "src.txt").read_text().splitlines()
    off = suite_translator.with_opts("none").decode(sents)
    on = suite_translator.with_opts("merge").decode(sents)
    same = sum(a.best.token_ids == b.best.token_ids for a, b in zip(off, on)) / len(sents)
    ratio = sum(r.unique_states for r in on) / sum(r.total_states for r in on)
    ok = same == 1.0
    criterion(8, ok, f"identical={same:.4f} (==1) unique_state_ratio={ratio:.1%} "
                     f"(report only; reference observation ~70%)")
    assert ok


def test_c9_lookup_tables(criterion):
    errs = {}
    for kind, (lo, hi) in LUT_DOMAINS.items():
        grid = np.arange(lo, hi + 1e-4 / 2, 1e-4)
        approx = activate(kind, grid.astype(np.float32), "lut").astype(np.float64)
        exact = np.tanh(grid) if kind == "tanh" else 1 / (1 + np.exp(-grid))
        errs[kind] = float(np.abs(approx - exact).max())
    ok = max(errs.values()) <= 1e-3
    criterion(9, ok, " ".join(f"{k}_max_err={v:.2e}" for k, v in errs.items()) + " (<=1e-3)")
    assert ok


def random_spec(rng):
    fc_layers = int(rng.integers(0, 8))
    base = int(rng.integers(2, 20))
    dims = tuple(base if i % 2 == 0 else int(rng.integers(2, 20)) for i in range(fc_layers))
    return ModelSpec(src_vocab_size=int(rng.integers(4, 60)),
                     trg_vocab_size=int(rng.integers(4, 60)),
                     embed_dim=int(rng.integers(1, 20)), src_layers=int(rng.integers(1, 4)),
                     src_hidden=2 * int(rng.integers(1, 12)), trg_hidden=int(rng.integers(1, 24)),
                     fc_layers=fc_layers, fc_dim=dims,
                     top_layer=str(rng.choice(["fc-tanh", "gru"])),
                     top_dim=int(rng.integers(1, 24)))


def test_c10_format_roundtrip(tmp_path, criterion):
    rng = np.random.default_rng(10)
    bad = []
    for i in range(50):
        spec = random_spec(rng)
        model = generate_random_model(spec, i)
        if i % 5 == 0:
            model = model.quantize(int(rng.integers(8, 15)), int(rng.integers(8, 12)))
        data = model_to_bytes(model)
        if model_to_bytes(generate_random_model(spec, i)) != model_to_bytes(
                generate_random_model(spec, i)):
            bad.append((i, "generation"))
        path = tmp_path / f"{i}.nmt"
        save_model(model, path)
        back = load_model(path)
        same = (back.spec == model.spec and model_to_bytes(back) == data
                and all(back.tensors[k].tobytes() == v.tobytes()
                        for k, v in model.tensors.items()))
        if not same:
            bad.append((i, "roundtrip"))
    ok = not bad
    criterion(10, ok, f"specs=50 failures={bad}")
    assert ok
