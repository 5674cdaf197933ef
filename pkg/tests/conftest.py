import math

import numpy as np
import pytest

from fastnmt.compute import ModelRuntime, att_gru_step, encode_source, fc_stack_apply, \
    output_logits
from fastnmt.decoder import DecodeConfig
from fastnmt.model import (BOS_ID, EOS_ID, ModelSpec, generate_random_lex, generate_random_model,
                           generate_random_sentences, load_lex_table)

TINY = ModelSpec(src_vocab_size=60, trg_vocab_size=50, embed_dim=16, src_layers=2,
                 src_hidden=16, trg_hidden=24, fc_layers=3, fc_dim=12)

# Acceptance-suite shape: 3x128 bidirectional source, 256 target, 3 FC-relu 192.
SUITE = ModelSpec(src_vocab_size=1000, trg_vocab_size=1000, embed_dim=128, src_layers=3,
                  src_hidden=128, trg_hidden=256, fc_layers=3, fc_dim=192,
                  top_layer="fc-tanh", top_dim=256)


MICRO = ModelSpec(src_vocab_size=8, trg_vocab_size=8, embed_dim=4, src_layers=1,
                  src_hidden=4, trg_hidden=6, fc_layers=1, fc_dim=4)


def exhaustive_best(rt, src_ids, max_len):
    """Best completed sequence by full enumeration of every prefix."""
    cand = np.arange(1, rt.spec.trg_vocab_size)
    cache = encode_source(rt, src_ids)
    best = (-math.inf, None)

    def visit(h, last, tokens, score):
        nonlocal best
        h, _ = att_gru_step(rt, h, [last], cache)
        h_T, _ = fc_stack_apply(rt, h)
        lp = output_logits(rt, h_T, cand)[0].astype(np.float64)
        for c, tok in enumerate(cand):
            s = score + lp[c]
            seq = tokens + (int(tok),)
            if tok == EOS_ID:
                if (s, tuple(-t for t in seq)) > (best[0], tuple(-t for t in best[1] or ())):
                    best = (s, seq)
            elif len(seq) < max_len:
                visit(h, int(tok), seq, s)

    visit(np.zeros((1, rt.spec.trg_hidden), np.float32), BOS_ID, (), 0.0)
    return best


def exact_config(b, max_len):
    return DecodeConfig(beam_size=b, delta=math.inf, max_target_factor=0.0,
                        max_target_offset=max_len)


@pytest.fixture(scope="session")
def tiny_model():
    return generate_random_model(TINY, seed=11)


@pytest.fixture(scope="session")
def tiny_runtime(tiny_model):
    return ModelRuntime(tiny_model)


@pytest.fixture(scope="session")
def tiny_lex(tiny_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("lex") / "lex.tsv"
    lines = generate_random_lex(tiny_model.vocab_src, tiny_model.vocab_trg, seed=5, per_word=8)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_lex_table(path, tiny_model.vocab_src, tiny_model.vocab_trg, top_n=5)


@pytest.fixture(scope="session")
def tiny_sentences(tiny_model):
    return generate_random_sentences(tiny_model.vocab_src, 12, seed=3, min_len=3, max_len=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record (and print) one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
