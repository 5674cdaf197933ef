"""Beam search over one or more models.

Hypotheses are evaluated lazily: a hypothesis stores the row of the state
matrix produced when its parent was scored (``state_ref``) plus its own last
token. Siblings that differ only in the last word therefore share
``h_{i-1}``, which is what lets merged recurrent states compute ``W h`` once
per distinct parent.

Completed hypotheses leave the beam for a separate pool. Each step keeps the
best ``b`` expansions overall; the finished ones among them go to the pool
and the rest form the next beam.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .compute import Shortlist, StepFlags, encode_source, fc_stack_apply, att_gru_step, \
    output_logits
from .exceptions import InputError, ShapeError
from .model import BOS_ID, EOS_ID, UNK_ID


class Hypothesis:
    """A partial or complete translation.

    Token ids exclude the implicit sentence-start. Attention rows are kept as
    a parent chain and materialised on demand.
    """

    __slots__ = ("token_ids", "logscore", "state_ref", "parent", "alpha", "complete")

    def __init__(self, token_ids, logscore, state_ref, parent=None, alpha=None):
        self.token_ids = token_ids
        self.logscore = logscore
        self.state_ref = state_ref
        self.parent = parent
        self.alpha = alpha
        self.complete = bool(token_ids) and token_ids[-1] == EOS_ID

    @property
    def last_token(self):
        return self.token_ids[-1] if self.token_ids else BOS_ID

    @property
    def alpha_history(self):
        rows = []
        node = self
        while node is not None and node.alpha is not None:
            rows.append(node.alpha)
            node = node.parent
        return rows[::-1]

    def sort_key(self):
        return (-self.logscore, self.token_ids)

    def __repr__(self):
        return f"Hypothesis({list(self.token_ids)}, {self.logscore:.4f})"


@dataclass
class Beam:
    hypotheses: list
    step: int = 0

    @property
    def best_logscore(self):
        return self.hypotheses[0].logscore if self.hypotheses else -math.inf


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 6
    delta: float = 3.0
    max_target_factor: float = 2.0
    max_target_offset: int = 5
    nbest: int = 1
    flags: StepFlags = StepFlags()
    cand_per_word: int = 20

    def __post_init__(self):
        if self.beam_size < 1:
            raise InputError("beam_size must be >= 1")
        if not self.delta > 0:
            raise InputError("delta must be > 0 (use math.inf to disable early stopping)")
        if self.nbest < 1:
            raise InputError("nbest must be >= 1")

    def max_length(self, src_len):
        return int(self.max_target_factor * src_len) + self.max_target_offset


@dataclass
class NBestEntry:
    token_ids: list
    logscore: float
    alpha: np.ndarray
    complete: bool


@dataclass
class DecodeResult:
    """Search output.

    Attributes:
        nbest: best first.
        fallback: no hypothesis finished; ``nbest`` holds partials.
            Otherwise partials may follow the completed entries when fewer
            than ``nbest`` finished.
        unique_states / total_states: recurrent-state counts summed over steps.
        steps: number of target steps run.
    """

    nbest: list
    fallback: bool = False
    unique_states: int = 0
    total_states: int = 0
    steps: int = 0

    @property
    def best(self):
        return self.nbest[0]


@dataclass
class StageTimes:
    """Wall-clock seconds per decoding stage, accumulated across calls."""

    encode: float = 0.0
    target: float = 0.0
    output: float = 0.0
    search: float = 0.0

    def add(self, other):
        for k in ("encode", "target", "output", "search"):
            setattr(self, k, getattr(self, k) + getattr(other, k))


def build_candidate_list(lex, src_ids, trg_vocab_size, top_n=None):
    """Union of the source words' lexical shortlists plus end and unk.

    An empty (or absent) table selects every target id except sentence-start.
    """
    if lex is None or len(lex) == 0:
        return np.arange(BOS_ID + 1, trg_vocab_size, dtype=np.int64)
    top_n = lex.top_n if top_n is None else top_n
    ids = {EOS_ID, UNK_ID}
    for s in src_ids:
        ids.update(t for t, _ in lex.translations(int(s))[:top_n])
    return np.array(sorted(ids), dtype=np.int64)


def merge_states(state_refs):
    """Collapse hypotheses that extend the same parent state.

    Returns:
        ``(unique_refs, gather_map)`` with ``unique_refs[gather_map[j]] ==
        state_refs[j]``. Identity is by parent link, never by value.
    """
    refs = np.asarray(state_refs, dtype=np.int64)
    uniq, gather = np.unique(refs, return_inverse=True)
    return uniq, gather.astype(np.int64)


def should_stop(beam, best_complete_logscore, delta):
    """True once the best partial is more than ``delta`` below the best complete."""
    if best_complete_logscore is None or best_complete_logscore == -math.inf:
        return False
    if isinstance(beam, Beam):
        best_partial = beam.best_logscore
    elif isinstance(beam, (list, tuple)):
        best_partial = max((h.logscore for h in beam), default=-math.inf)
    else:
        best_partial = float(beam)
    return best_partial < best_complete_logscore - delta


def ensemble_combine(step_logprobs):
    """Average log-probabilities and renormalise over the candidate set."""
    if len(step_logprobs) == 1:
        return step_logprobs[0]
    shape = step_logprobs[0].shape
    if any(lp.shape != shape for lp in step_logprobs):
        raise ShapeError("ensemble members disagree on the candidate set")
    mean = np.mean(np.stack(step_logprobs), axis=0, dtype=np.float64)
    mean -= mean.max(axis=-1, keepdims=True)
    mean -= np.log(np.exp(mean).sum(axis=-1, keepdims=True))
    return mean.astype(np.float32)


class _ModelState:
    """Per-model decoding state for one sentence."""

    def __init__(self, rt, src_ids, flags):
        self.rt = rt
        self.cache = encode_source(rt, src_ids, flags)
        self.h = np.zeros((1, rt.att_gru.hidden), dtype=np.float32)
        self.top = None
        if rt.top_gru is not None:
            self.top = np.zeros((1, rt.top_gru.hidden), dtype=np.float32)


def _step_logprobs(states, shortlists, refs, last, flags, times, merge):
    """Score a batch of hypotheses under every model; updates states in place."""
    per_model = []
    alphas = []
    uniq = gather = None
    if merge:
        uniq, gather = merge_states(refs)
    for st, sl in zip(states, shortlists):
        t0 = time.perf_counter()
        if merge:
            h, alpha = att_gru_step(st.rt, st.h[uniq], last, st.cache, flags, gather)
        else:
            h, alpha = att_gru_step(st.rt, st.h[refs], last, st.cache, flags)
        top_prev = st.top[refs] if st.top is not None else None
        h_T, top = fc_stack_apply(st.rt, h, flags, top_prev)
        t1 = time.perf_counter()
        per_model.append(output_logits(st.rt, h_T, sl, flags))
        times.target += t1 - t0
        times.output += time.perf_counter() - t1
        st.h = h
        st.top = top
        alphas.append(alpha)
    return ensemble_combine(per_model), alphas[0]


def _check_models(runtimes):
    if not runtimes:
        raise InputError("need at least one model")
    vocab = runtimes[0].model.vocab_trg
    for rt in runtimes[1:]:
        if rt.model.vocab_trg != vocab:
            raise InputError("ensemble members must share the target vocabulary")


def _select(beam_hyps, scores, cand_ids, b):
    """Best ``b`` expansions as (row, candidate index, score), ties by tokens."""
    flat = scores.ravel()
    if flat.size > b:
        kth = np.partition(flat, flat.size - b)[flat.size - b]
        idx = np.flatnonzero(flat >= kth)
    else:
        idx = np.arange(flat.size)
    C = scores.shape[1]
    picks = []
    for f in idx:
        row, col = divmod(int(f), C)
        picks.append((-float(flat[f]), beam_hyps[row].token_ids + (int(cand_ids[col]),), row, col))
    picks.sort(key=lambda p: (p[0], p[1]))
    return picks[:b]


def beam_search(runtimes, src_ids, config=DecodeConfig(), lex=None, trace=None, times=None):
    """Decode one source sentence.

    Args:
        runtimes: one :class:`~fastnmt.compute.ModelRuntime` per ensemble member.
        src_ids: source token ids.
        config: search settings.
        lex: optional :class:`~fastnmt.model.LexTable` for the candidate list.
        trace: optional dict filled with ``token prefix -> step log-probs``.
        times: optional :class:`StageTimes` accumulator.

    Returns:
        :class:`DecodeResult`.
    """
    if not isinstance(runtimes, (list, tuple)):
        runtimes = [runtimes]
    _check_models(runtimes)
    src_ids = list(src_ids)
    if not src_ids:
        raise InputError("empty source sentence")
    flags = config.flags
    times = times if times is not None else StageTimes()
    t_start = time.perf_counter()
    states = [_ModelState(rt, src_ids, flags) for rt in runtimes]
    times.encode += time.perf_counter() - t_start
    rt0 = runtimes[0]
    cand = build_candidate_list(lex, src_ids, rt0.spec.trg_vocab_size, config.cand_per_word)
    shortlists = [Shortlist(rt, cand) for rt in runtimes]

    beam = Beam([Hypothesis((), 0.0, 0)])
    pool = []
    best_complete = -math.inf
    max_len = config.max_length(len(src_ids))
    uniq_total = hyp_total = 0
    b = config.beam_size
    for step in range(max_len):
        hyps = beam.hypotheses
        refs = np.fromiter((h.state_ref for h in hyps), dtype=np.int64, count=len(hyps))
        last = np.fromiter((h.last_token for h in hyps), dtype=np.int64, count=len(hyps))
        uniq_total += len(set(refs.tolist()))
        hyp_total += len(hyps)
        lp, alpha = _step_logprobs(states, shortlists, refs, last, flags, times,
                                   flags.merge_recurrent)
        if trace is not None:
            for j, h in enumerate(hyps):
                trace[h.token_ids] = lp[j]
        base = np.fromiter((h.logscore for h in hyps), dtype=np.float64, count=len(hyps))
        scores = base[:, None] + lp.astype(np.float64)
        nxt = []
        for neg, tokens, row, col in _select(hyps, scores, cand, b):
            hyp = Hypothesis(tokens, -neg, row, hyps[row], alpha[row])
            if hyp.complete:
                pool.append(hyp)
                best_complete = max(best_complete, hyp.logscore)
            else:
                nxt.append(hyp)
        beam = Beam(nxt, step + 1)
        if not nxt or should_stop(beam, best_complete, config.delta):
            break
    fallback = not pool
    # Completed hypotheses first. Partials top up a short list, but only those
    # scoring no better than the last completed one, so scores never increase.
    finals = sorted(pool, key=Hypothesis.sort_key)[:config.nbest]
    if len(finals) < config.nbest:
        floor = finals[-1].logscore if finals else math.inf
        extra = [h for h in beam.hypotheses if h.logscore <= floor]
        finals += sorted(extra, key=Hypothesis.sort_key)[:config.nbest - len(finals)]
    entries = [NBestEntry(list(h.token_ids), h.logscore,
                          np.array(h.alpha_history, dtype=np.float32), h.complete)
               for h in finals]
    times.search += time.perf_counter() - t_start
    return DecodeResult(entries, fallback, uniq_total, hyp_total, beam.step)


def score_sequence(runtimes, src_ids, token_ids, flags=StepFlags(), lex=None, cand_per_word=20):
    """Teacher-forced per-step log-probabilities of ``token_ids``.

    Every id must be in the candidate list. Returns a float64 array whose
    sum is the hypothesis log-score the search would assign.
    """
    if not isinstance(runtimes, (list, tuple)):
        runtimes = [runtimes]
    _check_models(runtimes)
    cand = build_candidate_list(lex, src_ids, runtimes[0].spec.trg_vocab_size, cand_per_word)
    pos = {int(c): i for i, c in enumerate(cand)}
    states = [_ModelState(rt, src_ids, flags) for rt in runtimes]
    shortlists = [Shortlist(rt, cand) for rt in runtimes]
    times = StageTimes()
    out = []
    prev = BOS_ID
    zero = np.zeros(1, dtype=np.int64)
    for tok in token_ids:
        lp, _ = _step_logprobs(states, shortlists, zero, np.array([prev]), flags, times, False)
        if int(tok) not in pos:
            raise InputError(f"token {tok} is not in the candidate list")
        out.append(float(lp[0, pos[int(tok)]]))
        prev = int(tok)
    return np.array(out)


def greedy_decode(runtimes, src_ids, config=DecodeConfig(), lex=None):
    """Argmax decoding, one hypothesis, same stopping length as the search."""
    if not isinstance(runtimes, (list, tuple)):
        runtimes = [runtimes]
    _check_models(runtimes)
    flags = config.flags
    cand = build_candidate_list(lex, src_ids, runtimes[0].spec.trg_vocab_size,
                                config.cand_per_word)
    states = [_ModelState(rt, src_ids, flags) for rt in runtimes]
    shortlists = [Shortlist(rt, cand) for rt in runtimes]
    times = StageTimes()
    tokens, score, prev = [], 0.0, BOS_ID
    zero = np.zeros(1, dtype=np.int64)
    for _ in range(config.max_length(len(src_ids))):
        lp, _ = _step_logprobs(states, shortlists, zero, np.array([prev]), flags, times, False)
        best = int(np.argmax(lp[0]))
        score += float(lp[0, best])
        prev = int(cand[best])
        tokens.append(prev)
        if prev == EOS_ID:
            break
    return tokens, score


def unk_replace(hyp, src_tokens, lex=None, vocab_trg=None):
    """Replace emitted unk tokens using the attention argmax of their step.

    Args:
        hyp: a :class:`Hypothesis` or :class:`NBestEntry`.
        src_tokens: source word strings as they appeared in the input.
        lex: optional lexical table; its best translation of the attended
            source word is used when available, otherwise the word is copied.
        vocab_trg: target vocabulary for turning ids into strings.

    Returns:
        List of output word strings (sentence-end dropped).
    """
    ids = list(hyp.token_ids)
    alpha = hyp.alpha_history if isinstance(hyp, Hypothesis) else hyp.alpha
    if len(alpha) != len(ids):
        raise ShapeError("attention history length differs from the output length")
    words = []
    for i, tok in enumerate(ids):
        if tok == EOS_ID:
            continue
        if tok != UNK_ID:
            words.append(vocab_trg.tokens[tok] if vocab_trg is not None else str(tok))
            continue
        src_word = src_tokens[int(np.argmax(alpha[i]))]
        best = lex.best_string.get(src_word) if lex is not None else None
        words.append(best if best is not None else src_word)
    return words
