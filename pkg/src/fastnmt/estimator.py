"""Scikit-learn style front end for decoding.

``fit`` loads the model(s) and lexical table and builds the decode-ready
runtimes; ``predict`` maps source sentences to translations. The command
line tool goes through this class too, so ``decode``, ``bench`` and
``verify`` share one decode path.
"""

from numbers import Integral, Real

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .compute import ModelRuntime, StepFlags
from .decoder import DecodeConfig, StageTimes, beam_search, unk_replace
from .exceptions import InputError
from .model import EOS_ID, LexTable, Model, load_lex_table, load_model


def _load(model):
    return model if isinstance(model, Model) else load_model(model)


def check_sentences(X):
    """Validate a batch of pre-tokenized sentences.

    Args:
        X: iterable of strings (tokens separated by whitespace) or of token
            lists. A bare string is rejected to avoid decoding characters.

    Returns:
        List of token lists.

    Raises:
        InputError: bare string, non-text item or an empty sentence.
    """
    if isinstance(X, (str, bytes)):
        raise InputError("expected a sequence of sentences, got a single string")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, str):
            toks = item.split()
        elif isinstance(item, (list, tuple)) and all(isinstance(t, str) for t in item):
            toks = list(item)
        else:
            raise InputError(f"sentence {i}: expected text, got {type(item).__name__}")
        if not toks:
            raise InputError(f"sentence {i} is empty")
        out.append(toks)
    return out


class BeamSearchTranslator(BaseEstimator):
    """Beam-search translation with toggleable speed optimisations.

    Args:
        model: a :class:`~fastnmt.model.Model` or a path to a model file.
        ensemble: further models (or paths) averaged with ``model``.
        lex: lexical table path or :class:`~fastnmt.model.LexTable`; None
            scores the full target vocabulary.
        beam_size: hypotheses kept per step.
        delta: early-stopping margin in log units (``math.inf`` disables).
        nbest: hypotheses returned per sentence.
        opts: ``"all"``, ``"none"`` or a comma list of
            quant16, preemb, preatt, lut, merge.
        precompute_k: words with precomputed input products; None uses the
            value stored in the model.
        cand_per_word: lexical translations taken per source word.
        max_target_factor: output length cap is ``factor * |S| + offset``.
        max_target_offset: see ``max_target_factor``.
        replace_unk: substitute emitted unk tokens via attention.
    """

    def __init__(self, model=None, ensemble=(), lex=None, beam_size=6, delta=3.0, nbest=1,
                 opts="none", precompute_k=None, cand_per_word=20, max_target_factor=2.0,
                 max_target_offset=5, replace_unk=False):
        self.model = model
        self.ensemble = ensemble
        self.lex = lex
        self.beam_size = beam_size
        self.delta = delta
        self.nbest = nbest
        self.opts = opts
        self.precompute_k = precompute_k
        self.cand_per_word = cand_per_word
        self.max_target_factor = max_target_factor
        self.max_target_offset = max_target_offset
        self.replace_unk = replace_unk

    def _check_params(self):
        if self.model is None:
            raise InputError("model is required")
        for name in ("beam_size", "nbest", "cand_per_word"):
            v = getattr(self, name)
            if not isinstance(v, Integral) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.delta, Real) or not self.delta > 0:
            raise InputError(f"delta must be > 0, got {self.delta!r}")
        if self.precompute_k is not None and (
                not isinstance(self.precompute_k, Integral) or self.precompute_k < 0):
            raise InputError(f"precompute_k must be a non-negative integer, "
                             f"got {self.precompute_k!r}")

    def fit(self, X=None, y=None):
        """Load models and build runtimes. ``X`` and ``y`` are ignored."""
        self._check_params()
        flags = StepFlags.parse(self.opts)
        models = [_load(self.model)] + [_load(m) for m in self.ensemble]
        self.runtimes_ = [ModelRuntime(m, self.precompute_k) for m in models]
        head = models[0]
        if isinstance(self.lex, LexTable) or self.lex is None:
            self.lex_ = self.lex
        else:
            self.lex_ = load_lex_table(self.lex, head.vocab_src, head.vocab_trg,
                                       self.cand_per_word)
        self.config_ = DecodeConfig(self.beam_size, float(self.delta),
                                    self.max_target_factor, self.max_target_offset,
                                    self.nbest, flags, self.cand_per_word)
        self.vocab_src_ = head.vocab_src
        self.vocab_trg_ = head.vocab_trg
        self.n_models_ = len(models)
        return self

    def decode(self, X, trace=None, times=None):
        """Run the search and return one :class:`~fastnmt.decoder.DecodeResult` per sentence.

        Args:
            X: sentences, see :func:`check_sentences`.
            trace: optional list receiving one per-sentence dict of
                ``token prefix -> step log-probs``.
            times: optional :class:`~fastnmt.decoder.StageTimes` accumulator.
        """
        check_is_fitted(self, "runtimes_")
        sents = check_sentences(X)
        times = times if times is not None else StageTimes()
        results = []
        for toks in sents:
            tr = {} if trace is not None else None
            results.append(beam_search(self.runtimes_, self.vocab_src_.encode(toks),
                                       self.config_, self.lex_, tr, times))
            if trace is not None:
                trace.append(tr)
        return results

    def _words(self, entry, src_tokens):
        if self.replace_unk:
            return unk_replace(entry, src_tokens, self.lex_, self.vocab_trg_)
        return [self.vocab_trg_.tokens[t] for t in entry.token_ids if t != EOS_ID]

    def predict(self, X):
        """Best translation of each sentence as a space-separated string."""
        sents = check_sentences(X)
        res = self.decode(sents)
        return np.array([" ".join(self._words(r.best, s)) for r, s in zip(res, sents)],
                        dtype=object)

    def predict_nbest(self, X):
        """Up to ``nbest`` ``(translation, logscore)`` pairs per sentence, best first."""
        sents = check_sentences(X)
        res = self.decode(sents)
        return [[(" ".join(self._words(e, s)), e.logscore) for e in r.nbest]
                for r, s in zip(res, sents)]

    def with_opts(self, opts):
        """Fitted copy sharing runtimes and lexical table but with other flags."""
        check_is_fitted(self, "runtimes_")
        twin = self.__class__(**{**self.get_params(), "opts": opts})
        twin.__dict__.update({k: v for k, v in self.__dict__.items() if k.endswith("_")})
        twin.config_ = DecodeConfig(**{**self.config_.__dict__,
                                       "flags": StepFlags.parse(opts)})
        return twin


def count_target_words(results):
    """Emitted target tokens of the best hypotheses, sentence-end included once."""
    return sum(len(r.best.token_ids) for r in results)

