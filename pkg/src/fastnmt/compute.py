"""Forward computation: source encoder, attentional target GRU, FC stack, output.

Activations are batched one vector per row: a beam of ``n`` hypotheses is an
``(n, dim)`` array, and every weight product is ``H @ W.T`` computed by
:func:`fastnmt.tensor.matmul_nt` or, with 16-bit multiplication enabled, by
:func:`fastnmt.quant.linear_i16`.

GRU update used by every recurrent layer (``c`` terms only in the attentional
layer)::

    u  = sigmoid(W_u h + V_u x + U_u c + b_u)
    r  = sigmoid(W_r h + V_r x + U_r c + b_r)
    hh = tanh(r * (W_h h) + V_h x + U_h c + b_h)
    h' = u * h + (1 - u) * hh
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from . import _kernels, quant
from .exceptions import InputError, ShapeError
from .model import build_precomputed_embeddings
from .tensor import RELU_CAP, default_table, matmul_nt

OPT_NAMES = {
    "quant16": "use_quant16",
    "preemb": "use_precomputed_embeddings",
    "preatt": "use_precomputed_attention",
    "lut": "use_lut_activations",
    "merge": "merge_recurrent",
}
# Cumulative order of the speed ladder.
OPT_ORDER = ("quant16", "preemb", "preatt", "lut", "merge")


@dataclass(frozen=True)
class StepFlags:
    use_quant16: bool = False
    use_precomputed_embeddings: bool = False
    use_precomputed_attention: bool = False
    use_lut_activations: bool = False
    merge_recurrent: bool = False

    @classmethod
    def parse(cls, opts):
        """Parse ``all``, ``none`` or a comma list such as ``preatt,lut``."""
        if isinstance(opts, cls):
            return opts
        opts = (opts or "none").strip()
        if opts == "all":
            return cls(**{v: True for v in OPT_NAMES.values()})
        if opts == "none":
            return cls()
        chosen = {}
        for name in opts.split(","):
            name = name.strip()
            if name not in OPT_NAMES:
                raise InputError(f"unknown optimisation {name!r}; "
                                 f"choose from {', '.join(OPT_NAMES)}")
            chosen[OPT_NAMES[name]] = True
        return cls(**chosen)

    @property
    def names(self):
        inv = {v: k for k, v in OPT_NAMES.items()}
        on = [inv[f.name] for f in fields(self) if getattr(self, f.name)]
        return ",".join(on) if on else "none"


class Linear:
    """A weight matrix with an optional 16-bit twin."""

    __slots__ = ("W", "Q", "frac_bits_a")

    def __init__(self, W, Q=None, frac_bits_a=quant.DEFAULT_FRAC_BITS_A):
        self.W = np.ascontiguousarray(W, dtype=np.float32)
        self.Q = Q
        self.frac_bits_a = frac_bits_a

    @property
    def out_dim(self):
        return self.W.shape[0]

    def __call__(self, H, use_quant16=False):
        if use_quant16:
            return quant.linear_i16(self.Q, H, self.frac_bits_a)
        return matmul_nt(self.W, H)

    def take_rows(self, ids):
        return Linear(self.W[ids], None if self.Q is None else self.Q.take_rows(ids),
                      self.frac_bits_a)


class GruPack:
    """Stacked GRU parameters: ``W`` is (3h [+extra], h), ``V`` is (3h, in)."""

    def __init__(self, W, V, bias, U=None):
        self.W = W
        self.V = V
        self.bias = np.ascontiguousarray(bias, dtype=np.float32)
        self.U = U
        self.hidden = self.bias.shape[0] // 3


@dataclass(eq=False)
class SourceCache:
    """Per-sentence source quantities.

    Attributes:
        annotations: (|S|, src_hidden) top encoder states ``s_j``.
        att_keys: (|S|, r) ``tanh(U_a s_j)``.
        att_proj: (|S|, 3r) ``[U_u; U_r; U_h] s_j`` or None.
    """

    annotations: np.ndarray
    att_keys: np.ndarray
    att_proj: np.ndarray = None

    def __len__(self):
        return self.annotations.shape[0]


@dataclass(eq=False)
class DecoderStepOut:
    h_i: np.ndarray
    alpha: np.ndarray
    h_T: np.ndarray
    logits: np.ndarray
    top_state: np.ndarray = None


class ModelRuntime:
    """Decode-ready view of a :class:`~fastnmt.model.Model`.

    Stacks per-gate matrices so each layer needs one product per input, and
    attaches 16-bit twins (taken from the model, or quantized here with the
    default frac bits when the model carries none) and precomputed embeddings.
    """

    def __init__(self, model, precompute_k=None, quantize=True):
        self.model = model
        spec = model.spec
        self.spec = spec
        t = model.tensors
        twins = dict(model.quantized)
        frac_a = model.frac_bits_a or quant.DEFAULT_FRAC_BITS_A
        if quantize and not twins:
            twins = model.quantize().quantized
        self.frac_bits_a = frac_a
        self.has_quant = bool(twins)

        def lin(names):
            W = np.concatenate([t[n] for n in names]) if len(names) > 1 else t[names[0]]
            Q = None
            if twins:
                qs = [twins[n] for n in names]
                data = np.ascontiguousarray(np.concatenate([q.data for q in qs]))
                Q = quant.QuantMatrix(data.shape[0], qs[0].cols, qs[0].frac_bits_w, data,
                                      qs[0].layout_tag)
            return Linear(W, Q, frac_a)

        def gru(prefix, attentional=False, extra_w=()):
            W = lin([f"{prefix}.W_{g}" for g in "urh"] + list(extra_w))
            V = lin([f"{prefix}.V_{g}" for g in "urh"])
            U = lin([f"{prefix}.U_{g}" for g in "urh"]) if attentional else None
            bias = np.concatenate([t[f"{prefix}.b_{g}"] for g in "urh"])
            return GruPack(W, V, bias, U)

        self.encoder = [(gru(f"src.l{i}.fwd"), gru(f"src.l{i}.bwd"))
                        for i in range(spec.src_layers)]
        # W_a shares the recurrent input, so it rides along with W_u/W_r/W_h.
        self.att_gru = gru("trg.att_gru", attentional=True, extra_w=["trg.att.W_a"])
        self.V_a = lin(["trg.att.V_a"])
        self.U_a = lin(["trg.att.U_a"])
        self.fc = [lin([f"trg.fc{i}.W"]) for i in range(1, spec.fc_layers + 1)]
        self.top_fc = lin(["trg.top.W"]) if spec.top_layer == "fc-tanh" else None
        self.top_gru = gru("trg.top_gru") if spec.top_layer == "gru" else None
        self.out = lin(["trg.out.V"])
        self.trg_emb = model.trg_embeddings
        self.src_emb = model.src_embeddings
        k = spec.precompute_k if precompute_k is None else precompute_k
        self.pre = build_precomputed_embeddings(model, k)
        self.sig_lut = default_table("sigmoid")
        self.tanh_lut = default_table("tanh")
        self.cand_sigmoid = spec.candidate_activation == "sigmoid"

    # elementwise helpers -------------------------------------------------
    def tanh(self, x, lut):
        return self.tanh_lut(x) if lut else np.tanh(x)

    def gru_update(self, pack, wh, wh_rows, vx, uc, h_prev, h_rows, lut):
        """Combine gate pre-activations into the new state.

        ``wh``/``h_prev`` are read through ``wh_rows``/``h_rows`` so merged
        recurrent products are reused without reordering any sum.
        """
        n = vx.shape[0]
        r = pack.hidden
        if lut:
            out = np.empty((n, r), dtype=np.float32)
            cand = self.sig_lut if self.cand_sigmoid else self.tanh_lut
            _kernels.gru_combine_lut(
                wh, wh_rows, vx, uc if uc is not None else vx, uc is not None, pack.bias,
                h_prev, h_rows, self.sig_lut.entries, np.float32(self.sig_lut.domain_lo),
                self.sig_lut.inv_step, cand.entries, np.float32(cand.domain_lo),
                cand.inv_step, out)
            return out
        W = wh[wh_rows]
        b = pack.bias
        pu = W[:, :r] + vx[:, :r]
        pr = W[:, r:2 * r] + vx[:, r:2 * r]
        if uc is not None:
            pu = pu + uc[:, :r]
            pr = pr + uc[:, r:2 * r]
        u = expit(pu + b[:r])
        g = expit(pr + b[r:2 * r])
        ph = g * W[:, 2 * r:3 * r] + vx[:, 2 * r:3 * r]
        if uc is not None:
            ph = ph + uc[:, 2 * r:]
        ph = ph + b[2 * r:]
        hh = expit(ph) if self.cand_sigmoid else np.tanh(ph)
        hp = h_prev[h_rows]
        return u * hp + (np.float32(1.0) - u) * hh


def _rows(n):
    return np.arange(n, dtype=np.int64)


def _input_products(pack, table, k, emb, ids, flags):
    """``V x`` for first-layer inputs, from the table where covered."""
    ids = np.asarray(ids)
    if flags.use_precomputed_embeddings and k:
        covered = ids < k
        if covered.all():
            return table[ids]
        out = np.empty((len(ids), pack.V.out_dim), dtype=np.float32)
        out[covered] = table[ids[covered]]
        miss = ~covered
        out[miss] = pack.V(emb[ids[miss]], flags.use_quant16)
        return out
    return pack.V(emb[ids], flags.use_quant16)


def _run_gru(rt, pack, vx, reverse, flags):
    S = vx.shape[0]
    states = np.empty((S, pack.hidden), dtype=np.float32)
    h = np.zeros((1, pack.hidden), dtype=np.float32)
    zero = np.zeros(1, dtype=np.int64)
    order = range(S - 1, -1, -1) if reverse else range(S)
    for pos in order:
        wh = pack.W(h, flags.use_quant16)
        h = rt.gru_update(pack, wh, zero, vx[pos:pos + 1], None, h, zero,
                          flags.use_lut_activations)
        states[pos] = h[0]
    return states


def encode_source(rt, src_ids, flags=StepFlags()):
    """Run the bidirectional encoder stack and build the attention cache.

    Raises:
        InputError: empty sentence or id outside the source vocabulary.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.ndim != 1 or src_ids.size == 0:
        raise InputError("source sentence must be a non-empty id sequence")
    if src_ids.min() < 0 or src_ids.max() >= rt.spec.src_vocab_size:
        raise InputError(f"source id out of range [0, {rt.spec.src_vocab_size})")
    layer_in = None
    for layer, (fwd, bwd) in enumerate(rt.encoder):
        outs = []
        for pack, table, reverse in ((fwd, rt.pre.src_fwd, False), (bwd, rt.pre.src_bwd, True)):
            if layer == 0:
                vx = _input_products(pack, table, rt.pre.k_src, rt.src_emb, src_ids, flags)
            else:
                vx = pack.V(layer_in, flags.use_quant16)
            outs.append(_run_gru(rt, pack, vx, reverse, flags))
        layer_in = np.ascontiguousarray(np.concatenate(outs, axis=1))
    ann = layer_in
    keys = rt.tanh(rt.U_a(ann, flags.use_quant16), flags.use_lut_activations)
    proj = rt.att_gru.U(ann, flags.use_quant16) if flags.use_precomputed_attention else None
    return SourceCache(ann, np.ascontiguousarray(keys), proj)


def attend(query, keys, annotations, U, proj=None, use_quant16=False):
    """Attention weights and the projected context for a batch of queries.

    Args:
        query: (n, a) ``tanh(W_a h_{i-1} + V_a x_i)``.
        keys: (|S|, a) ``tanh(U_a s_j)``.
        annotations: (|S|, d) source states ``s_j``.
        U: :class:`Linear` mapping a context vector to the gate inputs.
        proj: optional (|S|, U.out_dim) ``U s_j``. When given, the result is
            ``sum_j alpha_j (U s_j)``; otherwise ``U (sum_j alpha_j s_j)``.

    Returns:
        ``(alpha, uc)`` of shapes (n, |S|) and (n, U.out_dim).
    """
    query = np.ascontiguousarray(query, dtype=np.float32)
    d = np.empty((query.shape[0], keys.shape[0]), dtype=np.float32)
    _kernels.attention_scores(query, keys, d)
    d -= d.max(axis=1, keepdims=True)
    alpha = np.exp(d)
    alpha /= alpha.sum(axis=1, keepdims=True)
    if proj is not None:
        uc = np.empty((alpha.shape[0], proj.shape[1]), dtype=np.float32)
        _kernels.weighted_rows(alpha, proj, uc)
    else:
        c = np.empty((alpha.shape[0], annotations.shape[1]), dtype=np.float32)
        _kernels.weighted_rows(alpha, annotations, c)
        uc = U(c, use_quant16)
    return alpha, uc


def attention_step(rt, wh_a, va_x, cache, flags=StepFlags()):
    """Attention for the attentional GRU: see :func:`attend`.

    Args:
        wh_a: (n, r) ``W_a h_{i-1}`` per hypothesis.
        va_x: (n, r) ``V_a x_i`` per hypothesis.

    Returns:
        ``(alpha, uc)`` where ``uc`` is ``[U_u; U_r; U_h] c_i``.
    """
    q = rt.tanh(wh_a + va_x, flags.use_lut_activations)
    proj = None
    if flags.use_precomputed_attention:
        if cache.att_proj is None:
            raise ShapeError("precomputed attention requested but cache lacks projections")
        proj = cache.att_proj
    return attend(q, cache.att_keys, cache.annotations, rt.att_gru.U, proj,
                  flags.use_quant16)


def context_vectors(alpha, cache):
    """``c_i = sum_j alpha_ij s_j`` for each row of ``alpha``."""
    c = np.empty((alpha.shape[0], cache.annotations.shape[1]), dtype=np.float32)
    _kernels.weighted_rows(np.ascontiguousarray(alpha, dtype=np.float32), cache.annotations, c)
    return c


def att_gru_step(rt, h_prev, prev_ids, cache, flags=StepFlags(), gather=None):
    """One attentional GRU step for a batch of hypotheses.

    Args:
        h_prev: previous states. With ``gather`` these are the unique states
            and hypothesis ``j`` uses row ``gather[j]``; otherwise one row per
            hypothesis.
        prev_ids: (n,) previously emitted target ids (the inputs ``x_i``).

    Returns:
        ``(h_i, alpha)`` with shapes (n, r) and (n, |S|).
    """
    prev_ids = np.asarray(prev_ids, dtype=np.int64)
    n = prev_ids.shape[0]
    pack = rt.att_gru
    r = pack.hidden
    rows = _rows(n) if gather is None else np.asarray(gather, dtype=np.int64)
    if h_prev.shape[1] != r:
        raise ShapeError(f"h_prev has width {h_prev.shape[1]}, expected {r}")
    wh = pack.W(h_prev, flags.use_quant16)
    wh_a = wh[rows, 3 * r:]
    x = rt.trg_emb[prev_ids]
    vx = _input_products(pack, rt.pre.trg, rt.pre.k_trg, rt.trg_emb, prev_ids, flags)
    va_x = rt.V_a(x, flags.use_quant16)
    alpha, uc = attention_step(rt, wh_a, va_x, cache, flags)
    h = rt.gru_update(pack, wh, rows, vx, uc, h_prev, rows, flags.use_lut_activations)
    return h, alpha


def fc_stack_apply(rt, h_B, flags=StepFlags(), top_prev=None, collect=None):
    """Residual FC stack and top layer.

    Layer 1 is ``relu(W1 h_B)``; an odd layer ``l >= 3`` adds the output of
    layer ``l - 2`` before its relu; even layers have no skip. relu is clipped
    to [0, 10]. The top is ``tanh(W_T h_N)`` or a plain GRU whose previous
    state is ``top_prev``.

    Args:
        collect: optional list that receives ``h^1 .. h^N``.

    Returns:
        ``(h_T, top_state)``; ``top_state`` is None for an FC top.
    """
    outs = [h_B]
    for layer, lin in enumerate(rt.fc, start=1):
        z = lin(outs[-1], flags.use_quant16)
        if layer >= 3 and layer % 2 == 1:
            z = z + outs[-2]
        np.maximum(z, np.float32(0.0), out=z)
        np.minimum(z, np.float32(RELU_CAP), out=z)
        outs.append(z)
    if collect is not None:
        collect.extend(outs[1:])
    h_N = outs[-1]
    if rt.top_fc is not None:
        return rt.tanh(rt.top_fc(h_N, flags.use_quant16), flags.use_lut_activations), None
    pack = rt.top_gru
    n = h_N.shape[0]
    if top_prev is None:
        top_prev = np.zeros((n, pack.hidden), dtype=np.float32)
    rows = _rows(n)
    wh = pack.W(top_prev, flags.use_quant16)
    vx = pack.V(h_N, flags.use_quant16)
    h = rt.gru_update(pack, wh, rows, vx, None, top_prev, rows, flags.use_lut_activations)
    return h, h


class Shortlist:
    """Output rows restricted to a sorted candidate id list."""

    def __init__(self, rt, candidate_ids):
        ids = np.asarray(candidate_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError("candidate list must be non-empty")
        if ids.min() < 0 or ids.max() >= rt.spec.trg_vocab_size:
            raise InputError(f"candidate id out of range [0, {rt.spec.trg_vocab_size})")
        if ids.size > 1 and not (np.diff(ids) > 0).all():
            raise InputError("candidate ids must be sorted and unique")
        self.ids = ids
        self.lin = rt.out if ids.size == rt.spec.trg_vocab_size else rt.out.take_rows(ids)


def output_logits(rt, h_T, candidates, flags=StepFlags()):
    """Log-softmax over the candidate set for each row of ``h_T``.

    ``candidates`` is a :class:`Shortlist` or a sorted id sequence.
    """
    if not isinstance(candidates, Shortlist):
        candidates = Shortlist(rt, candidates)
    z = candidates.lin(np.asarray(h_T, dtype=np.float32), flags.use_quant16)
    z -= z.max(axis=1, keepdims=True)
    z -= np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z


def decoder_step(rt, h_prev, prev_ids, cache, shortlist, flags=StepFlags(),
                 gather=None, top_prev=None):
    """Full target step: attentional GRU, FC stack and scored output."""
    h, alpha = att_gru_step(rt, h_prev, prev_ids, cache, flags, gather)
    h_T, top = fc_stack_apply(rt, h, flags, top_prev)
    logits = output_logits(rt, h_T, shortlist, flags)
    return DecoderStepOut(h, alpha, h_T, logits, top)
