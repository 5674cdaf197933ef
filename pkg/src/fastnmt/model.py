"""Model parameters, binary model files, vocabularies and lexical tables.

Tensor naming used in model files::

    src.emb, trg.emb                         embeddings (vocab x embed_dim)
    src.l{L}.{fwd,bwd}.{W,V}_{u,r,h}, b_*    source bidirectional GRU layers
    trg.att_gru.{W,V,U}_{u,r,h}, b_*         attentional target GRU
    trg.att.{W_a,V_a,U_a}                    attention projections
    trg.fc{l}.W                              FC stack, l = 1..N
    trg.top.W | trg.top_gru.*                top layer (fc-tanh or gru)
    trg.out.V                                output projection
    q16/<name>                               quantized twin of <name>
    meta.spec                                decode-time settings (see below)
"""

import io
import struct
from collections import OrderedDict
from dataclasses import MISSING, dataclass, field, fields, replace

import numpy as np

from . import quant
from .exceptions import FormatError, InputError, ModelValidationError
from .tensor import matmul_nt

BOS_ID, EOS_ID, UNK_ID = 0, 1, 2
SPECIAL_TOKENS = ("<s>", "</s>", "<unk>")

MAGIC = b"NMTD"
VERSION = 1
TAG_F32, TAG_Q16 = 0, 1
QUANT_PREFIX = "q16/"
META_NAME = "meta.spec"
INIT_RANGE = 0.1

TOP_LAYERS = ("fc-tanh", "gru")
CANDIDATE_ACTIVATIONS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class ModelSpec:
    """Network hyperparameters.

    ``src_hidden`` is the width of one bidirectional layer; each direction
    holds half of it. ``fc_dim`` is one width for every FC layer or a
    per-layer sequence. ``top_dim`` defaults to ``trg_hidden``.
    """

    src_vocab_size: int
    trg_vocab_size: int
    embed_dim: int
    src_layers: int
    src_hidden: int
    trg_hidden: int
    fc_layers: int = 0
    fc_dim: object = 0
    top_layer: str = "fc-tanh"
    top_dim: int = 0
    precompute_k: int = 8000
    candidate_activation: str = "tanh"

    def __post_init__(self):
        # canonical form is one width per layer, so equal networks compare equal
        if isinstance(self.fc_dim, list):
            object.__setattr__(self, "fc_dim", tuple(self.fc_dim))
        elif isinstance(self.fc_dim, (int, np.integer)) and isinstance(
                self.fc_layers, (int, np.integer)) and self.fc_layers >= 0:
            object.__setattr__(self, "fc_dim", (int(self.fc_dim),) * self.fc_layers)
        if not self.top_dim:
            object.__setattr__(self, "top_dim", self.trg_hidden)
        self.check()

    def check(self):
        """Raise :class:`InputError` naming the first invalid field."""
        def bad(name, why):
            err = InputError(f"spec field '{name}': {why}")
            err.field = name
            raise err

        for name in ("src_vocab_size", "trg_vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= len(SPECIAL_TOKENS):
                bad(name, f"must be an integer > {len(SPECIAL_TOKENS)}, got {v!r}")
        for name in ("embed_dim", "src_layers", "trg_hidden", "top_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                bad(name, f"must be a positive integer, got {v!r}")
        if not isinstance(self.src_hidden, (int, np.integer)) or self.src_hidden <= 0 \
                or self.src_hidden % 2:
            bad("src_hidden", f"must be a positive even integer, got {self.src_hidden!r}")
        if not isinstance(self.fc_layers, (int, np.integer)) or self.fc_layers < 0:
            bad("fc_layers", f"must be a non-negative integer, got {self.fc_layers!r}")
        if self.fc_layers:
            dims = self.fc_dims
            if len(dims) != self.fc_layers or any(
                    not isinstance(d, (int, np.integer)) or d <= 0 for d in dims):
                bad("fc_dim", f"need {self.fc_layers} positive widths, got {self.fc_dim!r}")
            for layer in range(3, self.fc_layers + 1, 2):
                if dims[layer - 1] != dims[layer - 3]:
                    bad("fc_dim", f"layer {layer} adds a skip from layer {layer - 2}: "
                                  f"width {dims[layer - 1]} != {dims[layer - 3]}")
        if self.top_layer not in TOP_LAYERS:
            bad("top_layer", f"must be one of {TOP_LAYERS}, got {self.top_layer!r}")
        if not isinstance(self.precompute_k, (int, np.integer)) or self.precompute_k < 0:
            bad("precompute_k", f"must be a non-negative integer, got {self.precompute_k!r}")
        if self.candidate_activation not in CANDIDATE_ACTIVATIONS:
            bad("candidate_activation",
                f"must be one of {CANDIDATE_ACTIVATIONS}, got {self.candidate_activation!r}")

    @property
    def fc_dims(self):
        if self.fc_layers == 0:
            return ()
        if isinstance(self.fc_dim, (tuple, list)):
            return tuple(self.fc_dim)
        return (self.fc_dim,) * self.fc_layers

    @property
    def src_dir_hidden(self):
        return self.src_hidden // 2

    @classmethod
    def from_mapping(cls, data):
        """Build from a parsed YAML/JSON mapping, naming unknown fields."""
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                err = InputError(f"spec field '{key}': unknown field")
                err.field = key
                raise err
        for f in fields(cls):
            if f.default is MISSING and f.name not in data:
                err = InputError(f"spec field '{f.name}': required")
                err.field = f.name
                raise err
        return cls(**data)


def _gru_shapes(prefix, hidden, in_dim, ctx_dim=None):
    shapes = OrderedDict()
    for g in "urh":
        shapes[f"{prefix}.W_{g}"] = (hidden, hidden)
    for g in "urh":
        shapes[f"{prefix}.V_{g}"] = (hidden, in_dim)
    if ctx_dim is not None:
        for g in "urh":
            shapes[f"{prefix}.U_{g}"] = (hidden, ctx_dim)
    for g in "urh":
        shapes[f"{prefix}.b_{g}"] = (hidden,)
    return shapes


def expected_shapes(spec):
    """Ordered ``name -> shape`` map of every float tensor a model holds."""
    shapes = OrderedDict()
    e, hd, r = spec.embed_dim, spec.src_dir_hidden, spec.trg_hidden
    shapes["src.emb"] = (spec.src_vocab_size, e)
    shapes["trg.emb"] = (spec.trg_vocab_size, e)
    for layer in range(spec.src_layers):
        in_dim = e if layer == 0 else spec.src_hidden
        for d in ("fwd", "bwd"):
            shapes.update(_gru_shapes(f"src.l{layer}.{d}", hd, in_dim))
    shapes.update(_gru_shapes("trg.att_gru", r, e, spec.src_hidden))
    shapes["trg.att.W_a"] = (r, r)
    shapes["trg.att.V_a"] = (r, e)
    shapes["trg.att.U_a"] = (r, spec.src_hidden)
    prev = r
    for layer, width in enumerate(spec.fc_dims, start=1):
        shapes[f"trg.fc{layer}.W"] = (width, prev)
        prev = width
    if spec.top_layer == "fc-tanh":
        shapes["trg.top.W"] = (spec.top_dim, prev)
    else:
        shapes.update(_gru_shapes("trg.top_gru", spec.top_dim, prev))
    shapes["trg.out.V"] = (spec.trg_vocab_size, spec.top_dim)
    return shapes


def is_weight_matrix(name):
    """True for tensors that are multiplied (and so get quantized twins)."""
    return not (name.endswith(".emb") or ".b_" in name or name.startswith("meta."))


class Vocab:
    """Token table; ids 0/1/2 are sentence-start, sentence-end and unk."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIAL_TOKENS:
            raise FormatError(f"vocabulary must start with {SPECIAL_TOKENS}, "
                              f"got {tuple(tokens[:3])}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, words):
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @classmethod
    def synthetic(cls, size, prefix):
        return cls(list(SPECIAL_TOKENS) + [f"{prefix}{i}" for i in range(3, size)])

    @classmethod
    def from_file(cls, path):
        """One token per line; line number is the id."""
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


@dataclass(eq=False)
class GruWeights:
    """One GRU layer; ``U_*`` are present only for the attentional layer."""

    W_u: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    V_u: np.ndarray
    V_r: np.ndarray
    V_h: np.ndarray
    b_u: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    U_u: np.ndarray = None
    U_r: np.ndarray = None
    U_h: np.ndarray = None

    @classmethod
    def from_tensors(cls, tensors, prefix):
        names = [f.name for f in fields(cls)]
        return cls(**{n: tensors.get(f"{prefix}.{n}") for n in names})


@dataclass(eq=False)
class AttentionWeights:
    W_a: np.ndarray
    V_a: np.ndarray
    U_a: np.ndarray


@dataclass(eq=False)
class Model:
    """Full parameter set plus vocabularies.

    ``tensors`` maps canonical names to float32 arrays and is the single
    source of truth; the structured views below are built from it.
    ``quantized`` maps the same names to :class:`~fastnmt.quant.QuantMatrix`
    twins when the model has been quantized.
    """

    spec: ModelSpec
    tensors: "OrderedDict[str, np.ndarray]"
    vocab_src: Vocab
    vocab_trg: Vocab
    quantized: dict = field(default_factory=dict)
    frac_bits_a: int = None

    def __post_init__(self):
        self.validate()

    # structured views
    @property
    def src_embeddings(self):
        return self.tensors["src.emb"]

    @property
    def trg_embeddings(self):
        return self.tensors["trg.emb"]

    @property
    def src_fwd(self):
        return [GruWeights.from_tensors(self.tensors, f"src.l{i}.fwd")
                for i in range(self.spec.src_layers)]

    @property
    def src_bwd(self):
        return [GruWeights.from_tensors(self.tensors, f"src.l{i}.bwd")
                for i in range(self.spec.src_layers)]

    @property
    def trg_att_gru(self):
        return GruWeights.from_tensors(self.tensors, "trg.att_gru")

    @property
    def attention(self):
        t = self.tensors
        return AttentionWeights(t["trg.att.W_a"], t["trg.att.V_a"], t["trg.att.U_a"])

    @property
    def fc_stack(self):
        return [self.tensors[f"trg.fc{i}.W"] for i in range(1, self.spec.fc_layers + 1)]

    @property
    def top_fc(self):
        return self.tensors.get("trg.top.W")

    @property
    def top_gru(self):
        if self.spec.top_layer != "gru":
            return None
        return GruWeights.from_tensors(self.tensors, "trg.top_gru")

    @property
    def output(self):
        return self.tensors["trg.out.V"]

    @property
    def is_quantized(self):
        return bool(self.quantized)

    def validate(self):
        """Cross-check every tensor against the spec.

        Raises:
            ModelValidationError: naming the first offending tensor.
        """
        spec = self.spec
        expected = expected_shapes(spec)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ModelValidationError(f"missing tensor {name}", tensor=name)
            arr = self.tensors[name]
            if arr.dtype != np.float32 or tuple(arr.shape) != shape:
                raise ModelValidationError(
                    f"tensor {name}: expected float32 {shape}, got {arr.dtype} {arr.shape}",
                    tensor=name)
            if not np.isfinite(arr).all():
                raise ModelValidationError(f"tensor {name} has non-finite values", tensor=name)
        for name in self.tensors:
            if name not in expected:
                raise ModelValidationError(f"unexpected tensor {name}", tensor=name)
        dims = spec.fc_dims
        for layer in range(3, spec.fc_layers + 1, 2):
            if dims[layer - 1] != dims[layer - 3]:
                name = f"trg.fc{layer}.W"
                raise ModelValidationError(
                    f"tensor {name}: output width {dims[layer - 1]} cannot take the skip "
                    f"from trg.fc{layer - 2}.W (width {dims[layer - 3]})", tensor=name)
        if len(self.vocab_src) != spec.src_vocab_size:
            raise ModelValidationError("source vocabulary size disagrees with src.emb",
                                       tensor="src.emb")
        if len(self.vocab_trg) != spec.trg_vocab_size:
            raise ModelValidationError("target vocabulary size disagrees with trg.emb",
                                       tensor="trg.emb")
        for name, qm in self.quantized.items():
            if name not in expected or not is_weight_matrix(name):
                raise ModelValidationError(f"quantized twin for unknown weight {name}",
                                           tensor=QUANT_PREFIX + name)
            if qm.shape != expected[name]:
                raise ModelValidationError(
                    f"quantized twin {name}: shape {qm.shape} != {expected[name]}",
                    tensor=QUANT_PREFIX + name)
            clipped = np.clip(self.tensors[name], -quant.WEIGHT_CLIP, quant.WEIGHT_CLIP)
            if np.abs(qm.dequantize() - clipped).max() > 2.0 ** -(qm.frac_bits_w + 1):
                raise ModelValidationError(
                    f"quantized twin {name} does not match its float weights",
                    tensor=QUANT_PREFIX + name)
        if self.quantized and self.frac_bits_a is None:
            raise ModelValidationError("quantized model lacks activation frac bits",
                                       tensor=META_NAME)

    def quantize(self, frac_bits_w=quant.DEFAULT_FRAC_BITS_W,
                 frac_bits_a=quant.DEFAULT_FRAC_BITS_A):
        """Return a copy carrying a quantized twin of every weight matrix."""
        if not 8 <= frac_bits_a <= 11:
            raise ValueError(f"frac_bits_a must be in [8, 11], got {frac_bits_a}")
        twins = {name: quant.quantize_weights(arr, frac_bits_w)
                 for name, arr in self.tensors.items() if is_weight_matrix(name)}
        return replace(self, quantized=twins, frac_bits_a=frac_bits_a)


def _spec_from_tensors(tensors, meta):
    def shape(name):
        if name not in tensors:
            raise ModelValidationError(f"missing tensor {name}", tensor=name)
        return tensors[name].shape

    src_vocab, e = shape("src.emb")
    trg_vocab = shape("trg.emb")[0]
    src_layers = 0
    while f"src.l{src_layers}.fwd.W_u" in tensors:
        src_layers += 1
    src_hidden = 2 * shape("src.l0.fwd.W_u")[0]
    r = shape("trg.att_gru.W_u")[0]
    fc = []
    while f"trg.fc{len(fc) + 1}.W" in tensors:
        fc.append(tensors[f"trg.fc{len(fc) + 1}.W"].shape[0])
    if "trg.top_gru.W_u" in tensors:
        top_layer, top_dim = "gru", shape("trg.top_gru.W_u")[0]
    else:
        top_layer, top_dim = "fc-tanh", shape("trg.top.W")[0]
    precompute_k, cand_sigmoid = 8000, False
    if meta is not None:
        precompute_k, cand_sigmoid = int(meta[0]), bool(meta[1])
    # Skip-width mismatches are reported against tensors by Model.validate.
    kwargs = dict(src_vocab_size=src_vocab, trg_vocab_size=trg_vocab, embed_dim=e,
                  src_layers=src_layers, src_hidden=src_hidden, trg_hidden=r,
                  fc_layers=len(fc), fc_dim=tuple(fc), top_layer=top_layer,
                  top_dim=top_dim, precompute_k=precompute_k,
                  candidate_activation="sigmoid" if cand_sigmoid else "tanh")
    spec = ModelSpec.__new__(ModelSpec)
    for k, v in kwargs.items():
        object.__setattr__(spec, k, v)
    return spec


def _meta_vector(model):
    return np.array([model.spec.precompute_k,
                     1.0 if model.spec.candidate_activation == "sigmoid" else 0.0,
                     model.frac_bits_a or 0], dtype=np.float32)


def _write_header(buf, name, tag, dims):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", tag, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))


def _write_vocab(buf, vocab):
    buf.write(struct.pack("<I", len(vocab)))
    for tok in vocab.tokens:
        raw = tok.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)


def model_to_bytes(model):
    """Serialise ``model``; identical models give identical bytes."""
    model.validate()
    entries = list(model.tensors.items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(entries) + len(model.quantized) + 1))
    for name, arr in entries:
        _write_header(buf, name, TAG_F32, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name in model.tensors:
        qm = model.quantized.get(name)
        if qm is None:
            continue
        _write_header(buf, QUANT_PREFIX + name, TAG_Q16, qm.shape)
        buf.write(struct.pack("<BI", qm.frac_bits_w, qm.layout_tag))
        buf.write(np.ascontiguousarray(qm.data, dtype="<i2").tobytes())
    meta = _meta_vector(model)
    _write_header(buf, META_NAME, TAG_F32, meta.shape)
    buf.write(meta.astype("<f4").tobytes())
    _write_vocab(buf, model.vocab_src)
    _write_vocab(buf, model.vocab_trg)
    return buf.getvalue()


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.context = "header"

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated while reading {self.context} "
                              f"(need {n} bytes at offset {self.pos}, have "
                              f"{len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_vocab(rd, which):
    rd.context = f"{which} vocabulary"
    (count,) = rd.unpack("<I")
    tokens = []
    for _ in range(count):
        (n,) = rd.unpack("<I")
        try:
            tokens.append(rd.take(n).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{which} vocabulary: invalid UTF-8") from exc
    return Vocab(tokens)


def model_from_bytes(data):
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise FormatError("not a model file: bad magic bytes")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    (count,) = rd.unpack("<I")
    tensors = OrderedDict()
    raw_quant = {}
    meta = None
    for idx in range(count):
        rd.context = f"tensor #{idx} header"
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8", errors="replace")
        rd.context = f"tensor {name}"
        tag, ndim = rd.unpack("<BB")
        dims = rd.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        if tag == TAG_F32:
            arr = np.frombuffer(rd.take(4 * size), dtype="<f4").astype(np.float32)
            arr = arr.reshape(dims)
            if name == META_NAME:
                meta = arr
            else:
                tensors[name] = arr
        elif tag == TAG_Q16:
            if ndim != 2:
                raise FormatError(f"tensor {name}: quantized tensors must be 2-D")
            frac, layout = rd.unpack("<BI")
            if layout != quant.LAYOUT_ROW_PANEL16:
                raise FormatError(f"tensor {name}: unknown layout tag {layout:#x}")
            rows, cols = dims
            padded = -(-cols // quant.PANEL) * quant.PANEL
            payload = np.frombuffer(rd.take(2 * rows * padded), dtype="<i2")
            qdata = payload.astype(np.int16).reshape(rows, padded)
            qdata.setflags(write=False)
            if not name.startswith(QUANT_PREFIX):
                raise FormatError(f"tensor {name}: quantized tensors must be named "
                                  f"{QUANT_PREFIX}<weight>")
            raw_quant[name[len(QUANT_PREFIX):]] = quant.QuantMatrix(
                rows, cols, frac, qdata, layout)
        else:
            raise FormatError(f"tensor {name}: unknown dtype tag {tag}")
    vocab_src = _read_vocab(rd, "source")
    vocab_trg = _read_vocab(rd, "target")
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes after vocabularies")
    spec = _spec_from_tensors(tensors, meta)
    frac_a = int(meta[2]) if meta is not None and raw_quant else None
    try:
        spec.check()
    except InputError as exc:
        # A structurally readable file whose widths break the spec rules.
        raise ModelValidationError(str(exc), tensor=_tensor_for_field(exc, spec)) from exc
    return Model(spec, tensors, vocab_src, vocab_trg, raw_quant, frac_a)


def _tensor_for_field(exc, spec):
    if getattr(exc, "field", None) == "fc_dim":
        dims = spec.fc_dims
        for layer in range(3, spec.fc_layers + 1, 2):
            if dims[layer - 1] != dims[layer - 3]:
                return f"trg.fc{layer}.W"
    return None


def load_model(path):
    """Read and fully validate a model file.

    Raises:
        FormatError: bad magic, version, or truncated/corrupt payload.
        ModelValidationError: readable but inconsistent tensors.
    """
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def generate_random_model(spec, seed):
    """Seeded model with weights uniform on [-0.1, 0.1] and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in expected_shapes(spec).items():
        if ".b_" in name:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
    return Model(spec, tensors, Vocab.synthetic(spec.src_vocab_size, "s"),
                 Vocab.synthetic(spec.trg_vocab_size, "t"))


@dataclass(eq=False)
class PrecomputedEmbeddings:
    """First-layer input products ``V_u x | V_r x | V_h x`` for frequent words.

    ``trg`` covers target ids ``0..k_trg-1`` with rows of width 3r;
    ``src_fwd``/``src_bwd`` cover source ids ``0..k_src-1`` for the first
    source layer in each direction.
    """

    k_trg: int
    k_src: int
    trg: np.ndarray
    src_fwd: np.ndarray
    src_bwd: np.ndarray

    @property
    def k(self):
        return self.k_trg

    @property
    def nbytes_trg(self):
        return self.trg.nbytes

    @property
    def nbytes_src(self):
        return self.src_fwd.nbytes + self.src_bwd.nbytes


def stacked_input_weights(model, prefix):
    t = model.tensors
    return np.ascontiguousarray(np.concatenate([t[f"{prefix}.V_{g}"] for g in "urh"]))


def build_precomputed_embeddings(model, k):
    """Precompute first-layer ``V x`` for the ``k`` most frequent words.

    Vocabularies are frequency-ordered, so the covered words are ids
    ``0..k-1``; ``k`` larger than a vocabulary is capped to its size.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    k_trg = min(k, model.spec.trg_vocab_size)
    k_src = min(k, model.spec.src_vocab_size)
    trg = matmul_nt(stacked_input_weights(model, "trg.att_gru"), model.trg_embeddings[:k_trg])
    src = model.src_embeddings[:k_src]
    fwd = matmul_nt(stacked_input_weights(model, "src.l0.fwd"), src)
    bwd = matmul_nt(stacked_input_weights(model, "src.l0.bwd"), src)
    for arr in (trg, fwd, bwd):
        arr.setflags(write=False)
    return PrecomputedEmbeddings(k_trg, k_src, trg, fwd, bwd)


@dataclass(eq=False)
class LexTable:
    """Per-source-word translation shortlists.

    Attributes:
        entries: source id -> [(target id, prob)], best first.
        top_n: list length cap.
        best_string: source word -> its most probable target word, over all
            lines including words outside either vocabulary (for unk replacement).
        skipped: lines whose source or target word was out of vocabulary.
    """

    entries: dict
    top_n: int = 20
    best_string: dict = field(default_factory=dict)
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def translations(self, src_id):
        return self.entries.get(src_id, [])


def load_lex_table(path, vocab_src, vocab_trg, top_n=20):
    """Parse a ``source TAB target TAB probability`` file.

    Raises:
        FormatError: malformed line, reported with its 1-based line number.
    """
    raw = {}
    best = {}
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                                  f"got {len(parts)}")
            src, trg, p = parts
            try:
                prob = float(p)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad probability {p!r}") from None
            if not 0.0 < prob <= 1.0:
                raise FormatError(f"{path}:{lineno}: probability {prob} outside (0, 1]")
            cur = best.get(src)
            if cur is None or prob > cur[1]:
                best[src] = (trg, prob)
            sid = vocab_src.index.get(src)
            tid = vocab_trg.index.get(trg)
            if sid is None or tid is None:
                skipped += 1
                continue
            raw.setdefault(sid, {})
            raw[sid][tid] = max(prob, raw[sid].get(tid, 0.0))
    entries = {sid: sorted(m.items(), key=lambda it: (-it[1], it[0]))[:top_n]
               for sid, m in raw.items()}
    return LexTable(entries, top_n, {s: t for s, (t, _) in best.items()}, skipped)


def generate_random_lex(vocab_src, vocab_trg, seed, per_word=25):
    """Seeded lexical table lines for synthetic models (one list per source word)."""
    rng = np.random.default_rng(seed)
    lines = []
    n_trg = len(vocab_trg)
    for sid in range(len(SPECIAL_TOKENS), len(vocab_src)):
        tids = rng.choice(np.arange(len(SPECIAL_TOKENS), n_trg),
                          size=min(per_word, n_trg - len(SPECIAL_TOKENS)), replace=False)
        probs = rng.dirichlet(np.ones(len(tids)))
        for tid, p in zip(tids, probs):
            p = max(float(p), 1e-6)
            lines.append(f"{vocab_src.tokens[sid]}\t{vocab_trg.tokens[tid]}\t{p:.6g}")
    return lines


def generate_random_sentences(vocab, n, seed, min_len=5, max_len=20):
    """Seeded sentences of ordinary (non-special) vocabulary words."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(len(SPECIAL_TOKENS), len(vocab), size=length)
        out.append(" ".join(vocab.tokens[i] for i in ids))
    return out
