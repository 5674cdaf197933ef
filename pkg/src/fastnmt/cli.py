"""Command line entry point: ``fastnmt {decode,bench,verify,gen-model,...}``.

Exit codes: 0 success, 1 usage or input error, 2 model or file-format
error, 3 verification below threshold.
"""

import argparse
import json
import os
import platform
import sys
import time

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .compute import OPT_ORDER, StepFlags
from .decoder import StageTimes
from .estimator import BeamSearchTranslator, check_sentences, count_target_words
from .exceptions import FormatError, InputError, ModelValidationError
from .model import (ModelSpec, generate_random_lex, generate_random_model,
                    generate_random_sentences, load_model, save_model)

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class _ModelLoadError(Exception):
    pass


def _delta(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("delta must be > 0 (inf disables early stopping)")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_decode_flags(p, with_output=True):
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--input", required=True, help="one tokenized sentence per line")
    if with_output:
        p.add_argument("--output", default="-", help="output file (default stdout)")
    p.add_argument("--beam", type=_positive, default=6)
    p.add_argument("--delta", type=_delta, default=3.0)
    p.add_argument("--lex", help="lexical table: source TAB target TAB prob")
    p.add_argument("--cand-per-word", type=_positive, default=20)
    p.add_argument("--nbest", type=_positive, default=1)
    p.add_argument("--opts", default="none",
                   help="all | none | comma list of " + ",".join(OPT_ORDER))
    p.add_argument("--precompute-k", type=int, default=8000)
    p.add_argument("--ensemble", action="append", default=[], metavar="MODEL",
                   help="extra model averaged into the scores (repeatable)")
    p.add_argument("--replace-unk", action="store_true")


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise InputError(f"{path}: no sentences")
    return lines


def _translator(args, opts=None):
    StepFlags.parse(opts or args.opts)
    if args.precompute_k < 0:
        raise InputError("--precompute-k must be non-negative")
    try:
        models = [load_model(p) for p in [args.model] + args.ensemble]
    except (OSError, FormatError, ModelValidationError) as exc:
        raise _ModelLoadError(str(exc)) from exc
    tr = BeamSearchTranslator(models[0], models[1:], args.lex, args.beam, args.delta,
                              args.nbest, opts or args.opts, args.precompute_k,
                              args.cand_per_word, replace_unk=args.replace_unk)
    return tr.fit()


def _format(tr, results, sents):
    out = []
    for i, (r, s) in enumerate(zip(results, sents)):
        if tr.nbest == 1:
            out.append(" ".join(tr._words(r.best, s)))
        else:
            for e in r.nbest:
                out.append(f"{i} ||| {' '.join(tr._words(e, s))} ||| {e.logscore:.6f}")
    return out


def cmd_decode(args):
    sents = check_sentences(_read_lines(args.input))
    tr = _translator(args)
    lines = _format(tr, tr.decode(sents), sents)
    text = "".join(ln + "\n" for ln in lines)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def host_descriptor():
    name = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"cpu": name, "machine": platform.machine(), "logical_cpus": os.cpu_count(),
            "python": platform.python_version(), "numpy": np.__version__}


def ladder(opts):
    """Cumulative flag configurations, ``none`` first, ending at ``opts``."""
    target = StepFlags.parse(opts)
    on = [n for n in OPT_ORDER if n in target.names.split(",")]
    return ["none"] + [",".join(on[:i + 1]) for i in range(len(on))]


def run_bench(tr, sents, configs, repeat):
    """Time each flag configuration over ``repeat`` passes after a warm-up.

    Passes are interleaved across configurations so slow drifts in machine
    speed affect every configuration alike.
    """
    twins = {c: tr.with_opts(c) for c in configs}
    outputs = {c: [] for c in configs}
    stats = {c: {"words": 0, "wall": 0.0, "times": StageTimes()} for c in configs}
    with threadpool_limits(1):
        for c in configs:
            twins[c].decode(sents)
        for _ in range(repeat):
            for c in configs:
                times = StageTimes()
                t0 = time.perf_counter()
                res = twins[c].decode(sents, times=times)
                wall = time.perf_counter() - t0
                st = stats[c]
                st["words"] += count_target_words(res)
                st["wall"] += wall
                st["times"].add(times)
                outputs[c].append([r.best.token_ids for r in res])
    base = None
    rows = []
    for c in configs:
        st = stats[c]
        wps = st["words"] / st["wall"]
        base = base or wps
        t = st["times"]
        rows.append({
            "opts": c, "words": st["words"], "wall_s": st["wall"],
            "words_per_sec": wps, "speedup": wps / base,
            "encode_us": t.encode * 1e6, "target_us": t.target * 1e6,
            "output_us": t.output * 1e6,
            "repeat_identical": all(o == outputs[c][0] for o in outputs[c]),
        })
    return rows


def _kv(d):
    parts = []
    for k, v in d.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, bool):
            v = str(v).lower()
        parts.append(f"{k}={v}")
    return " ".join(parts)


def cmd_bench(args):
    sents = check_sentences(_read_lines(args.input))
    tr = _translator(args)
    configs = ladder(args.opts) if args.ladder else [tr.config_.flags.names]
    rows = run_bench(tr, sents, configs, args.repeat)
    report = {"sentences": len(sents), "repeat": args.repeat, "beam": args.beam,
              "threads": 1, "host": host_descriptor(), "configs": rows}
    lines = [_kv({"sentences": len(sents), "repeat": args.repeat, "beam": args.beam,
                  "threads": 1})]
    lines.append(_kv({f"host.{k}": str(v).replace(" ", "_")
                      for k, v in report["host"].items()}))
    lines += [_kv(r) for r in rows]
    text = "\n".join(lines) + "\n" + json.dumps(report, indent=2) + "\n"
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def compare_runs(ref, ref_trace, test, test_trace):
    """Token identity and per-step log-prob distance between two runs."""
    same = sum(a.best.token_ids == b.best.token_ids for a, b in zip(ref, test))
    max_diff = 0.0
    for ta, tb in zip(ref_trace, test_trace):
        for key in ta.keys() & tb.keys():
            a, b = ta[key], tb[key]
            if a.shape == b.shape:
                max_diff = max(max_diff, float(np.max(np.abs(a.astype(np.float64) - b))))
    return same / max(len(ref), 1), max_diff


def run_verify(tr, sents, opts, attribution=True):
    """Decode with flags off, then with ``opts``; optionally each flag alone."""
    ref_trace = []
    ref = tr.with_opts("none").decode(sents, trace=ref_trace)

    def versus(o):
        trace = []
        res = tr.with_opts(o).decode(sents, trace=trace)
        frac, diff = compare_runs(ref, ref_trace, res, trace)
        return {"opts": o, "identical_fraction": frac, "max_logit_diff": diff}

    names = StepFlags.parse(opts).names
    summary = versus(names)
    table = []
    if attribution and "," in names:
        table = [versus(n) for n in names.split(",")]
    return summary, table


def cmd_verify(args):
    sents = check_sentences(_read_lines(args.input))
    tr = _translator(args)
    flags = tr.config_.flags
    threshold = args.min_identical
    if threshold is None:
        threshold = 0.99 if flags.use_quant16 else 0.999
    summary, table = run_verify(tr, sents, flags.names, not args.no_attribution)
    ok = summary["identical_fraction"] >= threshold
    report = {"sentences": len(sents), **summary, "min_identical": threshold,
              "passed": ok, "attribution": table}
    lines = [_kv({"sentences": len(sents), **summary, "min_identical": threshold,
                  "passed": ok})]
    lines += [_kv({"flag": r["opts"], "identical_fraction": r["identical_fraction"],
                   "max_logit_diff": r["max_logit_diff"]}) for r in table]
    text = "\n".join(lines) + "\n" + json.dumps(report, indent=2) + "\n"
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK if ok else EXIT_VERIFY


def _parse_quantize(text):
    try:
        fw, fa = (int(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"--quantize expects FRAC_W,FRAC_A, got {text!r}") from None
    return fw, fa


def cmd_gen_model(args):
    with open(args.spec, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise InputError(f"{args.spec}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{args.spec}: expected a mapping of spec fields")
    spec = ModelSpec.from_mapping(data)
    model = generate_random_model(spec, args.seed)
    if args.quantize:
        fw, fa = _parse_quantize(args.quantize)
        try:
            model = model.quantize(fw, fa)
        except ValueError as exc:
            raise InputError(f"--quantize: {exc}") from None
    save_model(model, args.out)
    return EXIT_OK


def _load_for_gen(path):
    try:
        return load_model(path)
    except (OSError, FormatError, ModelValidationError) as exc:
        raise _ModelLoadError(str(exc)) from exc


def cmd_gen_corpus(args):
    model = _load_for_gen(args.model)
    lines = generate_random_sentences(model.vocab_src, args.n, args.seed,
                                      args.min_len, args.max_len)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("".join(ln + "\n" for ln in lines))
    return EXIT_OK


def cmd_gen_lex(args):
    model = _load_for_gen(args.model)
    lines = generate_random_lex(model.vocab_src, model.vocab_trg, args.seed, args.per_word)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("".join(ln + "\n" for ln in lines))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="fastnmt", description="Fast CPU decoding for attentional GRU models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decode", help="translate a file")
    _add_decode_flags(d)
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bench", help="measure words/sec")
    _add_decode_flags(b, with_output=False)
    b.add_argument("--repeat", type=_positive, default=1, help="timed corpus passes")
    b.add_argument("--report", help="also write the report here")
    b.add_argument("--ladder", action="store_true",
                   help="time every cumulative prefix of the flags, starting from none")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="compare flags-on against flags-off output")
    _add_decode_flags(v, with_output=False)
    v.add_argument("--min-identical", type=float, default=None)
    v.add_argument("--report")
    v.add_argument("--no-attribution", action="store_true",
                   help="skip the per-flag table")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-model", help="write a seeded random model")
    g.add_argument("--spec", required=True, help="YAML file with ModelSpec fields")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--quantize", metavar="FRAC_W,FRAC_A")
    g.set_defaults(func=cmd_gen_model)

    c = sub.add_parser("gen-corpus", help="write seeded random source sentences")
    c.add_argument("--model", required=True)
    c.add_argument("--n", type=_positive, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--min-len", type=_positive, default=5)
    c.add_argument("--max-len", type=_positive, default=20)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_gen_corpus)

    x = sub.add_parser("gen-lex", help="write a seeded random lexical table")
    x.add_argument("--model", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--per-word", type=_positive, default=25)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_gen_lex)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (_ModelLoadError, FormatError, ModelValidationError) as exc:
        print(f"fastnmt: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (InputError, ValueError, OSError) as exc:
        print(f"fastnmt: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
