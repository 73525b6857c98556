"""Command-line entry points binding the pipeline together.

Subcommands: train, segment, templates, generate, eval, inspect.  Every flag
can also be given in a key=value config file (--config); explicit flags win
on conflict.  Exit codes: 0 ok, 2 input error, 3 checkpoint error,
4 infeasibility.
"""

import argparse
import logging
import multiprocessing
import os
import sys
from types import SimpleNamespace

from .data import (
    CorpusError,
    Example,
    group_by_mr,
    index_corpus,
    load_e2e_csv,
    load_jsonl,
    parse_e2e_mr,
    tokenize,
)
from .evalkit import bleu, rouge_l
from .generation import (
    GenerationError,
    generate_best,
    generation_row,
    load_generations,
    write_generations,
)
from .inference import InfeasibleError, segmentation_to_text
from .model import CheckpointError, load_checkpoint
from .templates import (
    extract_templates,
    load_templates,
    map_segmentation,
    render_template,
    save_templates,
    state_profiles,
)
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("seggen.cli")


class CliError(Exception):
    """Bad invocation or bad input file; maps to exit code 2."""


class Flag:
    def __init__(self, name, type_, default, help_, required=False):
        self.name = name
        self.type = type_
        self.default = default
        self.help = help_
        self.required = required

    @property
    def attr(self):
        return self.name.replace("-", "_")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(text, flag):
    if flag.type is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise CliError(f"config key {flag.name!r}: expected a boolean, got {text!r}")
    try:
        return flag.type(text)
    except ValueError:
        raise CliError(
            f"config key {flag.name!r}: expected {flag.type.__name__}, got {text!r}"
        ) from None


def read_config(path):
    """key=value lines; '#' starts a comment, blank lines are skipped."""
    if not os.path.exists(path):
        raise CliError(f"no such config file: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path} line {line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(args, flags):
    """Merge explicit flags over config-file values over built-in defaults."""
    by_attr = {f.attr: f for f in flags}
    from_file = {}
    if getattr(args, "config", None):
        from_file = read_config(args.config)
        for key in from_file:
            if key not in by_attr:
                raise CliError(f"unknown config key {key!r}")
    merged = {}
    for attr, flag in by_attr.items():
        value = getattr(args, attr)
        if value is None and attr in from_file:
            value = _coerce(from_file[attr], flag)
        if value is None:
            value = flag.default
        if value is None and flag.required:
            raise CliError(f"missing required flag --{flag.name}")
        merged[attr] = value
    return SimpleNamespace(**merged)


# --- shared helpers ---------------------------------------------------------


def load_examples(path, allow_mr_lines=False):
    if not os.path.exists(path):
        raise CliError(f"no such file: {path}")
    if path.endswith(".jsonl"):
        return load_jsonl(path)
    if path.endswith(".csv"):
        return load_e2e_csv(path)
    if allow_mr_lines:
        examples = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                examples.append(
                    Example(
                        records=parse_e2e_mr(line, line_no=line_no),
                        tokens=[],
                        meta={"mr": line.strip()},
                    )
                )
        return examples
    raise CliError(f"cannot tell the format of {path} (expected .csv or .jsonl)")


_STATE = {}


def _segment_one(i):
    return map_segmentation(_STATE["model"], _STATE["corpus"][i])


def _generate_one(i):
    model = _STATE["model"]
    ex = _STATE["corpus"][i]
    src = model.encode_kb(ex.records)
    return generate_best(model, src, _STATE["templates"], beam=_STATE["beam"])


def parallel_map(fn, n, jobs):
    """Order-preserving map over range(n), forking workers when jobs > 1."""
    if jobs <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        log.warning("fork unavailable; running on one worker")
        return [fn(i) for i in range(n)]
    with ctx.Pool(processes=min(jobs, n)) as pool:
        return pool.map(fn, range(n), chunksize=max(1, n // (jobs * 4)))


def segment_examples(model, corpus, jobs):
    index_corpus(corpus, model.vocab, model.cfg.max_len)
    _STATE["model"] = model
    _STATE["corpus"] = corpus
    return parallel_map(_segment_one, len(corpus), jobs)


def write_lines(path, lines):
    if path is None:
        for line in lines:
            print(line)
        return
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# --- commands ---------------------------------------------------------------

COMMON_FLAGS = [
    Flag("config", str, None, "key=value file mirroring the flags; flags win"),
    Flag("seed", int, 0, "seed for every stochastic choice"),
    Flag("jobs", int, 1, "workers for per-example stages (segment/generate)"),
]

TRAIN_FLAGS = [
    Flag("data", str, None, "training corpus (.csv with mr,ref or .jsonl)", required=True),
    Flag("valid", str, None, "validation corpus; default holds out every 10th training example"),
    Flag("out", str, None, "directory for checkpoints and metrics.csv", required=True),
    Flag("k-base", int, None, "number of base states", required=True),
    Flag("dup", int, 1, "copies of each base state (total states = k-base * dup)"),
    Flag("d", int, 300, "embedding/hidden width"),
    Flag("max-len", int, 4, "maximum segment length"),
    Flag("autoregressive", bool, False, "condition each token on the full history"),
    Flag("lr", float, 0.5, "SGD learning rate"),
    Flag("decay", float, 0.5, "learning-rate factor applied once validation stalls"),
    Flag("batch-size", int, 32, "examples per gradient step"),
    Flag("epochs", int, 10, "maximum training epochs"),
    Flag("dropout", float, 0.0, "dropout rate on input representations"),
    Flag("min-count", int, 1, "minimum token count for the generation vocabulary"),
    Flag("m1", int, 64, "transition factor rank (state side)"),
    Flag("m2", int, 32, "transition factor rank (source side)"),
    Flag("m3", int, 64, "transition projection width"),
    Flag("type-buckets", int, 64, "hash buckets for record types"),
    Flag("value-buckets", int, 512, "hash buckets for record values"),
    Flag("resume", str, None, "checkpoint to continue training from"),
]


def cmd_train(ns):
    corpus = load_examples(ns.data)
    if not corpus:
        raise CliError(f"{ns.data} holds no examples")
    if ns.valid:
        valid = load_examples(ns.valid)
        if not valid:
            raise CliError(f"{ns.valid} holds no examples")
    else:
        valid = corpus[9::10]
        if valid:
            corpus = [ex for i, ex in enumerate(corpus) if i % 10 != 9]
        else:
            valid = list(corpus)
        log.info("no --valid given; holding out %d examples", len(valid))
    cfg = TrainConfig(
        k_base=ns.k_base,
        duplication=ns.dup,
        d=ns.d,
        max_len=ns.max_len,
        autoregressive=ns.autoregressive,
        lr=ns.lr,
        decay=ns.decay,
        batch_size=ns.batch_size,
        max_epochs=ns.epochs,
        dropout_rate=ns.dropout,
        seed=ns.seed,
        m1=ns.m1,
        m2=ns.m2,
        m3=ns.m3,
        type_buckets=ns.type_buckets,
        value_buckets=ns.value_buckets,
        min_count=ns.min_count,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise CliError(str(e)) from None
    log.info(
        "training a %d-state model (%d base x %d) on %d examples",
        cfg.k_base * cfg.duplication, cfg.k_base, cfg.duplication, len(corpus),
    )
    result = train(corpus, valid, cfg, ns.out, resume=ns.resume)
    print(f"checkpoint,{result.checkpoint_path}")
    print(f"metrics,{result.metrics_path}")
    return 0


SEGMENT_FLAGS = [
    Flag("checkpoint", str, None, "trained model checkpoint", required=True),
    Flag("data", str, None, "corpus to segment (.csv or .jsonl)", required=True),
    Flag("out", str, None, "output file; default stdout"),
]


def cmd_segment(ns):
    model, _ = load_checkpoint(ns.checkpoint)
    corpus = load_examples(ns.data)
    segs = segment_examples(model, corpus, ns.jobs)
    lines = []
    for ex, seg in zip(corpus, segs):
        if seg is None:
            log.warning("no feasible segmentation for %r", " ".join(ex.tokens))
            lines.append("")
        else:
            lines.append(segmentation_to_text(seg, ex.tokens))
    write_lines(ns.out, lines)
    return 0


TEMPLATES_FLAGS = [
    Flag("checkpoint", str, None, "trained model checkpoint", required=True),
    Flag("data", str, None, "corpus to extract templates from", required=True),
    Flag("out", str, None, "write templates as JSON lines to this file"),
    Flag("top", int, 100, "keep the N most frequent templates"),
]


def cmd_templates(ns):
    model, _ = load_checkpoint(ns.checkpoint)
    corpus = load_examples(ns.data)
    segs = segment_examples(model, corpus, ns.jobs)
    templates = extract_templates(corpus, model, top_n=ns.top, segmentations=segs)
    profiles = state_profiles(corpus, segs)
    for t in templates:
        print(f"{t.count}\t{render_template(t, profiles)}")
    if ns.out:
        save_templates(ns.out, templates, profiles)
        log.info("wrote %d templates to %s", len(templates), ns.out)
    return 0


GENERATE_FLAGS = [
    Flag("checkpoint", str, None, "trained model checkpoint", required=True),
    Flag("templates", str, None, "template file from the templates command", required=True),
    Flag("data", str, None, "inputs: .csv (mr,ref), .jsonl, or one MR per line", required=True),
    Flag("beam", int, 5, "beam width"),
    Flag("template-id", int, None, "force one template (0-based line number)"),
    Flag("out", str, None, "write generations as JSON lines to this file"),
    Flag("text-out", str, None, "write plain generated sentences, one per line"),
]


def cmd_generate(ns):
    model, _ = load_checkpoint(ns.checkpoint)
    try:
        templates = load_templates(ns.templates)
    except FileNotFoundError:
        raise CliError(f"no such file: {ns.templates}") from None
    if not templates:
        raise CliError(f"{ns.templates} holds no templates")
    if ns.template_id is not None:
        if not 0 <= ns.template_id < len(templates):
            raise CliError(
                f"--template-id {ns.template_id} out of range "
                f"(file holds {len(templates)} templates)"
            )
        templates = [templates[ns.template_id]]
    corpus = load_examples(ns.data, allow_mr_lines=True)
    _STATE.update(model=model, corpus=corpus, templates=templates, beam=ns.beam)
    results = parallel_map(_generate_one, len(corpus), ns.jobs)
    lines = [r.text() for r in results]
    if ns.out:
        write_generations(ns.out, [generation_row(i, r) for i, r in enumerate(results)])
    if ns.text_out:
        write_lines(ns.text_out, lines)
    if not ns.out and not ns.text_out:
        write_lines(None, lines)
    return 0


EVAL_FLAGS = [
    Flag("pred", str, None, "hypotheses: plain text (one per line) or generation .jsonl", required=True),
    Flag("refs", str, None,
         "references: .csv grouped by identical MRs, or plain text "
         "(blank-line-separated groups; one group per line if no blanks)",
         required=True),
    Flag("text-out", str, None, "also write the hypotheses as plain text"),
]


def read_predictions(path):
    if not os.path.exists(path):
        raise CliError(f"no such file: {path}")
    if path.endswith(".jsonl"):
        return [tokenize(row["text"]) for row in load_generations(path)]
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh.read().splitlines()]


def read_references(path):
    if not os.path.exists(path):
        raise CliError(f"no such file: {path}")
    if path.endswith(".csv") or path.endswith(".jsonl"):
        _, references = group_by_mr(load_examples(path))
        return references
    with open(path, encoding="utf-8") as fh:
        content = fh.read()
    lines = content.splitlines()
    if any(not line.strip() for line in lines):
        groups = []
        current = []
        for line in lines + [""]:
            if line.strip():
                current.append(tokenize(line))
            elif current:
                groups.append(current)
                current = []
        return groups
    return [[tokenize(line)] for line in lines]


def cmd_eval(ns):
    hyps = read_predictions(ns.pred)
    refs = read_references(ns.refs)
    if len(hyps) != len(refs):
        raise CliError(
            f"{len(hyps)} hypotheses but {len(refs)} reference groups"
        )
    if not hyps:
        raise CliError("nothing to score")
    print(f"bleu,{bleu(refs, hyps):.6f}")
    print(f"rouge_l,{rouge_l(refs, hyps):.6f}")
    if ns.text_out:
        write_lines(ns.text_out, [" ".join(h) for h in hyps])
    return 0


INSPECT_FLAGS = [
    Flag("checkpoint", str, None, "checkpoint to describe", required=True),
]


def cmd_inspect(ns):
    model, train_state = load_checkpoint(ns.checkpoint)
    cfg = model.cfg
    n_params = sum(p.values.size for p in model.named_params().values())
    rows = [
        ("k_base", cfg.k_base),
        ("dup", cfg.dup),
        ("states", cfg.K),
        ("d", cfg.d),
        ("max_len", cfg.max_len),
        ("autoregressive", cfg.autoregressive),
        ("vocab", len(model.vocab)),
        ("parameters", n_params),
    ]
    for key in ("epoch", "lr"):
        if key in train_state:
            rows.append((key, train_state[key]))
    for key, value in rows:
        print(f"{key},{value}")
    return 0


COMMANDS = {
    "train": (TRAIN_FLAGS, cmd_train, "fit a model and write checkpoints"),
    "segment": (SEGMENT_FLAGS, cmd_segment, "write bracketed MAP segmentations"),
    "templates": (TEMPLATES_FLAGS, cmd_templates, "extract frequent state sequences"),
    "generate": (GENERATE_FLAGS, cmd_generate, "beam-search text for new inputs"),
    "eval": (EVAL_FLAGS, cmd_eval, "score predictions against references"),
    "inspect": (INSPECT_FLAGS, cmd_inspect, "describe a checkpoint"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="seggen",
        description="Template-aware data-to-text generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (flags, fn, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        for f in COMMON_FLAGS + flags:
            opt = "--" + f.name
            if f.type is bool:
                sp.add_argument(opt, action="store_true", default=None, help=f.help)
            else:
                sp.add_argument(opt, type=f.type, default=None, help=f.help)
        sp.set_defaults(_flags=COMMON_FLAGS + flags, _fn=fn)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        ns = resolve(args, args._flags)
        return args._fn(ns)
    except CliError as e:
        log.error("%s", e)
        return 2
    except CorpusError as e:
        log.error("%s", e)
        return 2
    except CheckpointError as e:
        log.error("%s", e)
        return 3
    except (GenerationError, InfeasibleError) as e:
        log.error("%s", e)
        return 4
    except TrainingError as e:
        log.error("%s", e)
        return 1
    except ValueError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
