"""Command-line surface: tokenizer/pretrain/synth/convert/tune/generate/eval.

Every subcommand validates its inputs before creating any output file, logs
to stderr, and derives all randomness from --seed. Exit codes: 0 success,
1 input or contract error, 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import codec, corpus, evaluation, model, prompting, tokenizer
from .errors import ContractError, CorruptionError, SchemaError

log = logging.getLogger("clinprompt")

DEFAULTS = {
    "seed": 0,
    "steps": 300,
    "lr": 3e-3,
    "batch": 8,
    "prompt_len": 20,
    "init_mode": prompting.MODE_DIRECT,
    "mode": evaluation.MODE_STRICT,
    "max_new_tokens": 64,
    "vocab_size": 320,
    "d_model": 64,
    "n_layers": 2,
    "n_heads": 4,
    "d_ff": 256,
    "max_seq_len": 256,
    "count": 100,
}


def _read_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise SchemaError(f"{path}: line {number}: expected key=value, got {line!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args, key: str, cast=None):
    """Flag value if given, else config-file value, else the built-in default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    config = getattr(args, "_config_values", {})
    if key in config:
        raw = config[key]
        return cast(raw) if cast else raw
    return DEFAULTS[key]


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ContractError(f"input path does not exist: {p}")


def _read_corpus_lines(path: str) -> list[str]:
    if str(path).endswith(".jsonl"):
        instances = corpus.read_instances(path)
        return [f"{inst.input_text} {inst.target_text}" for inst in instances]
    with open(path, encoding="utf-8") as fh:
        return [line for line in fh.read().splitlines() if line.strip()]


def _tokenize_samples(instances, tok) -> list[prompting.TokenizedSample]:
    samples = []
    for inst in instances:
        samples.append(prompting.TokenizedSample(
            sample_id=inst.instance_id,
            input_ids=tok.encode(inst.input_text + " "),
            target_ids=tok.encode(inst.target_text) + [tokenizer.EOS_ID],
        ))
    return samples


def _write_loss_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for step, loss in rows:
            fh.write(f"{step}\t{loss:.10f}\n")


def cmd_tokenizer(args) -> int:
    _require_files(args.corpus)
    vocab_size = _resolve(args, "vocab_size", int)
    text = "\n".join(_read_corpus_lines(args.corpus))
    tok = tokenizer.train_tokenizer(text, vocab_size, args.tokenizer_mode)
    tok.save(args.out)
    log.info("trained %s tokenizer with %d tokens -> %s", tok.mode, tok.vocab_size, args.out)
    return 0


def cmd_pretrain(args) -> int:
    _require_files(args.corpus, args.tokenizer)
    tok = tokenizer.TokenizerModel.load(args.tokenizer)
    lines = _read_corpus_lines(args.corpus)
    if not lines:
        raise ContractError(f"corpus {args.corpus} holds no usable lines")
    config = model.ModelConfig(
        vocab_size=tok.vocab_size,
        d_model=_resolve(args, "d_model", int),
        n_layers=_resolve(args, "n_layers", int),
        n_heads=_resolve(args, "n_heads", int),
        d_ff=_resolve(args, "d_ff", int),
        max_seq_len=_resolve(args, "max_seq_len", int),
    )
    sequences = [tok.encode(line) + [tokenizer.EOS_ID] for line in lines]
    sequences = [seq for seq in sequences if len(seq) >= 2]
    result = model.pretrain_lm(sequences, config,
                               steps=_resolve(args, "steps", int),
                               lr=_resolve(args, "lr", float),
                               seed=_resolve(args, "seed", int),
                               batch_size=_resolve(args, "batch", int))
    model.save_model(args.out, result.weights)
    _write_loss_log(str(args.out) + ".losses.tsv", result.log)
    log.info("pretrained %d steps; holdout loss %.4f -> %.4f; saved %s",
             len(result.log), result.holdout_initial, result.holdout_final, args.out)
    return 0


def cmd_synth(args) -> int:
    spec = corpus.SyntheticSpec(task=args.task, count=_resolve(args, "count", int),
                                seed=_resolve(args, "seed", int))
    instances = corpus.generate_synthetic(spec)
    corpus.write_instances(args.out, instances)
    log.info("wrote %d %s instances -> %s", len(instances), args.task, args.out)
    return 0


def cmd_convert(args) -> int:
    _require_files(args.data)
    root = Path(args.data)
    text_files = sorted(root.glob("*.txt"))
    if not text_files:
        raise ContractError(f"no .txt documents under {root}")
    instances = []
    for text_path in text_files:
        ann_path = text_path.with_suffix(".ann")
        _require_files(ann_path)
        doc = corpus.load_standoff(text_path, ann_path)
        instances.extend(corpus.standoff_to_instances(doc, args.task))
    corpus.write_instances(args.out, instances)
    log.info("converted %d documents into %d instances -> %s",
             len(text_files), len(instances), args.out)
    return 0


def cmd_tune(args) -> int:
    _require_files(args.model, args.tokenizer, args.data)
    weights = model.load_model(args.model)
    tok = tokenizer.TokenizerModel.load(args.tokenizer)
    instances = corpus.read_instances(args.data)
    config = prompting.TuningConfig(
        prompt_length=_resolve(args, "prompt_len", int),
        learning_rate=_resolve(args, "lr", float),
        steps=_resolve(args, "steps", int),
        batch_size=_resolve(args, "batch", int),
        seed=_resolve(args, "seed", int),
        init_mode=_resolve(args, "init_mode"),
    )
    samples = _tokenize_samples(instances, tok)
    prompt = prompting.init_prompt(config.init_mode, config.prompt_length,
                                   weights.config.d_model, config.seed)
    result = prompting.tune(weights, prompt, samples, config)
    prompting.save_prompt(args.out, result.prompt)
    _write_loss_log(str(args.out) + ".losses.tsv", result.log)
    log.info("tuned %d steps; dataset loss %.4f -> %.4f; base digest stable (%s)",
             config.steps, result.initial_loss, result.final_loss,
             result.digest_after[:12])
    return 0


def cmd_generate(args) -> int:
    _require_files(args.model, args.prompt, args.tokenizer, args.data)
    weights = model.load_model(args.model)
    prompt = prompting.load_prompt(args.prompt)
    tok = tokenizer.TokenizerModel.load(args.tokenizer)
    instances = corpus.read_instances(args.data)
    budget = _resolve(args, "max_new_tokens", int)
    rows = []
    for inst in instances:
        result = prompting.infer(weights, prompt, tok.encode(inst.input_text + " "),
                                 budget, tokenizer.EOS_ID)
        rows.append((inst.instance_id, tok.decode(result.token_ids), result.truncated))
    corpus.write_generations(args.out, rows)
    log.info("generated %d outputs -> %s", len(rows), args.out)
    return 0


def cmd_eval(args) -> int:
    _require_files(args.data, args.generations, args.lexicon)
    instances = corpus.read_instances(args.data)
    generations = corpus.read_generations(args.generations)
    lexicon = codec.Lexicon.load(args.lexicon) if args.lexicon else corpus.default_lexicon()
    report = evaluation.score_instances(instances, generations,
                                        mode=_resolve(args, "mode"), lexicon=lexicon)
    out = Path(args.out)
    out.write_text(evaluation.render_report_text(report), encoding="utf-8")
    table_path = out.with_suffix(out.suffix + ".tsv") if out.suffix != ".tsv" else out
    table_path = Path(str(out) + ".tsv")
    table_path.write_text(evaluation.render_report_table(report), encoding="utf-8")
    print(f"micro precision={report.precision:.4f} recall={report.recall:.4f} "
          f"f1={report.f1:.4f}"
          + (f" accuracy={report.accuracy:.4f}" if report.accuracy is not None else ""))
    log.info("scored %d instances -> %s", report.instances, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clinprompt",
        description="Frozen toy GPT with trainable soft prompts and task codecs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; explicit flags win")
        p.add_argument("--seed", type=int, help="random seed (default 0)")

    p = sub.add_parser("tokenizer", help="train a tokenizer on a text or instance corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--tokenizer-mode", default=tokenizer.MODE_BPE,
                   choices=[tokenizer.MODE_BPE, tokenizer.MODE_WORD])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer)

    p = sub.add_parser("pretrain", help="pretrain the frozen base model")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("synth", help="generate synthetic task instances")
    common(p)
    p.add_argument("--task", required=True,
                   choices=list(codec.ALL_TASKS) + [corpus.TASK_LABEL_COPY])
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert standoff documents to instances")
    common(p)
    p.add_argument("--data", required=True, help="directory of .txt/.ann pairs")
    p.add_argument("--task", required=True,
                   choices=[codec.TASK_CONCEPTS, codec.TASK_RELATIONS])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("tune", help="tune a soft prompt against a frozen model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", help="informational; instances carry their task")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--init-mode", dest="init_mode",
                   choices=[prompting.MODE_DIRECT, prompting.MODE_LSTM])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("generate", help="greedy generation for each instance")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generations against instance gold")
    common(p)
    p.add_argument("--task", help="informational; instances carry their task")
    p.add_argument("--data", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--mode", choices=[evaluation.MODE_STRICT, evaluation.MODE_RELAXED])
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config_values = _read_config_file(getattr(args, "config", None))
        return args.func(args)
    except (ContractError, SchemaError, CorruptionError, OSError) as exc:
        log.error("%s", exc)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
