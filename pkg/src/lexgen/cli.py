"""Command-line entry point: ``lexgen {synth,split,train,predict,eval,ablate,analyze}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal assertion.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    EOS_ID,
    DatasetSplits,
    LexiconEntry,
    SynthConfig,
    Vocab,
    detokenize,
    parse_lexicon,
    split_ddst,
    split_iddt,
    split_idst,
    synth_fixture,
    tokenize,
    write_lexicon,
)
from .decoding import beam_search
from .errors import ConfigError, DataError, LexGenError, ParseError, UsageError
from .evaluation import (
    AlignmentSet,
    ChrfConfig,
    evaluate,
    intersection_analysis,
    read_translit_table,
    transliteration_rate,
)
from .training import TrainConfig, train
from .transformer import ModelConfig, Transformer, prepare_source

log = logging.getLogger("lexgen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
PRESETS = ("toy", "paper_scale")


# ---------------------------------------------------------------- run configuration


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    beam: int = 5
    topk: int = 3
    max_len: int = 32
    alpha: float = 1.0

    def __post_init__(self):
        if self.beam < 1 or self.topk < 1 or self.max_len < 1:
            raise ConfigError("beam, topk and max_len must be >= 1")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    preset: str
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    tokenizer: str = "char"
    paths: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def resolve(cls, raw: dict | None = None) -> "RunConfig":
        """Merge user overrides onto a preset. Unknown keys at any level are rejected."""
        raw = dict(raw or {})
        allowed = {"preset", "model", "train", "decode", "tokenizer", "paths"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = raw.get("preset", "toy")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
        if preset == "toy":
            model_base, train_base = ModelConfig.toy().to_dict(), TrainConfig.toy().to_dict()
        else:
            model_base, train_base = ModelConfig.paper_scale().to_dict(), TrainConfig.paper_scale().to_dict()
        model = ModelConfig.from_dict({**model_base, **raw.get("model", {})})
        tcfg = TrainConfig.from_dict({**train_base, **raw.get("train", {})})
        dec_raw = raw.get("decode", {})
        dec_unknown = set(dec_raw) - {f.name for f in dataclasses.fields(DecodeConfig)}
        if dec_unknown:
            raise ConfigError(f"unknown decode config keys: {sorted(dec_unknown)}")
        decode = DecodeConfig(**dec_raw)
        tokenizer = raw.get("tokenizer", "char")
        if tokenizer not in ("char", "word"):
            raise ConfigError(f"tokenizer must be 'char' or 'word', got {tokenizer!r}")
        return cls(preset, model, tcfg, decode, tokenizer, dict(raw.get("paths", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls.resolve({})
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.resolve(raw)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "decode": dataclasses.asdict(self.decode),
            "tokenizer": self.tokenizer,
            "paths": self.paths,
        }

    def write(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        (Path(out_dir) / "config.resolved.json").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- shared helpers


def _entries(path) -> list[LexiconEntry]:
    return parse_lexicon(path)


def _csv(value: str | None) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def _read_predictions(path) -> dict:
    """Map entry id (or source string when no id column) -> hypotheses in rank order."""
    rows: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if lineno == 1 and cols[0] in ("id", "source"):
                continue
            try:
                if len(cols) == 5:
                    key, rank, hyp = int(cols[0]), int(cols[2]), cols[3]
                elif len(cols) == 4:
                    key, rank, hyp = cols[0], int(cols[1]), cols[2]
                else:
                    raise ValueError
            except ValueError:
                raise ParseError("prediction rows need: [id,] source, rank, hypothesis, score", str(path), lineno) from None
            rows.setdefault(key, []).append((rank, hyp))
    return {k: [h for _, h in sorted(v)] for k, v in rows.items()}


def _align_predictions(preds: dict, refs: Sequence[LexiconEntry]) -> list[list[str]]:
    out = []
    for i, e in enumerate(refs):
        hyps = preds.get(i)
        if hyps is None:
            hyps = preds.get(e.source, [])
        out.append(hyps)
    return out


def predict_entries(model: Transformer, vocab: Vocab, entries: Sequence[LexiconEntry], beam: int, max_len: int, alpha: float):
    before = vocab.unk_count
    results = []
    for e in entries:
        src = prepare_source(e.tgt_lang, e.source, vocab)
        hyps = beam_search(model, src, beam, max_len, alpha)
        results.append([(detokenize(h.body(EOS_ID), vocab), h.score) for h in hyps])
    unk = vocab.unk_count - before
    if unk:
        log.warning("%d source symbols were not in the vocabulary and became <unk>", unk)
    return results


def write_predictions(path, entries: Sequence[LexiconEntry], results, topk: int) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tsource\trank\thypothesis\tscore\n")
        for i, (e, hyps) in enumerate(zip(entries, results)):
            for rank, (text, score) in enumerate(hyps[:topk], start=1):
                fh.write(f"{i}\t{e.source}\t{rank}\t{text}\t{score:.6f}\n")


def run_training(cfg: RunConfig, splits: DatasetSplits, out_dir: Path) -> dict:
    """Train one model and save its best checkpoint under ``out_dir/checkpoint``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.build([*splits.train, *splits.valid, *splits.test], level=cfg.tokenizer)
    model_cfg = cfg.model.replace(vocab_size=len(vocab))
    resolved = dataclasses.replace(cfg, model=model_cfg)
    resolved.write(out_dir)
    model = Transformer.init(model_cfg, cfg.train.seed)
    result = train(model, splits, cfg.train, vocab)
    result.log.write(out_dir)
    save_checkpoint(
        model,
        vocab,
        out_dir / "checkpoint",
        {
            "step": result.best_step,
            "val_loss": _finite_or_none(result.best_val_loss),
            "stop_reason": result.stop_reason,
            "decode": dataclasses.asdict(cfg.decode),
        },
    )
    return {"model": model, "vocab": vocab, "result": result}


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_domains=args.n_domains, n_langs=args.n_langs, n_pairs_per_cell=args.pairs_per_cell)
    entries = synth_fixture(args.seed, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_lexicon(entries, args.out)
    log.info("wrote %d entries to %s", len(entries), args.out)
    return EXIT_OK


def cmd_split(args) -> int:
    if args.regime == "idst" and (args.train_domains or args.test_domains or args.train_langs or args.test_langs):
        raise UsageError("idst takes no domain or language lists")
    if args.regime == "ddst" and (not args.train_domains or not args.test_domains):
        raise UsageError("ddst needs --train-domains and --test-domains")
    if args.regime == "iddt" and (not args.train_langs or not args.test_langs):
        raise UsageError("iddt needs --train-langs and --test-langs")
    entries = _entries(args.lexicon)
    if args.regime == "idst":
        splits = split_idst(entries, args.seed)
    elif args.regime == "ddst":
        splits = split_ddst(entries, _csv(args.train_domains), _csv(args.test_domains), args.seed)
    else:
        splits = split_iddt(entries, _csv(args.train_langs), _csv(args.test_langs), args.seed)
    splits.provenance["lexicon"] = str(args.lexicon)
    meta = splits.write(args.out)
    log.info("split counts: %s", meta["counts"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    cfg = dataclasses.replace(cfg, paths={**cfg.paths, "splits": str(args.splits), "out": str(args.out)})
    splits = DatasetSplits.read(args.splits)
    out = run_training(cfg, splits, Path(args.out))
    res = out["result"]
    print(f"best_val_loss\t{res.best_val_loss:.6f}\nbest_step\t{res.best_step}\nstop_reason\t{res.stop_reason}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    # flags win over the decode settings recorded at training time
    saved = DecodeConfig(**ckpt.meta.get("decode", {}))
    dec = DecodeConfig(
        beam=args.beam if args.beam is not None else saved.beam,
        topk=args.topk if args.topk is not None else saved.topk,
        max_len=args.max_len if args.max_len is not None else saved.max_len,
        alpha=args.alpha if args.alpha is not None else saved.alpha,
    )
    if dec.topk > dec.beam:
        raise UsageError(f"topk {dec.topk} exceeds beam {dec.beam}")
    entries = _entries(args.input)
    results = predict_entries(ckpt.model, ckpt.vocab, entries, dec.beam, dec.max_len, dec.alpha)
    write_predictions(args.out, entries, results, dec.topk)
    return EXIT_OK


def cmd_eval(args) -> int:
    refs = _entries(args.ref)
    preds = _align_predictions(_read_predictions(args.pred), refs)
    report = evaluate(refs, preds, ChrfConfig())
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    with (out / "per_example.tsv").open("w", encoding="utf-8") as fh:
        fh.write("id\tdomain\tlang_pair\tsource\tprediction\tchrf\texact\n")
        for r in report.per_example:
            fh.write(f"{r['id']}\t{r['domain']}\t{r['lang_pair']}\t{r['source']}\t{r['prediction']}\t{r['chrf']:.4f}\t{r['exact']}\n")
    if args.report_json:
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    sys.stderr.write(report.to_table())
    o = report.overall
    picks = {
        "chrf": [("chrf", o.chrf_mean)],
        "p1": [("p_at_1", o.p_at_1)],
        "recall": [("r_at_1", o.r_at_1), ("r_at_3", o.r_at_3)],
    }
    chosen = picks[args.metric] if args.metric else [kv for v in picks.values() for kv in v]
    for k, v in chosen:
        print(f"{k}\t{v:.4f}")
    return EXIT_OK


def _ablate_one(job: tuple) -> dict:
    cfg_dict, splits_dir, position, seed, out_dir = job
    cfg = RunConfig.resolve(cfg_dict)
    cfg = dataclasses.replace(
        cfg,
        model=cfg.model.replace(dr_position=position),
        train=dataclasses.replace(cfg.train, seed=seed),
    )
    splits = DatasetSplits.read(splits_dir)
    run = run_training(cfg, splits, Path(out_dir))
    test = splits.test
    chrf = p1 = float("nan")
    if test:
        results = predict_entries(run["model"], run["vocab"], test, cfg.decode.beam, cfg.decode.max_len, cfg.decode.alpha)
        report = evaluate(test, [[h for h, _ in r] for r in results])
        chrf, p1 = report.overall.chrf_mean, report.overall.p_at_1
    return {
        "position": position,
        "seed": seed,
        "val_loss": run["result"].best_val_loss,
        "test_chrf": chrf,
        "test_p1": p1,
        "n_test": len(test),
    }


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    positions = _csv(args.positions)
    seeds = [int(s) for s in _csv(args.seeds)]
    if not positions or not seeds:
        raise UsageError("--positions and --seeds must be non-empty")
    for p in positions:
        cfg.model.replace(dr_position=p)  # validates the name early
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    jobs = [(cfg.to_dict(), str(args.splits), p, s, str(out / f"{p}_seed{s}")) for p in positions for s in seeds]
    workers = max(1, int(os.environ.get("LEXGEN_THREADS", "1")))
    if workers == 1:
        rows = [_ablate_one(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    with (out / "ablation.tsv").open("w", encoding="utf-8") as fh:
        fh.write("position\tseed\tval_loss\ttest_chrf\ttest_p1\tn_test\n")
        for r in rows:
            fh.write(f"{r['position']}\t{r['seed']}\t{r['val_loss']:.6f}\t{r['test_chrf']:.4f}\t{r['test_p1']:.4f}\t{r['n_test']}\n")
    for p in positions:
        vals = [r["test_chrf"] for r in rows if r["position"] == p]
        sys.stderr.write(f"{p:12s} mean test ChrF++ {np.mean(vals):.2f} over {len(vals)} seeds\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.mode == "intersection":
        for flag in ("train", "test", "pred"):
            if not getattr(args, flag):
                raise UsageError(f"--mode intersection needs --{flag}")
        train_entries = _entries(args.train)
        test_entries = _entries(args.test)
        preds = _align_predictions(_read_predictions(args.pred), test_entries)
        top1 = [p[0] if p else "" for p in preds]
        aligns = AlignmentSet.read_tsv(args.align) if args.align else None
        table = read_translit_table(args.translit) if args.translit else None
        res = intersection_analysis(train_entries, test_entries, top1, aligns, table)
        d = res.as_dict()
        lines = [f"{k}\t{'N/A' if v is None else (f'{v:.4f}' if isinstance(v, float) else v)}" for k, v in d.items()]
    elif args.mode == "translit":
        if not args.pairs or not args.table:
            raise UsageError("--mode translit needs --pairs and --table")
        res = transliteration_rate(_entries(args.pairs), read_translit_table(args.table))
        rate = "N/A" if res.rate is None else f"{res.rate:.4f}"
        lines = [f"rate\t{rate}", f"transliterated\t{res.transliterated}", f"covered\t{res.covered}", f"uncovered\t{res.uncovered}"]
    else:
        if not args.ckpt or not args.input:
            raise UsageError("--mode gates needs --ckpt and --input")
        ckpt = load_checkpoint(args.ckpt)
        if not ckpt.model.routing.gated:
            raise UsageError(f"checkpoint has dr_position={ckpt.model.config.dr_position}; no gates to export")
        lines = ["id\tposition\ttoken\tblock\tsite\tgate"]
        for i, e in enumerate(_entries(args.input)):
            src = prepare_source(e.tgt_lang, e.source, ckpt.vocab)
            tgt = tokenize(e.targets[0], ckpt.vocab)
            tgt_in = [2, *tgt]
            shown = [*tgt, EOS_ID]
            for rec in ckpt.model.gate_trace(src, tgt_in):
                for pos, g in enumerate(rec["gate"][0]):
                    tok = ckpt.vocab.tokens[shown[pos]]
                    lines.append(f"{i}\t{pos}\t{tok}\t{rec['block']}\t{rec['site']}\t{g:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lexgen", description="Domain-routed lexicon generation toolkit")
    parser.add_argument("--version", action="version", version=f"lexgen {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multi-domain lexicon")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-domains", type=int, default=2)
    p.add_argument("--n-langs", type=int, default=2)
    p.add_argument("--pairs-per-cell", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="create IDST/DDST/IDDT splits")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--regime", required=True, choices=("idst", "ddst", "iddt"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-domains")
    p.add_argument("--test-domains")
    p.add_argument("--train-langs")
    p.add_argument("--test-langs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a split directory")
    p.add_argument("--config")
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="beam-decode a lexicon TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--metric", choices=("chrf", "p1", "recall"))
    p.add_argument("--report-json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every (routing position, seed) combination")
    p.add_argument("--config")
    p.add_argument("--splits", required=True)
    p.add_argument("--positions", default="after_san,after_can,shared_only,none")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="intersection analysis, gate export, transliteration rate")
    p.add_argument("--mode", required=True, choices=("intersection", "gates", "translit"))
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--pred")
    p.add_argument("--align")
    p.add_argument("--translit")
    p.add_argument("--ckpt")
    p.add_argument("--input")
    p.add_argument("--pairs")
    p.add_argument("--table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        sys.stderr.write(f"lexgen: error: {exc}\n")
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        sys.stderr.write(f"lexgen: data error: {exc}\n")
        return EXIT_DATA
    except (AssertionError, LexGenError) as exc:
        sys.stderr.write(f"lexgen: internal error: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
