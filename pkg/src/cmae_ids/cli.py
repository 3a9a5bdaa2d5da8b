"""Command-line entry point: ``cmae <command> ...``.

Every command takes one ``--seed`` where randomness is involved. Failures
print a single ``error: <Type>: <message>`` line to stderr and exit with 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig
from .embed import (EmbeddingMatrix, Word2VecParams, load_external_embeddings, random_normal_init,
                    save_embeddings, train_word2vec, xavier_init)
from .errors import CmaeError, InvalidSpec
from .evaluate import (ReportRow, confusion, emit_report, macro_metrics, per_class_table,
                       prediction_dump)
from .model import (CmaeConfig, build_model, count_parameters_for_config, desk_config,
                    llm_hex2tok_config, parameter_breakdown, predict_proba, xavier_cmae_config)
from .pcap import extract_pcap_payloads
from .tokenize import (Tokenizer, hex2int_map, load_hex2tok_map, load_subword_vocab)
from .train import (TrainConfig, encode_records, load_checkpoint, read_manifest, save_checkpoint,
                    tokenizer_from_manifest, tokenizer_manifest, train_loop)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _batch_size(text: str) -> int:
    v = int(text)
    if not 1 <= v <= 2048:
        raise argparse.ArgumentTypeError("batch size must lie in [1, 2048]")
    return v


# --------------------------------------------------------------------------
# gen / split / pcap-extract


def cmd_gen(args) -> int:
    if args.spec:
        spec = D.SyntheticSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    else:
        spec = D.desk_spec(args.divisor)
    records = D.generate_synthetic(spec, seed=args.seed)
    D.write_dataset(records, args.out)
    hist = D.class_histogram(records)
    print(f"wrote {len(records)} records to {args.out}")
    for c, n in hist.items():
        print(f"  {c.display_name:<12}{n:>8}")
    return 0


def cmd_split(args) -> int:
    records = D.load_dataset(args.input)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    split = D.stratified_split(records, ratios=ratios, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        D.write_dataset(part, out / f"{name}.csv")
    tr, va, te = split.sizes()
    print(f"train {tr}  validation {va}  test {te}  (seed {args.seed})")
    return 0


def cmd_pcap_extract(args) -> int:
    ext = extract_pcap_payloads(args.pcap)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "five_tuple", "hex_payload"])
        for r in ext.records:
            w.writerow([f"packet:{r.packet_index}", r.five_tuple, r.payload.hex()])
    reasons = ", ".join(f"{k}={v}" for k, v in sorted(ext.skip_reasons.items())) or "none"
    print(f"{ext.packets} packets, {len(ext)} payloads, {ext.skipped} skipped ({reasons})")
    return 0


# --------------------------------------------------------------------------
# word2vec


def cmd_w2v_train(args) -> int:
    records = D.load_dataset(args.input)
    params = Word2VecParams(dim=args.dim, window=args.window, min_count=args.min_count,
                            negative=args.negative, epochs=args.epochs)
    vocab, emb = train_word2vec([r.payload for r in records], params, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    vocab.token_map().save(out / "token_map.tsv")
    save_embeddings(emb, out / "embeddings.emb1", frozen=False)
    print(f"vocabulary {len(vocab)} tokens, embedding {emb.shape[0]}x{emb.shape[1]} -> {out}")
    return 0


# --------------------------------------------------------------------------
# train


def _tokenizer_and_embeddings(rc: RunConfig, seed: int):
    """Model-facing tokenizer, embedding shape, and the three matrices."""
    kind = rc["tokenizer.kind"]
    source = rc["embedding.source"]
    vocab_path = ""
    if kind == "hex2int":
        tok, selection = Tokenizer(hex2int_map(), name="hex2int"), None
    elif kind in ("hex2tok", "word2vec"):
        if not rc["tokenizer.map"]:
            raise InvalidSpec(f"tokenizer.kind = {kind} needs tokenizer.map")
        prov = "word2vec" if kind == "word2vec" else None
        tm = load_hex2tok_map(rc["tokenizer.map"], provenance=prov)
        if kind == "hex2tok":
            tok, selection = Tokenizer(tm.compacted(), name="hex2tok"), tm.selection()
        else:
            tok, selection = Tokenizer(tm, name="word2vec"), None
    elif kind == "subword":
        if not rc["tokenizer.vocab"]:
            raise InvalidSpec("tokenizer.kind = subword needs tokenizer.vocab")
        vocab_path = str(Path(rc["tokenizer.vocab"]).resolve())
        tok, selection = Tokenizer(subword=load_subword_vocab(vocab_path), name="subword"), None
    else:
        raise InvalidSpec(f"unknown tokenizer.kind {kind!r}")

    dim = int(rc["model.embedding_dim"])
    if source == "file":
        if not rc["embedding.file"]:
            raise InvalidSpec("embedding.source = file needs embedding.file")
        m = load_external_embeddings(rc["embedding.file"], selection)
        mats = [m] * 3
        vocab, dim = m.shape
    elif source in ("xavier", "normal"):
        vocab = tok.vocab_size
        make = xavier_init if source == "xavier" else random_normal_init
        mats = [make(vocab, dim, seed=seed * 3 + i) for i in range(3)]
    else:
        raise InvalidSpec(f"unknown embedding.source {source!r}")
    if vocab < tok.vocab_size:
        raise InvalidSpec(f"embedding has {vocab} rows, tokenizer needs {tok.vocab_size}")
    return tok, vocab, dim, mats, vocab_path


def _run_overrides(args) -> dict:
    ov = {
        "data.train": args.train, "data.validation": args.validation, "data.out_dir": args.out_dir,
        "train.epochs": args.epochs, "train.seed": args.seed, "train.batch_size": args.batch_size,
        "tokenizer.max_len": args.max_len,
    }
    for item in args.set or []:
        if "=" not in item:
            raise InvalidSpec(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def cmd_train(args) -> int:
    rc = RunConfig.resolve(args.config, _run_overrides(args))
    tc = rc.train_config()
    tok, vocab, dim, mats, vocab_path = _tokenizer_and_embeddings(rc, tc.seed)
    mc = rc.model_config(vocab_size=vocab, embedding_dim=dim)
    if rc["embedding.source"] == "file":
        mc.embedding_source = "word2vec" if rc["tokenizer.kind"] == "word2vec" else "external"
    if not rc["data.train"] or not rc["data.validation"]:
        raise InvalidSpec("data.train and data.validation are required")
    train = D.load_dataset(rc["data.train"])
    val = D.load_dataset(rc["data.validation"])
    split = D.DatasetSplit(train, val, [], tc.seed)

    out = Path(rc["data.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "resolved.cfg")
    model = build_model(mc, mats, seed=tc.seed)
    max_len = rc.max_len()

    def progress(epoch, h):
        print(f"epoch {epoch:>3}  train_loss {h.train_loss[-1]:.4f}  val_loss {h.val_loss[-1]:.4f}  "
              f"val_macro_acc {h.val_macro_acc[-1]:.4f}  lr {h.lr[-1]:.2e}  {h.seconds[-1]:.1f}s",
              flush=True)

    hist = train_loop(model, split, tc, tok, max_len=max_len, log_path=out / "history.csv",
                      progress=progress)
    extra = {f"train.{k}": v for k, v in tc.to_dict().items()}
    extra.update(tokenizer_manifest(tok, vocab_path))
    extra["run.tokenizer_max_len"] = max_len
    extra["run.train_seconds"] = sum(hist.seconds)
    save_checkpoint(model, out / "best.ckpt", extra)
    print(f"best epoch {hist.best_epoch}; checkpoint {out / 'best.ckpt'}; history {out / 'history.csv'}")
    return 0


# --------------------------------------------------------------------------
# eval / predict


def _load_for_inference(path):
    manifest = read_manifest(path)
    model = load_checkpoint(path)
    tok = tokenizer_from_manifest(manifest)
    ml = manifest.get("run.tokenizer_max_len", str(model.config.max_len))
    return model, tok, ("max" if ml == "max" else int(ml)), manifest


def _read_inputs(path):
    """Labeled dataset files give (ids, labels, records); a CSV with only a
    ``hex_payload`` column (e.g. from pcap-extract) gives labels of None."""
    with open(path, encoding="utf-8", newline="") as fh:
        header = next(csv.reader(fh), [])
    if "label" in header or str(path).endswith(".jsonl"):
        recs = D.load_dataset(path)
        return [r.source_id for r in recs], [int(r.label) for r in recs], [r.payload for r in recs]
    ids, payloads = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for n, row in enumerate(csv.DictReader(fh), start=2):
            if "hex_payload" not in row:
                raise D.MalformedRow(1, "input needs a hex_payload column")
            payloads.append(D.parse_hex_payload(row["hex_payload"].strip()))
            ids.append(row.get("source_id") or f"{Path(path).name}:{n}")
    return ids, [None] * len(ids), payloads


def _encode(tok: Tokenizer, payloads, max_len, model) -> np.ndarray:
    # a fixed width keeps predictions independent of batch composition
    width = model.config.max_len if max_len == "max" else max_len
    return tok.encode_batch(payloads, max_len=width, min_len=4)


def cmd_eval(args) -> int:
    model, tok, max_len, manifest = _load_for_inference(args.checkpoint)
    sids, labels, payloads = _read_inputs(args.data)
    if any(v is None for v in labels):
        raise InvalidSpec("eval needs labeled data (hex_payload,label)")
    x = _encode(tok, payloads, max_len, model)
    t0 = time.perf_counter()
    probs = predict_proba(model, x, args.batch)
    rate = len(x) / max(time.perf_counter() - t0, 1e-9)
    cm = confusion(probs.argmax(axis=1), labels)
    rep = macro_metrics(cm)
    hours = float(manifest.get("run.train_seconds", "0")) / 3600.0
    row = ReportRow(str(max_len), args.model_name, tok.name, rep, hours, rate)
    print(emit_report(row, "text"), end="")
    print(per_class_table(cm), end="")
    if args.out:
        Path(args.out).write_text(emit_report(row, "csv"), encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    model, tok, max_len, _ = _load_for_inference(args.checkpoint)
    sids, labels, payloads = _read_inputs(args.input)
    x = _encode(tok, payloads, max_len, model)
    t0 = time.perf_counter()
    probs = predict_proba(model, x, args.batch)
    elapsed = time.perf_counter() - t0
    text = prediction_dump(sids, labels, probs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    rate = len(x) / max(elapsed, 1e-9)
    print(f"predictions/second: {rate:.1f} ({len(x)} payloads, batch {args.batch})",
          file=sys.stderr if not args.out else sys.stdout)
    return 0


# --------------------------------------------------------------------------
# params / tokenize

PRESETS = {
    "xavier": lambda: xavier_cmae_config(),
    "hex2tok-frozen": lambda: llm_hex2tok_config(frozen=True),
    "hex2tok": lambda: llm_hex2tok_config(frozen=False),
    "subword-frozen": lambda: llm_hex2tok_config(frozen=True, vocab_size=32001),
    "subword": lambda: llm_hex2tok_config(frozen=False, vocab_size=32001),
    "desk": lambda: desk_config(),
}


def cmd_params(args) -> int:
    if args.config:
        rc = RunConfig.resolve(args.config)
        mc = rc.model_config()
    else:
        mc = PRESETS[args.preset]()
    kw = {}
    if args.vocab_size is not None:
        kw["vocab_size"] = args.vocab_size
    if args.embedding_dim is not None:
        kw["embedding_dim"] = args.embedding_dim
    if args.frozen is not None:
        kw["embeddings_frozen"] = args.frozen == "yes"
    if kw:
        mc = CmaeConfig.from_dict({**mc.to_dict(), **kw})
    trainable, frozen, total = count_parameters_for_config(mc)
    if args.breakdown:
        for name, n in parameter_breakdown(mc).items():
            print(f"{name:<24}{n:>14,}")
        print()
    print(f"{'trainable':<12}{trainable:>14,}")
    print(f"{'frozen':<12}{frozen:>14,}")
    print(f"{'total':<12}{total:>14,}")
    return 0


def cmd_tokenize(args) -> int:
    if args.tokenizer == "hex2int":
        tok = Tokenizer(hex2int_map())
    elif args.tokenizer == "subword":
        if not args.vocab:
            raise InvalidSpec("--tokenizer subword needs --vocab")
        tok = Tokenizer(subword=load_subword_vocab(args.vocab))
    else:
        tok = Tokenizer(load_hex2tok_map(args.tokenizer))
    payload = D.parse_hex_payload(args.hex.strip())
    seq = tok.encode(payload, args.max_len)
    print(json.dumps(seq.tolist()))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmae", description=__doc__, formatter_class=_Formatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter)
        sp.set_defaults(func=fn)
        return sp

    g = add("gen", cmd_gen, "generate a motif-based synthetic payload dataset (CSV)")
    g.add_argument("--spec", help="JSON corpus spec; default is the scaled-down desk spec")
    g.add_argument("--divisor", type=int, default=73, help="scale-down of the class totals when --spec is absent")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--out", required=True)

    s = add("split", cmd_split, "stratified train/validation/test split")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ratios", default="0.64,0.16,0.20", help="train,validation,test fractions")
    s.add_argument("--seed", type=int, default=0, help="shuffle seed")
    s.add_argument("--out-dir", required=True)

    w = add("w2v-train", cmd_w2v_train, "train skip-gram Word2Vec byte embeddings")
    w.add_argument("--in", dest="input", required=True)
    w.add_argument("--dim", type=int, default=64, help="embedding dimension")
    w.add_argument("--window", type=int, default=5, help="context window radius")
    w.add_argument("--min-count", type=int, default=5, help="drop tokens seen fewer times")
    w.add_argument("--negative", type=int, default=5, help="negative samples per pair")
    w.add_argument("--epochs", type=int, default=5, help="passes over the corpus")
    w.add_argument("--seed", type=int, default=0, help="sampling seed")
    w.add_argument("--out", required=True, help="output directory")

    tc = TrainConfig()
    t = add("train", cmd_train, "train a CMAE model; writes best.ckpt, history.csv and resolved.cfg")
    t.add_argument("--config", help="flat 'section.key = value' file")
    t.add_argument("--train", help="training CSV (data.train)")
    t.add_argument("--validation", help="validation CSV (data.validation)")
    t.add_argument("--out-dir", help="output directory (data.out_dir)")
    t.add_argument("--epochs", type=int, help=f"train.epochs (default {tc.epochs})")
    t.add_argument("--batch-size", type=int, help=f"train.batch_size (default {tc.batch_size})")
    t.add_argument("--seed", type=int, help=f"train.seed (default {tc.seed})")
    t.add_argument("--max-len", help="tokenizer.max_len: 1500, 3000 or max (default 1500)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=(f"override any config key, e.g. train.lr (default {tc.lr}), train.eps ({tc.eps}), "
                         f"train.weight_decay ({tc.weight_decay}), train.lr_factor ({tc.lr_factor}), "
                         f"train.lr_patience ({tc.lr_patience}), train.min_lr ({tc.min_lr}), "
                         f"train.early_stop_patience ({tc.early_stop_patience})"))

    e = add("eval", cmd_eval, "evaluate a checkpoint on labeled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch", type=_batch_size, default=256, help="inference batch size")
    e.add_argument("--model-name", default="CMAE", help="Model column of the report")
    e.add_argument("--out", help="also write the CSV report here")

    pr = add("predict", cmd_predict, "predict classes; reports predictions/second")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--batch", type=_batch_size, default=256, help="inference batch size (8-2048 typical)")
    pr.add_argument("--out", help="prediction dump CSV (stdout if omitted)")

    pa = add("params", cmd_params, "parameter counts (trainable / frozen / total)")
    pa.add_argument("--config", help="run config; overrides --preset")
    pa.add_argument("--preset", choices=sorted(PRESETS), default="xavier", help="named configuration")
    pa.add_argument("--vocab-size", type=int)
    pa.add_argument("--embedding-dim", type=int)
    pa.add_argument("--frozen", choices=("yes", "no"))
    pa.add_argument("--breakdown", action="store_true", help="per-layer counts")

    tk = add("tokenize", cmd_tokenize, "print the token IDs of one hex payload")
    tk.add_argument("--tokenizer", default="hex2int", help="hex2int, subword, or a byte-map file path")
    tk.add_argument("--vocab", help="subword vocabulary file")
    tk.add_argument("--hex", required=True)
    tk.add_argument("--max-len", type=int)

    pc = add("pcap-extract", cmd_pcap_extract, "extract TCP/UDP payloads from a classic pcap")
    pc.add_argument("--pcap", required=True)
    pc.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CmaeError, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
