"""Command-line surface: prepare, pretrain-embedding, train, decode, score,
flops.

Every config field is also a long flag (underscores become dashes); flags
override config-file values, and each run directory gets the resolved
snapshot (config.json) plus a run manifest. Timestamps live only in the
manifest, so every other artifact is byte-reproducible from equal inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import load_model
from .config import DecodeConfig, ModelConfig, TrainConfig, config_to_dict, load_configs
from .features import generate_corpus, load_manifest, load_normalized_split
from .inference import cost_report, decode_nbest, format_cost_table, score_corpus
from .tensor import Tensor
from .training import pretrain_embedding, train_joint

_CONFIG_SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("decode", DecodeConfig))
_FLAG_TYPES = {"int": int, "float": float, "str": str}


def _add_config_flags(parser, sections):
    for section, cls in _CONFIG_SECTIONS:
        if section not in sections:
            continue
        group = parser.add_argument_group(f"{section} config overrides")
        for field in dataclasses.fields(cls):
            flag = "--" + field.name.replace("_", "-")
            if field.type == "bool":
                group.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
            else:
                group.add_argument(flag, type=_FLAG_TYPES[field.type], default=None)


def _collect_overrides(args, sections):
    overrides = {}
    for section, cls in _CONFIG_SECTIONS:
        if section not in sections:
            continue
        for field in dataclasses.fields(cls):
            value = getattr(args, field.name, None)
            if value is not None:
                overrides[f"{section}.{field.name}"] = value
    return overrides


def _corpus_defaults(data_dir):
    """Model fields implied by the corpus inventory.

    Model vocabulary = corpus token inventory plus the sos/eos symbol.
    """
    with open(Path(data_dir) / "corpus.json", "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    return {
        "model.vocab_size": int(summary["vocab_size"]) + 1,
        "model.feat_dim": int(summary["feat_dim"]),
    }


def _resolve(args, sections, data_dir=None):
    overrides = _collect_overrides(args, sections)
    if "model" in sections and data_dir is not None:
        file_model = {}
        if args.config:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_model = json.load(fh).get("model", {})
        for key, value in _corpus_defaults(data_dir).items():
            field = key.split(".", 1)[1]
            if key not in overrides and field not in file_model:
                overrides[key] = value
    return load_configs(args.config, overrides, need=sections)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _snapshot(out_dir, model=None, train=None, decode=None):
    sections = {}
    for name, cfg in (("model", model), ("train", train), ("decode", decode)):
        if cfg is not None:
            sections[name] = config_to_dict(cfg)
    _write_json(Path(out_dir) / "config.json", sections)
    return sections


class _Manifest:
    """Records command, resolved config, seed, and wall-clock bounds."""

    def __init__(self, out_dir, command, config_snapshot, seed):
        self.out = Path(out_dir)
        self.body = {
            "command": command,
            "config": config_snapshot,
            "seed": seed,
            "started": datetime.now(timezone.utc).isoformat(),
        }

    def finish(self, **outputs):
        self.body["finished"] = datetime.now(timezone.utc).isoformat()
        self.body["outputs"] = outputs
        _write_json(self.out / "run_manifest.json", self.body)


def cmd_prepare(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out, "prepare",
                         {"num_utts": args.num_utts, "vocab_size": args.vocab_size,
                          "feat_dim": args.feat_dim}, args.seed)
    summary = generate_corpus(out, args.num_utts, args.vocab_size, args.seed,
                              feat_dim=args.feat_dim)
    manifest.finish(corpus="corpus.json")
    print(f"prepared {summary['train_utts']} train / {summary['dev_utts']} dev utterances"
          f" in {out}")
    return 0


def cmd_pretrain_embedding(args):
    model_cfg, train_cfg, _ = _resolve(args, ("model", "train"), args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = _snapshot(out, model=model_cfg, train=train_cfg)
    manifest = _Manifest(out, "pretrain-embedding", snapshot, train_cfg.seed)
    records, final = pretrain_embedding(args.data, out, model_cfg, train_cfg)
    manifest.finish(embedding="embedding.ckpt", metrics="metrics.jsonl",
                    checkpoints=len(records))
    print(f"pretraining finished: eval ctc {final.eval_ctc:.4f} nats/utt"
          f" at step {final.step}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg, _ = _resolve(args, ("model", "train"), args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = _snapshot(out, model=model_cfg, train=train_cfg)
    manifest = _Manifest(out, "train", snapshot, train_cfg.seed)
    records, final = train_joint(args.data, out, model_cfg, train_cfg,
                                 embedding_ckpt=args.embedding)
    manifest.finish(final="final.ckpt", metrics="metrics.jsonl",
                    checkpoints=len(records), final_step=final.step)
    print(f"training finished: best eval ctc {final.eval_ctc:.4f} nats/utt"
          f" at step {final.step}")
    return 0


def cmd_decode(args):
    _, _, decode_cfg = _resolve(args, ("decode",))
    model = load_model(args.checkpoint).eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, model=model.cfg, decode=decode_cfg)
    manifest = _Manifest(out, "decode",
                         {"model": config_to_dict(model.cfg),
                          "decode": config_to_dict(decode_cfg),
                          "checkpoint": str(args.checkpoint), "split": args.split},
                         None)
    seqs = load_normalized_split(args.data, args.split)
    with open(out / "nbest.jsonl", "w", encoding="utf-8") as fh:
        for seq in seqs:
            hyps = decode_nbest(model, Tensor(seq.feats), decode_cfg.beam,
                                decode_cfg.nbest, decode_cfg.mu)
            best = hyps[0]
            fh.write(json.dumps({
                "utt_id": seq.utt_id,
                "tokens": best.tokens,
                "ctc_score": best.ctc_score,
                "aed_score": best.aed_score,
                "combined": best.combined,
                "nbest": [dataclasses.asdict(h) for h in hyps],
            }) + "\n")
    manifest.finish(nbest="nbest.jsonl", utterances=len(seqs))
    print(f"decoded {len(seqs)} utterances from the {args.split} split")
    return 0


def cmd_score(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out, "score", {"hyps": str(args.hyps), "split": args.split}, None)
    references = {h.utt_id: h.tokens for h in
                  load_manifest(Path(args.data) / f"{args.split}.jsonl")}
    triples = []
    with open(args.hyps, "r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["utt_id"] not in references:
                raise ValueError(
                    f"{obj['utt_id']} not present in the {args.split} manifest"
                )
            triples.append((obj["utt_id"], references[obj["utt_id"]], obj["tokens"]))
    corpus_cer, results = score_corpus(triples)
    _write_json(out / "report.json", {
        "corpus_cer": corpus_cer,
        "utterances": [
            {"utt_id": r.utt_id, "reference": r.reference, "hypothesis": r.hypothesis,
             "distance": r.distance, "ref_len": r.ref_len, "cer": r.cer}
            for r in results
        ],
    })
    manifest.finish(report="report.json", scored=len(results))
    print(f"corpus CER {corpus_cer:.4f} over {len(results)} utterances")
    return 0


def cmd_flops(args):
    model_cfg, _, _ = _resolve(args, ("model",), args.data)
    report = cost_report(model_cfg)
    name = "dense" if model_cfg.num_experts == 0 else f"{model_cfg.num_experts}e"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, model=model_cfg)
    manifest = _Manifest(out, "flops", {"model": config_to_dict(model_cfg)}, None)
    _write_json(out / "report.json", dict(report.to_dict(), model=name))
    manifest.finish(report="report.json")
    print(format_cost_table([(name, report)]))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moe-asr",
        description="Desk-scale mixture-of-experts speech recognizer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-utts", type=int, required=True)
    p.add_argument("--vocab-size", type=int, required=True,
                   help="data token inventory (the model adds one sos/eos id)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feat-dim", type=int, default=80)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain-embedding", help="CTC-pretrain the embedding stack")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_config_flags(p, ("model", "train"))
    p.set_defaults(func=cmd_pretrain_embedding)

    p = sub.add_parser("train", help="joint CTC/AED training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--embedding", default=None,
                   help="pretrained embedding checkpoint to initialize from")
    _add_config_flags(p, ("model", "train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="CTC N-best + attention rescoring")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--config", default=None)
    _add_config_flags(p, ("decode",))
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="CER against a reference manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--hyps", required=True, help="nbest.jsonl from decode")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="dev")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("flops", help="parameter and FLOPs accounting")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None,
                   help="corpus directory, used to infer vocab size")
    p.add_argument("--config", default=None)
    _add_config_flags(p, ("model",))
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line machine-parseable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
