"""Command-line surface.

Commands: ``tree sim``, ``tree select``, ``datagen``, ``pretrain``, ``ia``,
``finetune``, ``eval``, ``experiment``. Human-readable output comes first;
the last stdout line of every successful command is a JSON summary, so
scripts can consume results without scraping. Commands never mutate their
inputs — everything lands under ``--out``.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import adaptation, metrics, synthdata
from .adaptation import AdaptationConfig
from .experiment import ExperimentConfig, run_experiment
from .langtree import LanguageTree
from .model import Model, load_backbone, save_backbone
from .seeding import derive_seed


def _codes(text):
    return [c for c in text.split(",") if c]


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _adaptation_config(args, algorithm=None):
    return AdaptationConfig(
        algorithm=algorithm or getattr(args, "algorithm", "mtl"),
        alpha=args.alpha,
        beta=args.beta,
        inner_steps=args.inner_steps,
        mtl_lr=args.mtl_lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        support_fraction=args.support_fraction,
        seed=args.seed,
    )


def _add_train_flags(p):
    p.add_argument("--alpha", type=float, default=0.001, help="inner-loop SGD rate")
    p.add_argument("--beta", type=float, default=0.0001, help="outer-loop Adam rate")
    p.add_argument("--inner-steps", type=int, default=1)
    p.add_argument("--mtl-lr", type=float, default=0.0001, help="joint-training Adam rate")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--support-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def _write_run_config(out, cfg, extra=None):
    doc = asdict(cfg)
    doc.update(extra or {})
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _fresh_model(args, mode="peft", backbone_path=None):
    m = Model.build(
        seed=derive_seed(args.seed, "init"),
        with_adapters=(mode == "peft"),
        backbone_frozen=(mode != "full_ft"),
    )
    if backbone_path:
        m.params.update(load_backbone(backbone_path))
    return m


# -- commands ----------------------------------------------------------------


def cmd_tree_sim(args):
    tree = LanguageTree.load(args.tree)
    value = tree.sim(args.lang, _codes(args.targets))
    print(value)
    _emit({"command": "tree sim", "lang": args.lang, "targets": _codes(args.targets), "sim": value})
    return 0


def cmd_tree_select(args):
    tree = LanguageTree.load(args.tree)
    targets = _codes(args.targets)
    if args.candidates == "all":
        candidates = [c for c in tree.leaf_codes() if c not in targets]
    else:
        candidates = _codes(args.candidates)
    picked = tree.select_sources(targets, candidates, args.m)
    for code in picked:
        print(code)
    _emit({"command": "tree select", "m": args.m, "sources": picked})
    return 0


def cmd_datagen(args):
    tree = LanguageTree.load(args.tree)
    gen_cfg = synthdata.GenConfig()
    specs = synthdata.generate_family(tree, derive_seed(args.seed, "family"), gen_cfg)
    data = synthdata.make_dataset(specs, args.profile, derive_seed(args.seed, "data"))
    synthdata.save_dataset(data, args.out, global_vocab=gen_cfg.global_vocab)
    n_utts = sum(len(v) for v in data.data.values())
    print(f"wrote {len(specs)} languages / {n_utts} utterances to {args.out}")
    _emit(
        {
            "command": "datagen",
            "languages": len(specs),
            "utterances": n_utts,
            "profile": args.profile,
            "out": args.out,
        }
    )
    return 0


def cmd_pretrain(args):
    data = synthdata.load_dataset(args.data)
    cfg = _adaptation_config(args, algorithm="mtl")
    backbone, rows = adaptation.pretrain_backbone(data, _codes(args.pool), cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "backbone.npz")
    save_backbone(ckpt, backbone)
    adaptation.write_training_log(os.path.join(args.out, "training_log.csv"), rows)
    _write_run_config(args.out, cfg, {"pool": _codes(args.pool)})
    final_dev = rows[-1].dev_loss if rows else None
    print(f"pretrained backbone on {args.pool} -> {ckpt}")
    _emit({"command": "pretrain", "checkpoint": ckpt, "final_dev_loss": final_dev})
    return 0


def cmd_ia(args):
    data = synthdata.load_dataset(args.data)
    cfg = _adaptation_config(args)
    model = _fresh_model(args, backbone_path=args.backbone)
    run = adaptation.ia_mtl if cfg.algorithm == "mtl" else adaptation.ia_fomaml
    warm, rows = run(model, data, _codes(args.sources), cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "post_ia.npz")
    warm.save(ckpt)
    adaptation.write_training_log(os.path.join(args.out, "training_log.csv"), rows)
    _write_run_config(args.out, cfg, {"sources": _codes(args.sources)})
    final_dev = rows[-1].dev_loss if rows else None
    print(f"warmed up on {args.sources} -> {ckpt}")
    _emit(
        {
            "command": "ia",
            "algorithm": cfg.algorithm,
            "checkpoint": ckpt,
            "final_dev_loss": final_dev,
        }
    )
    return 0


def cmd_finetune(args):
    data = synthdata.load_dataset(args.data)
    cfg = _adaptation_config(args, algorithm="mtl")
    if args.model:
        start = Model.load(args.model)
    else:
        start = _fresh_model(args, mode=args.mode, backbone_path=args.backbone)
    model, report, rows = adaptation.finetune_target(start, data, args.target, args.mode, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.target}.{args.mode}.npz")
    model.save(ckpt)
    adaptation.write_training_log(os.path.join(args.out, "training_log.csv"), rows)
    metrics.write_eval_csv(os.path.join(args.out, "eval.csv"), [report])
    _write_run_config(args.out, cfg, {"target": args.target, "mode": args.mode})
    print(f"{args.target} [{args.mode}] test cer={report.cer:.4f}")
    _emit(
        {
            "command": "finetune",
            "target": args.target,
            "mode": args.mode,
            "cer": report.cer,
            "checkpoint": ckpt,
        }
    )
    return 0


def cmd_eval(args):
    if args.ref or args.hyp:
        if not (args.ref and args.hyp):
            raise SystemExit("eval needs both --ref and --hyp (or --model/--data/--lang)")
        with open(args.ref, encoding="utf-8") as f:
            refs = [line.rstrip("\n") for line in f]
        with open(args.hyp, encoding="utf-8") as f:
            hyps = [line.rstrip("\n") for line in f]
        if len(refs) != len(hyps):
            raise SystemExit(f"ref has {len(refs)} lines, hyp has {len(hyps)}")
        value = metrics.cer(zip(refs, hyps))
        print(f"cer={value}")
        _emit({"command": "eval", "n_utts": len(refs), "cer": value})
        return 0
    model = Model.load(args.model)
    if model.head_vocab is None:
        raise SystemExit("checkpoint carries no head vocabulary; was it ever trained?")
    data = synthdata.load_dataset(args.data, languages=[args.lang], splits=[args.split])
    report = adaptation.evaluate(model, model.head_vocab, data, args.lang, args.split)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics.write_eval_csv(os.path.join(args.out, "eval.csv"), [report])
    print(f"{args.lang}/{args.split} cer={report.cer}")
    _emit(
        {
            "command": "eval",
            "language": report.language,
            "split": report.split,
            "n_utts": report.n_utts,
            "cer": report.cer,
        }
    )
    return 0


def cmd_experiment(args):
    cfg = ExperimentConfig.from_file(args.config)
    out = args.out or cfg.out
    if not out:
        raise SystemExit("no output directory: pass --out or set 'out' in the config")
    result = run_experiment(cfg, out)
    for method in sorted(result.mean_cer):
        print(f"{method}: mean cer {result.mean_cer[method]:.4f}")
    _emit({"command": "experiment", "out": result.out_dir, "mean_cer": result.mean_cer})
    return 0


# -- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="warmadapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    tree = sub.add_parser("tree", help="language-tree queries")
    tsub = tree.add_subparsers(dest="tree_command", required=True)
    tsim = tsub.add_parser("sim", help="similarity of one language to a target set")
    tsim.add_argument("--tree", required=True)
    tsim.add_argument("--lang", required=True)
    tsim.add_argument("--targets", required=True, help="comma-separated codes")
    tsim.set_defaults(fn=cmd_tree_sim)
    tsel = tsub.add_parser("select", help="rank and pick source languages")
    tsel.add_argument("--tree", required=True)
    tsel.add_argument("--targets", required=True)
    tsel.add_argument("--candidates", default="all", help="comma-separated codes or 'all'")
    tsel.add_argument("--m", type=int, required=True)
    tsel.set_defaults(fn=cmd_tree_select)

    dg = sub.add_parser("datagen", help="generate a synthetic dataset from a tree")
    dg.add_argument("--tree", required=True)
    dg.add_argument("--profile", choices=sorted(synthdata.PROFILES), default="ten_min")
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--out", required=True)
    dg.set_defaults(fn=cmd_datagen)

    pt = sub.add_parser("pretrain", help="train a backbone on a language pool, then freeze it")
    pt.add_argument("--data", required=True)
    pt.add_argument("--pool", required=True, help="comma-separated codes")
    pt.add_argument("--out", required=True)
    _add_train_flags(pt)
    pt.set_defaults(fn=cmd_pretrain)

    ia = sub.add_parser("ia", help="intermediate adaptation on source languages")
    ia.add_argument("--data", required=True)
    ia.add_argument("--sources", required=True)
    ia.add_argument("--algorithm", choices=["mtl", "fomaml"], default="mtl")
    ia.add_argument("--backbone", help="backbone checkpoint from 'pretrain'")
    ia.add_argument("--out", required=True)
    _add_train_flags(ia)
    ia.set_defaults(fn=cmd_ia)

    ft = sub.add_parser("finetune", help="adapt to one target language and evaluate")
    ft.add_argument("--data", required=True)
    ft.add_argument("--target", required=True)
    ft.add_argument("--mode", choices=sorted(adaptation.FINETUNE_MODES), default="peft")
    ft.add_argument("--model", help="starting checkpoint (e.g. post-IA); fresh build if omitted")
    ft.add_argument("--backbone", help="backbone checkpoint when starting fresh")
    ft.add_argument("--out", required=True)
    _add_train_flags(ft)
    ft.set_defaults(fn=cmd_finetune)

    ev = sub.add_parser("eval", help="character error rate of a model or of ref/hyp files")
    ev.add_argument("--model")
    ev.add_argument("--data")
    ev.add_argument("--lang")
    ev.add_argument("--split", default="test")
    ev.add_argument("--ref", help="reference transcripts, one per line")
    ev.add_argument("--hyp", help="hypothesis transcripts, one per line")
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)

    ex = sub.add_parser("experiment", help="run the full multi-seed pipeline from a JSON config")
    ex.add_argument("--config", required=True)
    ex.add_argument("--out")
    ex.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
