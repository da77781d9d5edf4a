"""Command-line entry point: ``textssl <group> <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("textssl")

AUG_CHOICES = ("none", "visual", "all")


def _corpus(path, charset=None):
    from .dataset import load_manifest
    return load_manifest(path, charset=charset)


def _add_aug(p):
    p.add_argument("--aug", choices=AUG_CHOICES, default=None,
                   help="override the augmentation kind of the training phase")


def _add_schedule(p, default_scale=0.01):
    p.add_argument("--scale", type=float, default=default_scale,
                   help="multiplier on the training-table iteration counts (default %(default)s)")
    p.add_argument("--max-batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def _model_config(args, head=None):
    from .backbone import ModelConfig
    d = {}
    if args.model_config:
        d = yaml.safe_load(Path(args.model_config).read_text()) or {}
    d["backbone"] = args.backbone
    cfg = ModelConfig.from_dict(d)
    if head is not None:
        from dataclasses import replace
        cfg = replace(cfg, head=head)
    return cfg


# -- dataset ---------------------------------------------------------------

def cmd_dataset_synth(args):
    from .dataset import synth_corpus, write_manifest
    corpus = synth_corpus(args.n, args.style, args.seed, args.name, annotated=not args.unannotated)
    path = write_manifest(corpus, args.out)
    print(f"wrote {len(corpus)} lines to {path}")


def cmd_dataset_subset(args):
    from .dataset import subset, write_manifest
    corpus = subset(_corpus(args.manifest), args.n, args.seed)
    path = write_manifest(corpus, args.out)
    print(f"wrote {len(corpus)} lines to {path}")


# -- labels ----------------------------------------------------------------

def _load_encoder(path):
    import torch
    from .backbone import load_checkpoint
    from .labelgen import frame_encoder, load_autoencoder
    kind = torch.load(path, map_location="cpu", weights_only=False).get("kind")
    model = load_autoencoder(path) if kind == "autoencoder" else load_checkpoint(path)
    return model, frame_encoder(model)


def cmd_labels_fit_kmeans(args):
    from .labelgen import extract_features, fit_kmeans, sample_fit_set
    _, encoder = _load_encoder(args.encoder)
    store = extract_features(encoder, _corpus(args.corpus))
    sample = sample_fit_set(store, args.k, args.seed)
    cb = fit_kmeans(sample, args.k, epochs=args.epochs, seed=args.seed, normalize=args.normalize)
    cb.save(args.out)
    print(f"fitted {args.k} centroids on {len(sample)} vectors; inertia {cb.inertia:.4g}; wrote {args.out}")


def cmd_labels_train_ae(args):
    from .labelgen import save_autoencoder, train_autoencoder
    from .schedule import MetricsStream, schedule_from_table
    corpus = _corpus(args.corpus)
    held = _corpus(args.val) if args.val else None
    sched = schedule_from_table("ae", args.scale, max_batch=args.max_batch)
    metrics = MetricsStream(args.metrics) if args.metrics else None
    model, hist = train_autoencoder(corpus, args.vq, args.codebook, sched, held, args.seed,
                                    augmentation=args.aug or "visual", metrics=metrics)
    save_autoencoder(model, args.out)
    print(f"held-out MSE {hist['initial_mse']:.5f} -> {hist['final_mse']:.5f}")
    if args.vq:
        print(f"codewords used: {hist['codewords_used']} / {args.codebook}")


def cmd_labels_generate(args):
    from .labelgen import Codebook, generate_labels, load_autoencoder
    corpus = _corpus(args.corpus)
    assets = {}
    if args.method == "fq":
        if not args.encoder:
            sys.exit("labels generate --method fq needs --encoder")
        assets["encoder"] = _load_encoder(args.encoder)[1]
    else:
        if not args.autoencoder:
            sys.exit(f"labels generate --method {args.method} needs --autoencoder")
        assets["autoencoder"] = load_autoencoder(args.autoencoder)
    if args.codebook:
        assets["codebook"] = Codebook.load(args.codebook)
    manifest = generate_labels(args.method, corpus, assets)
    manifest.save(args.out)
    print(f"labelled {len(manifest)} lines (k={manifest.k}); wrote {args.out}")


# -- pretrain --------------------------------------------------------------

PRETRAIN_KEYS = {"corpus", "val", "labels", "backbone", "model", "seed", "scale", "max_batch", "schedule",
                 "p", "crop_width", "criterion", "temperature", "shift", "head", "output", "augmentation"}


def _pretrain_config(path):
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    unknown = set(cfg) - PRETRAIN_KEYS
    if unknown:
        sys.exit(f"{path}: unknown keys {sorted(unknown)}")
    base = Path(path).resolve().parent
    for k in ("corpus", "val", "labels", "output"):
        if cfg.get(k):
            cfg[k] = str((base / cfg[k]).resolve())
    for k in ("corpus", "output"):
        if not cfg.get(k):
            sys.exit(f"{path}: '{k}' is required")
    return cfg


def _pretrain_schedule(cfg, phase):
    from .schedule import Schedule, schedule_from_table
    if cfg.get("schedule"):
        return Schedule.from_dict(cfg["schedule"])
    return schedule_from_table(phase, cfg.get("scale", 0.01), max_batch=cfg.get("max_batch", 16))


def cmd_pretrain(args):
    from .augment import AugmentConfig
    from .backbone import HeadSpec, ModelConfig, build_model, save_checkpoint
    from .labelgen import LabelManifest
    from .pretrain import JointConfig, probe_set, train_joint, train_masked
    from .schedule import MetricsStream

    cfg = _pretrain_config(args.config)
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    corpus = _corpus(cfg["corpus"])
    seed = cfg.get("seed", 0)
    metrics = MetricsStream(out / "metrics.jsonl", echo=_echo if args.verbose else None)
    model_dict = dict(cfg.get("model") or {}, backbone=cfg.get("backbone", "vggt"))

    if args.kind == "masked":
        if not cfg.get("labels"):
            sys.exit("masked pre-training needs 'labels' (a label manifest)")
        manifest = LabelManifest.load(cfg["labels"])
        model = build_model(ModelConfig.from_dict(dict(model_dict, head=HeadSpec.linear(manifest.k))), seed)
        sched = _pretrain_schedule(cfg, "masked")
        val = _corpus(cfg["val"]) if cfg.get("val") else None
        hist = train_masked(model, corpus, manifest, sched, cfg.get("p", 0.2), cfg.get("crop_width", 512),
                            seed, val, metrics)
        if "val" in hist:
            print("held-out top-1/3/10 error: {top1:.4f} {top3:.4f} {top10:.4f}".format(**hist["val"]))
    else:
        criterion = cfg.get("criterion", "vicreg")
        sched = _pretrain_schedule(cfg, criterion)
        head = cfg.get("head")
        head = HeadSpec(**head) if head else (HeadSpec.mlp(3, 2048) if criterion == "vicreg" else HeadSpec.linear(2048))
        model = build_model(ModelConfig.from_dict(dict(model_dict, head=head)), seed)
        jc = JointConfig(criterion=criterion, temperature=cfg.get("temperature", 0.1),
                         crop_width=cfg.get("crop_width", 512), crop_doubling_step=sched.crop_doubling_step,
                         shift=cfg.get("shift", True))
        kind = args.aug or cfg.get("augmentation") or "visual"
        hist = train_joint(model, corpus, sched, jc, seed, AugmentConfig.named(kind),
                           probe_set(corpus, 16, 128, seed), metrics)
        if hist["collapse"]:
            print(f"final collapse score {hist['collapse'][-1][1]:.4f}")
    path = save_checkpoint(model, out / "pretrained.pt", phase=args.kind)
    print(f"{hist['iterations']} iterations; wrote {path}")


def _echo(record):
    print(json.dumps(record, sort_keys=True))


# -- ocr -------------------------------------------------------------------

def cmd_ocr_train(args):
    from .backbone import HeadSpec, build_model, load_checkpoint, save_checkpoint
    from .dataset import Charset
    from .ocr import charset_to_meta, evaluate, train_ocr
    from .schedule import MetricsStream, schedule_from_table

    train = _corpus(args.train)
    texts = [e.text for e in train]
    val = None
    if args.val:
        val_raw = _corpus(args.val)
        texts += [e.text for e in val_raw]
    charset = Charset.from_texts(texts)
    train = train.with_charset(charset)
    if args.val:
        val = val_raw.with_charset(charset)
    if args.command == "finetune":
        model = load_checkpoint(args.checkpoint)
        phase = "ocr_finetune"
    else:
        model = build_model(_model_config(args, HeadSpec.linear(charset.num_classes)), args.seed)
        phase = "ocr_scratch"
    sched = schedule_from_table(phase, args.scale, max_batch=args.max_batch)
    out = Path(args.out)
    model, hist = train_ocr(model, train, sched, args.aug or "all", val, args.seed,
                            new_head=True if args.command == "finetune" else None,
                            metrics=MetricsStream(out / "metrics.jsonl"), checkpoint_dir=out)
    path = save_checkpoint(model, out / "final.pt", **charset_to_meta(charset))
    print(f"{hist['iterations']} iterations; wrote {path}")
    if val is not None:
        print(evaluate(model, val).table())


def cmd_ocr_eval(args):
    from .backbone import checkpoint_meta, load_checkpoint
    from .ocr import charset_from_meta, evaluate
    model = load_checkpoint(args.checkpoint)
    charset = charset_from_meta(checkpoint_meta(args.checkpoint))
    report = evaluate(model, _corpus(args.corpus), charset=charset)
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.predictions:
        report.write_predictions(args.predictions)


# -- model -----------------------------------------------------------------

def cmd_model_describe(args):
    from .backbone import describe, load_checkpoint
    print(describe(load_checkpoint(args.checkpoint)))


# -- viz -------------------------------------------------------------------

def cmd_viz_recon(args):
    from .labelgen import load_autoencoder
    from .viz import dump_reconstructions
    corpus = _corpus(args.corpus)
    lines = [e.image for e in list(corpus)[: args.n]]
    paths = dump_reconstructions(load_autoencoder(args.autoencoder), lines, args.out)
    print(f"wrote {len(paths)} panels to {args.out}")


def cmd_viz_neighbors(args):
    from .augment import AugmentConfig, make_view_pair
    from .backbone import load_checkpoint
    from .viz import nearest_neighbor_patches, save_retrieval_panels
    corpus = _corpus(args.corpus)
    rng = np.random.default_rng(args.seed)
    wide = [e.image for e in corpus if e.image.width >= 2 * args.crop_width]
    if len(wide) < 1:
        sys.exit(f"no line is at least {2 * args.crop_width} px wide")
    pick = rng.choice(len(wide), size=min(args.lines, len(wide)), replace=False)
    pairs = [make_view_pair(wide[int(i)], args.crop_width, int(rng.integers(2**31)), AugmentConfig.visual())
             for i in pick]
    a, b = [p.view_a for p in pairs], [p.view_b for p in pairs]
    panels = nearest_neighbor_patches(load_checkpoint(args.checkpoint), a, b, args.neighbors, args.seed)
    paths = save_retrieval_panels(panels, a, b, args.out)
    for p in panels:
        sims = " ".join(f"{m.similarity:.3f}" for m in p.matches)
        print(f"{p.query.line_id} frame {p.query.frame}: {sims}")
    print(f"wrote {len(paths)} panels to {args.out}")


def cmd_viz_trigrams(args):
    from .labelgen import LabelManifest
    from .viz import save_trigram_panel, trigram_matches
    corpus = _corpus(args.corpus)
    hits = trigram_matches(LabelManifest.load(args.labels), corpus, args.line, args.position, args.max_hits)
    for h in hits:
        print(f"{h.line_id}\t{h.position}\t{h.region.context[0]}-{h.region.context[1]}")
    if args.out:
        save_trigram_panel(hits, corpus, args.out)
        print(f"wrote {args.out}")


# -- run -------------------------------------------------------------------

def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``fq``, ``tiny``, ...)."""
    from importlib.resources import files
    path = Path(str(files("textssl") / "configs" / f"{name}.yaml"))
    if not path.exists():
        raise FileNotFoundError(f"{name!r} is neither a file nor a bundled config")
    return path


def cmd_run(args):
    from .experiment import ExperimentConfig, StageError, run_experiment
    path = Path(args.config)
    if not path.exists():
        path = bundled_config(args.config)
    config = ExperimentConfig.load(path)
    overrides = {"seed": args.seed, "scale": args.scale, "augmentation": args.aug}
    for k, v in overrides.items():
        if v is not None:
            setattr(config, k, v)
    config.__post_init__()
    out = Path(args.out or Path("runs") / (path.stem if config.name == "experiment" else config.name))
    try:
        run_experiment(config, out)
    except StageError as e:
        sys.exit(f"{e} (partial artifacts kept in {out})")
    print((out / "summary.txt").read_text(), end="")


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textssl", description="Self-supervised pre-training for text-line recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    groups = p.add_subparsers(dest="group", required=True)

    ds = groups.add_parser("dataset", help="synthetic corpora and subsets").add_subparsers(dest="command", required=True)
    s = ds.add_parser("synth", help="render a synthetic corpus to a manifest directory")
    s.add_argument("--n", "--lines", dest="n", type=int, required=True)
    s.add_argument("--style", choices=("printed", "cursive"), default="printed")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default=None)
    s.add_argument("--unannotated", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_synth)
    s = ds.add_parser("subset", help="seeded nested subset of a manifest")
    s.add_argument("manifest")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_subset)

    lb = groups.add_parser("labels", help="pseudo-label generation").add_subparsers(dest="command", required=True)
    s = lb.add_parser("fit-kmeans", help="fit a codebook on encoder features")
    s.add_argument("--encoder", required=True, help="sequence-model or autoencoder checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--k", type=int, default=512)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_labels_fit_kmeans)
    s = lb.add_parser("train-ae", help="train an autoencoder (optionally vector-quantized)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--val")
    s.add_argument("--vq", action="store_true")
    s.add_argument("--codebook", type=int, default=512)
    s.add_argument("--metrics")
    s.add_argument("--out", required=True)
    _add_schedule(s)
    _add_aug(s)
    s.set_defaults(func=cmd_labels_train_ae)
    s = lb.add_parser("generate", help="write a label manifest")
    s.add_argument("--method", choices=("fq", "vqvae", "pqae"), required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--encoder")
    s.add_argument("--autoencoder")
    s.add_argument("--codebook")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_labels_generate)

    pt = groups.add_parser("pretrain", help="masked or joint-embedding pre-training")
    pt.add_argument("kind", choices=("masked", "joint"))
    pt.add_argument("--config", required=True)
    _add_aug(pt)
    pt.set_defaults(func=cmd_pretrain)

    oc = groups.add_parser("ocr", help="CTC training and evaluation").add_subparsers(dest="command", required=True)
    for name in ("train", "finetune"):
        s = oc.add_parser(name, help="train from scratch" if name == "train" else "fine-tune a checkpoint")
        if name == "finetune":
            s.add_argument("checkpoint")
        else:
            s.add_argument("--backbone", choices=("vggt", "vit"), default="vggt")
            s.add_argument("--model-config", help="YAML with model fields (dim, layers, ...)")
        s.add_argument("--train", required=True)
        s.add_argument("--val")
        s.add_argument("--out", required=True)
        _add_schedule(s)
        _add_aug(s)
        s.set_defaults(func=cmd_ocr_train)
    s = oc.add_parser("eval", help="CER of a checkpoint on a manifest")
    s.add_argument("checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--json")
    s.add_argument("--predictions")
    s.set_defaults(func=cmd_ocr_eval)

    md = groups.add_parser("model", help="checkpoint inspection").add_subparsers(dest="command", required=True)
    s = md.add_parser("describe")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_model_describe)

    vz = groups.add_parser("viz", help="diagnostic panels").add_subparsers(dest="command", required=True)
    s = vz.add_parser("recon", help="original/reconstruction panels")
    s.add_argument("--autoencoder", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz_recon)
    s = vz.add_parser("neighbors", help="nearest-neighbour output retrieval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--lines", type=int, default=8)
    s.add_argument("--neighbors", "-N", type=int, default=8)
    s.add_argument("--crop-width", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz_neighbors)
    s = vz.add_parser("trigrams", help="image regions sharing a label trigram")
    s.add_argument("--labels", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--line", required=True)
    s.add_argument("--position", type=int, required=True)
    s.add_argument("--max-hits", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_viz_trigrams)

    r = groups.add_parser("run", help="run an experiment config end to end")
    r.add_argument("config", help="YAML file or name of a bundled config (scratch, transfer, fq, vqvae, pqae, "
                                   "vicreg, ntxent, tiny)")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--scale", type=float)
    _add_aug(r)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
