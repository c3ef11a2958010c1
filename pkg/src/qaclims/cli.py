"""Command-line entry point: ``qaclims <group> <command> [options]``.

Groups: ``dataset synth|ingest``, ``corpus generate|inspect``,
``train pretrain|ritc``, ``eval run|ablate|sweep-omega``, ``viz overlay``.
Set ``QACLIMS_VQA_URL`` / ``QACLIMS_ENCODER_URL`` to use HTTP backends;
otherwise the offline mocks are used.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

VQA_URL_ENV = "QACLIMS_VQA_URL"
ENCODER_URL_ENV = "QACLIMS_ENCODER_URL"

log = logging.getLogger("qaclims")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # One diagnostic line, usage exit code.
        self.exit(2, f"{self.prog}: error: {message}\n")


# --- helpers -------------------------------------------------------------------

def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint(command, params, inputs=()):
    """Hash of the effective parameters plus the content of the input files.

    Output paths are left out, so the same run written to two places has
    the same fingerprint.
    """
    doc = {
        "command": command,
        "params": params,
        "inputs": [_file_digest(p) for p in inputs if p is not None],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _announce(fp):
    print(f"fingerprint: {fp}", flush=True)


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        overrides[key] = val
    if overrides:
        text = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        try:
            cfg = TrainConfig.from_text(text)
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad --set value: {exc}") from exc
    return cfg


def _manifest(path):
    from .datasets import DatasetManifest

    return DatasetManifest.load(path)


def _samples(manifest, split):
    from .datasets import load_samples
    from .synthetic import split_ids

    if split == "all":
        return load_samples(manifest)
    ids = split_ids(manifest, split)
    if not ids:
        raise CliError(f"split {split!r} is empty in this manifest")
    return load_samples(manifest, ids)


def _encoders(manifest, dtype=None):
    import torch

    from .encoders import ExternalEncoders, MockEncoders
    from .synthetic import lexicon_for

    url = os.environ.get(ENCODER_URL_ENV)
    if url:
        return ExternalEncoders(url)
    lexicon = lexicon_for(manifest) if manifest.scenes else None
    return MockEncoders(lexicon, dtype=dtype or torch.float32)


def _vqa_backend(kind, manifest, templates):
    from .qape import CachedVqaBackend, ExternalVqaBackend, MockVqaBackend
    from .synthetic import vqa_scenes

    if kind == "external":
        url = os.environ.get(VQA_URL_ENV)
        if not url:
            raise CliError(f"--backend external needs {VQA_URL_ENV} to be set")
        return CachedVqaBackend(ExternalVqaBackend(url))
    return MockVqaBackend(templates, vqa_scenes(manifest))


def _open_metrics(path):
    if path is None:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


# --- dataset -------------------------------------------------------------------

def cmd_dataset_synth(args):
    from .synthetic import generate_synthetic

    params = {k: getattr(args, k) for k in ("n_images", "n_classes", "seed", "size", "n_eval")}
    _announce(fingerprint("dataset synth", params))
    try:
        m = generate_synthetic(args.n_images, args.n_classes, args.seed, args.out, size=args.size, n_eval=args.n_eval)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(f"wrote {len(m.items)} images, {len(m.classes) - 1} classes to {args.out}")
    return 0


def cmd_dataset_ingest(args):
    from .datasets import DatasetManifest, ingest_voc_style

    classes = None
    if args.classes:
        classes = [ln.strip() for ln in Path(args.classes).read_text(encoding="utf-8").splitlines() if ln.strip()]
    _announce(fingerprint("dataset ingest", {"split": args.split, "classes": classes}))
    m = ingest_voc_style(args.root, args.split, classes)
    root = Path(args.root).resolve()
    out = DatasetManifest(
        m.classes,
        m.items,
        root=str(Path(args.out).parent),
        scenes=None,
    )
    # Paths in the written manifest are absolute so it can live anywhere.
    for it in out.items:
        it.image = str(root / it.image)
        if it.mask:
            it.mask = str(root / it.mask)
    out.save(args.out)
    print(f"wrote manifest with {len(out.items)} images to {args.out}")
    return 0


# --- corpus --------------------------------------------------------------------

def cmd_corpus_generate(args):
    from .datasets import load_samples
    from .qape import generate_corpus, load_templates, save_corpus

    manifest = _manifest(args.labels)
    if args.images:
        manifest.root = args.images
        manifest.validate()
    templates = load_templates(args.templates)
    backend = _vqa_backend(args.backend, manifest, templates)
    params = {"backend": backend.backend_id, "template_version": templates.version,
              "dedup": args.dedup, "workers": args.workers}
    _announce(fingerprint("corpus generate", params, [args.labels, args.templates]))
    samples = load_samples(manifest)
    store = generate_corpus(((s.image_id, s.image, s.labels) for s in samples), manifest.classes, backend,
                            templates, max_workers=args.workers, dedup=args.dedup)
    save_corpus(store, args.out)
    print(f"wrote {len(store)} corpus records to {args.out}")
    return 0


def cmd_corpus_inspect(args):
    from .qape import load_corpus

    _announce(fingerprint("corpus inspect", {"class": args.class_name}, [args.input]))
    store = load_corpus(args.input)
    print(f"template_version: {store.template_version}")
    print(f"backend_id: {store.backend_id}")
    shown = 0
    for (image_id, cid), c in sorted(store.records.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        if args.class_name and c.class_label != args.class_name:
            continue
        shown += 1
        print(f"{image_id}  class {cid} ({c.class_label})")
        for t, k in zip(c.fg_texts, c.fg_kinds):
            print(f"  FG [{k}] {t}")
        for t, k in zip(c.bg_texts, c.bg_kinds):
            print(f"  BG [{k}] {t}")
    if args.class_name and shown == 0:
        raise CliError(f"no records for class {args.class_name!r}")
    print(f"{shown} records")
    return 0


# --- train ---------------------------------------------------------------------

def cmd_train_pretrain(args):
    from .training import build_model, classification_accuracy, pretrain_checkpoint, pretrain_classifier, save_checkpoint

    cfg = _load_config(args)
    manifest = _manifest(args.manifest)
    samples = _samples(manifest, args.split)
    fp = fingerprint("train pretrain", {"config": cfg.to_text(), "split": args.split}, [args.manifest])
    _announce(fp)
    model = build_model(len(manifest.classes), cfg.seed)
    metrics = _open_metrics(args.metrics)
    try:
        pretrain_classifier(model, samples, cfg, metrics=metrics)
    finally:
        if metrics is not None:
            metrics.close()
    save_checkpoint(pretrain_checkpoint(model, cfg), args.out)
    print(f"train accuracy {classification_accuracy(model, samples):.4f}; wrote {args.out}")
    return 0


def cmd_train_ritc(args):
    from .qape import load_corpus
    from .training import load_checkpoint, model_from_checkpoint, save_checkpoint, train_ritc

    cfg = _load_config(args)
    manifest = _manifest(args.manifest)
    samples = _samples(manifest, args.split)
    store = load_corpus(args.corpus)
    if args.kinds is not None:
        store = store.variant(tuple(k for k in args.kinds.split(",") if k))
    fp = fingerprint("train ritc", {"config": cfg.to_text(), "split": args.split, "fat": not args.no_fat,
                                    "kinds": args.kinds}, [args.manifest, args.corpus, args.init])
    _announce(fp)
    init = load_checkpoint(args.init)
    model = model_from_checkpoint(init)
    resume = load_checkpoint(args.resume) if args.resume else None
    encoders = _encoders(manifest)
    if not getattr(encoders, "differentiable", False):
        raise CliError(f"training needs differentiable encoders; unset {ENCODER_URL_ENV} to use the mock")
    metrics = _open_metrics(args.metrics)
    try:
        ckpt, per_epoch = train_ritc(model, store, samples, cfg, encoders, fat=not args.no_fat,
                                     metrics=metrics, resume=resume, stop_after_epoch=args.stop_after_epoch)
    finally:
        if metrics is not None:
            metrics.close()
    save_checkpoint(ckpt, args.out)
    if per_epoch:
        last = per_epoch[-1]
        print(f"epoch {last['epoch']}: frc {last['frc']:.4f} brc {last['brc']:.4f} reg {last['reg']:.4f} "
              f"total {last['total']:.4f}")
    print(f"wrote {args.out}")
    return 0


# --- eval ----------------------------------------------------------------------

def _thresholds(args):
    if not args.sweep:
        return None
    return [round(0.05 * i, 2) for i in range(1, 20)]


def format_report(report, class_names):
    lines = [f"{'class':<20} {'IoU':>8}"]
    for cid in sorted(report.iou):
        lines.append(f"{class_names[cid]:<20} {100 * report.iou[cid]:8.2f}")
    lines.append(f"{'mIoU':<20} {100 * report.miou:8.2f}")
    extra = report.extra
    lines.append(f"bg_threshold {extra.get('bg_threshold')}")
    if "best_miou" in extra:
        lines.append(f"best bg_threshold {extra['best_bg_threshold']:.2f}: mIoU {100 * extra['best_miou']:.2f}")
    lines.append(f"fingerprint {report.fingerprint}")
    return "\n".join(lines) + "\n"


def cmd_eval_run(args):
    from .evaluation import dump_json, evaluate_cams
    from .training import load_checkpoint, model_from_checkpoint

    manifest = _manifest(args.manifest)
    samples = _samples(manifest, args.split)
    if not all(s.mask is not None for s in samples):
        raise CliError("evaluation needs ground-truth masks for every image")
    fp = fingerprint("eval run", {"split": args.split, "bg_threshold": args.bg_threshold, "sweep": args.sweep},
                     [args.manifest, args.checkpoint])
    _announce(fp)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    report = evaluate_cams(model, samples, len(manifest.classes), args.bg_threshold, fp, sweep=_thresholds(args))
    text = format_report(report, manifest.classes)
    print(text, end="")
    if args.report:
        _write_text(f"{args.report}.txt", text)
        _write_text(f"{args.report}.json", dump_json(report.to_json()))
    return 0


def _ablation_inputs(args):
    from .qape import load_corpus
    from .training import load_checkpoint

    cfg = _load_config(args)
    manifest = _manifest(args.manifest)
    train = _samples(manifest, args.train_split)
    evals = _samples(manifest, args.eval_split)
    store = load_corpus(args.corpus)
    init = load_checkpoint(args.init)
    return cfg, manifest, train, evals, store, init


def cmd_eval_ablate(args):
    from .evaluation import corpus_matrix, dump_json, fat_matrix, format_table, loss_matrix, rows_to_json, run_ablation
    from .model import CamNet

    cfg, manifest, train, evals, store, init = _ablation_inputs(args)
    fp = fingerprint("eval ablate", {"config": cfg.to_text(), "matrix": args.matrix,
                                     "bg_threshold": args.bg_threshold},
                     [args.manifest, args.corpus, args.init])
    _announce(fp)
    matrices = {"loss": loss_matrix, "corpus": corpus_matrix, "fat": fat_matrix}
    names = list(matrices) if args.matrix == "all" else [args.matrix]
    encoders = _encoders(manifest)
    k = len(manifest.classes)
    text, records = "", {}
    for name in names:
        rows = run_ablation(matrices[name](), init.model_state, lambda: CamNet(k), store, train, evals, cfg,
                            encoders, k, args.bg_threshold)
        text += format_table(rows, title=f"{name} ablation (fingerprint {fp})") + "\n"
        records[name] = rows_to_json(rows)
    print(text, end="")
    if args.report:
        _write_text(f"{args.report}.txt", text)
        _write_text(f"{args.report}.json", dump_json({"fingerprint": fp, "tables": records}))
    return 0


def cmd_eval_sweep_omega(args):
    from .evaluation import dump_json, sweep_omega
    from .model import CamNet

    try:
        omegas = [float(w) for w in args.omegas.split(",") if w.strip()]
    except ValueError as exc:
        raise CliError(f"--omegas: {exc}") from exc
    if not omegas or any(not 0.0 <= w <= 1.0 for w in omegas):
        raise CliError("--omegas needs values in [0, 1]")
    cfg, manifest, train, evals, store, init = _ablation_inputs(args)
    fp = fingerprint("eval sweep-omega", {"config": cfg.to_text(), "omegas": omegas,
                                          "bg_threshold": args.bg_threshold},
                     [args.manifest, args.corpus, args.init])
    _announce(fp)
    k = len(manifest.classes)
    curve = sweep_omega(omegas, init.model_state, lambda: CamNet(k), store, train, evals, cfg,
                        _encoders(manifest), k, args.bg_threshold)
    lines = [f"{'omega':>8} {'mIoU':>8}"] + [f"{w:8.2f} {100 * m:8.2f}" for w, m in curve]
    text = "\n".join(lines) + f"\nfingerprint {fp}\n"
    print(text, end="")
    if args.report:
        _write_text(f"{args.report}.txt", text)
        _write_text(f"{args.report}.json", dump_json({"fingerprint": fp, "curve": [[w, m] for w, m in curve]}))
    return 0


# --- viz -----------------------------------------------------------------------

def cmd_viz_overlay(args):
    from .evaluation import predict_cams
    from .qape import load_corpus
    from .training import load_checkpoint, model_from_checkpoint
    from .viz import export_overlay

    manifest = _manifest(args.manifest)
    fp = fingerprint("viz overlay", {"image_id": args.image_id, "alpha": args.alpha},
                     [args.manifest, args.checkpoint, args.corpus])
    _announce(fp)
    samples = _samples(manifest, "all")
    sample = next((s for s in samples if s.image_id == args.image_id), None)
    if sample is None:
        raise CliError(f"no image {args.image_id!r} in the manifest")
    if not sample.labels:
        raise CliError(f"image {args.image_id!r} has no labels to visualize")
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    (maps,) = predict_cams(model, [sample])
    corpora = {}
    if args.corpus:
        store = load_corpus(args.corpus)
        corpora = {c: store.get(sample.image_id, c) for c in sample.labels if store.get(sample.image_id, c)}
    names = dict(enumerate(manifest.classes))
    for p in export_overlay(sample.image, maps, args.out, names, corpora, alpha=args.alpha):
        print(f"wrote {p}")
    return 0


# --- parser --------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser():
    parser = _Parser(prog="qaclims", description="Question-answer prompted CAM training toolkit.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    groups = parser.add_subparsers(dest="group", metavar="GROUP", parser_class=_Parser)
    groups.required = True

    ds = groups.add_parser("dataset", help="create or ingest datasets").add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser)
    ds.required = True
    p = ds.add_parser("synth", help="generate the synthetic shape benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=80)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-eval", type=int, default=16)
    p.set_defaults(func=cmd_dataset_synth)
    p = ds.add_parser("ingest", help="build a manifest for a VOC-style directory")
    p.add_argument("--root", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--classes", help="class-name file, one per line, background first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_ingest)

    co = groups.add_parser("corpus", help="generate or inspect text corpora").add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser)
    co.required = True
    p = co.add_parser("generate", help="ask the question templates about every (image, class)")
    p.add_argument("--images", help="image directory (defaults to the manifest's directory)")
    p.add_argument("--labels", required=True, help="dataset manifest with image-level labels")
    p.add_argument("--templates", help="template file (defaults to the shipped table)")
    p.add_argument("--backend", choices=("mock", "external"), default="mock")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dedup", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_generate)
    p = co.add_parser("inspect", help="print corpus records")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--class", dest="class_name")
    p.set_defaults(func=cmd_corpus_inspect)

    tr = groups.add_parser("train", help="classification pretraining and contrastive training").add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser)
    tr.required = True
    p = tr.add_parser("pretrain", help="multi-label classification pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train", choices=("train", "eval", "all"))
    p.add_argument("--metrics", help="JSON-lines step log")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train_pretrain)
    p = tr.add_parser("ritc", help="region image-text contrastive training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--resume", help="checkpoint of an interrupted run with the same config")
    p.add_argument("--stop-after-epoch", type=int)
    p.add_argument("--split", default="train", choices=("train", "eval", "all"))
    p.add_argument("--kinds", help="comma-separated question kinds to keep (empty: label-only baseline)")
    p.add_argument("--no-fat", action="store_true", help="use the raw map instead of thresholded regions")
    p.add_argument("--metrics", help="JSON-lines step log")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train_ritc)

    ev = groups.add_parser("eval", help="CAM mIoU, ablations and the filter-ratio sweep").add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser)
    ev.required = True
    p = ev.add_parser("run", help="CAM mIoU of one checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval", "all"))
    p.add_argument("--bg-threshold", type=float, default=0.15)
    p.add_argument("--sweep", action="store_true", help="also report the best background threshold")
    p.add_argument("--report", help="output prefix for <prefix>.txt and <prefix>.json")
    p.set_defaults(func=cmd_eval_run)
    for name, func, helptext in (("ablate", cmd_eval_ablate, "loss / corpus / FAT ablation tables"),
                                 ("sweep-omega", cmd_eval_sweep_omega, "mIoU as a function of omega")):
        p = ev.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--init", required=True, help="pretrained checkpoint shared by every cell")
        p.add_argument("--train-split", default="train", choices=("train", "eval", "all"))
        p.add_argument("--eval-split", default="eval", choices=("train", "eval", "all"))
        p.add_argument("--bg-threshold", type=float, default=0.15)
        p.add_argument("--report", help="output prefix for <prefix>.txt and <prefix>.json")
        _add_config_args(p)
        if name == "ablate":
            p.add_argument("--matrix", choices=("loss", "corpus", "fat", "all"), default="loss")
        else:
            p.add_argument("--omegas", default="0,0.1,0.3,0.5")
        p.set_defaults(func=func)

    vz = groups.add_parser("viz", help="heat-map overlays").add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser)
    vz.required = True
    p = vz.add_parser("overlay", help="write per-class overlays and a legend for one image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--corpus", help="corpus file; its texts go into the legend")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True, help="base path; files are <stem>_<class>.png")
    p.set_defaults(func=cmd_viz_overlay)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "bg_threshold") and not 0.0 <= args.bg_threshold <= 1.0:
        print("qaclims: error: --bg-threshold must lie in [0, 1]", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"qaclims: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
