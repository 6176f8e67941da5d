"""Command line interface: ``tdodif <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 format error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, config_from_pairs, load_config
from .core import LabelMap, ProbMap
from .errors import ConfigError, FormatError
from .evalstats import confusion, format_iou_table, miou, pseudo_stats_many
from .ingest import (
    read_conf,
    read_features,
    read_flo,
    read_index_png,
    read_label_png,
    read_manifest,
    read_mask_png,
    read_prob,
    read_rgb,
    write_index_png,
    write_label_png,
    write_rgb,
)
from .losses import LossReport, combine, sample_correspondences, seg_loss, spatial_loss, temporal_loss
from .pipeline import (
    ImageStore,
    compute_thresholds,
    evaluate,
    generate_round_labels,
    pretrain,
    save_records,
    self_train,
    slic_params,
    visualize,
)
from .pseudo import read_thresholds, select_pseudo_labels, write_thresholds
from .sdiff import spatial_diffuse
from .slic import format_centers, slic_segment
from .synth import SceneSpec, emit_dataset, emit_fog_sweep, load_scene_spec
from .tdiff import flow_mask, temporal_fuse, warp_reference
from .toymodel import load_model, save_model

log = logging.getLogger("tdodif")

EXIT_CONFIG, EXIT_FORMAT, EXIT_IO = 2, 3, 4


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if args.jobs is not None:
        pairs.append(("jobs", str(args.jobs)))
    return config_from_pairs(pairs, cfg) if pairs else cfg


def _default_palette(num_classes: int):
    rng = np.random.default_rng(0)
    return [(0, 0, 0)] + [tuple(int(v) for v in rng.integers(0, 256, 3)) for _ in range(num_classes)]


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args, cfg):
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec(seed=cfg.seed)
    if args.betas:
        out = emit_fog_sweep(spec, args.out, [float(b) for b in args.betas.split(",")])
        for b, m in out.items():
            print(f"beta {b:g}: {len(m.entries)} target entries")
    else:
        m = emit_dataset(spec, args.out)
        print(f"{len(m.entries)} target entries written to {args.out}")


def cmd_slic(args, cfg):
    image = read_rgb(args.image)
    changes = {name: v for name, v in (("k", args.k), ("mc", args.mc), ("slic_iters", args.iters)) if v is not None}
    params = slic_params(cfg.replace(**changes), image.shape)
    sp = slic_segment(image, params)
    write_index_png(sp.assignment, args.out)
    centers = Path(args.centers) if args.centers else Path(args.out).with_suffix(".centers.txt")
    centers.write_text(format_centers(sp), encoding="utf-8")
    print(f"{sp.count} superpixels")


def cmd_thresholds(args, cfg):
    if args.p is not None:
        cfg = cfg.replace(p=args.p)
    if args.manifest:
        m = read_manifest(args.manifest)
        paths, c = [e.target_prob_path for e in m.entries], m.num_classes
    else:
        paths, c = [Path(p) for p in args.probs], None
    maps = [read_prob(p, strict=cfg.strict, tol=cfg.prob_tol) for p in paths]
    if not maps:
        raise ConfigError("no probability maps given")
    th = compute_thresholds(maps, c or maps[0].channels, cfg.p, cfg.hist_bins)
    write_thresholds(th, args.out)
    for k, (lam, empty) in enumerate(zip(th.lam, th.empty), 1):
        print(f"class {k}: {'empty' if empty else f'{lam:.6f}'}")


def cmd_init(args, cfg):
    probs = read_prob(args.prob, strict=cfg.strict, tol=cfg.prob_tol)
    th = read_thresholds(args.thresholds)
    init, pred = select_pseudo_labels(probs, th)
    write_label_png(init, args.out)
    if args.pred:
        write_label_png(pred, args.pred)
    print(f"labeled {init.labeled_count()} of {init.data.size} pixels")


def cmd_diffuse_spatial(args, cfg):
    init = read_label_png(args.init)
    pred = read_label_png(args.pred) if args.pred else None
    if pred is None:
        probs = read_prob(args.prob, strict=cfg.strict, tol=cfg.prob_tol)
        pred = LabelMap((np.argmax(probs.data, axis=0) + 1).astype(np.uint8), probs.channels)
    if args.superpixels:
        sp = read_index_png(args.superpixels)
    elif args.image:
        img = read_rgb(args.image)
        sp = slic_segment(img, slic_params(cfg, img.shape))
    else:
        raise ConfigError("diffuse-spatial needs --superpixels or --image")
    c = max(init.num_classes, pred.num_classes)
    out = spatial_diffuse(LabelMap(pred.data, c), LabelMap(init.data, c), sp)
    write_label_png(out, args.out)
    print(f"labeled {init.labeled_count()} -> {out.labeled_count()}")


def cmd_diffuse_temporal(args, cfg):
    if args.flow_threshold is not None:
        cfg = cfg.replace(flow_threshold=args.flow_threshold)
    t_probs = read_prob(args.target_prob, strict=cfg.strict, tol=cfg.prob_tol)
    r_probs = read_prob(args.ref_prob, strict=cfg.strict, tol=cfg.prob_tol)
    c = t_probs.channels
    t_labels = read_label_png(args.target_labels, c)
    r_labels = read_label_png(args.ref_labels, c)
    flow, conf = read_flo(args.flow), read_conf(args.conf)
    warped = warp_reference(r_labels, r_probs, flow, flow_mask(conf, cfg.flow_threshold), conf,
                            target_shape=t_labels.shape)
    fusion = temporal_fuse(t_labels, t_probs, warped)
    write_label_png(fusion.labels, args.out)
    print(f"fused {int(fusion.fused.sum())}, copied {int(fusion.copied.sum())}, "
          f"labeled {t_labels.labeled_count()} -> {fusion.labels.labeled_count()}")


def cmd_round(args, cfg):
    target = read_manifest(args.target, check=True)
    model = load_model(args.model) if args.model else None
    if model is None and cfg.model == "toy" and not args.external:
        raise ConfigError("round needs --model (toy checkpoint) or --external")
    out = Path(args.out)
    labels = generate_round_labels(target, cfg, model, out, args.round)
    save_records([labels.record], out / "record.json")
    write_thresholds(labels.thresholds, out / "thresholds.txt")
    for name, st in labels.record.stages.items():
        print(f"{name}: labeled {100 * st['labeled_fraction']:.2f}%  pseudo mIoU {100 * st['pseudo_miou']:.2f}")


def cmd_selftrain(args, cfg):
    source = read_manifest(args.source, check=True)
    target = read_manifest(args.target, check=True)
    model = load_model(args.model) if args.model else None
    result = self_train(source, target, cfg, args.out, model=model, start_round=args.round)
    if result.baseline_miou is not None:
        print(f"baseline mIoU {100 * result.baseline_miou:.2f}")
    for rec in result.records:
        line = f"round {rec.round}"
        if rec.eval_miou is not None:
            line += f": mIoU {100 * rec.eval_miou:.2f}"
        print(line)


def cmd_train(args, cfg):
    source = read_manifest(args.source, check=True)
    if args.epochs is not None:
        cfg = cfg.replace(pretrain_epochs=args.epochs)
    store = ImageStore()
    model = pretrain(source, cfg, store)
    save_model(model, args.out)
    if args.eval:
        m = read_manifest(args.eval, check=True)
        print(f"mIoU {100 * evaluate(model, m, store)[1]:.2f}")


def cmd_eval(args, cfg):
    m = read_manifest(args.manifest, check=True)
    c = m.num_classes
    gts = [read_label_png(e.gt_label_path, c) for e in m.entries if e.gt_label_path is not None]
    if len(gts) != len(m.entries):
        raise ConfigError("every manifest entry needs a ground-truth label for evaluation")
    if args.model:
        model = load_model(args.model)
        ious, mean = evaluate(model, m, ImageStore())
        preds = None
    else:
        pred_dir = Path(args.pred_dir)
        preds = [read_label_png(pred_dir / f"pseudo_{i:03d}.png", c) for i in range(len(m.entries))]
        cm = None
        for g, p in zip(gts, preds):
            cm = confusion(g, p, c) if cm is None else cm + confusion(g, p, c)
        ious, mean = miou(cm)
    print(format_iou_table(ious, mean, m.class_names))
    stats = None
    if args.stats and preds is not None:
        stats = pseudo_stats_many(preds, gts, c)
        print(f"labeled fraction {100 * stats.labeled_fraction:.2f}%  pseudo mIoU {100 * stats.pseudo_miou:.2f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for name, v in zip(m.class_names, ious):
                w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
            w.writerow(["mIoU", f"{mean:.6f}"])
            if stats is not None:
                w.writerow(["labeled_fraction", f"{stats.labeled_fraction:.6f}"])
                w.writerow(["pseudo_miou", f"{stats.pseudo_miou:.6f}"])


def cmd_losses(args, cfg):
    values = {"l_seg": 0.0, "l_spa": 0.0, "l_tem": 0.0}
    if args.logits:
        logits = read_features(args.logits).data
        values["l_seg"] = seg_loss(logits, read_label_png(args.labels)).value
    if args.features and args.superpixels:
        values["l_spa"] = spatial_loss(read_features(args.features), read_index_png(args.superpixels)).value
    if args.features and args.ref_features:
        f_t, f_r = read_features(args.features), read_features(args.ref_features)
        pred = read_label_png(args.pred)
        if args.flow:
            conf = read_conf(args.conf) if args.conf else None
            flow = read_flo(args.flow)
            mask = flow_mask(conf, cfg.flow_threshold) if conf is not None else np.ones(flow.shape, bool)
            dummy = LabelMap(np.zeros(flow.shape, np.uint8), 1)
            w = warp_reference(dummy, ProbMap(np.ones((1,) + flow.shape, np.float32)), flow, mask, conf,
                               target_shape=f_t.data.shape[1:])
            hit, source = w.hit, w.source
        elif args.hit:
            hit, source = read_mask_png(args.hit), None
        else:
            hit, source = np.ones(f_t.data.shape[1:], bool), None
        sample = sample_correspondences(hit, pred, cfg.n_pos, cfg.n_neg, np.random.default_rng(cfg.seed), source)
        values["l_tem"] = temporal_loss(f_t, f_r, sample).value
    rep = LossReport(l_seg_src=values["l_seg"], l_spa=values["l_spa"], l_tem=values["l_tem"])
    rep.l_final = combine(rep.l_seg_src, 0.0, rep.l_spa, rep.l_tem, cfg.alpha_t, cfg.alpha_spa, cfg.alpha_tem)
    print(rep.format())
    if args.json:
        Path(args.json).write_text(json.dumps(rep.as_dict(), indent=2) + "\n", encoding="utf-8")


def cmd_viz(args, cfg):
    labels = read_label_png(args.labels)
    if args.manifest:
        m = read_manifest(args.manifest)
        palette = m.class_palette
        labels = LabelMap(labels.data, m.num_classes)
    else:
        palette = _default_palette(labels.num_classes)
    image = read_rgb(args.image) if args.image else None
    write_rgb(visualize(labels, palette, image), args.out)


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting values given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers for per-image stages")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="tdodif", description="Pseudo-label diffusion for self-training.",
                                 parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic clear/foggy dataset")
    p.add_argument("--spec", help="scene spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--betas", help="comma-separated attenuation sweep, one dataset each")

    p = add("slic", cmd_slic, "segment an image into superpixels (16-bit id PNG)")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--mc", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--centers", help="centers sidecar (default: <out>.centers.txt)")

    p = add("thresholds", cmd_thresholds, "class-balanced confidence thresholds")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--probs", nargs="+")
    p.add_argument("--p", type=float, help="confident fraction (overrides the config)")
    p.add_argument("--out", required=True)

    p = add("init", cmd_init, "select confident pseudo labels")
    p.add_argument("--prob", "--probs", dest="prob", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred", help="also write the argmax prediction")

    p = add("diffuse-spatial", cmd_diffuse_spatial, "spread labels inside superpixels")
    p.add_argument("--init", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pred")
    g.add_argument("--prob", "--probs", dest="prob")
    p.add_argument("--superpixels", "--sp", dest="superpixels")
    p.add_argument("--image")
    p.add_argument("--out", required=True)

    p = add("diffuse-temporal", cmd_diffuse_temporal, "warp reference labels through flow and fuse")
    p.add_argument("--target-labels", "--target-init", dest="target_labels", required=True)
    p.add_argument("--target-prob", "--target-probs", dest="target_prob", required=True)
    p.add_argument("--ref-labels", required=True)
    p.add_argument("--ref-prob", "--ref-probs", dest="ref_prob", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--conf", required=True)
    p.add_argument("--T", type=float, dest="flow_threshold", help="flow confidence threshold")
    p.add_argument("--out", required=True)

    p = add("round", cmd_round, "generate one round of pseudo labels for a manifest")
    p.add_argument("--target", required=True)
    p.add_argument("--model", help="toy checkpoint used for predictions")
    p.add_argument("--external", action="store_true", help="read existing prob files instead of predicting")
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("selftrain", cmd_selftrain, "full self-training loop")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--model", help="starting checkpoint (default: pretrain on the source)")
    p.add_argument("--round", type=int, default=0, help="first round index (resume)")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "source-only training of the toy model")
    p.add_argument("--source", "--manifest", dest="source", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval", help="manifest to evaluate on afterwards")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "mIoU against ground truth")
    p.add_argument("--manifest", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--pred-dir", help="directory of pseudo_XXX.png files, one per entry")
    p.add_argument("--stats", action="store_true", help="also report pseudo-label coverage and mIoU")
    p.add_argument("--csv")

    p = add("losses", cmd_losses, "evaluate the training losses on stored maps")
    p.add_argument("--logits", help="PRB1 logits [C,H,W]")
    p.add_argument("--labels", help="label PNG for --logits")
    p.add_argument("--features", help="PRB1 features [D,h,w]")
    p.add_argument("--superpixels", "--sp", dest="superpixels", help="16-bit id PNG on the feature grid")
    p.add_argument("--hit", help="mask PNG of feature cells with a correspondence at the same position")
    p.add_argument("--ref-features")
    p.add_argument("--pred", help="predicted classes on the feature grid (negatives)")
    p.add_argument("--flow")
    p.add_argument("--conf")
    p.add_argument("--json")

    p = add("viz", cmd_viz, "color a label map, optionally over an image")
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", help="take the palette from a manifest")
    p.add_argument("--image")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("set", None), ("seed", None), ("jobs", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except ConfigError as e:
        print(f"tdodif: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"tdodif: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"tdodif: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # inconsistent inputs (shapes, class counts) that slipped past the config checks
        print(f"tdodif: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
