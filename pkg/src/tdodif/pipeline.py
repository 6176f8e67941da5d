"""Self-training rounds: predict, select, diffuse, re-train.

Each round recomputes class thresholds from the current model's predictions,
selects confident pseudo labels, diffuses them in the configured order, and
then trains the model for ``epochs`` epochs on the source labels plus the
diffused target pseudo labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import Order, PipelineConfig
from .core import LabelMap
from .errors import ConfigError
from .evalstats import ConfusionMatrix, confusion, miou, pseudo_stats_many
from .ingest import (
    Manifest,
    ManifestEntry,
    read_conf,
    read_flo,
    read_label_png,
    read_prob,
    read_rgb,
    write_label_png,
    write_prob,
)
from .pseudo import ClassConfidenceAccumulator, ClassThresholds, accumulate, select_pseudo_labels, thresholds_from_acc
from .sdiff import spatial_diffuse
from .slic import SlicParams, SuperpixelMap, downsample_superpixels, slic_segment
from .tdiff import TemporalFusion, flow_mask, fused_prediction, temporal_fuse, warp_reference
from .toymodel import (
    AdamState,
    ToyModel,
    TrainImage,
    cell_of,
    feature_grid,
    pixel_features,
    predict,
    save_model,
    subsample_features,
    train_epoch,
)

log = logging.getLogger(__name__)


# -- caches ------------------------------------------------------------------

class ImageStore:
    """Images and their derived features, loaded once per path."""

    def __init__(self):
        self._rgb: dict[Path, np.ndarray] = {}
        self._feats: dict[Path, np.ndarray] = {}

    def rgb(self, path) -> np.ndarray:
        path = Path(path)
        if path not in self._rgb:
            self._rgb[path] = read_rgb(path)
        return self._rgb[path]

    def feats(self, path) -> np.ndarray:
        path = Path(path)
        if path not in self._feats:
            self._feats[path] = pixel_features(self.rgb(path))
        return self._feats[path]


class SuperpixelCache:
    """Superpixels keyed by image content and SLIC parameters; images never change between rounds."""

    def __init__(self):
        self._maps: dict[tuple, SuperpixelMap] = {}

    def get(self, image: np.ndarray, params: SlicParams) -> SuperpixelMap:
        key = (hashlib.sha1(np.ascontiguousarray(image).tobytes()).hexdigest(), image.shape, params)
        if key not in self._maps:
            self._maps[key] = slic_segment(image, params)
        return self._maps[key]


DEFAULT_SP_CACHE = SuperpixelCache()


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def model_digest(model: ToyModel) -> str:
    h = hashlib.sha256()
    for k, v in model.params().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


# -- records -----------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    thresholds: list[float]
    thresholds_empty: list[bool]
    predicted_with: str | None = None  # digest of the model whose predictions seeded this round
    stages: dict[str, dict] = field(default_factory=dict)  # stage name -> PseudoLabelStats dict, in order
    epochs: list[dict] = field(default_factory=list)
    trained_model: str | None = None
    eval_miou: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def save_records(records, path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=2) + "\n",
                          encoding="utf-8")


# -- label generation ----------------------------------------------------------

@dataclass(eq=False)
class EntryLabels:
    init: LabelMap
    pred: LabelMap
    final: LabelMap
    stages: dict[str, LabelMap]
    superpixels: SuperpixelMap | None = None
    fusion: TemporalFusion | None = None
    hit: np.ndarray | None = None  # confident correspondences on the full-res target grid
    source: np.ndarray | None = None  # flat reference index per target pixel, -1 if none
    ref_shape: tuple[int, int] | None = None


@dataclass(eq=False)
class RoundLabels:
    entries: list[EntryLabels]
    thresholds: ClassThresholds
    record: RoundRecord
    probs: dict


def effective_order(order: Order, manifest: Manifest) -> Order:
    """Fall back to spatial-only diffusion for manifests without any flow entries."""
    if manifest.has_flow or not order.uses_temporal:
        return order
    if order is Order.TD:
        raise ConfigError("order TD needs flow entries, but the manifest has none")
    log.warning("manifest has no flow entries; running spatial diffusion only")
    return Order.SD


def slic_params(cfg: PipelineConfig, shape) -> SlicParams:
    h, w = shape[:2]
    return SlicParams(k=min(cfg.k, h * w), mc=cfg.mc, iters=cfg.slic_iters, seed=cfg.seed)


def ensure_probs(manifest: Manifest, model: ToyModel | None, store: ImageStore, cfg: PipelineConfig) -> dict:
    """Probability maps for every target and reference image.

    With a model, predictions are written to the manifest's prob paths first
    (so an external predictor could have written them instead); the maps are
    then read back from disk.
    """
    wanted: dict[Path, Path | None] = {}
    for e in manifest.entries:
        wanted.setdefault(e.target_prob_path, e.target_image_path)
        if e.reference_prob_path is not None:
            wanted.setdefault(e.reference_prob_path, e.reference_image_path)
    if model is not None:
        for prob_path, img_path in wanted.items():
            if img_path is None:
                if not prob_path.exists():
                    raise ConfigError(f"no image to predict {prob_path} from and the file does not exist")
                continue
            prob_path.parent.mkdir(parents=True, exist_ok=True)
            write_prob(predict(model, None, store.feats(img_path)), prob_path)
    out = {}
    for prob_path in wanted:
        probs = read_prob(prob_path, check_softmax=True, strict=cfg.strict, tol=cfg.prob_tol)
        if probs.channels != manifest.num_classes:
            raise ConfigError(f"{prob_path}: {probs.channels} channels, manifest declares {manifest.num_classes}")
        out[prob_path] = probs
    return out


def compute_thresholds(prob_maps, num_classes: int, p: float, bins: int = 4096) -> ClassThresholds:
    acc = ClassConfidenceAccumulator(num_classes, bins)
    for probs in prob_maps:
        acc = accumulate(probs, acc)
    return thresholds_from_acc(acc, p)


def _entry_labels(entry: ManifestEntry, probs: dict, th: ClassThresholds, order: Order, cfg: PipelineConfig,
                  store: ImageStore, sp_cache: SuperpixelCache) -> EntryLabels:
    p_t = probs[entry.target_prob_path]
    init, pred = select_pseudo_labels(p_t, th)
    stages = {"init": init}
    image = store.rgb(entry.target_image_path)
    if image.shape[:2] != init.shape:
        raise ConfigError(f"{entry.target_image_path}: image {image.shape[:2]} vs probs {init.shape}")
    need_sp = order.uses_spatial or cfg.alpha_spa > 0
    sp = sp_cache.get(image, slic_params(cfg, image.shape)) if need_sp else None

    warped = None
    ref_init = ref_pred = None
    if entry.has_flow:
        p_r = probs[entry.reference_prob_path]
        ref_init, ref_pred = select_pseudo_labels(p_r, th)
        flow = read_flo(entry.flow_path)
        conf = read_conf(entry.flow_conf_path)
        if flow.shape != p_r.shape or conf.shape != flow.shape:
            raise ConfigError(f"{entry.flow_path}: flow {flow.shape}, confidence {conf.shape} and reference {p_r.shape} disagree")
        mask = flow_mask(conf, cfg.flow_threshold)
        ref_labels = ref_init
        if order is Order.SD_TD and entry.reference_image_path is not None:
            ref_img = store.rgb(entry.reference_image_path)
            ref_labels = spatial_diffuse(ref_pred, ref_init, sp_cache.get(ref_img, slic_params(cfg, ref_img.shape)))
        warped = warp_reference(ref_labels, p_r, flow, mask, conf, target_shape=init.shape)

    current, guide, fusion = init, pred, None
    steps = {Order.TD_SD: ("td", "sd"), Order.SD_TD: ("sd", "td"), Order.SD: ("sd",),
             Order.TD: ("td",), Order.NONE: ()}[order]
    for step in steps:
        if step == "sd":
            current = spatial_diffuse(guide, current, sp)
            stages["sd"] = current
        elif warped is not None:
            fusion = temporal_fuse(current, p_t, warped)
            current = fusion.labels
            guide = fused_prediction(guide, fusion)
            stages["td"] = current
        else:
            stages["td"] = current
    return EntryLabels(
        init=init, pred=pred, final=current, stages=stages, superpixels=sp, fusion=fusion,
        hit=None if warped is None else warped.hit,
        source=None if warped is None else warped.source,
        ref_shape=None if warped is None else probs[entry.reference_prob_path].shape,
    )


def generate_round_labels(manifest: Manifest, cfg: PipelineConfig, model: ToyModel | None = None,
                          out_dir=None, round_index: int = 0, store: ImageStore | None = None,
                          sp_cache: SuperpixelCache | None = None) -> RoundLabels:
    """Predict (or read) target probabilities, select confident labels, diffuse them.

    Pseudo labels are written to ``out_dir/pseudo_XXX.png`` when ``out_dir`` is
    given.  Per-stage statistics are recorded when ground truth is available.
    """
    store = store or ImageStore()
    sp_cache = sp_cache or DEFAULT_SP_CACHE
    order = effective_order(cfg.order, manifest)
    probs = ensure_probs(manifest, model, store, cfg)
    th = compute_thresholds([probs[e.target_prob_path] for e in manifest.entries],
                            manifest.num_classes, cfg.p, cfg.hist_bins)
    entries = _map(lambda e: _entry_labels(e, probs, th, order, cfg, store, sp_cache), manifest.entries, cfg.jobs)

    record = RoundRecord(round_index, th.lam.tolist(), th.empty.tolist(),
                         predicted_with=None if model is None else model_digest(model))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, el in enumerate(entries):
            write_label_png(el.final, out / f"pseudo_{i:03d}.png")
    if manifest.entries and all(e.gt_label_path is not None for e in manifest.entries):
        gts = [read_label_png(e.gt_label_path, manifest.num_classes) for e in manifest.entries]
        for name in entries[0].stages:
            stats = pseudo_stats_many([el.stages[name] for el in entries], gts, manifest.num_classes)
            record.stages[name] = stats.as_dict()
    return RoundLabels(entries, th, record, probs)


# -- training ------------------------------------------------------------------

def source_items(manifest: Manifest, store: ImageStore) -> list[TrainImage]:
    items = []
    for e in manifest.entries:
        if e.gt_label_path is None:
            raise ConfigError(f"source entry {e.target_image_path} has no label file")
        feats = store.feats(e.target_image_path)
        labels = read_label_png(e.gt_label_path, manifest.num_classes)
        items.append(TrainImage(feats.reshape(-1, feats.shape[-1]), labels.data.ravel().copy()))
    return items


def target_items(manifest: Manifest, labels: RoundLabels, cfg: PipelineConfig, store: ImageStore) -> list[TrainImage]:
    s = cfg.feature_stride
    items = []
    for e, el in zip(manifest.entries, labels.entries):
        feats = store.feats(e.target_image_path)
        h, w = feats.shape[:2]
        sub, sub_shape = subsample_features(feats, s)
        fh, fw = sub_shape
        item = TrainImage(feats.reshape(-1, feats.shape[-1]), el.final.data.ravel().copy(), sub=sub, sub_shape=sub_shape)
        if el.superpixels is not None:
            item.sp_down = downsample_superpixels(el.superpixels, fw, fh).assignment
        if el.hit is not None and e.reference_image_path is not None:
            _, _, cy, cx = feature_grid(h, w, s)
            hit = el.hit[cy[:, None], cx[None, :]]
            src = el.source[cy[:, None], cx[None, :]]
            rh, rw = el.ref_shape
            qy, qx = np.divmod(np.where(hit, src, 0), rw)
            ry, rx = cell_of(qy, qx, rh, rw, s)
            rfh, rfw, _, _ = feature_grid(rh, rw, s)
            ref_feats = store.feats(e.reference_image_path)
            item.hit = hit
            item.source = np.where(hit, ry * rfw + rx, -1)
            item.pred = el.pred.data[cy[:, None], cx[None, :]]
            item.ref_sub, item.ref_shape = subsample_features(ref_feats, s)
        items.append(item)
    return items


def evaluate(model: ToyModel, manifest: Manifest, store: ImageStore) -> tuple[list[float], float]:
    """Dataset-level IoU of the model's argmax predictions against ground truth."""
    cm = ConfusionMatrix.empty(manifest.num_classes)
    for e in manifest.entries:
        if e.gt_label_path is None:
            continue
        probs = predict(model, None, store.feats(e.target_image_path))
        pred = LabelMap((np.argmax(probs.data, axis=0) + 1).astype(np.uint8), manifest.num_classes)
        cm = cm + confusion(read_label_png(e.gt_label_path, manifest.num_classes), pred, manifest.num_classes)
    return miou(cm)


def pretrain(source: Manifest, cfg: PipelineConfig, store: ImageStore | None = None) -> ToyModel:
    """Source-only training from a seeded initialisation."""
    store = store or ImageStore()
    rng = np.random.default_rng([cfg.seed, 1])
    model = ToyModel.init(source.num_classes, cfg.hidden, cfg.seed)
    opt = AdamState(lr=cfg.pretrain_learning_rate)
    items = source_items(source, store)
    for _ in range(cfg.pretrain_epochs):
        model, _ = train_epoch(model, opt, [], items, cfg, rng)
    return model


@dataclass
class SelfTrainResult:
    model: ToyModel
    records: list[RoundRecord]
    initial_model: ToyModel
    baseline_miou: float | None = None


def self_train(source: Manifest, target: Manifest, cfg: PipelineConfig, out_dir=None,
               model: ToyModel | None = None, eval_manifest: Manifest | None = None,
               store: ImageStore | None = None, sp_cache: SuperpixelCache | None = None,
               start_round: int = 0) -> SelfTrainResult:
    """Run ``cfg.rounds`` rounds of label generation and re-training.

    ``model`` is the source-pretrained starting point; without one the toy
    model is pretrained on ``source`` first.  The model carries over between
    rounds.  In external mode (``cfg.model == "external"``) only the pseudo
    labels of round ``start_round`` are produced, from prob files on disk.
    """
    if cfg.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if source.num_classes != target.num_classes:
        raise ConfigError("source and target manifests declare different class counts")
    store = store or ImageStore()
    sp_cache = sp_cache or DEFAULT_SP_CACHE
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    eval_manifest = eval_manifest or target

    if cfg.model == "external":
        labels = generate_round_labels(target, cfg, None, None if out is None else out / f"round_{start_round}",
                                       start_round, store, sp_cache)
        records = [labels.record]
        if out is not None:
            save_records(records, out / f"records_round_{start_round}.json")
        return SelfTrainResult(model, records, model)

    if model is None:
        model = pretrain(source, cfg, store)
    initial = model.copy()
    if out is not None:
        save_model(initial, out / "model_init.toy")
    has_gt = any(e.gt_label_path is not None for e in eval_manifest.entries)
    baseline = evaluate(model, eval_manifest, store)[1] if has_gt else None

    src = source_items(source, store)
    opt = AdamState(lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 2])
    use_temporal = cfg.alpha_tem > 0 and target.has_flow
    use_spatial = cfg.alpha_spa > 0
    records = []
    for r in range(start_round, start_round + cfg.rounds):
        round_dir = None if out is None else out / f"round_{r}"
        labels = generate_round_labels(target, cfg, model, round_dir, r, store, sp_cache)
        items = target_items(target, labels, cfg, store)
        rec = labels.record
        for _ in range(cfg.epochs):
            model, rep = train_epoch(model, opt, items, src, cfg, rng, use_spatial, use_temporal)
            rec.epochs.append(rep.as_dict())
        rec.trained_model = model_digest(model)
        if has_gt:
            rec.eval_miou = evaluate(model, eval_manifest, store)[1]
        if round_dir is not None:
            save_model(model, round_dir / "model.toy")
        records.append(rec)
        log.info("round %d: %s", r, {k: round(v["labeled_fraction"], 4) for k, v in rec.stages.items()})
    if out is not None:
        save_model(model, out / "model_final.toy")
        save_records(records, out / "records.json")
    return SelfTrainResult(model, records, initial, baseline)


# -- visualisation --------------------------------------------------------------

def visualize(labels: LabelMap, palette, image: np.ndarray | None = None, alpha: float = 0.5) -> np.ndarray:
    """Color a label map; with an image, blend colors over it (unlabeled pixels pass through)."""
    pal = np.asarray(palette, dtype=np.float64)
    if pal.ndim != 2 or pal.shape[1] != 3 or len(pal) < labels.num_classes + 1:
        raise ConfigError(f"palette needs {labels.num_classes + 1} RGB entries, got {len(pal)}")
    lab = labels.data
    colors = pal[lab]
    if image is None:
        colors[lab == 0] = 0.0
        return np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    img = np.asarray(image, dtype=np.float64)
    out = img.copy()
    m = lab != 0
    out[m] = (1 - alpha) * img[m] + alpha * colors[m]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
