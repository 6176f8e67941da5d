import dataclasses

import numpy as np
import pytest

from tdodif import ConfidenceMap, FlowField, LabelMap
from tdodif.config import Order, PipelineConfig
from tdodif.errors import ConfigError
from tdodif.ingest import (
    Manifest,
    read_label_png,
    read_manifest,
    read_rgb,
    write_conf,
    write_flo,
    write_prob,
    write_rgb,
)
from tdodif.pipeline import generate_round_labels, pretrain, self_train, visualize
from tdodif.synth import SOURCE_MANIFEST, SceneSpec, emit_dataset
from tdodif.toymodel import ToyModel, predict

FAST = dict(k=40, pretrain_epochs=5, epochs=1, rounds=2, learning_rate=0.01)


@pytest.fixture
def tiny(tmp_path):
    spec = SceneSpec(seed=0, width=48, height=36, frames=4, source_images=2)
    target = emit_dataset(spec, tmp_path / "data")
    return read_manifest(tmp_path / "data" / SOURCE_MANIFEST), target, tmp_path


def _no_flow(m: Manifest) -> Manifest:
    entries = [dataclasses.replace(e, reference_prob_path=None, flow_path=None, flow_conf_path=None,
                                   reference_image_path=None) for e in m.entries]
    return dataclasses.replace(m, entries=entries)


def test_stage_coverage_is_monotone(tiny):
    source, target, _ = tiny
    cfg = PipelineConfig(**FAST)
    labels = generate_round_labels(target, cfg, pretrain(source, cfg))
    st = labels.record.stages
    assert list(st) == ["init", "td", "sd"]
    assert st["init"]["labeled_fraction"] <= st["td"]["labeled_fraction"] <= st["sd"]["labeled_fraction"]
    for el in labels.entries:
        keep = el.init.data != 0
        # spatial diffusion never overwrites a label it was given
        assert (el.stages["sd"].data[el.stages["td"].data != 0] == el.stages["td"].data[el.stages["td"].data != 0]).all()
        assert (el.stages["td"].data[keep] != 0).all()


def test_thresholds_use_the_current_model(tiny):
    source, target, tmp = tiny
    res = self_train(source, target, PipelineConfig(**FAST), out_dir=tmp / "run")
    r = res.records
    assert len(r) == 2
    assert r[1].predicted_with == r[0].trained_model
    assert r[0].thresholds != r[1].thresholds
    assert (tmp / "run" / "round_1" / "pseudo_000.png").exists()
    assert (tmp / "run" / "model_final.toy").exists() and (tmp / "run" / "records.json").exists()


def test_zero_rounds_rejected(tiny):
    source, target, _ = tiny
    with pytest.raises(ConfigError):
        self_train(source, target, PipelineConfig(**{**FAST, "rounds": 0}))


def test_spatial_only_without_flow(tiny):
    source, target, _ = tiny
    cfg = PipelineConfig(**FAST, order=Order.SD)
    labels = generate_round_labels(_no_flow(target), cfg, pretrain(source, cfg))
    assert list(labels.record.stages) == ["init", "sd"]


def test_combined_order_without_flow_degrades(tiny):
    source, target, _ = tiny
    cfg = PipelineConfig(**FAST)
    labels = generate_round_labels(_no_flow(target), cfg, pretrain(source, cfg))
    assert list(labels.record.stages) == ["init", "sd"]


def test_temporal_only_without_flow_rejected(tiny):
    source, target, _ = tiny
    cfg = PipelineConfig(**FAST, order=Order.TD)
    with pytest.raises(ConfigError):
        generate_round_labels(_no_flow(target), cfg, ToyModel.init(target.num_classes))


def test_identity_flow_self_reference_gives_init(tmp_path, rng):
    img = rng.integers(0, 256, (20, 24, 3)).astype(np.uint8)
    write_rgb(img, tmp_path / "a.png")
    write_prob(predict(ToyModel.init(3, seed=4), img), tmp_path / "a.prb")
    write_flo(FlowField(np.zeros((20, 24)), np.zeros((20, 24))), tmp_path / "f.flo")
    write_conf(ConfidenceMap(np.ones((20, 24), np.float32)), tmp_path / "c.cnf")
    text = ("classes = 3\nclass 1 = a 1 1 1\nclass 2 = b 2 2 2\nclass 3 = c 3 3 3\n"
            "a.png\ta.prb\ta.prb\tf.flo\tc.cnf\t-\ta.png\n")
    (tmp_path / "m.txt").write_text(text)
    m = read_manifest(tmp_path / "m.txt")
    labels = generate_round_labels(m, PipelineConfig(order=Order.TD, model="external"))
    el = labels.entries[0]
    assert el.final == el.init


def test_external_mode_reads_probs(tiny):
    source, target, tmp = tiny
    model = ToyModel.init(target.num_classes, seed=1)
    for e in target.entries:
        for img, prb in ((e.target_image_path, e.target_prob_path), (e.reference_image_path, e.reference_prob_path)):
            write_prob(predict(model, read_rgb(img)), prb)
    cfg = PipelineConfig(**FAST, model="external")
    res = self_train(source, target, cfg, out_dir=tmp / "ext")
    assert res.records[0].predicted_with is None
    direct = generate_round_labels(target, PipelineConfig(**FAST), model)
    got = read_label_png(tmp / "ext" / "round_0" / "pseudo_000.png", target.num_classes)
    assert got == direct.entries[0].final


def test_visualize_examples():
    labels = LabelMap(np.array([[0, 1, 2]], np.uint8), 2)
    pal = [(9, 9, 9), (255, 0, 0), (0, 0, 255)]
    assert visualize(labels, pal).tolist() == [[[0, 0, 0], [255, 0, 0], [0, 0, 255]]]
    img = np.full((1, 3, 3), 100, np.uint8)
    out = visualize(labels, pal, img, alpha=0.5)
    assert out[0, 0].tolist() == [100, 100, 100] and out[0, 1].tolist() == [178, 50, 50]
    with pytest.raises(ConfigError):
        visualize(labels, pal[:2])
