import copy
import dataclasses
import json
import os

import numpy as np
import numpy.testing as npt
import pytest

import pipeline
from dataset import DetectionDataset, generate_synthetic_dataset
from detector import FcosDetector
from errors import CheckpointError, DatasetError, PrerequisiteError, TrainingError
from pipeline import (CompositeModel, composite_infer, composite_trace, load_model, save_model,
                      train_fusion_in_situ, upstream_digests)
from schedule import LrSchedule, StageSchedule, lr_at_epoch


def test_learning_rate_schedule():
    schedule = LrSchedule(1e-4)
    expected = {0: 1e-4, 29: 1e-4, 30: 7e-5, 59: 7e-5, 60: 4.9e-5, 90: 3.43e-5}
    for epoch, lr in expected.items():
        assert lr_at_epoch(schedule, epoch) == pytest.approx(lr, rel=1e-12)
    rates = [lr_at_epoch(schedule, e) for e in range(200)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        lr_at_epoch(schedule, -1)
    with pytest.raises(ValueError):
        LrSchedule(0.0)


def test_initial_fusion_reproduces_detector(small_model, small_synth_config):
    config = dataclasses.replace(small_synth_config, image_count=100)
    images, _ = generate_synthetic_dataset(config, seed=21)
    produced = 0
    for image in images:
        expected = small_model.detector.predict(image)
        assert composite_infer(image, small_model) == expected
        produced += len(expected)
    assert produced > 0


def test_every_detection_gets_one_patch(small_model, small_dataset):
    seen = 0
    for image in small_dataset.images:
        trace = composite_trace(image, small_model)
        n = len(trace.raw_detections)
        assert trace.patches.shape == (n, 56, 56, 3)
        assert trace.p_mitosis.shape == (n,)
        assert trace.attention.shape == (n, 14, 14)
        assert len(trace.adjusted) == n
        if n:
            assert trace.fusion_inputs.shape == (n, 203)
            assert trace.raw_outputs.shape == (n, 3)
        seen += n
    assert seen > 0


def test_no_boxes_skips_the_classifier(small_model, small_dataset, monkeypatch):
    silent = FcosDetector(dataclasses.replace(small_model.detector.config, score_threshold=1.0),
                          small_model.detector.params)
    model = dataclasses.replace(small_model, detector=silent)

    def fail(_patches):
        raise AssertionError("classifier called without detections")

    monkeypatch.setattr(model.classifier, "classify", fail)
    for image in small_dataset.images:
        assert model.predict(image) == []


def test_fusion_training_keeps_upstream_frozen(small_model, small_dataset):
    detector_before = copy.deepcopy(small_model.detector.params)
    classifier_before = copy.deepcopy(small_model.classifier.params)
    digests = upstream_digests(small_model)

    schedule = StageSchedule(epochs=2, lr=LrSchedule(1e-3), batch_size=1)
    fusion, history, best = train_fusion_in_situ(small_model, small_dataset, small_dataset, schedule, seed=0)

    assert small_model.frozen_detector and small_model.frozen_classifier
    assert best["upstream_digests"] == digests
    for name, value in detector_before.items():
        npt.assert_array_equal(small_model.detector.params[name], value)
    for name, value in classifier_before.items():
        npt.assert_array_equal(small_model.classifier.params[name], value)
    assert list(history.columns) == ["epoch", "lr", "loss", "loss_bce", "loss_l1", "validation_f1"]
    assert len(history) == 2
    assert best["validation_f1"] >= best["initial_validation_f1"]
    assert fusion is small_model.fusion


def test_fusion_training_detects_upstream_changes(small_model, small_dataset, monkeypatch):
    original = pipeline._cache_upstream

    def tampering(model, dataset, desc):
        out = original(model, dataset, desc)
        model.detector.params["head.box.b"] += 1.0
        return out

    monkeypatch.setattr(pipeline, "_cache_upstream", tampering)
    with pytest.raises(TrainingError, match="detector"):
        train_fusion_in_situ(small_model, small_dataset, small_dataset, StageSchedule(epochs=1))


def test_only_frozen_stages_are_verified(small_model):
    assert small_model.verify_frozen() == upstream_digests(small_model)

    small_model.freeze_upstream()
    small_model.classifier.params["fc.b"] += 1.0
    with pytest.raises(TrainingError, match="classifier"):
        small_model.verify_frozen()

    small_model.frozen_classifier = False
    assert small_model.verify_frozen()["classifier"] != small_model.frozen_digests["classifier"]
    small_model.detector.params["head.box.b"] += 1.0
    with pytest.raises(TrainingError, match="detector"):
        small_model.verify_frozen()


def test_fusion_training_prerequisites(small_model, small_dataset):
    with pytest.raises(PrerequisiteError):
        train_fusion_in_situ(None, small_dataset, small_dataset, StageSchedule(epochs=1))
    with pytest.raises(PrerequisiteError):
        train_fusion_in_situ(dataclasses.replace(small_model, classifier=None), small_dataset, small_dataset,
                             StageSchedule(epochs=1))
    with pytest.raises(DatasetError):
        train_fusion_in_situ(small_model, DetectionDataset([], []), small_dataset, StageSchedule(epochs=1))


def test_save_and_load_round_trip(tmp_path, small_model, small_dataset, rng):
    small_model.fusion.params["fc3.w"][...] = rng.standard_normal((12, 3)).astype(np.float32) * 0.1
    path = save_model(small_model, tmp_path, config_hashes={"run": "abc"}, seed=7)
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["schema_version"] == pipeline.SCHEMA_VERSION
    assert manifest["config_hashes"] == {"run": "abc"}

    loaded = load_model(tmp_path)
    assert isinstance(loaded, CompositeModel)
    assert loaded.fusion_config == small_model.fusion_config
    for image in small_dataset.images:
        assert loaded.predict(image) == small_model.predict(image)


def test_load_rejects_missing_or_unknown_manifest(tmp_path, small_model):
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
    save_model(small_model, tmp_path)
    manifest = os.path.join(tmp_path, "manifest.json")
    with open(manifest, encoding="utf-8") as f:
        doc = json.load(f)
    doc["schema_version"] = 99
    with open(manifest, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    with pytest.raises(CheckpointError, match="schema_version"):
        load_model(tmp_path)
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("{")
    with pytest.raises(CheckpointError):
        load_model(tmp_path)
