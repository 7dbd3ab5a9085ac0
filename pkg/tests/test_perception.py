"""Tests for attribute embeddings, the feature oracle, detection and the target feature generator."""

import numpy as np
import pytest
import torch

from labelnav.errors import NotTrainedError, PerceptionError
from labelnav.gridworld import (ATTRIBUTE_VOCABULARY, AgentState, ObservationFrame, Scene, SceneObject,
                                VisibleObject, observe)
from labelnav.perception import (TargetFeatureGenerator, attribute_embed, class_attribute_vector,
                                 detect_known, ego_pose, ego_transform, observation_features)


class TestAttributes:

    def test_multi_hot(self):
        vec = attribute_embed(['small', 'glass'])
        assert float(vec.sum()) == 2.0
        assert vec[ATTRIBUTE_VOCABULARY.index('glass')] == 1.0

    def test_deterministic(self):
        assert torch.equal(attribute_embed(['big', 'wood']), attribute_embed(['wood', 'big']))

    def test_empty_set_rejected(self):
        with pytest.raises(PerceptionError):
            attribute_embed([])

    def test_unknown_attribute_rejected(self):
        with pytest.raises(PerceptionError):
            attribute_embed(['squishy'])


class TestEgoPose:

    def test_dead_ahead(self):
        pose = ego_pose(AgentState(2, 2, 0, 0), 2, 0)
        torch.testing.assert_close(pose, torch.tensor([0.0, 2.0, 2.0, 0.0, 1.0, 0.0], dtype=torch.float64))

    def test_bearing_ninety(self):
        pose = ego_pose(AgentState(2, 2, 0, 0), 4, 2)
        assert float(pose[3]) == pytest.approx(1.0)
        assert float(pose[4]) == pytest.approx(0.0, abs=1e-12)

    def test_translation_invariance(self):
        a = ego_pose(AgentState(1, 4, 90, -30), 3, 3)
        b = ego_pose(AgentState(3, 5, 90, -30), 5, 4)
        torch.testing.assert_close(a, b)

    def test_rotation_consistency(self):
        north = ego_pose(AgentState(2, 2, 0, 0), 2, 0)
        east = ego_pose(AgentState(2, 2, 90, 0), 4, 2)
        torch.testing.assert_close(north, east)

    def test_missing_object(self, split):
        frame = ObservationFrame('none', AgentState(0, 0), ())
        with pytest.raises(PerceptionError):
            ego_transform(frame, 3)


class TestOracle:
    """Prototype separation, observation maps and detection."""

    def test_prototypes_are_separated(self, oracle):
        protos = oracle.prototypes.numpy()
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                assert np.linalg.norm(protos[i] - protos[j]) > 4.0 * oracle.sigma

    def test_empty_frame_is_background(self, oracle):
        frame = ObservationFrame('none', AgentState(0, 0), ())
        fmap = observation_features(frame, oracle, rows=4)
        assert torch.equal(fmap, oracle.background.repeat(4, 1))

    def test_one_object_row(self, oracle, split):
        scene = Scene('one', 5, 5, frozenset(), (SceneObject(0, split.known[2], 2, 0, 'big'),), split)
        frame = observe(scene, AgentState(2, 2, 0, 0))
        fmap = observation_features(frame, oracle, rows=4)
        assert torch.equal(fmap, observation_features(frame, oracle, rows=4))
        nearest = int(torch.argmin(torch.linalg.norm(oracle.prototypes - fmap[0], dim=1)))
        assert nearest == split.known[2]
        assert torch.equal(fmap[1:], oracle.background.repeat(3, 1))

    def test_detector_reports_known_only(self, oracle, split):
        frame = ObservationFrame('mixed', AgentState(2, 2, 0, 0), (
            VisibleObject(0, split.known[0], 2, 1, 'small', 1.0, 0.0),
            VisibleObject(1, split.unknown[0], 2, 0, 'small', 2.0, 0.0),
        ))
        detections = detect_known(frame, oracle)
        assert [d.class_id for d in detections] == [split.known[0]]
        assert detections[0].feature.shape == (oracle.relation_dim,)

    def test_detection_noise_is_bounded(self, oracle, split):
        scene = Scene('one', 5, 5, frozenset(), (SceneObject(0, split.known[2], 2, 0, 'big'),), split)
        close = 0
        for seed in range(200):
            state = AgentState(2, 2 + seed % 3, 0, (seed % 3 - 1) * 30)
            frame = ObservationFrame(f'scene-{seed}', state, observe(scene, state).visible)
            det = detect_known(frame, oracle)[0]
            raw_gap = det.feature - oracle.detector_prototype(split.known[2])
            close += int(float(torch.linalg.norm(raw_gap)) <= 3.0 * oracle.sigma)
        assert close >= 198


class TestTargetFeatureGenerator:

    def test_untrained_generator_refuses(self, split):
        tfg = TargetFeatureGenerator(rows=4, feature_dim=8)
        with pytest.raises(NotTrainedError):
            tfg.generate(class_attribute_vector(split, split.unknown[0]))

    def test_trains_on_known_classes_only(self, split, oracle):
        tfg = TargetFeatureGenerator(rows=4, feature_dim=8)
        with pytest.raises(PerceptionError):
            tfg.train(split.all_classes, oracle, epochs=1)

    def test_loss_is_monotone(self, split, oracle):
        tfg = TargetFeatureGenerator(hidden=16, rows=4, feature_dim=8, seed=1)
        history = tfg.train(split.known, oracle, epochs=100)
        assert all(b <= a + 1e-6 for a, b in zip(history, history[1:]))

    def test_only_output_layer_is_fitted(self, split, oracle):
        tfg = TargetFeatureGenerator(hidden=16, rows=4, feature_dim=8, seed=1)
        before = tfg.store.digest(['psi'])
        w1, b1 = tfg.store['tfg_w1'].clone(), tfg.store['tfg_b1'].clone()
        tfg.train(split.known, oracle, epochs=10)
        assert torch.equal(tfg.store['tfg_w1'], w1) and torch.equal(tfg.store['tfg_b1'], b1)
        assert tfg.store.digest(['psi']) != before

    def test_known_classes_are_fitted(self, trained_tfg, split, oracle):
        for c in split.known:
            g = trained_tfg.generate(class_attribute_vector(split, c))
            proto = oracle.prototype(c)
            mse = float(((g.mean(dim=0) - proto) ** 2).sum())
            assert mse <= 0.05 * float((proto ** 2).sum())

    def test_bank_holds_one_map_per_unknown_class(self, trained_tfg, split):
        bank = trained_tfg.bank(split)
        assert bank.shape == (len(split.unknown), 4, 8)
        assert torch.equal(bank, trained_tfg.bank(split))

    def test_serialization_keeps_outputs(self, trained_tfg, split):
        restored = TargetFeatureGenerator.from_dict(trained_tfg.to_dict())
        assert torch.equal(restored.bank(split), trained_tfg.bank(split))
