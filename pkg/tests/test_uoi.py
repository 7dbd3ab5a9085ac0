"""Tests for the unlabeled object identifier."""

import math

import pytest
import torch

from labelnav.config import UoiConfig
from labelnav.errors import BankSizeError, EmptyBatchError, FrozenParametersError
from labelnav.gridworld import AgentState, observe
from labelnav.numerics import DTYPE, finite_diff_check
from labelnav.perception import observation_features
from labelnav.uoi import (FrameSample, UoiModel, build_frame_dataset, build_pretraining_sets, restrict_frame,
                          select_epoch, uoi_batch, uoi_forward, uoi_loss, uoi_pretrain)


@pytest.fixture
def small_model():
    return UoiModel(rows=2, feature_dim=4, relation_dim=3, n_unknown=2, config=UoiConfig(layers=1, ffn_dim=4), seed=5)


@pytest.fixture
def inputs():
    gen = torch.Generator().manual_seed(11)
    return (torch.randn(2, 4, generator=gen, dtype=DTYPE),
            torch.randn(2, 2, 4, generator=gen, dtype=DTYPE))


class TestForward:

    def test_output_shapes(self, small_model, inputs):
        f_o, bank = inputs
        out = small_model.forward(f_o, bank)
        assert out.f_t.shape == (3,)
        assert 0.0 < out.cls_prob < 1.0
        assert out.cls == int(out.cls_prob >= 0.5)

    def test_zero_classifier_gives_one_half(self, small_model, inputs):
        f_o, bank = inputs
        params = dict(small_model.params)
        params['uoi_w_m2'] = torch.zeros_like(params['uoi_w_m2'])
        out = uoi_forward(f_o, bank, params, 2)
        assert out.cls_prob == pytest.approx(0.5)
        assert out.cls == 1

    def test_bank_order_does_not_matter(self, small_model, inputs):
        f_o, bank = inputs
        a = small_model.forward(f_o, bank)
        b = small_model.forward(f_o, bank.flip(0))
        torch.testing.assert_close(a.f_t, b.f_t)
        assert a.cls_prob == pytest.approx(b.cls_prob, abs=1e-12)

    def test_duplicated_bank_entry_pools_to_itself(self, small_model, inputs):
        f_o, bank = inputs
        single, _ = uoi_batch(f_o.unsqueeze(0), bank[:1], small_model.params)
        doubled, _ = uoi_batch(f_o.unsqueeze(0), bank[:1].repeat(2, 1, 1), small_model.params)
        torch.testing.assert_close(single, doubled)

    def test_batch_matches_single_frames(self, small_model, inputs):
        f_o, bank = inputs
        batch = torch.stack([f_o, f_o * 2.0])
        f_t, prob = uoi_batch(batch, bank, small_model.params)
        second = small_model.forward(f_o * 2.0, bank)
        torch.testing.assert_close(f_t[1], second.f_t)

    def test_bank_size_checked(self, small_model, inputs):
        f_o, bank = inputs
        with pytest.raises(BankSizeError):
            small_model.forward(f_o, bank[:1])


class TestLoss:

    def test_half_probability(self):
        assert float(uoi_loss(torch.tensor(0.5, dtype=DTYPE), 1)) == pytest.approx(math.log(2.0))

    def test_confident_and_correct(self):
        assert float(uoi_loss(torch.tensor(1.0 - 1e-9, dtype=DTYPE), 1)) < 1e-8

    def test_extreme_probabilities_are_clamped(self):
        assert math.isfinite(float(uoi_loss(torch.tensor(1.0, dtype=DTYPE), 0)))
        assert math.isfinite(float(uoi_loss(torch.tensor(0.0, dtype=DTYPE), 1)))

    @pytest.mark.parametrize('seed', range(20))
    def test_gradient_matches_finite_differences(self, seed):
        model = UoiModel(rows=2, feature_dim=4, relation_dim=3, n_unknown=2,
                         config=UoiConfig(layers=1, ffn_dim=4), seed=seed)
        gen = torch.Generator().manual_seed(100 + seed)
        f_o = torch.randn(2, 4, generator=gen, dtype=DTYPE)
        bank = torch.randn(2, 2, 4, generator=gen, dtype=DTYPE)
        gt = torch.full((1,), float(seed % 2), dtype=DTYPE)

        def loss_fn(p):
            _, prob = uoi_batch(f_o.unsqueeze(0), bank, p)
            return uoi_loss(prob, gt).sum()

        assert finite_diff_check(loss_fn, model.store) <= 1e-4


class TestPretraining:

    def test_epoch_selection_prefers_earliest(self):
        assert select_epoch([0.5, 0.9, 0.9, 0.7]) == 2
        with pytest.raises(EmptyBatchError):
            select_epoch([])

    def test_balanced_dataset(self, scene_sets, oracle, tiny_settings):
        samples = build_frame_dataset(scene_sets['train'], oracle, 20, 3, tiny_settings.world, rows=4)
        assert len(samples) == 20
        assert sum(s.gt for s in samples) == 10
        again = build_frame_dataset(scene_sets['train'], oracle, 20, 3, tiny_settings.world, rows=4)
        assert [s.state for s in samples] == [s.state for s in again]

    def test_held_out_frames_ignore_never_seen_classes(self, scene_sets, oracle, split, tiny_settings):
        assert all(set(s.classes_present()) & set(split.unseen) for s in scene_sets['val'])
        _, held_out = build_pretraining_sets(scene_sets['train'], scene_sets['val'], oracle, 12, 12, 7,
                                             tiny_settings.world, rows=4)
        assert held_out
        by_id = {s.scene_id: s for s in scene_sets['val']}
        labelled = frozenset(split.known + split.unknown)
        for sample in held_out:
            frame = observe(by_id[sample.scene_id], sample.state, tiny_settings.world)
            assert sample.gt == int(any(v.class_id in split.unknown for v in frame.visible))
            expected = observation_features(restrict_frame(frame, split, labelled), oracle, 4)
            torch.testing.assert_close(sample.f_o, expected)

    def test_restricted_frame_drops_other_classes(self, corridor_scene, split, tiny_settings):
        frame = observe(corridor_scene, AgentState(0, 4, 180, 0), tiny_settings.world)
        assert frame.gt == 1 and frame.visible
        only_known = restrict_frame(frame, split, frozenset(split.known))
        assert only_known.gt == 0
        assert all(v.class_id in split.known for v in only_known.visible)

    def test_empty_dataset_rejected(self, small_model, inputs):
        _, bank = inputs
        with pytest.raises(EmptyBatchError):
            uoi_pretrain(small_model, [], [FrameSample(torch.zeros(2, 4, dtype=DTYPE), 0)], bank)

    def test_pretrained_model_is_frozen(self, trained_uoi, context):
        before = trained_uoi.store.digest()
        trained_uoi.forward(torch.zeros(4, 8, dtype=DTYPE), context.bank)
        assert trained_uoi.store.digest() == before
        with pytest.raises(FrozenParametersError):
            trained_uoi.store.update('uoi_w_m2', torch.zeros(6, 1, dtype=DTYPE))

    def test_selected_epoch_is_restored(self, small_model, inputs):
        f_o, bank = inputs
        train = [FrameSample(f_o * (1 + k), k % 2) for k in range(6)]
        held = [FrameSample(f_o * (2 + k), k % 2) for k in range(4)]
        result = uoi_pretrain(small_model, train, held, bank, UoiConfig(layers=1, ffn_dim=4, epochs=3, batch_size=2))
        assert len(result.isr) == len(result.losses) == 3
        assert result.best_epoch == select_epoch(result.isr)
        assert small_model.isr(held, bank) == pytest.approx(result.isr[result.best_epoch - 1])

    def test_serialization_round_trip(self, trained_uoi, context):
        restored = UoiModel.from_dict(trained_uoi.to_dict())
        assert restored.store.digest() == trained_uoi.store.digest()
        assert restored.store.frozen

    @pytest.mark.slow
    @pytest.mark.parametrize('seed', (0, 1, 2))
    def test_default_world_reaches_held_out_isr(self, pretrained_perception, seed):
        result = pretrained_perception(seed).pretraining
        assert len(result.isr) <= 10
        assert result.isr[result.best_epoch - 1] >= 0.9
