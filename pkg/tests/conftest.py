"""Shared fixtures: a tiny world, its oracle and pretrained perception models."""

from dataclasses import dataclass

import pytest
import torch

from labelnav.config import (EvalConfig, FeatureConfig, MetaConfig, PolicyConfig, Settings, UoiConfig,
                             WorldConfig)
from labelnav.gridworld import AgentState, Scene, SceneObject, default_split, generate_scenes
from labelnav.metatrain import NavigationContext
from labelnav.perception import ClassFeatureOracle, TargetFeatureGenerator
from labelnav.uoi import PretrainResult, UoiModel, build_pretraining_sets, uoi_pretrain


TINY_SETTINGS = Settings(
    world=WorldConfig(width=6, height=6, max_steps=12, train_scenes=3, val_scenes=2, test_scenes=2,
                      known_classes=4, unknown_classes=2, unseen_classes=2),
    features=FeatureConfig(feature_dim=8, map_rows=4, relation_dim=6, tfg_hidden=16, tfg_epochs=2000),
    uoi=UoiConfig(layers=1, ffn_dim=16, epochs=2, batch_size=8, train_frames=40, val_frames=20),
    policy=PolicyConfig(embed_dim=8, hidden_dim=8, gcn_out=4),
    meta=MetaConfig(batch_size=2, episodes=4),
    eval=EvalConfig(episodes_per_split=2, seeds=(0, 1)),
)


@pytest.fixture(scope='session')
def tiny_settings() -> Settings:
    return TINY_SETTINGS


@pytest.fixture(scope='session')
def split(tiny_settings):
    w = tiny_settings.world
    return default_split(w.known_classes, w.unknown_classes, w.unseen_classes)


@pytest.fixture(scope='session')
def scene_sets(tiny_settings, split):
    return generate_scenes(tiny_settings.world, split)


@pytest.fixture(scope='session')
def oracle(tiny_settings, split):
    f = tiny_settings.features
    return ClassFeatureOracle(split, f.feature_dim, f.relation_dim, f.noise_ratio, seed=0)


@pytest.fixture(scope='session')
def trained_tfg(tiny_settings, split, oracle):
    f = tiny_settings.features
    tfg = TargetFeatureGenerator(hidden=f.tfg_hidden, rows=f.map_rows, feature_dim=f.feature_dim, seed=0)
    tfg.train(split.known, oracle, f.tfg_epochs)
    return tfg


@pytest.fixture(scope='session')
def trained_uoi(tiny_settings, split, scene_sets, oracle, trained_tfg):
    f, u = tiny_settings.features, tiny_settings.uoi
    bank = trained_tfg.bank(split)
    train_set, held_out = build_pretraining_sets(scene_sets['train'], scene_sets['val'], oracle, u.train_frames,
                                                 u.val_frames, 0, tiny_settings.world, f.map_rows)
    model = UoiModel(f.map_rows, f.feature_dim, f.relation_dim, len(split.unknown), u, seed=0)
    uoi_pretrain(model, train_set, held_out, bank, u, seed=0)
    return model


@pytest.fixture(scope='session')
def context(tiny_settings, split, scene_sets, oracle, trained_tfg, trained_uoi) -> NavigationContext:
    scenes = {s.scene_id: s for kind in scene_sets.values() for s in kind}
    return NavigationContext(tiny_settings, split, scenes, oracle, trained_uoi, trained_tfg.bank(split))


@pytest.fixture
def corridor_scene(split) -> Scene:
    """7x7 room: a big known object at (3, 1), a small unknown one at (0, 6)."""
    sofa = split.known[2]
    assert split.size_of(sofa) == 'big'
    objects = (
        SceneObject(0, sofa, 3, 1, 'big'),
        SceneObject(1, split.unknown[0], 0, 6, split.size_of(split.unknown[0])),
    )
    return Scene('hand-corridor', 7, 7, frozenset(), objects, split, 'test', 0)


@pytest.fixture
def start_facing_north() -> AgentState:
    return AgentState(3, 6, 0, 0)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)


@dataclass
class Perception:
    """Pretrained perception on a world, ready for navigation."""
    context: NavigationContext
    pretraining: PretrainResult


@pytest.fixture(scope='session')
def pretrained_perception():
    """Builds, once per seed, the default 8x8 world with its generator and identifier pretrained."""
    cache = {}

    def build(seed: int) -> Perception:
        if seed not in cache:
            settings = Settings()
            w, f, u = settings.world, settings.features, settings.uoi
            split = default_split(w.known_classes, w.unknown_classes, w.unseen_classes)
            scene_sets = generate_scenes(w, split)
            oracle = ClassFeatureOracle(split, f.feature_dim, f.relation_dim, f.noise_ratio, seed=w.seed)
            tfg = TargetFeatureGenerator(hidden=f.tfg_hidden, rows=f.map_rows, feature_dim=f.feature_dim, seed=seed)
            tfg.train(split.known, oracle, f.tfg_epochs)
            bank = tfg.bank(split)
            train_set, held_out = build_pretraining_sets(scene_sets['train'], scene_sets['val'], oracle,
                                                         u.train_frames, u.val_frames, seed, w, f.map_rows)
            model = UoiModel(f.map_rows, f.feature_dim, f.relation_dim, len(split.unknown), u, seed=seed)
            result = uoi_pretrain(model, train_set, held_out, bank, u, seed=seed)
            scenes = {s.scene_id: s for kind in scene_sets.values() for s in kind}
            cache[seed] = Perception(NavigationContext(settings, split, scenes, oracle, model, bank), result)
        return cache[seed]

    return build
