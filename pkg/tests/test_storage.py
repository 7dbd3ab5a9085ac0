"""Tests for the JSON, CSV and JSONL file formats."""

import os

import pytest

from labelnav import storage
from labelnav.evalharness import evaluation_episodes
from labelnav.gridworld import generate_episode
from labelnav.metatrain import PRESETS, MetaLearner
from labelnav.uoi import build_frame_dataset


class TestScenes:

    def test_round_trip(self, tmp_path, split, scene_sets):
        storage.save_scenes(str(tmp_path), split, scene_sets, world_seed=3)
        loaded_split, loaded, world_seed = storage.load_scenes(str(tmp_path))
        assert loaded_split == split
        assert world_seed == 3
        assert loaded == scene_sets

    def test_files_are_byte_stable(self, tmp_path, split, scene_sets):
        storage.save_scenes(str(tmp_path / 'a'), split, scene_sets)
        storage.save_scenes(str(tmp_path / 'b'), split, scene_sets)
        for kind in scene_sets:
            a = (tmp_path / 'a' / 'scenes' / f'{kind}.json').read_bytes()
            b = (tmp_path / 'b' / 'scenes' / f'{kind}.json').read_bytes()
            assert a == b

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            storage.load_scenes(str(tmp_path))

    def test_episodes(self, tmp_path, split, scene_sets, tiny_settings):
        specs = [generate_episode(s, scene_sets['test'][0], split.all_classes, tiny_settings.world)
                 for s in range(3)]
        path = str(tmp_path / 'episodes.json')
        storage.save_episodes(path, specs)
        assert storage.load_episodes(path) == specs

    def test_episode_sets(self, tmp_path, split, scene_sets, tiny_settings):
        sets = evaluation_episodes(scene_sets['test'], split, 2, (3, 1), tiny_settings.world)
        storage.save_episode_sets(str(tmp_path), sets)
        loaded = storage.load_episode_sets(str(tmp_path))
        assert list(loaded) == [1, 3]
        assert loaded == {s: sets[s] for s in (1, 3)}

    def test_episode_sets_replace_earlier_files(self, tmp_path, split, scene_sets, tiny_settings):
        storage.save_episode_sets(str(tmp_path), evaluation_episodes(scene_sets['test'], split, 1, (0, 1),
                                                                     tiny_settings.world))
        storage.save_episode_sets(str(tmp_path), evaluation_episodes(scene_sets['test'], split, 1, (2,),
                                                                     tiny_settings.world))
        assert list(storage.load_episode_sets(str(tmp_path))) == [2]
        assert storage.load_episode_sets(str(tmp_path / 'missing')) == {}


class TestModels:

    def test_tfg(self, tmp_path, trained_tfg, split):
        path = str(tmp_path / 'tfg.json')
        storage.save_tfg(path, trained_tfg, [1.0, 0.5])
        assert storage.load_tfg(path).bank(split).equal(trained_tfg.bank(split))

    def test_uoi(self, tmp_path, trained_uoi):
        path = str(tmp_path / 'uoi.json')
        storage.save_uoi(path, trained_uoi, [0.5, 0.6], [0.7, 0.6], 2)
        loaded = storage.load_uoi(path)
        assert loaded.store.digest() == trained_uoi.store.digest()
        assert storage.read_json(path)['best_epoch'] == 2

    def test_frame_dataset(self, tmp_path, scene_sets, oracle, tiny_settings):
        samples = build_frame_dataset(scene_sets['train'], oracle, 4, 0, tiny_settings.world, rows=4)
        path = str(tmp_path / 'frames.json')
        storage.save_frame_dataset(path, {'train': samples}, seed=0)
        seed, sets = storage.load_frame_dataset(path)
        assert seed == 0
        assert [s.gt for s in sets['train']] == [s.gt for s in samples]
        assert all(a.f_o.equal(b.f_o) for a, b in zip(sets['train'], samples))

    def test_checkpoint(self, tmp_path, context):
        learner = MetaLearner(context, PRESETS['full'], seed=1)
        path = storage.checkpoint_path(str(tmp_path))
        storage.save_checkpoint(path, learner.checkpoint())
        loaded = storage.load_checkpoint(path)
        assert loaded.digest() == learner.store.digest()
        assert loaded.flags == PRESETS['full']


class TestReports:

    def test_csv_uses_four_decimals(self, tmp_path):
        path = str(tmp_path / 'tables' / 't.csv')
        storage.write_csv(path, ['method', 'sr', 'flag'], [['full', 1 / 3, True], ['random', 0.5, False]])
        with open(path) as f:
            assert f.read() == 'method,sr,flag\nfull,0.3333,1\nrandom,0.5000,0\n'

    def test_jsonl_round_trip(self, tmp_path):
        path = str(tmp_path / 'trace.jsonl')
        rows = [{'step': 0, 'action': 'MoveAhead', 'l_cca': None}, {'step': 1, 'action': 'Done', 'l_cca': 0.25}]
        storage.write_jsonl(path, rows)
        assert storage.read_jsonl(path) == rows

    def test_json_keys_are_sorted(self, tmp_path):
        path = str(tmp_path / 'r.json')
        storage.write_json(path, {'b': 1, 'a': 2})
        with open(path) as f:
            text = f.read()
        assert text.index('"a"') < text.index('"b"') and text.endswith('\n')

    def test_canonical_hash_ignores_key_order(self):
        assert storage.canonical_hash({'a': 1, 'b': [1, 2]}) == storage.canonical_hash({'b': [1, 2], 'a': 1})

    def test_settings_snapshot(self, tmp_path, tiny_settings):
        path = storage.save_settings_snapshot(str(tmp_path), tiny_settings)
        assert os.path.exists(path)
        assert storage.read_json(path) == tiny_settings.snapshot()
