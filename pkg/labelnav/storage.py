"""
File formats for scenes, episodes, pretrained models, checkpoints and reports.

Every JSON file is written with sorted keys and a fixed indent so equal
content gives equal bytes. Parameter values are stored as shortest-repr
floats, which read back bit-exactly.
"""

import csv
import glob
import hashlib
import json
import logging
import os
import re
from typing import Dict, Iterable, List, Sequence, Tuple

import torch

from labelnav.config import CHECKPOINT_FILE, CONFIG_SNAPSHOT_FILE, EPISODES_DIR, SCENES_DIR, Settings
from labelnav.gridworld import (AgentState, ClassSplit, EpisodeSpec, Scene, SceneObject, Target)
from labelnav.metatrain import Checkpoint
from labelnav.numerics import DTYPE
from labelnav.perception import TargetFeatureGenerator
from labelnav.uoi import FrameSample, UoiModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCENE_KINDS = ('train', 'val', 'test')
EPISODE_FILE_PATTERN = re.compile(r'test_(known|unknown|unseen)_seed(\d+)\.json')


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def canonical_hash(payload) -> str:
    """SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


def write_json(path: str, payload: Dict):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write('\n')
    logger.debug(f"Wrote {path}")


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing file: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


# ----------------------------------------------------------------------
# Scenes and episodes
# ----------------------------------------------------------------------

def split_to_dict(split: ClassSplit) -> Dict:
    return {
        'known': list(split.known),
        'unknown': list(split.unknown),
        'unseen': list(split.unseen),
        'names': list(split.names),
        'attributes': [list(a) for a in split.attributes],
    }


def split_from_dict(payload: Dict) -> ClassSplit:
    return ClassSplit(tuple(payload['known']), tuple(payload['unknown']), tuple(payload['unseen']),
                      tuple(payload['names']), tuple(tuple(a) for a in payload['attributes']))


def scene_to_dict(scene: Scene) -> Dict:
    return {
        'scene_id': scene.scene_id,
        'kind': scene.kind,
        'seed': scene.seed,
        'width': scene.width,
        'height': scene.height,
        'walls': sorted([list(w) for w in scene.walls]),
        'objects': [
            {'instance_id': o.instance_id, 'class_id': o.class_id, 'x': o.x, 'y': o.y, 'size': o.size}
            for o in scene.objects
        ],
    }


def scene_from_dict(payload: Dict, split: ClassSplit) -> Scene:
    objects = tuple(SceneObject(o['instance_id'], o['class_id'], o['x'], o['y'], o['size'])
                    for o in payload['objects'])
    return Scene(payload['scene_id'], payload['width'], payload['height'],
                 frozenset(tuple(w) for w in payload['walls']), objects, split,
                 payload['kind'], payload['seed'])


def state_to_dict(state: AgentState) -> Dict:
    return {'x': state.x, 'y': state.y, 'heading': state.heading, 'pitch': state.pitch}


def episode_to_dict(spec: EpisodeSpec) -> Dict:
    return {
        'episode_id': spec.episode_id,
        'scene_id': spec.scene_id,
        'start': state_to_dict(spec.start),
        'target': {'class_id': spec.target.class_id, 'attributes': list(spec.target.attributes),
                   'unlabeled': spec.target.unlabeled},
        'max_steps': spec.max_steps,
        'shortest_path': spec.shortest_path,
        'seed': spec.seed,
    }


def episode_from_dict(payload: Dict) -> EpisodeSpec:
    t = payload['target']
    return EpisodeSpec(payload['episode_id'], payload['scene_id'], AgentState(**payload['start']),
                       Target(t['class_id'], tuple(t['attributes']), t['unlabeled']),
                       payload['max_steps'], payload['shortest_path'], payload['seed'])


def save_scenes(output_dir: str, split: ClassSplit, scene_sets: Dict[str, List[Scene]],
                world_seed: int = 0) -> List[str]:
    """One file per scene kind under <output_dir>/scenes/, tagged with the world seed."""
    paths = []
    for kind, scenes in scene_sets.items():
        path = os.path.join(output_dir, SCENES_DIR, f'{kind}.json')
        write_json(path, {
            'format_version': FORMAT_VERSION,
            'split': split_to_dict(split),
            'world_seed': world_seed,
            'scenes': [scene_to_dict(s) for s in scenes],
        })
        paths.append(path)
        logger.info(f"Saved {len(scenes)} {kind} scenes to {path}")
    return paths


def load_scenes(output_dir: str, kinds: Iterable[str] = SCENE_KINDS) -> Tuple[ClassSplit, Dict[str, List[Scene]], int]:
    """
    Read scene files written by save_scenes.

    Returns:
        (class split, scenes by kind, world seed)

    Raises:
        ValueError: files disagree on the class split
    """
    split, world_seed = None, 0
    out: Dict[str, List[Scene]] = {}
    for kind in kinds:
        path = os.path.join(output_dir, SCENES_DIR, f'{kind}.json')
        if not os.path.exists(path):
            continue
        payload = read_json(path)
        file_split = split_from_dict(payload['split'])
        if split is not None and file_split != split:
            raise ValueError(f"Scene file {path} uses a different class split")
        split = file_split
        world_seed = payload.get('world_seed', 0)
        out[kind] = [scene_from_dict(s, split) for s in payload['scenes']]
        logger.info(f"Loaded {len(out[kind])} {kind} scenes from {path}")
    if split is None:
        raise FileNotFoundError(f"No scene files under {os.path.join(output_dir, SCENES_DIR)}")
    return split, out, world_seed


def save_episodes(path: str, specs: Sequence[EpisodeSpec]):
    write_json(path, {'format_version': FORMAT_VERSION, 'episodes': [episode_to_dict(s) for s in specs]})


def load_episodes(path: str) -> List[EpisodeSpec]:
    return [episode_from_dict(e) for e in read_json(path)['episodes']]


def save_episode_sets(output_dir: str, episode_sets: Dict[int, Dict[str, List[EpisodeSpec]]]) -> List[str]:
    """One file per seed and target split under <output_dir>/episodes/, replacing earlier ones."""
    for stale in glob.glob(os.path.join(output_dir, EPISODES_DIR, 'test_*_seed*.json')):
        os.remove(stale)
    paths = []
    for seed, by_split in episode_sets.items():
        for name, specs in by_split.items():
            path = os.path.join(output_dir, EPISODES_DIR, f'test_{name}_seed{seed}.json')
            save_episodes(path, specs)
            paths.append(path)
    logger.info(f"Saved {len(paths)} episode files to {os.path.join(output_dir, EPISODES_DIR)}")
    return paths


def load_episode_sets(output_dir: str) -> Dict[int, Dict[str, List[EpisodeSpec]]]:
    """Episode files written by save_episode_sets, by seed in ascending order; empty when there are none."""
    found: Dict[int, Dict[str, List[EpisodeSpec]]] = {}
    for path in glob.glob(os.path.join(output_dir, EPISODES_DIR, 'test_*_seed*.json')):
        match = EPISODE_FILE_PATTERN.fullmatch(os.path.basename(path))
        if match:
            found.setdefault(int(match.group(2)), {})[match.group(1)] = load_episodes(path)
    return {seed: found[seed] for seed in sorted(found)}


# ----------------------------------------------------------------------
# Pretrained models and checkpoints
# ----------------------------------------------------------------------

def save_tfg(path: str, tfg: TargetFeatureGenerator, history: Sequence[float] = ()):
    write_json(path, {'format_version': FORMAT_VERSION, 'history': list(history), 'model': tfg.to_dict()})


def load_tfg(path: str) -> TargetFeatureGenerator:
    return TargetFeatureGenerator.from_dict(read_json(path)['model'])


def save_uoi(path: str, model: UoiModel, isr: Sequence[float] = (), losses: Sequence[float] = (),
             best_epoch: int = 0):
    write_json(path, {'format_version': FORMAT_VERSION, 'isr': list(isr), 'losses': list(losses),
                      'best_epoch': best_epoch, 'model': model.to_dict()})


def load_uoi(path: str) -> UoiModel:
    return UoiModel.from_dict(read_json(path)['model'])


def save_frame_dataset(path: str, samples: Dict[str, Sequence[FrameSample]], seed: int):
    """Pretraining frames with the seed that generated them."""
    write_json(path, {
        'format_version': FORMAT_VERSION,
        'seed': seed,
        'sets': {
            name: [{'scene_id': s.scene_id, 'state': state_to_dict(s.state) if s.state else None,
                    'gt': s.gt, 'f_o': [float(x) for x in s.f_o.reshape(-1).tolist()],
                    'shape': list(s.f_o.shape)} for s in items]
            for name, items in samples.items()
        },
    })


def load_frame_dataset(path: str) -> Tuple[int, Dict[str, List[FrameSample]]]:
    payload = read_json(path)
    sets = {}
    for name, items in payload['sets'].items():
        sets[name] = [
            FrameSample(torch.tensor(s['f_o'], dtype=DTYPE).reshape(s['shape']), s['gt'], s['scene_id'],
                        AgentState(**s['state']) if s['state'] else None)
            for s in items
        ]
    return payload['seed'], sets


def save_checkpoint(path: str, checkpoint: Checkpoint):
    write_json(path, checkpoint.to_dict())
    logger.info(f"Saved checkpoint {path} (digest {checkpoint.digest()[:12]})")


def load_checkpoint(path: str) -> Checkpoint:
    checkpoint = Checkpoint.from_dict(read_json(path))
    logger.info(f"Loaded checkpoint {path} ({checkpoint.episodes_done} episodes)")
    return checkpoint


def checkpoint_path(output_dir: str) -> str:
    return os.path.join(output_dir, CHECKPOINT_FILE)


def save_settings_snapshot(output_dir: str, settings: Settings) -> str:
    path = os.path.join(output_dir, CONFIG_SNAPSHOT_FILE)
    write_json(path, settings.snapshot())
    return path


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

def format_cell(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    """Comma-separated table with floats fixed at four decimals."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.info(f"Wrote table {path} ({len(rows)} rows)")


def write_jsonl(path: str, rows: Iterable[Dict]):
    """One canonical JSON record per line."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(canonical_json(row))
            f.write('\n')
            count += 1
    logger.info(f"Wrote {count} trace records to {path}")


def read_jsonl(path: str) -> List[Dict]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]
