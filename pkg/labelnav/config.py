"""
Configuration settings for labelnav.

Defaults live in the section dataclasses below. Environment variables
(loaded from a .env file) override them, and an INI file passed on the
command line overrides both. Environment names follow
LABELNAV_<SECTION>_<KEY>, e.g. LABELNAV_META_LR_OUTER=0.001.
"""

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = 'LABELNAV'

# Output file names shared by the CLI and the harness
SCENES_DIR = 'scenes'
TFG_FILE = 'tfg.json'
UOI_FILE = 'uoi.json'
UOI_DATASET_FILE = 'uoi_dataset.json'
CHECKPOINT_FILE = 'checkpoint.json'
CONFIG_SNAPSHOT_FILE = 'run_config.json'
SCENE_DIAGNOSIS_FILE = 'scene_diagnosis.json'
TRAIN_HISTORY_FILE = 'train_history.jsonl'
REPORTS_DIR = 'reports'
TABLES_DIR = 'tables'
TRACES_DIR = 'traces'
EPISODES_DIR = 'episodes'


@dataclass(frozen=True)
class WorldConfig:
    width: int = 8
    height: int = 8
    density: float = 0.1
    view_range: float = 5.0
    view_aperture: float = 90.0
    success_distance: float = 2.0
    max_steps: int = 100
    reward_success: float = 5.0
    reward_step: float = -0.01
    covisibility_radius: float = 3.0
    known_classes: int = 6
    unknown_classes: int = 3
    unseen_classes: int = 2
    train_scenes: int = 20
    val_scenes: int = 5
    test_scenes: int = 5
    seed: int = 0


@dataclass(frozen=True)
class FeatureConfig:
    feature_dim: int = 32
    map_rows: int = 16
    relation_dim: int = 16
    noise_ratio: float = 0.1
    tfg_hidden: int = 64
    tfg_epochs: int = 2000


@dataclass(frozen=True)
class UoiConfig:
    layers: int = 2
    ffn_dim: int = 64
    threshold: float = 0.5
    epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 16
    train_frames: int = 600
    val_frames: int = 200


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    gcn_out: int = 16
    gamma: float = 0.99
    value_coef: float = 0.5
    entropy_coef: float = 0.01


@dataclass(frozen=True)
class MetaConfig:
    lr_mcfm: float = 1e-4
    lr_cca: float = 1e-4
    lr_outer: float = 1e-4
    batch_size: int = 4
    episodes: int = 2000
    eta: float = 1e-3
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    outer_optimizer: str = 'sgd'
    workers: int = 1
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_split: int = 200
    seeds: Tuple[int, ...] = (0, 1, 2)


SECTIONS = {
    'world': WorldConfig,
    'features': FeatureConfig,
    'uoi': UoiConfig,
    'policy': PolicyConfig,
    'meta': MetaConfig,
    'eval': EvalConfig,
}


@dataclass(frozen=True)
class Settings:
    world: WorldConfig = field(default_factory=WorldConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    uoi: UoiConfig = field(default_factory=UoiConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def snapshot(self) -> Dict[str, Dict[str, Any]]:
        """Plain-dict view written next to every output."""
        out = {}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def replace(self, section: str, **changes) -> 'Settings':
        """Return a copy with fields of one section changed."""
        updated = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: updated})


def _convert(raw: str, default: Any) -> Any:
    """Parse a raw string into the type of the default value."""
    if isinstance(default, bool):
        return raw.strip().lower() in ('1', 'true', 'yes', 'on')
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(' ', '').split(',') if x)
    return raw.strip()


def _section_values(name: str, cls, parser: Optional[configparser.ConfigParser]) -> Dict[str, Any]:
    values = {}
    for f in dataclasses.fields(cls):
        default = f.default
        value = default
        env_value = os.getenv(f'{ENV_PREFIX}_{name.upper()}_{f.name.upper()}')
        if env_value is not None:
            value = _convert(env_value, default)
        if parser is not None and parser.has_option(name, f.name):
            value = _convert(parser.get(name, f.name), default)
        values[f.name] = value
    return values


def load_settings(path: Optional[str] = None) -> Settings:
    """
    Resolve settings from defaults, environment and an optional INI file.

    Args:
        path: INI file with [world], [features], [uoi], [policy], [meta], [eval]

    Returns:
        Validated Settings
    """
    parser = None
    if path is not None:
        if not os.path.exists(path):
            raise ValueError(f"Config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        unknown = [s for s in parser.sections() if s not in SECTIONS]
        if unknown:
            raise ValueError(f"Unknown config sections: {', '.join(unknown)}")
        logger.info(f"Loaded configuration file {path}")

    sections = {name: cls(**_section_values(name, cls, parser)) for name, cls in SECTIONS.items()}
    settings = Settings(**sections)
    validate_config(settings)
    return settings


def validate_config(settings: Settings):
    """
    Validate that all configuration values are usable.
    Raises ValueError listing every offending key.
    """
    problems = []
    w, f, u, p, m, e = (settings.world, settings.features, settings.uoi,
                        settings.policy, settings.meta, settings.eval)

    if w.width < 2 or w.height < 2:
        problems.append('world.width/height must be >= 2')
    if not 0.0 <= w.density < 1.0:
        problems.append('world.density must be in [0, 1)')
    if min(w.known_classes, w.unknown_classes, w.unseen_classes) < 1:
        problems.append('world.known/unknown/unseen_classes must be >= 1')
    if w.max_steps < 1:
        problems.append('world.max_steps must be >= 1')
    if min(f.feature_dim, f.map_rows, f.relation_dim, f.tfg_hidden) < 1:
        problems.append('features dimensions must be >= 1')
    if u.layers < 1:
        problems.append('uoi.layers must be >= 1')
    if not 0.0 < u.threshold < 1.0:
        problems.append('uoi.threshold must be in (0, 1)')
    for key in ('lr_mcfm', 'lr_cca', 'lr_outer'):
        if getattr(m, key) <= 0:
            problems.append(f'meta.{key} must be > 0')
    if m.batch_size < 1:
        problems.append('meta.batch_size must be >= 1')
    if not (0.0 <= m.edge_drop < 1.0 and 0.0 <= m.feature_mask < 1.0):
        problems.append('meta.edge_drop/feature_mask must be in [0, 1)')
    if m.outer_optimizer not in ('sgd', 'adam'):
        problems.append("meta.outer_optimizer must be 'sgd' or 'adam'")
    if m.workers < 1:
        problems.append('meta.workers must be >= 1')
    if not 0.0 <= p.gamma <= 1.0:
        problems.append('policy.gamma must be in [0, 1]')
    if e.episodes_per_split < 1 or not e.seeds:
        problems.append('eval.episodes_per_split must be >= 1 and eval.seeds non-empty')

    if problems:
        raise ValueError(
            f"Invalid configuration: {'; '.join(problems)}\n"
            f"Please check your .env file and --config INI file."
        )
