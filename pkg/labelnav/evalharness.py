"""
Evaluation harness.

Success rate, SPL and ISR metrics; split-wise evaluation of a checkpoint over
several seeds; distance and target-size breakdowns; the random walker and
the plain baseline; the ablation matrix; and the tables the report command
writes.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from labelnav import storage
from labelnav.config import Settings, WorldConfig
from labelnav.errors import EmptyResultsError, InvalidFlagsError, UnreachableTargetError
from labelnav.gridworld import (NUM_ACTIONS, SPLIT_NAMES, Action, ClassSplit, EpisodeSpec, Scene,
                                generate_episode, step, success, target_pool)
from labelnav.metatrain import (PRESETS, AblationFlags, Checkpoint, MetaLearner, NavigationContext,
                                TaskRun, flags_name, parse_flags)

logger = logging.getLogger(__name__)

__all__ = [
    'AblationFlags', 'PRESETS', 'parse_flags', 'EpisodeResult', 'RunReport', 'metric_sr', 'metric_spl',
    'metric_isr', 'distance_stratified', 'size_stratified', 'evaluation_specs', 'evaluation_episodes',
    'eval_splits', 'random_actions', 'random_policy', 'evaluate_random', 'plain_baseline', 'run_ablation',
    'split_table', 'ablation_table', 'distance_table', 'size_table',
]

DISTANCE_THRESHOLDS = (1, 5)
SIZES = ('small', 'big')

# seed -> target split -> episodes
EpisodeSets = Dict[int, Dict[str, List[EpisodeSpec]]]


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: str
    success: int
    steps: int
    shortest_path: Optional[int]
    target_split: str
    target_size: str = 'big'
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"Episode {self.episode_id} reports {self.steps} steps")
        if self.shortest_path is not None and self.shortest_path < 1:
            raise ValueError(f"Episode {self.episode_id} reports shortest path {self.shortest_path}")

    def to_dict(self) -> Dict:
        return asdict(self)


def metric_sr(results: Sequence[EpisodeResult]) -> float:
    """SR = (1/F) sum Suc_i"""
    if not results:
        raise EmptyResultsError("SR needs at least one episode")
    return sum(r.success for r in results) / len(results)


def metric_spl(results: Sequence[EpisodeResult]) -> float:
    """
    SPL = (1/F) sum Suc_i L*_i / max(L_i, L*_i)

    Raises:
        EmptyResultsError: no episodes
        UnreachableTargetError: an episode has no shortest path
    """
    if not results:
        raise EmptyResultsError("SPL needs at least one episode")
    total = 0.0
    for r in results:
        if r.shortest_path is None:
            raise UnreachableTargetError(f"Episode {r.episode_id} has no shortest path")
        if r.success:
            total += r.shortest_path / max(r.steps, r.shortest_path)
    return total / len(results)


def metric_isr(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Identified success rate: share of frames where CLS matches the ground truth."""
    if not predictions or len(predictions) != len(labels):
        raise EmptyResultsError("ISR needs matching, non-empty prediction and label lists")
    return sum(int(p == g) for p, g in zip(predictions, labels)) / len(predictions)


def _metrics(results: Sequence[EpisodeResult]) -> Dict[str, float]:
    return {'episodes': len(results), 'sr': metric_sr(results), 'spl': metric_spl(results)}


def distance_stratified(results: Sequence[EpisodeResult],
                        thresholds: Sequence[int] = DISTANCE_THRESHOLDS) -> Dict[str, Dict[str, float]]:
    """SR/SPL over episodes with L* >= k; strata without episodes are left out."""
    out = {}
    for k in thresholds:
        subset = []
        for r in results:
            if r.shortest_path is None:
                raise UnreachableTargetError(f"Episode {r.episode_id} has no shortest path")
            if r.shortest_path >= k:
                subset.append(r)
        if subset:
            out[f'L>={k}'] = _metrics(subset)
    return out


def size_stratified(results: Sequence[EpisodeResult]) -> Dict[str, Dict[str, float]]:
    out = {}
    for size in SIZES:
        subset = [r for r in results if r.target_size == size]
        if subset:
            out[size] = _metrics(subset)
    return out


def _result(spec: EpisodeSpec, split: ClassSplit, success_flag: bool, steps: int, seed: int) -> EpisodeResult:
    c = spec.target.class_id
    return EpisodeResult(spec.episode_id, int(success_flag), steps, spec.shortest_path,
                         split.split_of(c), split.size_of(c), seed)


def result_from_task(task: TaskRun, split: ClassSplit, seed: int) -> EpisodeResult:
    return _result(task.spec, split, task.success, task.steps_used, seed)


def evaluation_specs(scenes: Sequence[Scene], split: ClassSplit, which: str, count: int, seed: int,
                     world: WorldConfig = WorldConfig()) -> List[EpisodeSpec]:
    """Seeded episodes whose targets all come from one split."""
    if not scenes:
        raise EmptyResultsError("Evaluation needs at least one scene")
    rng = np.random.default_rng([seed, SPLIT_NAMES.index(which), 104729])
    kind = scenes[0].kind
    pool = target_pool(split, kind, which)
    specs = []
    for _ in range(count):
        scene = scenes[int(rng.integers(len(scenes)))]
        specs.append(generate_episode(int(rng.integers(2 ** 31)), scene, pool, world))
    return specs


@dataclass
class RunReport:
    """
    Per-split SR/SPL (mean and population std over seeds) with everything
    needed to reproduce them.
    """
    method: str
    flags: Dict[str, bool]
    seeds: List[int]
    splits: Dict[str, Dict[str, float]]
    per_seed: Dict[str, List[Dict[str, float]]]
    distance: Dict[str, Dict[str, Dict[str, float]]]
    size: Dict[str, Dict[str, Dict[str, float]]]
    settings: Dict
    checkpoint_digest: str
    input_hash: str
    isr: Optional[float] = None
    results: List[EpisodeResult] = field(default_factory=list)
    traces: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'method': self.method,
            'flags': self.flags,
            'seeds': self.seeds,
            'splits': self.splits,
            'per_seed': self.per_seed,
            'distance': self.distance,
            'size': self.size,
            'settings': self.settings,
            'checkpoint_digest': self.checkpoint_digest,
            'input_hash': self.input_hash,
            'isr': self.isr,
            'results': [r.to_dict() for r in self.results],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'RunReport':
        results = [EpisodeResult(**r) for r in payload.get('results', [])]
        return cls(payload['method'], payload['flags'], payload['seeds'], payload['splits'],
                   payload['per_seed'], payload['distance'], payload['size'], payload['settings'],
                   payload['checkpoint_digest'], payload['input_hash'], payload.get('isr'), results)

    def content_hash(self) -> str:
        return storage.canonical_hash(self.to_dict())


def _summarize(method: str, flags: AblationFlags, settings: Settings, seeds: Sequence[int],
               by_seed: Dict[int, Dict[str, List[EpisodeResult]]], checkpoint_digest: str,
               scenes: Sequence[Scene], episodes: int) -> RunReport:
    splits, per_seed, distance, size = {}, {}, {}, {}
    everything = []
    for name in SPLIT_NAMES:
        rows = []
        pooled = []
        for s in seeds:
            res = by_seed[s][name]
            rows.append({'seed': s, 'sr': metric_sr(res), 'spl': metric_spl(res)})
            pooled.extend(res)
        sr = np.array([r['sr'] for r in rows])
        spl = np.array([r['spl'] for r in rows])
        splits[name] = {'sr_mean': float(sr.mean()), 'sr_std': float(sr.std()),
                        'spl_mean': float(spl.mean()), 'spl_std': float(spl.std()),
                        'episodes': len(pooled)}
        per_seed[name] = rows
        distance[name] = distance_stratified(pooled)
        size[name] = size_stratified(pooled)
        everything.extend(pooled)

    inputs = {
        'checkpoint': checkpoint_digest,
        'scenes': [storage.canonical_hash(storage.scene_to_dict(sc)) for sc in scenes],
        'seeds': list(seeds),
        'flags': flags.to_dict(),
        'episodes_per_split': episodes,
    }
    return RunReport(method, flags.to_dict(), list(seeds), splits, per_seed, distance, size,
                     settings.snapshot(), checkpoint_digest, storage.canonical_hash(inputs),
                     results=everything)


def evaluation_episodes(scenes: Sequence[Scene], split: ClassSplit, episodes_per_split: int,
                        seeds: Sequence[int], world: WorldConfig = WorldConfig()) -> EpisodeSets:
    """Episodes by seed and target split, as every evaluator runs them."""
    return {s: {name: evaluation_specs(scenes, split, name, episodes_per_split, s, world) for name in SPLIT_NAMES}
            for s in seeds}


def _collect(run: Callable[[EpisodeSpec, int], Tuple[EpisodeResult, List[Dict]]], episode_sets: EpisodeSets,
             desc: str, show_progress: bool) -> Tuple[Dict[int, Dict[str, List[EpisodeResult]]], List[Dict]]:
    by_seed: Dict[int, Dict[str, List[EpisodeResult]]] = {}
    traces: List[Dict] = []
    total = sum(len(specs) for by_split in episode_sets.values() for specs in by_split.values())
    with tqdm(total=total, desc=desc, unit='episode', disable=not show_progress) as pbar:
        for s, by_split in episode_sets.items():
            by_seed[s] = {}
            for name in SPLIT_NAMES:
                results = []
                for spec in by_split[name]:
                    result, trace = run(spec, s)
                    results.append(result)
                    traces.extend(trace)
                    pbar.update(1)
                by_seed[s][name] = results
    return by_seed, traces


def eval_splits(learner: MetaLearner, scenes: Sequence[Scene], episodes_per_split: int,
                seeds: Sequence[int], method: Optional[str] = None, show_progress: bool = False) -> RunReport:
    """
    Evaluate a learner on known, unknown and unseen targets for every seed.

    Episodes run in inference mode: task-local alpha and beta still adapt
    unless the flags switch the meta updates off, the global store does not
    change.
    """
    if not seeds:
        raise EmptyResultsError("Evaluation needs at least one seed")
    ctx = learner.context
    isr_pred, isr_gt = [], []

    def run(spec: EpisodeSpec, seed: int):
        task = learner.run_episode(learner.new_task(spec, 'inference'))
        if learner.flags.use_tfg_uoi:
            isr_pred.extend(row['cls'] for row in task.trace)
            isr_gt.extend(row['gt'] for row in task.trace)
        return result_from_task(task, ctx.split, seed), [dict(row, seed=seed) for row in task.trace]

    method = method or flags_name(learner.flags)
    episode_sets = evaluation_episodes(scenes, ctx.split, episodes_per_split, seeds, ctx.settings.world)
    by_seed, traces = _collect(run, episode_sets, f'Evaluating {method}', show_progress)
    report = _summarize(method, learner.flags, ctx.settings, seeds, by_seed, learner.store.digest(),
                        scenes, episodes_per_split)
    report.isr = metric_isr(isr_pred, isr_gt) if isr_pred else None
    report.traces = traces
    logger.info(f"Evaluated {method}: " + ", ".join(
        f"{n} SR {report.splits[n]['sr_mean']:.4f}" for n in SPLIT_NAMES))
    return report


def random_actions(count: int, seed: int = 0) -> np.ndarray:
    """Uniform draws over the six actions."""
    return np.random.default_rng([seed, 65537]).integers(NUM_ACTIONS, size=count)


def random_policy(specs: Sequence[EpisodeSpec], scenes: Dict[str, Scene], seed: int = 0,
                  world: WorldConfig = WorldConfig()) -> List[EpisodeResult]:
    """Walk randomly until Done or the step cap."""
    results = []
    for spec in specs:
        scene = scenes[spec.scene_id]
        rng = np.random.default_rng([seed, spec.seed, 65537])
        state = spec.start
        reached, steps = False, spec.max_steps
        for t in range(spec.max_steps):
            action = int(rng.integers(NUM_ACTIONS))
            if action == Action.DONE:
                reached = success(scene, state, spec.target, True, t + 1, world, spec.max_steps)
                steps = t + 1
                break
            state = step(scene, state, action).state
        results.append(_result(spec, scene.split, reached, steps, seed))
    return results


def evaluate_random(scenes: Sequence[Scene], split: ClassSplit, settings: Settings, episodes_per_split: int,
                    seeds: Sequence[int], show_progress: bool = False,
                    episode_sets: Optional[EpisodeSets] = None) -> RunReport:
    """
    Random walker evaluated on the same episodes as a learner would be.

    episode_sets, when given, replaces the generated episodes; it must hold
    episodes_per_split episodes for every seed and target split.
    """
    by_id = {sc.scene_id: sc for sc in scenes}
    if episode_sets is None:
        episode_sets = evaluation_episodes(scenes, split, episodes_per_split, seeds, settings.world)
    elif sorted(episode_sets) != sorted(seeds) or any(
            len(by_split[n]) != episodes_per_split for by_split in episode_sets.values() for n in SPLIT_NAMES):
        raise ValueError("Episode sets do not match the requested seeds and episode count")

    def run(spec: EpisodeSpec, seed: int):
        return random_policy([spec], by_id, seed, settings.world)[0], []

    by_seed, _ = _collect(run, episode_sets, 'Evaluating random', show_progress)
    return _summarize('random', PRESETS['baseline'], settings, seeds, by_seed, 'random', scenes,
                      episodes_per_split)


def plain_baseline(context: NavigationContext, checkpoint: Checkpoint, scenes: Sequence[Scene],
                   episodes_per_split: int, seeds: Sequence[int], show_progress: bool = False) -> RunReport:
    """
    Evaluate a policy trained without identifier, modifier, graph learner
    or unknown-object targets.

    Raises:
        InvalidFlagsError: the checkpoint was trained with other flags
    """
    if checkpoint.flags != PRESETS['baseline']:
        raise InvalidFlagsError(f"Plain baseline needs a 'baseline' checkpoint, got '{flags_name(checkpoint.flags)}'")
    learner = MetaLearner.from_checkpoint(context, checkpoint)
    return eval_splits(learner, scenes, episodes_per_split, seeds, 'baseline', show_progress)


def run_ablation(context: NavigationContext, variants: Sequence[str], episodes_per_split: int,
                 seeds: Sequence[int], train_episodes: Optional[int] = None,
                 show_progress: bool = False) -> Dict[str, RunReport]:
    """
    Train and evaluate every variant on the same test episodes.

    Variants sharing training flags (e.g. the ground-truth CLS variant and
    the full method) share one trained checkpoint.
    """
    trained: Dict[AblationFlags, Checkpoint] = {}
    scenes = context.scenes_of('test')
    reports = {}
    for name in variants:
        flags = parse_flags(name)
        key = flags.training_flags
        if key not in trained:
            logger.info(f"Training variant '{flags_name(key)}'")
            learner = MetaLearner(context, key, seed=context.settings.meta.seed)
            learner.train(train_episodes, show_progress)
            trained[key] = learner.checkpoint()
        learner = MetaLearner.from_checkpoint(context, trained[key], flags)
        reports[name] = eval_splits(learner, scenes, episodes_per_split, seeds, name, show_progress)
    return reports


# ----------------------------------------------------------------------
# Tables
# ----------------------------------------------------------------------

def split_table(reports: Dict[str, RunReport]) -> Tuple[List[str], List[List]]:
    """One row per method; SR and SPL mean/std for each target split."""
    header = ['method']
    for name in SPLIT_NAMES:
        header += [f'{name}_sr', f'{name}_sr_std', f'{name}_spl', f'{name}_spl_std']
    rows = []
    for method, report in reports.items():
        row = [method]
        for name in SPLIT_NAMES:
            s = report.splits[name]
            row += [s['sr_mean'], s['sr_std'], s['spl_mean'], s['spl_std']]
        rows.append(row)
    return header, rows


def ablation_table(reports: Dict[str, RunReport]) -> Tuple[List[str], List[List]]:
    """Split table with the component flags as leading columns."""
    flag_names = list(AblationFlags().to_dict())
    header, rows = split_table(reports)
    header = header[:1] + flag_names + header[1:]
    out = []
    for row, report in zip(rows, reports.values()):
        out.append(row[:1] + [int(report.flags[f]) for f in flag_names] + row[1:])
    return header, out


def _stratum_table(reports: Dict[str, RunReport], attr: str, label: str) -> Tuple[List[str], List[List]]:
    header = ['method', 'split', label, 'episodes', 'sr', 'spl']
    rows = []
    for method, report in reports.items():
        strata = getattr(report, attr)
        for name in SPLIT_NAMES:
            for key, m in strata[name].items():
                rows.append([method, name, key, m['episodes'], m['sr'], m['spl']])
    return header, rows


def distance_table(reports: Dict[str, RunReport]) -> Tuple[List[str], List[List]]:
    return _stratum_table(reports, 'distance', 'stratum')


def size_table(reports: Dict[str, RunReport]) -> Tuple[List[str], List[List]]:
    return _stratum_table(reports, 'size', 'size')
