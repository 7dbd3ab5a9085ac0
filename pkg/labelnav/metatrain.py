"""
Meta-training of the navigation agent.

Every episode is a task. The identifier stays frozen, the feature modifier
(group alpha) and the graph learner (group beta) are copied per task and
adapted while the episode runs, in training and in inference alike. After a
batch of training tasks the outer step moves beta and psi on the summed
actor-critic gradients taken at the adapted task parameters (first order).
"""

import dataclasses
import logging
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from labelnav.config import MetaConfig, PolicyConfig, Settings
from labelnav.errors import (CheckpointMismatchError, EmptyBatchError, InvalidFlagsError,
                             NotTrainedError, ScheduleViolationError)
from labelnav.gridworld import (ACTION_NAMES, Action, ClassSplit, EpisodeSpec, Scene, generate_episode,
                                observe, step, success, target_pool)
from labelnav.mcfm import (ClassFeatureBuffer, cooccurrence_sets, init_mcfm_params, inner_update,
                           loss_mcfm, mcfm_inputs, modify_ft)
from labelnav.mogl import (AugmentationSpec, CovisibilityLog, ObjectGraph, build_graph, cca_objective,
                           gcn_forward, init_mogl_params, inner_update_beta)
from labelnav.numerics import DTYPE, GradTape, ParamStore, Params, add_grads, sgd_step
from labelnav.perception import ClassFeatureOracle, detect_known, observation_features
from labelnav.policy import (A3CStep, PolicyDims, StepContext, build_ti, done_reminder, entropy,
                             init_policy_params, loss_a3c, policy_step, project, select_action)
from labelnav.uoi import UoiModel

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ('train', 'inference')

# settings sections a checkpoint must agree on before it can be evaluated
CHECKPOINT_SECTIONS = ('world', 'features', 'uoi', 'policy')


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class AblationFlags:
    """
    Which components run. Defaults describe the full method.

    Dependency order: TFG+UOI needs unknown-object targets, MCFM needs
    TFG+UOI, MOGL needs MCFM. A meta flag needs its loss, a loss flag needs
    its module, and ground-truth CLS substitution needs the identifier.
    """
    use_uot: bool = True
    use_tfg_uoi: bool = True
    use_mcfm: bool = True
    use_mogl: bool = True
    mcfm_loss_on: bool = True
    cca_loss_on: bool = True
    mcfm_meta_on: bool = True
    mogl_meta_on: bool = True
    use_gt_cls: bool = False

    def __post_init__(self):
        problems = []
        if self.use_tfg_uoi and not self.use_uot:
            problems.append('use_tfg_uoi requires use_uot')
        if self.use_mcfm and not self.use_tfg_uoi:
            problems.append('use_mcfm requires use_tfg_uoi')
        if self.use_mogl and not self.use_mcfm:
            problems.append('use_mogl requires use_mcfm')
        if self.mcfm_loss_on and not self.use_mcfm:
            problems.append('mcfm_loss_on requires use_mcfm')
        if self.mcfm_meta_on and not self.mcfm_loss_on:
            problems.append('mcfm_meta_on requires mcfm_loss_on')
        if self.cca_loss_on and not self.use_mogl:
            problems.append('cca_loss_on requires use_mogl')
        if self.mogl_meta_on and not self.cca_loss_on:
            problems.append('mogl_meta_on requires cca_loss_on')
        if self.use_gt_cls and not self.use_tfg_uoi:
            problems.append('use_gt_cls requires use_tfg_uoi')
        if problems:
            raise InvalidFlagsError(f"Invalid ablation flags: {'; '.join(problems)}")

    @property
    def training_flags(self) -> 'AblationFlags':
        """The same flags without evaluation-time CLS substitution."""
        return dataclasses.replace(self, use_gt_cls=False)

    def to_dict(self) -> Dict[str, bool]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, bool]) -> 'AblationFlags':
        return cls(**{k: bool(v) for k, v in payload.items()})


_OFF = {f.name: False for f in dataclasses.fields(AblationFlags)}

PRESETS: Dict[str, AblationFlags] = OrderedDict([
    ('baseline', AblationFlags(**_OFF)),
    ('uot', AblationFlags(**{**_OFF, 'use_uot': True})),
    ('tfg_uoi', AblationFlags(**{**_OFF, 'use_uot': True, 'use_tfg_uoi': True})),
    ('mcfm', AblationFlags(**{**_OFF, 'use_uot': True, 'use_tfg_uoi': True, 'use_mcfm': True,
                             'mcfm_loss_on': True, 'mcfm_meta_on': True})),
    ('full', AblationFlags()),
    ('no_mcfm_loss', AblationFlags(mcfm_loss_on=False, mcfm_meta_on=False)),
    ('no_mcfm_meta', AblationFlags(mcfm_meta_on=False)),
    ('no_cca_loss', AblationFlags(cca_loss_on=False, mogl_meta_on=False)),
    ('no_mogl_meta', AblationFlags(mogl_meta_on=False)),
    ('gt_cls', AblationFlags(use_gt_cls=True)),
])


def parse_flags(text: str) -> AblationFlags:
    """
    Parse a flag spec: a preset name, optionally followed by overrides.

    Example:
        >>> parse_flags('full,use_gt_cls=1')
        >>> parse_flags('mcfm,mcfm_meta_on=0')
    """
    tokens = [t.strip() for t in text.split(',') if t.strip()]
    if not tokens:
        return AblationFlags()
    base = AblationFlags()
    if tokens[0] in PRESETS:
        base = PRESETS[tokens.pop(0)]
    changes = {}
    names = {f.name for f in dataclasses.fields(AblationFlags)}
    for token in tokens:
        key, _, value = token.partition('=')
        key = key.strip()
        if key not in names:
            raise InvalidFlagsError(f"Unknown flag or preset '{key}'")
        changes[key] = value.strip().lower() in ('', '1', 'true', 'yes', 'on')
    return dataclasses.replace(base, **changes)


def flags_name(flags: AblationFlags) -> str:
    for name, preset in PRESETS.items():
        if preset == flags:
            return name
    return 'custom'


@dataclass
class NavigationContext:
    """Everything an episode needs besides the learnable stores."""
    settings: Settings
    split: ClassSplit
    scenes: Dict[str, Scene]
    oracle: ClassFeatureOracle
    uoi: Optional[UoiModel] = None
    bank: Optional[torch.Tensor] = None

    def scenes_of(self, kind: str) -> List[Scene]:
        return [self.scenes[k] for k in sorted(self.scenes) if self.scenes[k].kind == kind]


def policy_dims(settings: Settings, flags: AblationFlags) -> PolicyDims:
    return PolicyDims(
        map_rows=settings.features.map_rows,
        feature_dim=settings.features.feature_dim,
        known_classes=settings.world.known_classes,
        gcn_out=settings.policy.gcn_out,
        embed_dim=settings.policy.embed_dim,
        hidden_dim=settings.policy.hidden_dim,
        use_relations=flags.use_mogl,
    )


def init_global_store(settings: Settings, flags: AblationFlags, seed: int = 0) -> ParamStore:
    """Global alpha, beta and psi. alpha and beta exist for every variant so checkpoints share a layout."""
    gen = torch.Generator().manual_seed(seed)
    store = ParamStore('meta')
    init_mcfm_params(store, settings.features.relation_dim, gen)
    init_mogl_params(store, settings.features.relation_dim, settings.policy.gcn_out, gen)
    init_policy_params(store, policy_dims(settings, flags), gen)
    return store


def training_pool(split: ClassSplit, flags: AblationFlags) -> Sequence[int]:
    """
    Known classes, plus unknown ones once unknown-object targets are enabled.

    Never-seen classes are not drawn here; they reach training mode only through
    batches passed to run_batch directly, and such tasks leave psi untouched.
    """
    if flags.use_uot:
        return split.known + split.unknown
    return target_pool(split, 'train', 'known')


def total_loss(l_mcfm: float, l_cca: float, l_a3c: float, lambda1: float, lambda2: float,
               mu: float) -> float:
    """lambda1 L_mcfm + lambda2 L_cca + mu L_a3c, reported for logging only."""
    return lambda1 * l_mcfm + lambda2 * l_cca + mu * l_a3c


@dataclass(frozen=True)
class StepRecord:
    """Inputs of one policy step, kept so the outer gradient can replay the episode."""
    f_o: torch.Tensor
    graph: Optional[ObjectGraph]
    prev_action: Optional[int]
    reminder: int
    action: int
    reward: float
    cls: int
    l_mcfm: Optional[float] = None
    l_cca: Optional[float] = None


@dataclass
class TaskRun:
    spec: EpisodeSpec
    alpha: ParamStore
    beta: ParamStore
    target_split: str
    mode: str = 'train'
    steps: List[StepRecord] = field(default_factory=list)
    trace: List[Dict] = field(default_factory=list)
    success: bool = False
    finished: bool = False
    alpha_updates: int = 0
    beta_updates: int = 0
    alpha_digest_start: str = ''
    beta_digest_start: str = ''
    digest_before: str = ''
    digest_after: str = ''
    l_a3c: Optional[float] = None
    outer_grads: Optional[Params] = None
    joint_grads: Optional[Params] = None

    @property
    def steps_used(self) -> int:
        return len(self.steps)

    def loss_sums(self) -> Dict[str, float]:
        return {
            'l_mcfm': sum(s.l_mcfm for s in self.steps if s.l_mcfm is not None),
            'l_cca': sum(s.l_cca for s in self.steps if s.l_cca is not None),
            'l_a3c': self.l_a3c if self.l_a3c is not None else 0.0,
        }

    def summary(self, meta: MetaConfig) -> Dict:
        losses = self.loss_sums()
        return {
            'episode_id': self.spec.episode_id,
            'target_split': self.target_split,
            'success': int(self.success),
            'steps': self.steps_used,
            'shortest_path': self.spec.shortest_path,
            'alpha_updates': self.alpha_updates,
            'beta_updates': self.beta_updates,
            **losses,
            'total_loss': total_loss(losses['l_mcfm'], losses['l_cca'], losses['l_a3c'],
                                     meta.lr_mcfm, meta.lr_cca, meta.lr_outer),
        }


def trajectory_loss(steps: Sequence[StepRecord], ti: torch.Tensor, params: Params,
                    config: PolicyConfig = PolicyConfig(),
                    baseline: Optional[Sequence[float]] = None) -> torch.Tensor:
    """
    Replay an episode through the graph encoder and the policy and return L_a3c.

    Relation features are recomputed from the recorded graphs with the beta
    entries of params, so gradients reach beta as well as psi.
    """
    if not steps:
        raise EmptyBatchError("Cannot replay an empty episode")
    ctx = StepContext.initial(params['lstm_w_hh'].shape[0])
    a3c_steps = []
    for rec in steps:
        relations = gcn_forward(rec.graph, params) if rec.graph is not None else None
        z_o, z_t, z_r = project(rec.f_o, ti, relations, params)
        out = policy_step(z_o, z_t, z_r, StepContext(ctx.h, ctx.c, rec.prev_action, rec.reminder), params)
        a3c_steps.append(A3CStep(out.log_probs[rec.action], out.value, rec.reward,
                                 entropy(out.probs, out.log_probs)))
        ctx = out.context
    return loss_a3c(a3c_steps, config.gamma, config.value_coef, config.entropy_coef, baseline=baseline)


class OuterOptimizer:
    """Plain gradient step (default) or Adam over the beta and psi groups."""

    def __init__(self, store: ParamStore, kind: str = 'sgd', lr: float = 1e-4):
        if kind not in ('sgd', 'adam'):
            raise ValueError(f"Unknown outer optimizer '{kind}'")
        self.kind = kind
        self.lr = lr
        self.names = store.names(['beta', 'psi'])
        self._leaves: Dict[str, torch.Tensor] = {}
        self._adam = None
        if kind == 'adam':
            self._leaves = OrderedDict((n, store[n].clone()) for n in self.names)
            self._adam = torch.optim.Adam(list(self._leaves.values()), lr=lr)

    def step(self, store: ParamStore, grads: Params):
        if self._adam is None:
            sgd_step(store, grads, self.lr, names=self.names)
            return
        with torch.no_grad():
            for n, leaf in self._leaves.items():
                leaf.copy_(store[n])
                # Adam skips leaves without a grad, so zeroed groups keep their value and moments
                leaf.grad = grads[n].clone() if bool(grads[n].any()) else None
        self._adam.step()
        for n, leaf in self._leaves.items():
            store.update(n, leaf)


def outer_update(store: ParamStore, tasks: Sequence[TaskRun], lr: float,
                 optimizer: Optional[OuterOptimizer] = None) -> Params:
    """
    beta <- beta - mu sum_i grad_beta L_a3c(alpha_i, beta_i, psi), and likewise for psi.

    Unseen-target tasks contribute no psi gradient; global alpha is left alone.

    Returns:
        the summed gradients that were applied

    Raises:
        EmptyBatchError: empty task batch
        ScheduleViolationError: a task was not run in training mode
    """
    if not tasks:
        raise EmptyBatchError("outer_update needs at least one task")
    names = store.names(['beta', 'psi'])
    total: Params = OrderedDict((n, torch.zeros_like(store[n])) for n in names)
    for task in tasks:
        if task.mode != 'train' or task.outer_grads is None:
            raise ScheduleViolationError(f"Task {task.spec.episode_id} was not run in training mode")
        for n, g in task.outer_grads.items():
            total[n] = total[n] + g
    if optimizer is None:
        sgd_step(store, total, lr, names=names)
    else:
        optimizer.step(store, total)
    return total


@dataclass
class Checkpoint:
    store: ParamStore
    flags: AblationFlags
    settings: Dict
    seed: int = 0
    episodes_done: int = 0
    format_version: int = CHECKPOINT_VERSION

    def digest(self) -> str:
        return self.store.digest()

    def to_dict(self) -> Dict:
        return {
            'format_version': self.format_version,
            'flags': self.flags.to_dict(),
            'settings': self.settings,
            'rng': {'seed': self.seed, 'episodes_done': self.episodes_done},
            'digest': self.digest(),
            'params': self.store.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'Checkpoint':
        if payload.get('format_version') != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"Unsupported checkpoint version {payload.get('format_version')}")
        store = ParamStore.from_dict(payload['params'], 'meta')
        if store.digest() != payload['digest']:
            raise CheckpointMismatchError("Checkpoint parameters do not match the recorded digest")
        return cls(store, AblationFlags.from_dict(payload['flags']), payload['settings'],
                   payload['rng']['seed'], payload['rng']['episodes_done'])


@dataclass
class TrainResult:
    history: List[Dict] = field(default_factory=list)
    batches: int = 0

    def success_rate(self) -> float:
        return sum(h['success'] for h in self.history) / len(self.history) if self.history else 0.0


class MetaLearner:
    """
    Holds the global parameter store and runs episodes against it.

    Inference episodes adapt task-local copies only; the global store
    changes solely through update().
    """

    def __init__(self, context: NavigationContext, flags: AblationFlags = AblationFlags(),
                 store: Optional[ParamStore] = None, seed: int = 0):
        if flags.use_tfg_uoi and (context.uoi is None or context.bank is None):
            raise NotTrainedError("The identifier and its generated-feature bank are required")
        self.context = context
        self.settings = context.settings
        self.flags = flags
        self.seed = seed
        self.dims = policy_dims(self.settings, flags)
        self.store = store if store is not None else init_global_store(self.settings, flags, seed)
        meta = self.settings.meta
        self.optimizer = OuterOptimizer(self.store, meta.outer_optimizer, meta.lr_outer)
        self.episodes_done = 0

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.store.copy(name='meta'), self.flags.training_flags, self.settings.snapshot(),
                          self.seed, self.episodes_done)

    @classmethod
    def from_checkpoint(cls, context: NavigationContext, checkpoint: Checkpoint,
                        flags: Optional[AblationFlags] = None) -> 'MetaLearner':
        """
        Rebuild a learner, optionally with evaluation flags that differ from the training flags.

        Raises:
            CheckpointMismatchError: settings or parameter layout disagree
        """
        active = context.settings.snapshot()
        for section in CHECKPOINT_SECTIONS:
            if checkpoint.settings.get(section) != active[section]:
                raise CheckpointMismatchError(f"Checkpoint [{section}] settings differ from the active configuration")
        flags = flags or checkpoint.flags
        expected = init_global_store(context.settings, flags, 0)
        if sorted(expected.names()) != sorted(checkpoint.store.names()):
            raise CheckpointMismatchError(f"Checkpoint layout does not fit flags '{flags_name(flags)}'")
        for n in expected.names():
            if expected[n].shape != checkpoint.store[n].shape:
                raise CheckpointMismatchError(f"Parameter '{n}' has shape {tuple(checkpoint.store[n].shape)}")
        learner = cls(context, flags, checkpoint.store.copy(name='meta'), checkpoint.seed)
        learner.episodes_done = checkpoint.episodes_done
        return learner

    # ------------------------------------------------------------------
    # Episodes
    # ------------------------------------------------------------------

    def new_task(self, spec: EpisodeSpec, mode: str = 'train') -> TaskRun:
        """alpha_i <- alpha and beta_i <- beta."""
        if mode not in MODES:
            raise ValueError(f"Unknown mode '{mode}'")
        alpha = self.store.copy(['alpha'], name=f'alpha-{spec.episode_id}')
        beta = self.store.copy(['beta'], name=f'beta-{spec.episode_id}')
        return TaskRun(spec, alpha, beta, self.context.split.split_of(spec.target.class_id), mode,
                       alpha_digest_start=alpha.digest(), beta_digest_start=beta.digest(),
                       digest_before=self.store.digest())

    def _identify(self, f_o: torch.Tensor, frame) -> tuple:
        relation_dim = self.settings.features.relation_dim
        if not self.flags.use_tfg_uoi:
            return torch.zeros(relation_dim, dtype=DTYPE), 0
        out = self.context.uoi.forward(f_o, self.context.bank)
        cls = frame.gt if self.flags.use_gt_cls else out.cls
        return out.f_t, cls

    def _accumulate_joint(self, task: TaskRun, store: ParamStore, group: str, loss_fn):
        tape = GradTape(store, groups=[group])
        loss = loss_fn(tape.params)
        task.joint_grads = add_grads(task.joint_grads, tape.gradient(loss))
        return float(loss)

    def run_episode(self, task: TaskRun) -> TaskRun:
        """
        Run one episode until Done or the step cap.

        Per step: observe, identify, adapt alpha_i when CLS=1 on an unlabeled
        target, adapt beta_i, act. Training samples actions; inference takes
        the greedy action.
        """
        ctx_world = self.settings.world
        meta = self.settings.meta
        features = self.settings.features
        split = self.context.split
        spec = task.spec
        scene = self.context.scenes[spec.scene_id]
        target = spec.target
        train = task.mode == 'train'
        flags = self.flags

        buffer = ClassFeatureBuffer(split.known)
        log = CovisibilityLog(split, ctx_world.covisibility_radius)
        ti = build_ti(target, split)
        psi = self.store.as_dict()
        ctx = StepContext.initial(self.dims.hidden_dim)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, spec.seed, zlib.crc32(spec.scene_id.encode())))
        state = spec.start

        for t in range(spec.max_steps):
            frame = observe(scene, state, ctx_world)
            f_o = observation_features(frame, self.context.oracle, features.map_rows)
            detections = detect_known(frame, self.context.oracle)
            buffer.observe(detections)
            detected = [d.class_id for d in detections]
            f_t, cls = self._identify(f_o, frame)
            log.record(frame, cls)

            l_mcfm = None
            if flags.use_mcfm and flags.mcfm_loss_on and cls == 1 and target.unlabeled:
                sets = cooccurrence_sets(detected, cls, buffer)
                inputs = mcfm_inputs(sets, buffer, {d.class_id: d.pose for d in detections}, f_t)
                if flags.mcfm_meta_on:
                    l_mcfm = inner_update(task.alpha, inputs, meta.lr_mcfm, cls)
                    if l_mcfm is not None:
                        task.alpha_updates += 1
                elif train and sets.usable:
                    l_mcfm = self._accumulate_joint(task, task.alpha, 'alpha',
                                                    lambda p: loss_mcfm(inputs, p))

            f_t_prime = modify_ft(f_t, task.alpha.as_dict()) if flags.use_mcfm else f_t

            graph, relations, l_cca = None, None, None
            if flags.use_mogl:
                graph = build_graph(buffer, f_t_prime, log)
                aug = AugmentationSpec(meta.edge_drop, meta.feature_mask, derive_seed(self.seed, spec.seed, t))
                if flags.cca_loss_on and flags.mogl_meta_on:
                    l_cca = inner_update_beta(task.beta, graph, aug, meta.lr_cca, meta.eta)
                    task.beta_updates += 1
                elif flags.cca_loss_on and train:
                    l_cca = self._accumulate_joint(task, task.beta, 'beta',
                                                   lambda p: cca_objective(graph, aug, p, meta.eta))
                relations = gcn_forward(graph, task.beta.as_dict())

            reminder = done_reminder(detected, cls, target)
            with torch.no_grad():
                z_o, z_t, z_r = project(f_o, ti, relations, psi)
                out = policy_step(z_o, z_t, z_r, ctx.with_reminder(reminder), psi)
            action = select_action(out.probs, greedy=not train, generator=gen)

            outcome = step(scene, state, action)
            steps_used = t + 1
            reached = action == Action.DONE and success(scene, state, target, True, steps_used,
                                                        ctx_world, spec.max_steps)
            reward = ctx_world.reward_success if reached else ctx_world.reward_step
            task.steps.append(StepRecord(f_o, graph, ctx.prev_action, reminder, action, reward, cls,
                                         l_mcfm, l_cca))
            task.trace.append({
                'episode_id': spec.episode_id, 'step': t, 'x': state.x, 'y': state.y,
                'heading': state.heading, 'pitch': state.pitch, 'action': ACTION_NAMES[action],
                'cls': cls, 'gt': frame.gt, 'reminder': reminder, 'reward': reward,
                'l_mcfm': l_mcfm, 'l_cca': l_cca, 'alpha_digest': task.alpha.digest(),
            })
            ctx = out.context.after(action)
            state = outcome.state
            if outcome.terminal:
                task.success = reached
                break

        task.finished = True
        if train:
            self._outer_gradients(task, ti)
        task.digest_after = self.store.digest()
        logger.debug(f"Episode {spec.episode_id} ({task.mode}): success={task.success} "
                     f"steps={task.steps_used} alpha_updates={task.alpha_updates} beta_updates={task.beta_updates}")
        return task

    def _outer_gradients(self, task: TaskRun, ti: torch.Tensor):
        """First-order gradients of L_a3c at (alpha_i, beta_i, psi)."""
        combined = self.store.copy(['psi'], name='outer')
        for n, value in task.beta.items():
            combined.add('beta', n, tuple(value.shape), value=value)
        tape = GradTape(combined)
        loss = trajectory_loss(task.steps, ti, tape.params, self.settings.policy)
        grads = tape.gradient(loss)
        if task.target_split == 'unseen':
            for n in combined.names(['psi']):
                grads[n] = torch.zeros_like(grads[n])
        task.outer_grads = grads
        task.l_a3c = float(loss)

    def run_batch(self, specs: Sequence[EpisodeSpec], mode: str = 'train') -> List[TaskRun]:
        """Run episodes against the current globals; results come back in input order."""
        tasks = [self.new_task(s, mode) for s in specs]
        workers = self.settings.meta.workers
        if workers > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(self.run_episode, tasks))
        return [self.run_episode(t) for t in tasks]

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def update(self, tasks: Sequence[TaskRun]) -> Params:
        """Outer step on beta and psi, plus the plain joint step of any non-meta module."""
        applied = outer_update(self.store, tasks, self.settings.meta.lr_outer, self.optimizer)
        joint = None
        for task in tasks:
            if task.joint_grads is not None:
                joint = add_grads(joint, task.joint_grads)
        if joint is not None:
            meta = self.settings.meta
            for group, lr in (('alpha', meta.lr_mcfm), ('beta', meta.lr_cca)):
                names = [n for n in joint if self.store.group_of(n) == group]
                if names:
                    sgd_step(self.store, {n: joint[n] for n in names}, lr, names=names)
        return applied

    def sample_training_task(self, index: int) -> EpisodeSpec:
        rng = np.random.default_rng([self.seed, index, 7919])
        scenes = self.context.scenes_of('train')
        if not scenes:
            raise EmptyBatchError("No training scenes loaded")
        scene = scenes[int(rng.integers(len(scenes)))]
        return generate_episode(int(rng.integers(2 ** 31)), scene, training_pool(self.context.split, self.flags),
                                self.settings.world)

    def train(self, episodes: Optional[int] = None, show_progress: bool = False) -> TrainResult:
        """
        Meta-train for a number of episodes in batches of meta.batch_size tasks.

        Episode draws depend only on (seed, episode index), so a run resumed
        from a checkpoint continues the same task sequence.
        """
        if self.store.frozen:
            raise ScheduleViolationError("Cannot train a frozen parameter store")
        meta = self.settings.meta
        episodes = meta.episodes if episodes is None else episodes
        result = TrainResult()
        starts = range(0, episodes, meta.batch_size)
        for start in tqdm(starts, desc='Meta-training', unit='batch', disable=not show_progress):
            count = min(meta.batch_size, episodes - start)
            specs = [self.sample_training_task(self.episodes_done + k) for k in range(count)]
            tasks = self.run_batch(specs, 'train')
            self.update(tasks)
            self.episodes_done += count
            result.batches += 1
            result.history.extend(t.summary(meta) for t in tasks)
            if result.batches % 50 == 0:
                recent = result.history[-50 * meta.batch_size:]
                logger.info(f"Batch {result.batches}: {self.episodes_done} episodes, "
                            f"recent SR {sum(h['success'] for h in recent) / len(recent):.4f}")
        logger.info(f"Meta-training finished: {len(result.history)} episodes, SR {result.success_rate():.4f}")
        return result
