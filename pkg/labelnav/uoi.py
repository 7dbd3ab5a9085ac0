"""
Unlabeled object identifier.

A small transformer encoder compares the observation map with the generated
map of every unknown class; the first-token outputs of the last layer are
averaged over classes, projected to f_t and classified into CLS (an
unlabeled object is in view or not).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import AbstractSet, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from labelnav.config import UoiConfig, WorldConfig
from labelnav.errors import BankSizeError, EmptyBatchError
from labelnav.gridworld import HEADINGS, PITCHES, AgentState, ClassSplit, ObservationFrame, Scene, observe
from labelnav.numerics import DTYPE, GradTape, ParamStore, Params
from labelnav.perception import ClassFeatureOracle, observation_features

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
LN_EPS = 1e-5


@dataclass(frozen=True)
class UoiOutput:
    f_t: torch.Tensor
    cls_prob: float
    cls: int


@dataclass(frozen=True)
class FrameSample:
    f_o: torch.Tensor
    gt: int
    scene_id: str = ''
    state: Optional[AgentState] = None


@dataclass
class PretrainResult:
    isr: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    best_epoch: int = 0


def layer_names(layer: int) -> List[str]:
    return [f'uoi_l{layer}_{n}' for n in ('wq', 'wk', 'wv', 'wo', 'ln1_g', 'ln1_b',
                                          'ff1_w', 'ff1_b', 'ff2_w', 'ff2_b', 'ln2_g', 'ln2_b')]


def init_uoi_params(rows: int, feature_dim: int, relation_dim: int, layers: int, ffn_dim: int,
                    seed: int) -> ParamStore:
    gen = torch.Generator().manual_seed(seed)
    d = feature_dim
    store = ParamStore('uoi')
    store.add('psi', 'uoi_pos', (2 * rows, d), gen)
    for layer in range(layers):
        p = f'uoi_l{layer}_'
        for n in ('wq', 'wk', 'wv', 'wo'):
            store.add('psi', p + n, (d, d), gen)
        for ln in ('ln1', 'ln2'):
            store.add('psi', p + ln + '_g', (1, d), value=torch.ones(1, d, dtype=DTYPE))
            store.add('psi', p + ln + '_b', (1, d), value=torch.zeros(1, d, dtype=DTYPE))
        store.add('psi', p + 'ff1_w', (d, ffn_dim), gen)
        store.add('psi', p + 'ff1_b', (1, ffn_dim), value=torch.zeros(1, ffn_dim, dtype=DTYPE))
        store.add('psi', p + 'ff2_w', (ffn_dim, d), gen)
        store.add('psi', p + 'ff2_b', (1, d), value=torch.zeros(1, d, dtype=DTYPE))
    store.add('psi', 'uoi_w_m1', (d, relation_dim), gen)
    store.add('psi', 'uoi_w_m2', (relation_dim, 1), gen)
    return store


def _layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), weight=gain.reshape(-1), bias=bias.reshape(-1), eps=LN_EPS)


def _encoder_layer(x: torch.Tensor, params: Params, layer: int) -> torch.Tensor:
    p = f'uoi_l{layer}_'
    q = x @ params[p + 'wq']
    k = x @ params[p + 'wk']
    v = x @ params[p + 'wv']
    scores = torch.softmax(q @ k.transpose(-1, -2) / x.shape[-1] ** 0.5, dim=-1)
    x = _layer_norm(x + (scores @ v) @ params[p + 'wo'], params[p + 'ln1_g'], params[p + 'ln1_b'])
    hidden = torch.relu(x @ params[p + 'ff1_w'] + params[p + 'ff1_b'])
    return _layer_norm(x + hidden @ params[p + 'ff2_w'] + params[p + 'ff2_b'],
                       params[p + 'ln2_g'], params[p + 'ln2_b'])


def count_layers(params: Params) -> int:
    layer = 0
    while f'uoi_l{layer}_wq' in params:
        layer += 1
    return layer


def uoi_batch(f_o: torch.Tensor, bank: torch.Tensor, params: Params) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Batched forward pass.

    Args:
        f_o: (B, rows, D) observation maps
        bank: (N, rows, D) generated maps of the unknown classes

    Returns:
        f_t of shape (B, D_f) and cls_prob of shape (B,)
    """
    b, n = f_o.shape[0], bank.shape[0]
    x = torch.cat([f_o.unsqueeze(1).expand(b, n, *f_o.shape[1:]),
                   bank.unsqueeze(0).expand(b, n, *bank.shape[1:])], dim=2)
    x = x + params['uoi_pos']
    for layer in range(count_layers(params)):
        x = _encoder_layer(x, params, layer)
    pooled = x[:, :, 0, :].mean(dim=1)
    f_t = torch.relu(pooled @ params['uoi_w_m1'])
    cls_prob = torch.sigmoid(f_t @ params['uoi_w_m2']).squeeze(-1)
    return f_t, cls_prob


def uoi_forward(f_o: torch.Tensor, bank: torch.Tensor, params: Params,
                n_unknown: Optional[int] = None, threshold: float = 0.5) -> UoiOutput:
    """
    Presence decision for one observation map.

    Raises:
        BankSizeError: the bank does not hold one map per unknown class
    """
    if n_unknown is not None and bank.shape[0] != n_unknown:
        raise BankSizeError(f"Bank holds {bank.shape[0]} maps, expected {n_unknown}")
    f_t, prob = uoi_batch(f_o.unsqueeze(0), bank, params)
    p = float(prob[0])
    return UoiOutput(f_t[0], p, int(p >= threshold))


def uoi_loss(cls_prob: torch.Tensor, gt) -> torch.Tensor:
    """Binary cross entropy with the probability clamped away from 0 and 1."""
    gt = torch.as_tensor(gt, dtype=DTYPE)
    p = torch.clamp(cls_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p))


class UoiModel:
    """Parameters plus the fixed class count and decision threshold."""

    def __init__(self, rows: int, feature_dim: int, relation_dim: int, n_unknown: int,
                 config: UoiConfig = UoiConfig(), seed: int = 0):
        self.rows = rows
        self.n_unknown = n_unknown
        self.threshold = config.threshold
        self.store = init_uoi_params(rows, feature_dim, relation_dim, config.layers, config.ffn_dim, seed)

    @property
    def params(self) -> Params:
        return self.store.as_dict()

    def forward(self, f_o: torch.Tensor, bank: torch.Tensor) -> UoiOutput:
        with torch.no_grad():
            return uoi_forward(f_o, bank, self.params, self.n_unknown, self.threshold)

    def isr(self, samples: Sequence[FrameSample], bank: torch.Tensor, batch_size: int = 64) -> float:
        """Identified success rate: accuracy of CLS against gt."""
        if not samples:
            raise EmptyBatchError("ISR needs at least one sample")
        correct = 0
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                _, prob = uoi_batch(torch.stack([s.f_o for s in chunk]), bank, self.params)
                pred = (prob >= self.threshold).long().tolist()
                correct += sum(int(p == s.gt) for p, s in zip(pred, chunk))
        return correct / len(samples)

    def to_dict(self) -> Dict:
        return {'rows': self.rows, 'n_unknown': self.n_unknown, 'threshold': self.threshold,
                'params': self.store.to_dict()}

    @classmethod
    def from_dict(cls, payload: Dict) -> 'UoiModel':
        model = cls.__new__(cls)
        model.rows = payload['rows']
        model.n_unknown = payload['n_unknown']
        model.threshold = payload['threshold']
        model.store = ParamStore.from_dict(payload['params'], 'uoi')
        model.store.freeze()
        return model


def build_frame_dataset(scenes: Sequence[Scene], oracle: ClassFeatureOracle, count: int, seed: int,
                        world: WorldConfig = WorldConfig(), rows: int = 16, balanced: bool = True,
                        max_attempts: int = 200,
                        classes: Optional[AbstractSet[int]] = None) -> List[FrameSample]:
    """
    Frames from random agent states with their unlabeled-presence label.

    With balanced=True, positives and negatives are drawn in equal numbers
    (or as close as max_attempts * count draws allow). When classes is given,
    objects of any other class are neither featurized nor counted in gt.
    """
    if not scenes or count < 1:
        raise EmptyBatchError("A frame dataset needs scenes and a positive count")
    rng = np.random.default_rng([seed, 4177])
    wanted = {1: count // 2, 0: count - count // 2} if balanced else None
    samples: List[FrameSample] = []
    for _ in range(max_attempts * count):
        if len(samples) >= count:
            break
        scene = scenes[rng.integers(len(scenes))]
        free = scene.free_cells()
        x, y = free[rng.integers(len(free))]
        state = AgentState(int(x), int(y), int(HEADINGS[rng.integers(4)]), int(PITCHES[rng.integers(3)]))
        frame = observe(scene, state, world)
        if classes is not None:
            frame = restrict_frame(frame, scene.split, classes)
        if wanted is not None:
            if wanted[frame.gt] == 0:
                continue
            wanted[frame.gt] -= 1
        samples.append(FrameSample(observation_features(frame, oracle, rows), frame.gt, scene.scene_id, state))
    if len(samples) < count:
        logger.warning(f"Frame dataset holds {len(samples)} of {count} requested samples")
    return samples


def restrict_frame(frame: ObservationFrame, split: ClassSplit, classes: AbstractSet[int]) -> ObservationFrame:
    """The frame as if only the given classes existed; gt is recomputed."""
    visible = tuple(v for v in frame.visible if v.class_id in classes)
    gt = int(any(split.is_unlabeled(v.class_id) for v in visible))
    return replace(frame, visible=visible, gt=gt)


def build_pretraining_sets(train_scenes: Sequence[Scene], held_out_scenes: Sequence[Scene],
                           oracle: ClassFeatureOracle, train_count: int, held_out_count: int, seed: int,
                           world: WorldConfig = WorldConfig(),
                           rows: int = 16) -> Tuple[List[FrameSample], List[FrameSample]]:
    """
    Training frames and held-out frames for epoch selection.

    Both sets see known and unknown classes only: never-seen objects in the
    held-out scenes are left out of the features and of gt.
    """
    if not train_scenes or not held_out_scenes:
        raise EmptyBatchError("UOI pretraining needs training and held-out scenes")
    split = oracle.split
    classes = frozenset(split.known + split.unknown)
    train_set = build_frame_dataset(train_scenes, oracle, train_count, seed, world, rows, classes=classes)
    held_out = build_frame_dataset(held_out_scenes, oracle, held_out_count, seed + 1, world, rows,
                                   classes=classes)
    return train_set, held_out


def select_epoch(isr: Sequence[float]) -> int:
    """1-based epoch with the highest ISR; the earliest wins ties."""
    if not isr:
        raise EmptyBatchError("No epochs to select from")
    return int(np.argmax(np.asarray(isr))) + 1


def uoi_pretrain(model: UoiModel, train_set: Sequence[FrameSample], held_out: Sequence[FrameSample],
                 bank: torch.Tensor, config: UoiConfig = UoiConfig(), seed: int = 0,
                 show_progress: bool = False) -> PretrainResult:
    """
    Pretrain with Adam on binary cross entropy, keep the best-ISR epoch and freeze.

    Returns:
        per-epoch held-out ISR and mean training loss, and the selected epoch
    """
    if not train_set or not held_out:
        raise EmptyBatchError("UOI pretraining needs non-empty training and held-out sets")
    if bank.shape[0] != model.n_unknown:
        raise BankSizeError(f"Bank holds {bank.shape[0]} maps, expected {model.n_unknown}")

    tape = GradTape(model.store)
    leaves = [tape.params[n] for n in tape.watched]
    optimizer = torch.optim.Adam(leaves, lr=config.lr)
    gen = torch.Generator().manual_seed(seed)
    result = PretrainResult()
    snapshots = []

    epochs = tqdm(range(config.epochs), desc='UOI pretraining', disable=not show_progress)
    for epoch in epochs:
        order = torch.randperm(len(train_set), generator=gen).tolist()
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            f_o = torch.stack([s.f_o for s in chunk])
            gt = torch.tensor([s.gt for s in chunk], dtype=DTYPE)
            _, prob = uoi_batch(f_o, bank, tape.params)
            loss = uoi_loss(prob, gt).mean()
            grads = tape.gradient(loss)
            optimizer.zero_grad()
            for leaf, n in zip(leaves, tape.watched):
                leaf.grad = grads[n]
            optimizer.step()
            total += float(loss) * len(chunk)

        for n in tape.watched:
            model.store.update(n, tape.params[n])
        snapshots.append(model.store.copy(name=f'uoi-epoch-{epoch + 1}'))
        result.losses.append(total / len(train_set))
        result.isr.append(model.isr(held_out, bank))
        logger.info(f"UOI epoch {epoch + 1}: loss {result.losses[-1]:.4f}, ISR {result.isr[-1]:.4f}")

    result.best_epoch = select_epoch(result.isr)
    model.store.assign(snapshots[result.best_epoch - 1])
    model.store.freeze()
    logger.info(f"Selected UOI epoch {result.best_epoch} with ISR {result.isr[result.best_epoch - 1]:.4f}")
    return result
