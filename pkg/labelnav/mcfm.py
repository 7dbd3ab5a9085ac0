"""
Meta contrastive feature modifier.

f_t is pulled towards the features of known objects that share the view with
an unlabeled object and pushed away from known objects seen earlier but
absent now. The parameters (group alpha) are adapted per episode on steps
where the identifier fires.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from labelnav.errors import DimensionError, ScheduleViolationError
from labelnav.numerics import DTYPE, GradTape, ParamStore, Params, sgd_step
from labelnav.perception import POSE_DIM, Detection

logger = logging.getLogger(__name__)

MCFM_PARAMS = ('mcfm_w_r1', 'mcfm_w_r2', 'mcfm_w_r3')


def init_mcfm_params(store: ParamStore, relation_dim: int, generator: torch.Generator):
    """Register W_R1, W_R2 and W_R3 in group alpha. W_R3 serves both the score and the modifier."""
    store.add('alpha', 'mcfm_w_r1', (relation_dim, relation_dim), generator)
    store.add('alpha', 'mcfm_w_r2', (POSE_DIM, relation_dim), generator)
    store.add('alpha', 'mcfm_w_r3', (relation_dim, relation_dim), generator)


class ClassFeatureBuffer:
    """
    Running mean of the detector features of each known class, plus the last
    egocentric pose it was seen at. Scoped to one episode.
    """

    def __init__(self, known: Sequence[int]):
        self.known = tuple(known)
        self._sums: Dict[int, torch.Tensor] = {}
        self._counts: Dict[int, int] = {}
        self._poses: Dict[int, torch.Tensor] = {}

    def insert(self, class_id: int, feature: torch.Tensor, pose: Optional[torch.Tensor] = None):
        if class_id not in self.known:
            raise KeyError(f"Class {class_id} is not a known class")
        feature = feature.detach()
        if class_id in self._sums:
            self._sums[class_id] = self._sums[class_id] + feature
            self._counts[class_id] += 1
        else:
            self._sums[class_id] = feature.clone()
            self._counts[class_id] = 1
        if pose is not None:
            self._poses[class_id] = pose.detach().clone()

    def observe(self, detections: Iterable[Detection]):
        for d in detections:
            self.insert(d.class_id, d.feature, d.pose)

    def has(self, class_id: int) -> bool:
        return class_id in self._counts

    def count(self, class_id: int) -> int:
        return self._counts.get(class_id, 0)

    def mean(self, class_id: int) -> torch.Tensor:
        return self._sums[class_id] / self._counts[class_id]

    def pose(self, class_id: int) -> Optional[torch.Tensor]:
        return self._poses.get(class_id)

    def observed(self) -> Tuple[int, ...]:
        return tuple(c for c in self.known if c in self._counts)


@dataclass(frozen=True)
class CooccurrenceSets:
    present: Tuple[int, ...] = ()
    absent: Tuple[int, ...] = ()

    @property
    def usable(self) -> bool:
        return len(self.present) > 0 and len(self.absent) > 0


def cooccurrence_sets(detected: Iterable[int], cls: int, buffer: ClassFeatureBuffer) -> CooccurrenceSets:
    """
    O: known classes in view while CLS=1. Ô: known classes absent from the
    view that the buffer has seen before (a class never observed has no
    feature and no pose, so it is left out).
    """
    if cls != 1:
        return CooccurrenceSets()
    in_view = set(detected)
    present = tuple(c for c in buffer.known if c in in_view)
    absent = tuple(c for c in buffer.observed() if c not in in_view)
    return CooccurrenceSets(present, absent)


def score_s(f_k: torch.Tensor, p: torch.Tensor, f_t: torch.Tensor, params: Params) -> torch.Tensor:
    """||f_k W_R1 + p W_R2 - f_t W_R3||^2"""
    w1, w2, w3 = params['mcfm_w_r1'], params['mcfm_w_r2'], params['mcfm_w_r3']
    if f_k.shape[-1] != w1.shape[0] or p.shape[-1] != w2.shape[0] or f_t.shape[-1] != w3.shape[0]:
        raise DimensionError(
            f"score_s got f_k {tuple(f_k.shape)}, p {tuple(p.shape)}, f_t {tuple(f_t.shape)}")
    diff = f_k @ w1 + p @ w2 - f_t @ w3
    return (diff ** 2).sum(dim=-1)


@dataclass(frozen=True)
class McfmInputs:
    """Everything the contrastive loss needs for one step."""
    sets: CooccurrenceSets
    features: Dict[int, torch.Tensor]
    poses: Dict[int, torch.Tensor]
    f_t: torch.Tensor


def mcfm_inputs(sets: CooccurrenceSets, buffer: ClassFeatureBuffer, current_poses: Dict[int, torch.Tensor],
                f_t: torch.Tensor) -> McfmInputs:
    """Buffer means for every class in O and Ô; current pose for O, last seen pose for Ô."""
    features = {c: buffer.mean(c) for c in sets.present + sets.absent}
    poses = {}
    for c in sets.present:
        poses[c] = current_poses[c] if c in current_poses else buffer.pose(c)
    for c in sets.absent:
        poses[c] = buffer.pose(c)
    return McfmInputs(sets, features, poses, f_t.detach())


def loss_mcfm(inputs: McfmInputs, params: Params) -> Optional[torch.Tensor]:
    """
    -ln sigmoid(mean_{Ô} S - mean_{O} S).

    Returns:
        the loss, or None when O or Ô is empty (no update this step)
    """
    sets = inputs.sets
    if not sets.usable:
        return None
    present = torch.stack([score_s(inputs.features[c], inputs.poses[c], inputs.f_t, params)
                           for c in sets.present]).mean()
    absent = torch.stack([score_s(inputs.features[c], inputs.poses[c], inputs.f_t, params)
                          for c in sets.absent]).mean()
    return -F.logsigmoid(absent - present)


def modify_ft(f_t: torch.Tensor, params: Params) -> torch.Tensor:
    """f_t' = f_t + f_t W_R3"""
    return f_t + f_t @ params['mcfm_w_r3']


def inner_update(alpha: ParamStore, inputs: McfmInputs, lr: float, cls: int) -> Optional[float]:
    """
    One gradient step on L_mcfm over a task-local alpha copy.

    Returns:
        the pre-update loss, or None when the co-occurrence sets are degenerate

    Raises:
        ScheduleViolationError: called on a step where CLS is 0
    """
    if cls != 1:
        raise ScheduleViolationError("MCFM inner update requested on a CLS=0 step")
    tape = GradTape(alpha, groups=['alpha'])
    loss = loss_mcfm(inputs, tape.params)
    if loss is None:
        return None
    sgd_step(alpha, tape.gradient(loss), lr, groups=['alpha'])
    logger.debug(f"MCFM step |O|={len(inputs.sets.present)} |Ô|={len(inputs.sets.absent)} "
                 f"L_mcfm={float(loss):.6f}")
    return float(loss)
