"""
Synthetic perception stack.

A seeded ClassFeatureOracle plays the role of the image backbone and the
object detector: every class owns a prototype feature built from its
attributes, and each observation adds noise seeded by the frame identity.
The TargetFeatureGenerator maps attribute vectors to feature maps and is
fitted on known classes only.
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from labelnav.errors import NotTrainedError, PerceptionError
from labelnav.gridworld import (ATTRIBUTE_VOCABULARY, AgentState, ClassSplit, ObservationFrame,
                                relative_geometry)
from labelnav.numerics import DTYPE, GradTape, ParamStore, sgd_step

logger = logging.getLogger(__name__)

POSE_DIM = 6

# noise streams, so observation and detection noise of one frame are independent
_OBSERVATION_STREAM = 1
_DETECTION_STREAM = 2


def attribute_embed(attributes: Iterable[str]) -> torch.Tensor:
    """
    Multi-hot vector over the attribute vocabulary.

    Raises:
        PerceptionError: unknown attribute name or empty set
    """
    attributes = list(attributes)
    if not attributes:
        raise PerceptionError("An attribute set needs at least one attribute")
    vec = torch.zeros(len(ATTRIBUTE_VOCABULARY), dtype=DTYPE)
    for name in attributes:
        if name not in ATTRIBUTE_VOCABULARY:
            raise PerceptionError(f"Unknown attribute '{name}'")
        vec[ATTRIBUTE_VOCABULARY.index(name)] = 1.0
    return vec


def class_attribute_vector(split: ClassSplit, class_id: int) -> torch.Tensor:
    return attribute_embed(split.attributes[class_id])


def ego_pose(state: AgentState, x: int, y: int) -> torch.Tensor:
    """(right, forward, distance, sin bearing, cos bearing, pitch / 30)."""
    right, forward, distance, bearing = relative_geometry(state, x, y)
    rad = np.deg2rad(bearing)
    return torch.tensor([right, forward, distance, np.sin(rad), np.cos(rad), state.pitch / 30.0],
                        dtype=DTYPE)


def ego_transform(frame: ObservationFrame, instance_id: int) -> torch.Tensor:
    """
    Egocentric pose of a visible object.

    Raises:
        PerceptionError: the object is not in the frame
    """
    obj = frame.find(instance_id)
    if obj is None:
        raise PerceptionError(f"Object {instance_id} is not visible in this frame")
    return ego_pose(frame.state, obj.x, obj.y)


@dataclass(frozen=True)
class Detection:
    class_id: int
    instance_id: int
    feature: torch.Tensor
    pose: torch.Tensor
    x: int
    y: int


class ClassFeatureOracle:
    """
    Ground-truth class prototypes and seeded observation noise.

    Prototypes are a random linear map of the attribute vector plus a small
    class-specific offset, redrawn until every pair is further apart than
    four noise norms. sigma is the expected norm of one noise vector.
    """

    def __init__(self, split: ClassSplit, feature_dim: int = 32, relation_dim: int = 16,
                 noise_ratio: float = 0.1, seed: int = 0, max_draws: int = 100):
        if relation_dim > feature_dim:
            raise ValueError("relation_dim cannot exceed feature_dim")
        self.split = split
        self.feature_dim = feature_dim
        self.relation_dim = relation_dim
        self.seed = seed
        rng = np.random.default_rng([seed, 1009])
        attrs = np.stack([class_attribute_vector(split, c).numpy() for c in range(len(split.names))])

        for draw in range(max_draws):
            mixing = rng.normal(size=(attrs.shape[1], feature_dim))
            offsets = 0.25 * rng.normal(size=(attrs.shape[0], feature_dim))
            protos = attrs @ mixing + offsets
            norms = np.linalg.norm(protos, axis=1)
            sigma = noise_ratio * float(norms.mean())
            gaps = [np.linalg.norm(protos[i] - protos[j])
                    for i in range(len(protos)) for j in range(i + 1, len(protos))]
            if min(gaps) > 4.0 * sigma:
                break
        else:
            raise PerceptionError(f"Could not draw separated prototypes in {max_draws} attempts")

        logger.debug(f"Oracle prototypes accepted after {draw + 1} draw(s), sigma={sigma:.4f}")
        self.prototypes = torch.tensor(protos, dtype=DTYPE)
        self.sigma = sigma
        self.background = torch.tensor(rng.normal(size=feature_dim) * sigma / np.sqrt(feature_dim),
                                       dtype=DTYPE)
        q, _ = np.linalg.qr(rng.normal(size=(feature_dim, relation_dim)))
        self.projection = torch.tensor(q, dtype=DTYPE)

    def prototype(self, class_id: int) -> torch.Tensor:
        return self.prototypes[class_id]

    def detector_prototype(self, class_id: int) -> torch.Tensor:
        return self.prototypes[class_id] @ self.projection

    def noise(self, frame: ObservationFrame, instance_id: int, stream: int) -> torch.Tensor:
        s = frame.state
        key = [self.seed, stream, zlib.crc32(frame.scene_id.encode()), s.x, s.y,
               s.heading // 90, s.pitch + 30, instance_id]
        rng = np.random.default_rng(key)
        return torch.tensor(rng.normal(size=self.feature_dim) * self.sigma / np.sqrt(self.feature_dim),
                            dtype=DTYPE)


def observation_features(frame: ObservationFrame, oracle: ClassFeatureOracle, rows: int = 16) -> torch.Tensor:
    """
    rows x D map: visible objects, nearest first, then background rows.
    """
    fmap = oracle.background.repeat(rows, 1)
    for i, obj in enumerate(frame.visible[:rows]):
        fmap[i] = oracle.prototype(obj.class_id) + oracle.noise(frame, obj.instance_id, _OBSERVATION_STREAM)
    return fmap


def detect_known(frame: ObservationFrame, oracle: ClassFeatureOracle) -> List[Detection]:
    """One detection per visible known-class object; unlabeled objects are never reported."""
    detections = []
    for obj in frame.visible:
        if oracle.split.is_unlabeled(obj.class_id):
            continue
        raw = oracle.prototype(obj.class_id) + oracle.noise(frame, obj.instance_id, _DETECTION_STREAM)
        detections.append(Detection(obj.class_id, obj.instance_id, raw @ oracle.projection,
                                    ego_pose(frame.state, obj.x, obj.y), obj.x, obj.y))
    return detections


class TargetFeatureGenerator:
    """
    Random-feature map from attribute vectors to rows x D feature maps.

    The hidden layer (tfg_w1, tfg_b1) is a seeded ReLU projection that is never
    trained. Only the output layer tfg_w2 is fitted, by full-batch gradient
    descent on squared error against the prototypes of the known classes. The
    step size is the inverse of the largest curvature of that quadratic, so the
    loss never increases.
    """

    def __init__(self, attribute_dim: int = len(ATTRIBUTE_VOCABULARY), hidden: int = 64,
                 rows: int = 16, feature_dim: int = 32, seed: int = 0):
        self.rows = rows
        self.feature_dim = feature_dim
        gen = torch.Generator().manual_seed(seed)
        self.store = ParamStore('tfg')
        self.store.add('psi', 'tfg_w1', (attribute_dim, hidden), gen)
        self.store.add('psi', 'tfg_b1', (1, hidden), gen)
        self.store.add('psi', 'tfg_w2', (hidden + 1, rows * feature_dim),
                       value=torch.zeros(hidden + 1, rows * feature_dim, dtype=DTYPE))
        self.trained = False

    def _hidden(self, attrs: torch.Tensor, params: Optional[Dict[str, torch.Tensor]] = None) -> torch.Tensor:
        p = params if params is not None else self.store.as_dict()
        h = torch.relu(attrs @ p['tfg_w1'] + p['tfg_b1'])
        return torch.cat([h, torch.ones(h.shape[0], 1, dtype=DTYPE)], dim=1)

    def _loss(self, hidden: torch.Tensor, targets: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
        out = (hidden @ w2).reshape(-1, self.rows, self.feature_dim)
        return ((out - targets.unsqueeze(1)) ** 2).sum(dim=2).mean()

    def train(self, class_ids: Sequence[int], oracle: ClassFeatureOracle, epochs: int = 2000) -> List[float]:
        """
        Fit on the given (known) classes.

        Returns:
            loss after each epoch
        """
        if any(oracle.split.is_unlabeled(c) for c in class_ids):
            raise PerceptionError("The target feature generator trains on known classes only")
        attrs = torch.stack([class_attribute_vector(oracle.split, c) for c in class_ids])
        targets = torch.stack([oracle.prototype(c) for c in class_ids])
        hidden = self._hidden(attrs)
        # every output column sees the Hessian 2/(K rows) h^T h
        curvature = 2.0 / (len(class_ids) * self.rows) * float(torch.linalg.eigvalsh(hidden.T @ hidden)[-1])
        lr = 1.0 / curvature

        history = []
        for epoch in range(epochs):
            tape = GradTape(self.store, names=['tfg_w2'])
            loss = self._loss(hidden, targets, tape.params['tfg_w2'])
            grads = tape.gradient(loss)
            sgd_step(self.store, grads, lr, names=['tfg_w2'])
            with torch.no_grad():
                history.append(float(self._loss(hidden, targets, self.store['tfg_w2'])))
        self.trained = True
        self.store.freeze()
        final = history[-1] if history else float('nan')
        logger.info(f"Target feature generator fitted on {len(class_ids)} classes, final loss {final:.6f}")
        return history

    def generate(self, attrs: torch.Tensor) -> torch.Tensor:
        """
        Feature map g_t for one attribute vector.

        Raises:
            NotTrainedError: before train()
        """
        if not self.trained:
            raise NotTrainedError("Target feature generator used before training")
        with torch.no_grad():
            out = self._hidden(attrs.reshape(1, -1)) @ self.store['tfg_w2']
        return out.reshape(self.rows, self.feature_dim)

    def bank(self, split: ClassSplit) -> torch.Tensor:
        """Stacked g_t maps of every unknown class, in split order."""
        return torch.stack([self.generate(class_attribute_vector(split, c)) for c in split.unknown])

    def to_dict(self) -> Dict:
        return {'rows': self.rows, 'feature_dim': self.feature_dim, 'trained': self.trained,
                'params': self.store.to_dict()}

    @classmethod
    def from_dict(cls, payload: Dict) -> 'TargetFeatureGenerator':
        gen = cls.__new__(cls)
        gen.rows = payload['rows']
        gen.feature_dim = payload['feature_dim']
        gen.store = ParamStore.from_dict(payload['params'], 'tfg')
        gen.trained = payload['trained']
        if gen.trained:
            gen.store.freeze()
        return gen
