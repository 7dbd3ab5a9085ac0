"""
Meta object-graph learner.

Nodes are the buffered known-class features plus the modified unlabeled
feature f_t'; edges join classes seen close together during the episode.
A one-layer GCN encodes the graph, and the group-beta weights adapt per
step on a CCA-SSG loss between two randomly augmented views.
"""

import logging
from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np
import torch

from labelnav.errors import DimensionError
from labelnav.gridworld import ClassSplit, ObservationFrame
from labelnav.mcfm import ClassFeatureBuffer
from labelnav.numerics import DTYPE, GradTape, ParamStore, Params, sgd_step

logger = logging.getLogger(__name__)

STD_EPS = 1e-12


def init_mogl_params(store: ParamStore, relation_dim: int, out_dim: int, generator: torch.Generator):
    store.add('beta', 'mogl_w_g', (relation_dim, out_dim), generator)


@dataclass(frozen=True)
class AugmentationSpec:
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.edge_drop < 1.0 and 0.0 <= self.feature_mask < 1.0):
            raise ValueError("Augmentation probabilities must lie in [0, 1)")


@dataclass(frozen=True)
class ObjectGraph:
    """nodes: (I+1) x D_f, row I is the unlabeled node. adjacency: binary with self-loops."""
    nodes: torch.Tensor
    adjacency: torch.Tensor

    @property
    def edges(self) -> torch.Tensor:
        """Row-normalized adjacency."""
        return self.adjacency / self.adjacency.sum(dim=1, keepdim=True)

    @property
    def density(self) -> float:
        n = self.adjacency.shape[0]
        off = float(self.adjacency.sum()) - n
        return off / (n * (n - 1)) if n > 1 else 0.0


class CovisibilityLog:
    """
    Node pairs seen together this episode. Node I stands for the unlabeled object.

    Known pairs must lie within the radius of each other. The unlabeled node has no
    position, since CLS only says something unlabeled is in view, so on CLS=1 steps
    it is linked to every known class in the frame regardless of distance.
    """

    def __init__(self, split: ClassSplit, radius: float = 3.0):
        self.split = split
        self.radius = radius
        self.unlabeled_node = len(split.known)
        self.pairs: Set[Tuple[int, int]] = set()

    def record(self, frame: ObservationFrame, cls: int):
        known = [v for v in frame.visible if not self.split.is_unlabeled(v.class_id)]
        for i, a in enumerate(known):
            for b in known[i + 1:]:
                if a.class_id == b.class_id:
                    continue
                if np.hypot(a.x - b.x, a.y - b.y) <= self.radius:
                    self._add(self.split.known_index(a.class_id), self.split.known_index(b.class_id))
        if cls == 1:
            for v in known:
                self._add(self.split.known_index(v.class_id), self.unlabeled_node)

    def _add(self, i: int, j: int):
        self.pairs.add((min(i, j), max(i, j)))


def build_graph(buffer: ClassFeatureBuffer, f_t_prime: torch.Tensor, log: CovisibilityLog) -> ObjectGraph:
    """
    Known rows hold buffer means (zero when never observed), the last row f_t'.
    Unobserved known classes keep only their self-loop.
    """
    n = len(buffer.known) + 1
    dim = f_t_prime.shape[-1]
    rows = []
    for c in buffer.known:
        rows.append(buffer.mean(c) if buffer.has(c) else torch.zeros(dim, dtype=DTYPE))
    rows.append(f_t_prime.detach().reshape(-1))
    adjacency = torch.eye(n, dtype=DTYPE)
    observed = {i for i, c in enumerate(buffer.known) if buffer.has(c)} | {n - 1}
    for i, j in log.pairs:
        if i in observed and j in observed:
            adjacency[i, j] = 1.0
            adjacency[j, i] = 1.0
    return ObjectGraph(torch.stack(rows), adjacency)


def gcn_forward(graph: ObjectGraph, params: Params) -> torch.Tensor:
    """F = relu(E V W_G)"""
    w_g = params['mogl_w_g']
    if graph.nodes.shape[-1] != w_g.shape[0]:
        raise DimensionError(f"Node width {graph.nodes.shape[-1]} does not match W_G {tuple(w_g.shape)}")
    if graph.adjacency.shape[0] != graph.nodes.shape[0]:
        raise DimensionError("Adjacency and node matrix disagree on the node count")
    return torch.relu(graph.edges @ graph.nodes @ w_g)


def _augment_once(graph: ObjectGraph, spec: AugmentationSpec, rng: np.random.Generator) -> ObjectGraph:
    n = graph.adjacency.shape[0]
    adjacency = graph.adjacency.clone()
    draws = rng.random((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if adjacency[i, j] > 0 and draws[i, j] < spec.edge_drop:
                adjacency[i, j] = 0.0
                adjacency[j, i] = 0.0
    keep = torch.tensor(rng.random(graph.nodes.shape[1]) >= spec.feature_mask, dtype=DTYPE)
    return ObjectGraph(graph.nodes * keep, adjacency)


def augment(graph: ObjectGraph, spec: AugmentationSpec) -> Tuple[ObjectGraph, ObjectGraph]:
    """Two independent views: edges dropped with p_e, feature columns zeroed with p_f."""
    rng = np.random.default_rng([spec.seed, 2971])
    return _augment_once(graph, spec, rng), _augment_once(graph, spec, rng)


def standardize(f: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-variance columns scaled by 1/sqrt(n); constant columns become zeros."""
    n = f.shape[0]
    centered = f - f.mean(dim=0, keepdim=True)
    var = (centered ** 2).mean(dim=0, keepdim=True)
    live = (var > STD_EPS).to(DTYPE)
    std = torch.sqrt(torch.where(var > STD_EPS, var, torch.ones_like(var)))
    return centered / std * live / n ** 0.5


def loss_cca(f_a: torch.Tensor, f_b: torch.Tensor, eta: float = 1e-3) -> torch.Tensor:
    """||Z_A - Z_B||^2 + eta (||Z_A^T Z_A - I||^2 + ||Z_B^T Z_B - I||^2) on standardized Z."""
    if f_a.shape != f_b.shape:
        raise DimensionError(f"Views differ in shape: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    z_a, z_b = standardize(f_a), standardize(f_b)
    eye = torch.eye(f_a.shape[1], dtype=DTYPE)
    invariance = ((z_a - z_b) ** 2).sum()
    decorrelation = ((z_a.T @ z_a - eye) ** 2).sum() + ((z_b.T @ z_b - eye) ** 2).sum()
    return invariance + eta * decorrelation


def cca_objective(graph: ObjectGraph, spec: AugmentationSpec, params: Params, eta: float) -> torch.Tensor:
    view_a, view_b = augment(graph, spec)
    return loss_cca(gcn_forward(view_a, params), gcn_forward(view_b, params), eta)


def inner_update_beta(beta: ParamStore, graph: ObjectGraph, spec: AugmentationSpec, lr: float,
                      eta: float = 1e-3) -> float:
    """
    One gradient step on L_cca over a task-local beta copy.

    Returns:
        the pre-update loss
    """
    tape = GradTape(beta, groups=['beta'])
    loss = cca_objective(graph, spec, tape.params, eta)
    sgd_step(beta, tape.gradient(loss), lr, groups=['beta'])
    logger.debug(f"MOGL step L_cca={float(loss):.6f} density={graph.density:.3f}")
    return float(loss)
