"""
Recurrent actor-critic policy.

Observation, target and relation features are projected to a common width,
concatenated with the previous action and the done-reminder bit, and fed to
an LSTM cell whose state drives the actor (six logits) and the critic.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

from labelnav.errors import EmptyBatchError, PerceptionError
from labelnav.gridworld import ATTRIBUTE_VOCABULARY, NUM_ACTIONS, ClassSplit, Target
from labelnav.numerics import DTYPE, ParamStore, Params
from labelnav.perception import attribute_embed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyDims:
    map_rows: int = 16
    feature_dim: int = 32
    known_classes: int = 6
    gcn_out: int = 16
    embed_dim: int = 32
    hidden_dim: int = 64
    use_relations: bool = True

    @property
    def ti_dim(self) -> int:
        return self.known_classes + 1 + len(ATTRIBUTE_VOCABULARY)

    @property
    def relation_dim(self) -> int:
        return (self.known_classes + 1) * self.gcn_out

    @property
    def input_dim(self) -> int:
        streams = 3 if self.use_relations else 2
        return streams * self.embed_dim + NUM_ACTIONS + 1


def _linear(store: ParamStore, name: str, fan_in: int, fan_out: int, generator: torch.Generator):
    store.add('psi', f'{name}_w', (fan_in, fan_out), generator)
    store.add('psi', f'{name}_b', (1, fan_out), value=torch.zeros(1, fan_out, dtype=DTYPE))


def init_policy_params(store: ParamStore, dims: PolicyDims, generator: torch.Generator):
    """FFN_o, FFN_t, (FFN_r), the LSTM cell and both heads, all in group psi."""
    _linear(store, 'ffn_o', dims.map_rows * dims.feature_dim, dims.embed_dim, generator)
    _linear(store, 'ffn_t', dims.ti_dim, dims.embed_dim, generator)
    if dims.use_relations:
        _linear(store, 'ffn_r', dims.relation_dim, dims.embed_dim, generator)
    store.add('psi', 'lstm_w_ih', (dims.input_dim, 4 * dims.hidden_dim), generator)
    store.add('psi', 'lstm_w_hh', (dims.hidden_dim, 4 * dims.hidden_dim), generator)
    store.add('psi', 'lstm_b', (1, 4 * dims.hidden_dim), value=torch.zeros(1, 4 * dims.hidden_dim, dtype=DTYPE))
    _linear(store, 'actor', dims.hidden_dim, NUM_ACTIONS, generator)
    _linear(store, 'critic', dims.hidden_dim, 1, generator)


def build_ti(target: Target, split: ClassSplit) -> torch.Tensor:
    """
    One-hot over the I known classes plus the unlabeled slot, followed by
    the target attributes.

    Raises:
        PerceptionError: a labelled target whose class is not known
    """
    one_hot = torch.zeros(len(split.known) + 1, dtype=DTYPE)
    if target.unlabeled:
        one_hot[len(split.known)] = 1.0
    else:
        if target.class_id not in split.known:
            raise PerceptionError(f"Class {target.class_id} is not a known class")
        one_hot[split.known_index(target.class_id)] = 1.0
    return torch.cat([one_hot, attribute_embed(target.attributes)])


def done_reminder(detected: Sequence[int], cls: int, target: Target) -> int:
    """1 when a known target is detected, or an unlabeled target meets CLS=1."""
    if target.unlabeled:
        return int(cls == 1)
    return int(target.class_id in set(detected))


@dataclass(frozen=True)
class StepContext:
    h: torch.Tensor
    c: torch.Tensor
    prev_action: Optional[int] = None
    reminder: int = 0

    @classmethod
    def initial(cls, hidden_dim: int) -> 'StepContext':
        zeros = torch.zeros(1, hidden_dim, dtype=DTYPE)
        return cls(zeros, zeros.clone(), None, 0)

    def with_reminder(self, bit: int) -> 'StepContext':
        return StepContext(self.h, self.c, self.prev_action, int(bit))

    def after(self, action: int) -> 'StepContext':
        return StepContext(self.h, self.c, int(action), self.reminder)


@dataclass(frozen=True)
class PolicyOutput:
    probs: torch.Tensor
    log_probs: torch.Tensor
    value: torch.Tensor
    context: StepContext


def project(f_o: torch.Tensor, ti: torch.Tensor, relations: Optional[torch.Tensor],
            params: Params) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """z_o, z_t and z_r (None when the policy has no relation stream)."""
    z_o = torch.relu(f_o.reshape(1, -1) @ params['ffn_o_w'] + params['ffn_o_b'])
    z_t = torch.relu(ti.reshape(1, -1) @ params['ffn_t_w'] + params['ffn_t_b'])
    z_r = None
    if 'ffn_r_w' in params and relations is not None:
        z_r = torch.relu(relations.reshape(1, -1) @ params['ffn_r_w'] + params['ffn_r_b'])
    return z_o, z_t, z_r


def _action_one_hot(action: Optional[int]) -> torch.Tensor:
    v = torch.zeros(1, NUM_ACTIONS, dtype=DTYPE)
    if action is not None:
        v[0, action] = 1.0
    return v


def lstm_cell(x: torch.Tensor, h: torch.Tensor, c: torch.Tensor, params: Params) -> Tuple[torch.Tensor, torch.Tensor]:
    gates = x @ params['lstm_w_ih'] + h @ params['lstm_w_hh'] + params['lstm_b']
    i, f, g, o = gates.chunk(4, dim=1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def policy_step(z_o: torch.Tensor, z_t: torch.Tensor, z_r: Optional[torch.Tensor], ctx: StepContext,
                params: Params) -> PolicyOutput:
    """Input order: (z_o, z_t, z_r, previous action, reminder)."""
    streams = [z_o, z_t] + ([z_r] if z_r is not None else [])
    reminder = torch.tensor([[float(ctx.reminder)]], dtype=DTYPE)
    x = torch.cat(streams + [_action_one_hot(ctx.prev_action), reminder], dim=1)
    h, c = lstm_cell(x, ctx.h, ctx.c, params)
    logits = (h @ params['actor_w'] + params['actor_b']).reshape(-1)
    value = (h @ params['critic_w'] + params['critic_b']).reshape(())
    return PolicyOutput(torch.softmax(logits, dim=-1), torch.log_softmax(logits, dim=-1), value,
                        StepContext(h, c, ctx.prev_action, ctx.reminder))


def entropy(probs: torch.Tensor, log_probs: torch.Tensor) -> torch.Tensor:
    return -(probs * log_probs).sum()


def select_action(probs: torch.Tensor, greedy: bool, generator: Optional[torch.Generator] = None) -> int:
    """Greedy argmax (lowest index on ties) or a sample from the distribution."""
    if greedy:
        return int(torch.argmax(probs))
    return int(torch.multinomial(probs.detach(), 1, generator=generator))


@dataclass(frozen=True)
class A3CStep:
    log_prob: torch.Tensor
    value: torch.Tensor
    reward: float
    entropy: torch.Tensor


def compute_returns(rewards: Sequence[float], gamma: float, bootstrap: float = 0.0) -> List[float]:
    """Discounted n-step returns R_t = r_t + gamma R_{t+1}, seeded by the bootstrap value."""
    returns = []
    running = bootstrap
    for r in reversed(rewards):
        running = r + gamma * running
        returns.append(running)
    return list(reversed(returns))


def loss_a3c(steps: Sequence[A3CStep], gamma: float = 0.99, value_coef: float = 0.5,
             entropy_coef: float = 0.01, bootstrap: float = 0.0,
             baseline: Optional[Sequence[float]] = None) -> torch.Tensor:
    """
    sum_t [ -log pi(a_t) A_t + value_coef (R_t - V_t)^2 - entropy_coef H_t ]

    The advantage A_t = R_t - b_t uses the detached critic as baseline b,
    unless an explicit baseline sequence is given.

    Raises:
        EmptyBatchError: empty trajectory
    """
    if not steps:
        raise EmptyBatchError("loss_a3c needs at least one step")
    returns = compute_returns([s.reward for s in steps], gamma, bootstrap)
    if baseline is None:
        baseline = [float(s.value.detach()) for s in steps]
    total = torch.zeros((), dtype=DTYPE)
    for s, ret, b in zip(steps, returns, baseline):
        advantage = ret - b
        total = total - s.log_prob * advantage
        total = total + value_coef * (ret - s.value) ** 2
        total = total - entropy_coef * s.entropy
    return total
