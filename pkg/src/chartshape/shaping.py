"""Scalar objectives: exact KL, verifiable reward, group advantages, the
clipped surrogate, the consistency / separation constraints, and their
stage compositions.

Differentiable terms take the flat parameter vector as a
:class:`~chartshape.autodiff.Tensor` and feature rows as plain arrays;
they are batched over items so one graph covers a whole optimizer step.
Target distributions of both constraints are evaluated with plain numpy
from ``target_theta`` (by default the current parameters), so no
gradient can flow through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, minimum
from .policy import (
    N_OPTIONS,
    AnswerDistribution,
    NonFiniteError,
    PolicyParams,
    PolicyShape,
    log_softmax,
    logits,
    logits_graph,
)

FORMAT_WEIGHT = 0.1
CORRECT_WEIGHT = 0.9
ADV_EPS = 1e-8
STAGES = ("stage1", "stage2", "joint")


class DomainError(ValueError):
    pass


class GroupTooSmall(ValueError):
    pass


class MissingFragment(ValueError):
    pass


# -- config -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.02
    c_cons: float = 1.0
    c_sep: float = 0.2
    epsilon: float = 0.2
    gamma: float = 0.01
    group_size: int = 8
    temperature: float = 0.85
    lr: float = 1e-6
    weight_decay: float = 0.01
    batch: int = 32
    stage1_epochs: int = 5
    stage2_epochs: int = 3
    hidden: int = 64
    init_seed: int = 0
    mask_fraction: float = 0.6
    mask_patch: int = 8

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "epsilon", "lr", "weight_decay", "mask_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.c_cons > 0 and self.c_sep > 0):
            raise ValueError("clip thresholds must be positive")
        if self.group_size < 2 or self.batch < 1 or self.temperature <= 0:
            raise ValueError("group_size >= 2, batch >= 1 and temperature > 0 required")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("stage epochs must be >= 1")


# -- KL and rewards ------------------------------------------------------------------


def _probs(d) -> np.ndarray:
    return np.asarray(d.probs if isinstance(d, AnswerDistribution) else d, dtype=np.float64)


def kl_divergence(p, q) -> float:
    """``sum p_i ln(p_i / q_i)`` over the support of ``p``."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise DomainError("distributions over different supports")
    live = p > 0
    if np.any(q[live] == 0):
        raise DomainError("q has zero mass where p does not")
    return max(0.0, float(np.sum(p[live] * (np.log(p[live]) - np.log(q[live])))))


@dataclass(frozen=True)
class Reward:
    format_ok: bool
    correct: bool

    @property
    def value(self) -> float:
        return FORMAT_WEIGHT * self.format_ok + CORRECT_WEIGHT * self.correct


def compute_reward(option_index: int | None, answer_index: int, n_options: int = N_OPTIONS) -> Reward:
    well_formed = isinstance(option_index, (int, np.integer)) and 0 <= option_index < n_options
    return Reward(format_ok=well_formed, correct=well_formed and int(option_index) == answer_index)


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-standardized rewards; a zero-variance group gets all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rollouts, got {r.size}")
    std = r.std()
    if std == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + ADV_EPS)


# -- rollouts ------------------------------------------------------------------------


@dataclass(frozen=True)
class Rollout:
    option_index: int
    old_logprob: float
    reward: Reward

    @property
    def correct(self) -> bool:
        return self.reward.correct


@dataclass(frozen=True)
class RolloutGroup:
    item_id: str
    rollouts: tuple[Rollout, ...]
    advantages: tuple[float, ...]

    @classmethod
    def build(cls, item_id: str, options: Sequence[int], old_logprobs: Sequence[float],
              answer_index: int) -> "RolloutGroup":
        rollouts = tuple(
            Rollout(int(o), float(lp), compute_reward(int(o), answer_index))
            for o, lp in zip(options, old_logprobs)
        )
        adv = group_advantages([r.reward.value for r in rollouts])
        return cls(item_id, rollouts, tuple(adv.tolist()))

    @property
    def actions(self) -> np.ndarray:
        return np.array([r.option_index for r in self.rollouts], dtype=np.int64)

    @property
    def old_logprobs(self) -> np.ndarray:
        return np.array([r.old_logprob for r in self.rollouts])

    @property
    def correct(self) -> np.ndarray:
        return np.array([r.correct for r in self.rollouts], dtype=bool)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward.value for r in self.rollouts])


# -- differentiable terms --------------------------------------------------------------


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def policy_logprobs(theta: Tensor, shape: PolicyShape, features, temperature: float) -> Tensor:
    return (logits_graph(theta, _rows(features), shape) * (1.0 / temperature)).log_softmax()


def target_logprobs(theta: np.ndarray, shape: PolicyShape, features, temperature: float) -> np.ndarray:
    """Constant branch: no graph is recorded, so gradients cannot reach it."""
    return log_softmax(logits(PolicyParams(shape, np.asarray(theta)), _rows(features)), temperature)


def kl_rows(logp: Tensor, target_logp: np.ndarray) -> Tensor:
    """Row-wise ``KL(softmax(logp) || exp(target_logp))`` for (N, 4) inputs."""
    return (logp.exp() * (logp - Tensor(target_logp))).sum(axis=1)


@dataclass
class Fragment:
    """A differentiable loss term plus its diagnostic scalars."""

    loss: Tensor
    stats: dict[str, float] = field(default_factory=dict)


def grpo_term(
    theta: Tensor,
    shape: PolicyShape,
    features,
    actions,
    old_logprobs,
    advantages,
    ref_theta: np.ndarray,
    cfg: TrainConfig,
) -> Fragment:
    """``-mean min(r A, clip(r) A) + gamma * mean KL(pi || pi_ref)`` over a batch.

    ``features`` is (B, d); ``actions``, ``old_logprobs`` and ``advantages``
    are (B, G). The surrogate averages over all B*G rollouts, the KL over
    the B items.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    old = np.atleast_2d(np.asarray(old_logprobs, dtype=np.float64))
    adv = np.atleast_2d(np.asarray(advantages, dtype=np.float64))
    b, g = actions.shape
    logp = policy_logprobs(theta, shape, features, cfg.temperature)
    picked = logp[np.repeat(np.arange(b), g), actions.ravel()]
    ratio = (picked - Tensor(old.ravel())).exp()
    a = Tensor(adv.ravel())
    surrogate = minimum(ratio * a, ratio.clip(1 - cfg.epsilon, 1 + cfg.epsilon) * a)
    ref_lp = target_logprobs(ref_theta, shape, features, cfg.temperature)
    kl_ref = kl_rows(logp, ref_lp)
    loss = -surrogate.mean() + cfg.gamma * kl_ref.mean()
    if not math.isfinite(loss.item()):
        raise NonFiniteError("non-finite surrogate loss")
    r = ratio.data
    clipped = (r < 1 - cfg.epsilon) | (r > 1 + cfg.epsilon)
    return Fragment(loss, {"kl_to_ref": float(kl_ref.data.mean()), "clip_fraction": float(clipped.mean())})


def consistency_term(
    theta: Tensor,
    shape: PolicyShape,
    features,
    pres_features,
    correct,
    has_pres,
    cfg: TrainConfig,
    target_theta: np.ndarray | None = None,
) -> Fragment:
    """Mean over all B*G rollouts of ``1[correct] * min(c_cons, KL(pi(I) || sg pi(I_pres)))``.

    ``correct`` is (B, G); rows with ``has_pres`` false contribute 0 and
    may carry any placeholder features.
    """
    correct = np.atleast_2d(np.asarray(correct, dtype=bool))
    has_pres = np.asarray(has_pres, dtype=bool).reshape(-1)
    target_theta = theta.data if target_theta is None else target_theta
    logp = policy_logprobs(theta, shape, features, cfg.temperature)
    kl = kl_rows(logp, target_logprobs(target_theta, shape, pres_features, cfg.temperature))
    gate = correct * has_pres[:, None]
    # per-item weight = number of gated rollouts; summing over G keeps the gate per rollout
    weights = gate.sum(axis=1).astype(np.float64)
    loss = (kl.min_const(cfg.c_cons) * Tensor(weights)).sum() * (1.0 / correct.size)
    live = has_pres
    return Fragment(loss, {"kl_to_pres": float(kl.data[live].mean()) if live.any() else 0.0})


def separation_term(
    theta: Tensor,
    shape: PolicyShape,
    features,
    abl_features,
    cfg: TrainConfig,
    target_theta: np.ndarray | None = None,
) -> Fragment:
    """Mean over items of ``min(c_sep, KL(pi(I) || sg pi(I_abl)))``; no gate."""
    target_theta = theta.data if target_theta is None else target_theta
    logp = policy_logprobs(theta, shape, features, cfg.temperature)
    kl = kl_rows(logp, target_logprobs(target_theta, shape, abl_features, cfg.temperature))
    return Fragment(kl.min_const(cfg.c_sep).mean(), {"kl_to_abl": float(kl.data.mean())})


# -- single-item conveniences ------------------------------------------------------------


def consistency_loss(params: PolicyParams, features, pres_features, rollout_correct: bool,
                     cfg: TrainConfig) -> float:
    if not rollout_correct or pres_features is None:
        return 0.0
    frag = consistency_term(Tensor(params.theta), params.shape, features, pres_features,
                            [[True]], [True], cfg)
    return frag.loss.item()


def separation_loss(params: PolicyParams, features, abl_features, cfg: TrainConfig) -> float:
    return separation_term(Tensor(params.theta), params.shape, features, abl_features, cfg).loss.item()


# -- composition ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    stage: str
    l_grpo: float
    l_cons: float
    l_sep: float
    l_total: float
    kl_to_ref: float = 0.0
    kl_to_pres: float = 0.0
    kl_to_abl: float = 0.0
    clip_fraction: float = 0.0


def uses_terms(stage: str) -> tuple[bool, bool]:
    """``(consistency, separation)`` flags for a stage tag."""
    try:
        return {"stage1": (True, False), "stage2": (False, True), "joint": (True, True)}[stage]
    except KeyError:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}") from None


def compose(stage: str, l_grpo, l_cons, l_sep, cfg: TrainConfig):
    """Stage objective; works on floats and on graph tensors alike."""
    cons, sep = uses_terms(stage)
    if cons and l_cons is None:
        raise MissingFragment(f"{stage} needs the consistency term")
    if sep and l_sep is None:
        raise MissingFragment(f"{stage} needs the separation term")
    total = l_grpo
    if cons:
        total = total + cfg.alpha * l_cons
    if sep:
        total = total - cfg.beta * l_sep
    return total


def stage_objective(stage: str, fragments: dict, cfg: TrainConfig) -> LossReport:
    """Fold scalar fragments (``l_grpo``, ``l_cons``, ``l_sep`` + stats) into a report."""
    if fragments.get("l_grpo") is None:
        raise MissingFragment("l_grpo is always required")
    cons, sep = uses_terms(stage)
    l_cons = fragments.get("l_cons")
    l_sep = fragments.get("l_sep")
    total = compose(stage, fragments["l_grpo"], l_cons, l_sep, cfg)
    return LossReport(
        stage=stage,
        l_grpo=float(fragments["l_grpo"]),
        l_cons=float(l_cons) if cons else 0.0,
        l_sep=float(l_sep) if sep else 0.0,
        l_total=float(total),
        kl_to_ref=float(fragments.get("kl_to_ref", 0.0)),
        kl_to_pres=float(fragments.get("kl_to_pres", 0.0)),
        kl_to_abl=float(fragments.get("kl_to_abl", 0.0)),
        clip_fraction=float(fragments.get("clip_fraction", 0.0)),
    )
