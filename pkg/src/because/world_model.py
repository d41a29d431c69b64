"""Assembled transition model and the alternating training loop.

The model scores a candidate next state by phi(s,a)^T Mbar mu(s'), clips
negatives and renormalizes over an enumerated successor support.  Training
alternates representation updates with batch-wise mask re-estimation and
behavior-likelihood reweighting; the mask starts from the full graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .causal_mask import (
    CITConfig,
    CoreMatrix,
    IHTConfig,
    behavior_likelihood_weight,
    estimate_mask,
    estimate_mask_features,
    reweight_mask,
)


def _dataset_is_factored(ds) -> bool:
    return bool(ds.transitions) and ds.transitions[0].s.factored is not None
from .core import OfflineDataset, StateVec, Transition
from .representation import (
    FeatureMapMu,
    FeatureMapPhi,
    GramMatrix,
    RepTrainConfig,
    compute_gram_from_features,
    dataset_arrays,
    embed_mu,
    embed_phi,
    init_feature_maps,
    mean_gram,
    train_representation,
)
from .unlock import enumerate_candidates as unlock_candidates

CandidateFn = Callable[[StateVec, int], list[StateVec]]


class DivergenceError(RuntimeError):
    pass


@dataclass
class CausalWorldModel:
    phi: FeatureMapPhi
    mu: FeatureMapMu
    gram: GramMatrix          # dataset-sum Gram, reported for conditioning checks
    mask: CoreMatrix
    k_inv_train: np.ndarray = None  # mean-Gram inverse the model was trained against
    candidate_fn: CandidateFn = unlock_candidates
    state_dim: int = 110
    action_dim: int = 8
    loss_trace: list[float] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.k_inv_train is None:
            self.k_inv_train = self.gram.k_inv

    def phi_sa(self, s: StateVec, a: int) -> np.ndarray:
        return embed_phi(self.phi, s, a, self.action_dim)

    def mu_s(self, s: StateVec) -> np.ndarray:
        return embed_mu(self.mu, s)


@dataclass
class TrainLoopConfig:
    outer_iters: int = 10
    discovery_freq: int = 1
    max_transitions: int = 4000
    n_mask_batches: int = 4
    rep: RepTrainConfig = field(default_factory=RepTrainConfig)
    cit: CITConfig = field(default_factory=CITConfig)
    iht: IHTConfig = field(default_factory=IHTConfig)
    seed: int = 0

    def __post_init__(self):
        if self.outer_iters < 0 or self.discovery_freq < 1:
            raise ValueError("invalid training loop configuration")


def predict_transition(wm: CausalWorldModel, s: StateVec, a: int,
                       candidates: list[StateVec] | None = None
                       ) -> tuple[np.ndarray, list[StateVec]]:
    """Probability vector over the candidate successor states.

    Raw bilinear scores are clipped at zero and renormalized; if every score
    is nonpositive the distribution falls back to uniform.
    """
    if candidates is None:
        candidates = wm.candidate_fn(s, a)
    if not candidates:
        raise ValueError("empty candidate set")
    g = wm.phi_sa(s, a) @ wm.mask.m
    scores = np.array([float(g @ wm.mu_s(c)) for c in candidates])
    scores = np.clip(scores, 0.0, None)
    total = scores.sum()
    if total <= 0.0:
        return np.full(len(candidates), 1.0 / len(candidates)), candidates
    return scores / total, candidates


def model_loss(wm: CausalWorldModel, tr: Transition) -> float:
    """Per-transition whitened regression residual of the assembled model."""
    target = wm.mu_s(tr.s_next) @ wm.k_inv_train
    pred = wm.phi_sa(tr.s, tr.a) @ wm.mask.m
    diff = target - pred
    return float(diff @ diff)


def episodic_model_loss(wm: CausalWorldModel, episode: list[Transition]) -> float:
    if not episode:
        raise ValueError("empty episode")
    return float(np.mean([model_loss(wm, tr) for tr in episode]))


def _mask_batches(ds: OfflineDataset, n_batches: int) -> list[np.ndarray]:
    """Transition index groups for batch-wise mask estimation.

    Episodes sharing a ConfounderContext form one group; a single homogeneous
    context is split into contiguous episode chunks instead.
    """
    ep_context: dict[int, int] = {}
    distinct: dict = {}
    for ep, ctx in enumerate(ds.contexts):
        key = (ctx.n_doors, ctx.placement, ctx.spurious_level, ctx.behavior)
        distinct.setdefault(key, len(distinct))
        ep_context[ep] = distinct[key]
    n_eps = len(ds.contexts)
    if len(distinct) > 1:
        group_of = {ep: ep_context[ep] for ep in range(n_eps)}
        n_groups = len(distinct)
    else:
        n_groups = min(n_batches, n_eps)
        group_of = {ep: min(ep * n_groups // n_eps, n_groups - 1)
                    for ep in range(n_eps)}
    batches: list[list[int]] = [[] for _ in range(n_groups)]
    for idx, tr in enumerate(ds.transitions):
        batches[group_of[tr.episode_id]].append(idx)
    return [np.asarray(b, dtype=np.int64) for b in batches if b]


def _batch_view(ds: OfflineDataset, idx: np.ndarray) -> OfflineDataset:
    return OfflineDataset([ds.transitions[i] for i in idx], ds.contexts,
                          ds.behavior_level, state_dim=ds.state_dim,
                          action_dim=ds.action_dim, horizon=ds.horizon)


def _estimate_reweighted_mask(phi: FeatureMapPhi, mu: FeatureMapMu,
                              ds: OfflineDataset, batches: list[np.ndarray],
                              cit_cfg: CITConfig, iht_cfg: IHTConfig,
                              candidate_fn) -> CoreMatrix:
    masks, weights = [], []
    for idx in batches:
        masks.append(estimate_mask(phi, mu, _batch_view(ds, idx),
                                   cit_cfg, iht_cfg, candidate_fn=candidate_fn))
        weights.append(behavior_likelihood_weight(ds, idx))
    return reweight_mask(masks, weights)


def train_world_model(ds: OfflineDataset, cfg: TrainLoopConfig,
                      candidate_fn: CandidateFn = unlock_candidates,
                      init_phi: FeatureMapPhi | None = None,
                      init_mu: FeatureMapMu | None = None) -> CausalWorldModel:
    """Alternating loop: representation epochs, then mask re-estimation.

    Starts from the all-ones core matrix; every ``discovery_freq`` outer
    iterations the mask is re-estimated batch-wise and reweighted by the
    estimated behavior likelihood.
    """
    if not ds.transitions:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    transitions = ds.transitions[: cfg.max_transitions]
    sub = OfflineDataset(transitions, ds.contexts, ds.behavior_level,
                         state_dim=ds.state_dim, action_dim=ds.action_dim,
                         horizon=ds.horizon)
    X, S = dataset_arrays(sub)
    rep = cfg.rep
    phi = init_phi.copy() if init_phi is not None else None
    mu = init_mu.copy() if init_mu is not None else None
    if phi is None or mu is None:
        phi0, mu0 = init_feature_maps(sub.state_dim, rep, action_dim=sub.action_dim,
                                      rng=rng)
        phi = phi or phi0
        mu = mu or mu0
    mask = CoreMatrix.full(rep.d, rep.d_prime)
    batches = _mask_batches(sub, cfg.n_mask_batches)
    trace: list[float] = []
    candidate_expand = candidate_fn if _dataset_is_factored(sub) else None
    for it in range(1, cfg.outer_iters + 1):
        phi, mu, losses = train_representation(phi, mu, mask.m, X, S, rep, rng=rng)
        trace.extend(losses)
        if trace and (not np.isfinite(trace[-1]) or trace[-1] > 1e6):
            raise DivergenceError(
                f"representation loss diverged at outer iteration {it}: trace={trace[-5:]}")
        if it % cfg.discovery_freq == 0:
            mask = _estimate_reweighted_mask(phi, mu, sub, batches,
                                             cfg.cit, cfg.iht, candidate_expand)
    Mu_final = mu.embed_batch(S)
    gram = compute_gram_from_features(Mu_final, rep.gram_eps)
    k_inv_train = mean_gram(Mu_final, rep.gram_eps, rep.gram_rel_ridge).k_inv
    return CausalWorldModel(phi=phi, mu=mu, gram=gram, mask=mask,
                            k_inv_train=k_inv_train, candidate_fn=candidate_fn,
                            state_dim=sub.state_dim, action_dim=sub.action_dim,
                            loss_trace=trace, seed=cfg.seed)


def holdout_split(ds: OfflineDataset, fraction: float = 0.1
                  ) -> tuple[OfflineDataset, list[list[Transition]]]:
    """Split off the last fraction of episodes for held-out reporting."""
    episodes = ds.episodes()
    n_hold = max(1, int(len(episodes) * fraction))
    train_eps = episodes[:-n_hold]
    held = episodes[-n_hold:]
    remap: list[Transition] = []
    for new_id, ep in enumerate(train_eps):
        for tr in ep:
            remap.append(Transition(tr.s, tr.a, tr.s_next, tr.r, tr.done,
                                    new_id, tr.t))
    train = OfflineDataset(remap, ds.contexts[:len(train_eps)],
                           ds.behavior_level, state_dim=ds.state_dim,
                           action_dim=ds.action_dim, horizon=ds.horizon)
    return train, held


def next_state_accuracy(wm: CausalWorldModel, transitions: list[Transition]) -> float:
    """Fraction of transitions whose argmax-predicted successor is the true one."""
    hits = 0
    for tr in transitions:
        probs, cands = predict_transition(wm, tr.s, tr.a)
        if cands[int(np.argmax(probs))] == tr.s_next:
            hits += 1
    return hits / len(transitions)
