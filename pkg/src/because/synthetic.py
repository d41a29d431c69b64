"""Synthetic confounded-MDP benchmark with a known sparse core matrix.

Generates latent transition data mu(s') = M^T phi(s,a) + noise, optionally
confounded by per-batch context shifts that hit both sides, creating spurious
pooled dependence that vanishes within a batch.  The data is wrapped as an
OfflineDataset of raw-valued states with identity-like feature maps so the
full mask-estimation path can run on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfounderContext, OfflineDataset, StateVec, Transition
from .representation import FeatureMapMu, FeatureMapPhi


@dataclass
class SCMSpec:
    d: int = 7
    d_prime: int = 4
    n_edges: int = 5
    noise: float = 0.05
    n_contexts: int = 4
    confound_strength: float = 0.0  # 0 = unconfounded
    episode_len: int = 10


def random_sparse_mask(spec: SCMSpec, rng: np.random.Generator) -> np.ndarray:
    m = np.zeros((spec.d, spec.d_prime))
    idx = rng.choice(spec.d * spec.d_prime, size=spec.n_edges, replace=False)
    m.ravel()[idx] = rng.uniform(0.5, 1.0, size=spec.n_edges)
    return m


def sample_scm_features(spec: SCMSpec, m_true: np.ndarray, n: int,
                        rng: np.random.Generator
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Phi, Mu_next, context ids).  Contexts shift confounded dims on both sides."""
    Phi = rng.uniform(-1.0, 1.0, size=(n, spec.d))
    ctx = rng.integers(spec.n_contexts, size=n)
    Mu = Phi @ m_true + spec.noise * rng.standard_normal((n, spec.d_prime))
    if spec.confound_strength > 0:
        # the confounder u_c pushes a spurious phi dim and every mu dim together
        null_rows = np.flatnonzero(~m_true.any(axis=1))
        shift_dim = int(null_rows[0]) if len(null_rows) else 0
        levels = np.linspace(-1.0, 1.0, spec.n_contexts)
        u = levels[ctx] * spec.confound_strength
        Phi[:, shift_dim] += u
        Mu += u[:, None]
    return Phi, Mu, ctx


def identity_feature_maps(spec: SCMSpec, action_dim: int = 1
                          ) -> tuple[FeatureMapPhi, FeatureMapMu]:
    state_dim = max(spec.d, spec.d_prime)
    w_phi = np.zeros((spec.d, state_dim + action_dim))
    w_phi[:, :spec.d] = np.eye(spec.d)
    w_mu = np.zeros((spec.d_prime, state_dim))
    w_mu[:, :spec.d_prime] = np.eye(spec.d_prime)
    return FeatureMapPhi(w_phi), FeatureMapMu(w_mu)


def scm_dataset(spec: SCMSpec, n: int, seed: int
                ) -> tuple[OfflineDataset, FeatureMapPhi, FeatureMapMu, np.ndarray]:
    """Wrap sampled SCM features as an offline dataset of raw-valued states.

    Samples are grouped into episodes of fixed length; each episode carries a
    context tag realized through the ConfounderContext record so batch-wise
    estimation can stratify on it.
    """
    rng = np.random.default_rng(seed)
    m_true = random_sparse_mask(spec, rng)
    state_dim = max(spec.d, spec.d_prime)
    n_eps = (n + spec.episode_len - 1) // spec.episode_len
    ctx_by_ep = rng.integers(spec.n_contexts, size=n_eps)

    Phi = rng.uniform(-1.0, 1.0, size=(n, spec.d))
    Mu = Phi @ m_true + spec.noise * rng.standard_normal((n, spec.d_prime))
    if spec.confound_strength > 0:
        null_rows = np.flatnonzero(~m_true.any(axis=1))
        shift_dim = int(null_rows[0]) if len(null_rows) else 0
        levels = np.linspace(-1.0, 1.0, spec.n_contexts)
        ep_of = np.arange(n) // spec.episode_len
        u = levels[ctx_by_ep[ep_of]] * spec.confound_strength
        Phi[:, shift_dim] += u
        Mu += u[:, None]

    transitions: list[Transition] = []
    contexts: list[ConfounderContext] = []
    for i in range(n):
        ep = i // spec.episode_len
        t = i % spec.episode_len
        s_vals = np.zeros(state_dim)
        s_vals[:spec.d] = Phi[i]
        s2_vals = np.zeros(state_dim)
        s2_vals[:spec.d_prime] = Mu[i]
        last_of_ep = t == spec.episode_len - 1 or i == n - 1
        transitions.append(Transition(StateVec(s_vals), 0, StateVec(s2_vals),
                                      0.0, last_of_ep, ep, t))
    for ep in range(n_eps):
        # context id rides on spurious_level so batch grouping can see it
        contexts.append(ConfounderContext(
            n_doors=1, placement="train", spurious_level=int(ctx_by_ep[ep]),
            behavior="synthetic"))
    ds = OfflineDataset(transitions, contexts, "synthetic",
                        state_dim=state_dim, action_dim=1,
                        horizon=spec.episode_len)
    phi, mu = identity_feature_maps(spec)
    return ds, phi, mu, m_true


def support_metrics(estimated: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(precision, recall, f1) of an estimated support against the truth."""
    est = estimated.astype(bool)
    tru = truth.astype(bool)
    tp = int((est & tru).sum())
    fp = int((est & ~tru).sum())
    fn = int((~est & tru).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1
