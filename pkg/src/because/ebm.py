"""Conditional energy model over causal representations.

A two-layer tanh perceptron scores a (phi(s,a), mu(s')) pair in [-1, 1]; low
energy marks transitions the behavior data supports.  Training minimizes the
margin between positive energies (dataset successors) and negative energies
built by counterfactual column mixing, with negatives replayed from a FIFO
buffer.  Inputs are standardized by frozen feature statistics so the energy
surface is insensitive to the representation's scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import OfflineDataset, StateVec
from .representation import dataset_arrays
from .world_model import CausalWorldModel, predict_transition


class EBMTrainingError(RuntimeError):
    pass


@dataclass
class EBMTrainConfig:
    steps: int = 1000
    buffer_size: int = 1000
    lambda_ebm: float = 1e-4
    learning_rate: float = 0.001
    batch_size: int = 256
    hidden: int = 64
    negative_mode: str = "counterfactual"  # or "shuffle"
    init_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.buffer_size, self.batch_size, self.hidden) < 0:
            raise ValueError("EBM config values must be nonnegative")
        if self.negative_mode not in ("counterfactual", "shuffle"):
            raise ValueError(f"unknown negative mode {self.negative_mode!r}")


@dataclass
class EnergyModel:
    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    input_mean: np.ndarray = None  # frozen standardization, identity if None
    input_std: np.ndarray = None

    def __post_init__(self):
        in_dim = self.w1.shape[1]
        if self.input_mean is None:
            self.input_mean = np.zeros(in_dim)
        if self.input_std is None:
            self.input_std = np.ones(in_dim)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    def theta(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def forward(self, X: np.ndarray) -> np.ndarray:
        Z = (X - self.input_mean) / self.input_std
        H = np.tanh(Z @ self.w1.T + self.b1)
        return np.tanh(H @ self.w2 + self.b2)

    def copy(self) -> "EnergyModel":
        return EnergyModel(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                           self.b2, self.input_mean.copy(), self.input_std.copy())

    @classmethod
    def zeros(cls, in_dim: int, hidden: int = 64) -> "EnergyModel":
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden),
                   np.zeros(hidden), 0.0)

    @classmethod
    def init(cls, in_dim: int, hidden: int, scale: float,
             rng: np.random.Generator) -> "EnergyModel":
        return cls(rng.uniform(-scale, scale, (hidden, in_dim)),
                   np.zeros(hidden),
                   rng.uniform(-scale, scale, hidden),
                   0.0)


def energy(em: EnergyModel, phi_sa: np.ndarray, mu_s: np.ndarray) -> float:
    x = np.concatenate([phi_sa, mu_s])
    if x.shape[0] != em.in_dim:
        raise ValueError(f"input dim {x.shape[0]} != energy model dim {em.in_dim}")
    return float(em.forward(x[None, :])[0])


def energy_batch(em: EnergyModel, Phi: np.ndarray, Mu: np.ndarray) -> np.ndarray:
    return em.forward(np.concatenate([Phi, Mu], axis=1))


def counterfactual_negatives(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mix latent columns across the batch; the first column stays in place.

    Every column j >= 1 is independently permuted over rows, so each column's
    value multiset is preserved while rows become factor combinations that
    never co-occurred.
    """
    batch = np.asarray(batch)
    if batch.shape[0] < 2:
        warnings.warn("single-row batch: counterfactual mixing is a no-op",
                      stacklevel=2)
        return batch.copy()
    out = batch.copy()
    for j in range(1, batch.shape[1]):
        out[:, j] = batch[rng.permutation(batch.shape[0]), j]
    return out


def shuffled_negatives(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Baseline negatives: whole rows permuted, breaking (condition, sample) pairing."""
    return batch[rng.permutation(batch.shape[0])].copy()


def ebm_loss(em: EnergyModel, pos: np.ndarray, neg: np.ndarray,
             lambda_ebm: float) -> float:
    theta = em.theta()
    reg = lambda_ebm * float(np.linalg.norm(theta))
    return float(em.forward(pos).mean() - em.forward(neg).mean() + reg)


def ebm_gradients(em: EnergyModel, pos: np.ndarray, neg: np.ndarray,
                  lambda_ebm: float) -> dict[str, np.ndarray]:
    """Analytic gradients of the margin loss plus the l2-norm regularizer."""
    grads = {"w1": np.zeros_like(em.w1), "b1": np.zeros_like(em.b1),
             "w2": np.zeros_like(em.w2), "b2": 0.0}
    for X, sign in ((pos, 1.0), (neg, -1.0)):
        Z = (X - em.input_mean) / em.input_std
        H = np.tanh(Z @ em.w1.T + em.b1)
        out = np.tanh(H @ em.w2 + em.b2)
        d_out = sign * (1.0 - out ** 2) / X.shape[0]  # d(mean E)/d pre-tanh
        grads["w2"] += d_out @ H
        grads["b2"] += float(d_out.sum())
        dH = np.outer(d_out, em.w2) * (1.0 - H ** 2)
        grads["w1"] += dH.T @ Z
        grads["b1"] += dH.sum(axis=0)
    theta = em.theta()
    norm = float(np.linalg.norm(theta))
    if lambda_ebm and norm > 0:
        scale = lambda_ebm / norm
        grads["w1"] += scale * em.w1
        grads["b1"] += scale * em.b1
        grads["w2"] += scale * em.w2
        grads["b2"] += scale * em.b2
    return grads


def embed_dataset(wm: CausalWorldModel, ds: OfflineDataset
                  ) -> tuple[np.ndarray, np.ndarray]:
    X, S = dataset_arrays(ds)
    return wm.phi.embed_batch(X), wm.mu.embed_batch(S)


def train_ebm(wm: CausalWorldModel, ds: OfflineDataset,
              cfg: EBMTrainConfig) -> tuple[EnergyModel, list[float]]:
    """Fit the energy model on embedded transitions; returns (model, loss trace)."""
    if not ds.transitions:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    Phi, Mu = embed_dataset(wm, ds)
    feats = np.concatenate([Phi, Mu], axis=1)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std < 1e-8] = 1.0
    em = EnergyModel.init(Phi.shape[1] + Mu.shape[1], cfg.hidden,
                          cfg.init_scale, rng)
    em.input_mean, em.input_std = mean, std
    if cfg.steps == 0:
        return em, []
    n = Phi.shape[0]
    buffer = np.empty((0, em.in_dim))
    losses: list[float] = []
    mixer = counterfactual_negatives if cfg.negative_mode == "counterfactual" \
        else shuffled_negatives
    for step in range(cfg.steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        pos = np.concatenate([Phi[idx], Mu[idx]], axis=1)
        neg_mu = mixer(Mu[idx], rng)
        fresh = np.concatenate([Phi[idx], neg_mu], axis=1)
        buffer = np.concatenate([buffer, fresh], axis=0)[-cfg.buffer_size:]
        take = rng.integers(buffer.shape[0], size=min(cfg.batch_size, buffer.shape[0]))
        neg = buffer[take]
        loss = ebm_loss(em, pos, neg, cfg.lambda_ebm)
        if not np.isfinite(loss):
            raise EBMTrainingError(f"non-finite loss at step {step}")
        losses.append(loss)
        g = ebm_gradients(em, pos, neg, cfg.lambda_ebm)
        em.w1 -= cfg.learning_rate * g["w1"]
        em.b1 -= cfg.learning_rate * g["b1"]
        em.w2 -= cfg.learning_rate * g["w2"]
        em.b2 -= cfg.learning_rate * g["b2"]
    return em, losses


def uncertainty(em: EnergyModel, wm: CausalWorldModel, s: StateVec, a: int) -> float:
    """Energy at (s, a) evaluated at the model's argmax predicted successor."""
    probs, cands = predict_transition(wm, s, a)
    s_hat = cands[int(np.argmax(probs))]
    return energy(em, wm.phi_sa(s, a), wm.mu_s(s_hat))
