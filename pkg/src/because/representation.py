"""Feature maps for the bilinear transition model and their training loop.

phi embeds a (state, action) pair into R^d and mu embeds a next state into
R^{d'}.  Both are linear by default (a one-hidden-layer tanh variant sits
behind ``hidden_dim``).  Training minimizes the whitened regression residual

    mean ||mu(s')^T K^-1 - phi(s,a)^T M||^2 + lam_phi*snorm(phi) + lam_mu*snorm(mu)

by minibatch SGD with analytic gradients; K = sum mu(s')mu(s')^T + eps*I is
refreshed once per epoch and treated as a constant in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ACTION_DIM, OfflineDataset, StateVec


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass
class FeatureMapPhi:
    weight: np.ndarray  # (d, in_dim) linear, or (d, hidden) when hidden_weight set
    hidden_weight: np.ndarray | None = None  # (hidden, in_dim), tanh activation

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        w = self.hidden_weight if self.hidden_weight is not None else self.weight
        return w.shape[1]

    def embed_batch(self, X: np.ndarray) -> np.ndarray:
        if self.hidden_weight is not None:
            X = np.tanh(X @ self.hidden_weight.T)
        return X @ self.weight.T

    def copy(self) -> "FeatureMapPhi":
        hw = None if self.hidden_weight is None else self.hidden_weight.copy()
        return FeatureMapPhi(self.weight.copy(), hw)


@dataclass
class FeatureMapMu:
    weight: np.ndarray  # (d', state_dim) or (d', hidden)
    hidden_weight: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        w = self.hidden_weight if self.hidden_weight is not None else self.weight
        return w.shape[1]

    def embed_batch(self, S: np.ndarray) -> np.ndarray:
        if self.hidden_weight is not None:
            S = np.tanh(S @ self.hidden_weight.T)
        return S @ self.weight.T

    def copy(self) -> "FeatureMapMu":
        hw = None if self.hidden_weight is None else self.hidden_weight.copy()
        return FeatureMapMu(self.weight.copy(), hw)


@dataclass
class GramMatrix:
    k_mu: np.ndarray
    eps: float
    k_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        k = self.k_mu
        if not np.all(np.isfinite(k)):
            raise TrainingError("non-finite Gram matrix")
        asym = np.max(np.abs(k - k.T)) if k.size else 0.0
        if asym > 1e-10:
            raise TrainingError(f"Gram matrix asymmetry {asym:.2e} > 1e-10")
        eigmin = float(np.linalg.eigvalsh(k).min())
        if eigmin < self.eps * (1 - 1e-9):
            raise TrainingError(f"Gram min eigenvalue {eigmin:.2e} < ridge {self.eps}")
        self.k_inv = np.linalg.inv(k)

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.k_mu))

    def inverse_residual(self) -> float:
        eye = np.eye(self.k_mu.shape[0])
        return float(np.max(np.abs(self.k_mu @ self.k_inv - eye)))


@dataclass
class RepTrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs_per_iteration: int = 5
    lambda_phi: float = 1e-4
    lambda_mu: float = 1e-4
    d: int = 7  # intrinsic state rank 4 + action rank 3
    d_prime: int = 4
    hidden_dim: int | None = None
    init_scale: float = 0.5
    gram_eps: float = 1e-2
    # Training-time relative ridge: floors the Gram at a fraction of its mean
    # diagonal so the whitened target cannot blow up along a collapsing
    # direction of mu (SGD destabilizes once ||K^-1|| grows unchecked).
    gram_rel_ridge: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs_per_iteration",
                     "lambda_phi", "lambda_mu", "d", "d_prime", "init_scale",
                     "gram_eps"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def one_hot_action(a: int, action_dim: int = ACTION_DIM) -> np.ndarray:
    v = np.zeros(action_dim)
    v[a] = 1.0
    return v


def sa_input(s: StateVec, a: int, action_dim: int = ACTION_DIM) -> np.ndarray:
    return np.concatenate([s.values, one_hot_action(a, action_dim)])


def embed_phi(phi: FeatureMapPhi, s: StateVec, a: int,
              action_dim: int = ACTION_DIM) -> np.ndarray:
    x = sa_input(s, a, action_dim)
    if x.shape[0] != phi.in_dim:
        raise ValueError(f"input dim {x.shape[0]} != phi in_dim {phi.in_dim}")
    return phi.embed_batch(x[None, :])[0]


def embed_mu(mu: FeatureMapMu, s: StateVec) -> np.ndarray:
    if s.values.shape[0] != mu.in_dim:
        raise ValueError(f"state dim {s.values.shape[0]} != mu in_dim {mu.in_dim}")
    return mu.embed_batch(s.values[None, :])[0]


def init_feature_maps(state_dim: int, cfg: RepTrainConfig,
                      action_dim: int = ACTION_DIM,
                      rng: np.random.Generator | None = None
                      ) -> tuple[FeatureMapPhi, FeatureMapMu]:
    rng = rng or np.random.default_rng(cfg.seed)
    in_dim = state_dim + action_dim

    def u(shape):
        return rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)

    if cfg.hidden_dim:
        h = cfg.hidden_dim
        phi = FeatureMapPhi(u((cfg.d, h)), u((h, in_dim)))
        mu = FeatureMapMu(u((cfg.d_prime, h)), u((h, state_dim)))
    else:
        phi = FeatureMapPhi(u((cfg.d, in_dim)))
        mu = FeatureMapMu(u((cfg.d_prime, state_dim)))
    return phi, mu


def dataset_arrays(ds: OfflineDataset) -> tuple[np.ndarray, np.ndarray]:
    """(state||action one-hot) inputs and next-state matrices for training."""
    n = len(ds.transitions)
    X = np.zeros((n, ds.state_dim + ds.action_dim))
    S = np.zeros((n, ds.state_dim))
    for i, tr in enumerate(ds.transitions):
        X[i, :ds.state_dim] = tr.s.values
        X[i, ds.state_dim + tr.a] = 1.0
        S[i] = tr.s_next.values
    return X, S


def compute_gram_from_features(Mu: np.ndarray, eps: float,
                               rel_ridge: float = 0.0) -> GramMatrix:
    if not np.all(np.isfinite(Mu)):
        raise TrainingError("non-finite feature in Gram computation")
    if rel_ridge:
        base = Mu.T @ Mu
        eps = max(eps, rel_ridge * float(np.trace(base)) / max(Mu.shape[1], 1))
        k = base + eps * np.eye(Mu.shape[1])
    else:
        k = Mu.T @ Mu + eps * np.eye(Mu.shape[1])
    k = 0.5 * (k + k.T)
    return GramMatrix(k, eps)


def compute_gram(mu: FeatureMapMu, ds: OfflineDataset, eps: float) -> GramMatrix:
    _, S = dataset_arrays(ds)
    return compute_gram_from_features(mu.embed_batch(S), eps)


def mean_gram(Mu: np.ndarray, eps: float, rel_ridge: float = 0.0) -> GramMatrix:
    """Per-sample (mean) Gram matrix.

    The dataset-sum Gram grows with n, which shrinks the whitened regression
    target like 1/n and starves SGD of signal; the mean form keeps the target
    scale independent of the dataset size.
    """
    n = max(Mu.shape[0], 1)
    return compute_gram_from_features(Mu / np.sqrt(n), eps, rel_ridge)


def power_iteration(W: np.ndarray, iters: int, seed: int = 0
                    ) -> tuple[float, np.ndarray, np.ndarray]:
    """Largest singular value and its singular vectors via power iteration."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, np.zeros(W.shape[0]), v
        u /= nu
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u, np.zeros(W.shape[1])
        v /= nv
    sigma = float(u @ W @ v)
    return sigma, u, v


def spectral_norm(W: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    return power_iteration(W, iters, seed)[0]


def _spectral_grad(W: np.ndarray, lam: float, iters: int = 50) -> tuple[float, np.ndarray]:
    sigma, u, v = power_iteration(W, iters)
    return lam * sigma, lam * np.outer(u, v)


def rep_loss_terms(phi: FeatureMapPhi, mu: FeatureMapMu, M: np.ndarray,
                   X: np.ndarray, S: np.ndarray, k_inv: np.ndarray,
                   lambda_phi: float, lambda_mu: float) -> float:
    """Full objective (quadratic residual + spectral penalties) at fixed K."""
    R = mu.embed_batch(S) @ k_inv - phi.embed_batch(X) @ M
    loss = float(np.mean(np.sum(R * R, axis=1)))
    for w, lam in ((phi.weight, lambda_phi), (mu.weight, lambda_mu),
                   (phi.hidden_weight, lambda_phi), (mu.hidden_weight, lambda_mu)):
        if w is not None and lam:
            loss += lam * spectral_norm(w)
    return loss


def rep_gradients(phi: FeatureMapPhi, mu: FeatureMapMu, M: np.ndarray,
                  X: np.ndarray, S: np.ndarray, k_inv: np.ndarray,
                  lambda_phi: float, lambda_mu: float) -> dict[str, np.ndarray]:
    """Analytic gradients of rep_loss_terms w.r.t. every trainable matrix."""
    B = X.shape[0]
    if phi.hidden_weight is not None:
        Hphi_pre = X @ phi.hidden_weight.T
        Hphi = np.tanh(Hphi_pre)
    else:
        Hphi = X
    if mu.hidden_weight is not None:
        Hmu_pre = S @ mu.hidden_weight.T
        Hmu = np.tanh(Hmu_pre)
    else:
        Hmu = S
    Phi = Hphi @ phi.weight.T
    Mu = Hmu @ mu.weight.T
    R = Mu @ k_inv - Phi @ M  # (B, d')

    dPhi = (-2.0 / B) * (R @ M.T)        # (B, d)
    dMu = (2.0 / B) * (R @ k_inv.T)      # (B, d')
    grads: dict[str, np.ndarray] = {
        "phi": dPhi.T @ Hphi,
        "mu": dMu.T @ Hmu,
    }
    if phi.hidden_weight is not None:
        dH = (dPhi @ phi.weight) * (1.0 - Hphi ** 2)
        grads["phi_hidden"] = dH.T @ X
    if mu.hidden_weight is not None:
        dH = (dMu @ mu.weight) * (1.0 - Hmu ** 2)
        grads["mu_hidden"] = dH.T @ S
    if lambda_phi:
        grads["phi"] += _spectral_grad(phi.weight, lambda_phi)[1]
        if phi.hidden_weight is not None:
            grads["phi_hidden"] += _spectral_grad(phi.hidden_weight, lambda_phi)[1]
    if lambda_mu:
        grads["mu"] += _spectral_grad(mu.weight, lambda_mu)[1]
        if mu.hidden_weight is not None:
            grads["mu_hidden"] += _spectral_grad(mu.hidden_weight, lambda_mu)[1]
    return grads


def train_representation(phi: FeatureMapPhi, mu: FeatureMapMu, M: np.ndarray,
                         X: np.ndarray, S: np.ndarray, cfg: RepTrainConfig,
                         rng: np.random.Generator | None = None
                         ) -> tuple[FeatureMapPhi, FeatureMapMu, list[float]]:
    """SGD on the representation objective with M held fixed.

    Returns updated copies of the maps plus the per-epoch full-data loss.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    phi, mu = phi.copy(), mu.copy()
    n = X.shape[0]
    losses: list[float] = []
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs_per_iteration):
        k_inv = mean_gram(mu.embed_batch(S), cfg.gram_eps,
                          rel_ridge=cfg.gram_rel_ridge).k_inv
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = rep_gradients(phi, mu, M, X[idx], S[idx], k_inv,
                              cfg.lambda_phi, cfg.lambda_mu)
            phi.weight -= lr * g["phi"]
            mu.weight -= lr * g["mu"]
            if "phi_hidden" in g:
                phi.hidden_weight -= lr * g["phi_hidden"]
            if "mu_hidden" in g:
                mu.hidden_weight -= lr * g["mu_hidden"]
            if not np.all(np.isfinite(phi.weight)) or not np.all(np.isfinite(mu.weight)):
                raise TrainingError(
                    f"non-finite parameters at epoch {epoch}, batch {start // cfg.batch_size}")
        loss = rep_loss_terms(phi, mu, M, X, S, k_inv, cfg.lambda_phi, cfg.lambda_mu)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        losses.append(loss)
    return phi, mu, losses
