"""Sparse core-matrix discovery for the bilinear transition model.

The support of the core matrix comes from per-edge chi-square conditional
independence tests on discretized latent factors; the magnitudes come from
l0-regularized regression solved by iterative hard thresholding against the
empirical transition frequencies.  Batch-wise masks are combined by a
behavior-likelihood weighted average, which is the soft-intervention
deconfounding step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .core import OfflineDataset, empirical_transition_targets
from .representation import FeatureMapMu, FeatureMapPhi, dataset_arrays


class IHTError(RuntimeError):
    pass


@dataclass
class IHTConfig:
    lam: float = 0.01        # shifted hard-threshold level
    eta: float = 1.0         # step size; Lipschitz bound requires <= 1
    max_iters: int = 500
    tol: float = 1e-9

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("IHT step size must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("IHT threshold must be >= 0")


@dataclass
class CITConfig:
    p_thres: float = 1e-4
    n_bins: int = 2
    min_stratum: int = 30
    edge_rule: str = "keep_dependent"  # or "paper_literal"

    def __post_init__(self):
        if not (0.0 < self.p_thres < 1.0):
            raise ValueError("p_thres must be in (0, 1)")
        if self.edge_rule not in ("keep_dependent", "paper_literal"):
            raise ValueError(f"unknown edge rule {self.edge_rule!r}")


@dataclass
class CoreMatrix:
    m: np.ndarray                      # (d, d') with entries in [0, 1]
    support: np.ndarray = field(default=None)  # bool, same shape
    p_values: np.ndarray | None = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if np.any(self.m < 0.0) or np.any(self.m > 1.0):
            raise ValueError("core matrix entries must lie in [0, 1]")
        derived = self.m != 0.0
        if self.support is None:
            self.support = derived
        else:
            self.support = np.asarray(self.support, dtype=bool)
            if not np.array_equal(self.support, derived):
                raise ValueError("support mask must equal the nonzero pattern of M")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    @property
    def n_active(self) -> int:
        return int(self.support.sum())

    @classmethod
    def full(cls, d: int, d_prime: int) -> "CoreMatrix":
        return cls(np.ones((d, d_prime)))


@dataclass
class CausalGraph:
    adjacency: np.ndarray  # ((d+d') x (d+d')) bool, upper-right block = support

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())


def hard_threshold(beta: np.ndarray, lam: float) -> np.ndarray:
    """Shifted hard threshold: subtract lam above the threshold, zero below."""
    return np.where(beta > lam, np.maximum(0.0, beta - lam), 0.0)


def iht_solve(X: np.ndarray, T: np.ndarray, cfg: IHTConfig) -> np.ndarray:
    """l0 regression via iterative hard thresholding.

    Iterates beta <- clip(g_lam(beta + eta X^T (T - X beta)), 0, 1) from the
    all-ones vector (full graph).  The caller is responsible for normalizing
    X so its spectral norm is <= 1; the objective is then non-increasing for
    eta <= 1.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != T.shape[0]:
        raise ValueError("design matrix and target sizes disagree")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T))):
        raise ValueError("non-finite entries in IHT inputs")
    beta = np.ones(X.shape[1])
    for it in range(cfg.max_iters):
        grad_step = beta + cfg.eta * (X.T @ (T - X @ beta))
        new = np.minimum(hard_threshold(grad_step, cfg.lam), 1.0)
        if not np.all(np.isfinite(new)):
            raise IHTError(f"non-finite iterate at iteration {it}")
        delta = float(np.linalg.norm(new - beta))
        beta = new
        if delta < cfg.tol:
            break
    return beta


def regression_design(Phi: np.ndarray, Mu_next: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product phi(s,a) (x) mu(s'), one row per transition."""
    n, d = Phi.shape
    dp = Mu_next.shape[1]
    return (Phi[:, :, None] * Mu_next[:, None, :]).reshape(n, d * dp)


def normalized_design(Phi: np.ndarray, Mu_next: np.ndarray,
                      T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale (X, T) jointly so ||X||_2 <= 1; the least-squares solution is unchanged."""
    X = regression_design(Phi, Mu_next)
    scale = float(np.linalg.norm(X, 2)) if X.size else 1.0
    scale = max(scale, 1.0)
    return X / scale, np.asarray(T, dtype=np.float64) / scale


def _solve_masked_magnitudes(Phi: np.ndarray, Mu_next: np.ndarray, T: np.ndarray,
                             support: np.ndarray, iht_cfg: IHTConfig) -> np.ndarray:
    """IHT restricted to the support columns, on a spectrally normalized design.

    Dividing (X, T) by the spectral norm c keeps the least-squares solution
    but shrinks gradients by 1/c^2, so the threshold is rescaled by the same
    factor to preserve the unscaled penalty's meaning.
    """
    from dataclasses import replace

    d, dp = support.shape
    cols = np.flatnonzero(support.ravel())
    X = regression_design(Phi, Mu_next)[:, cols]
    scale = max(float(np.linalg.norm(X, 2)), 1.0) if X.size else 1.0
    cfg = replace(iht_cfg, lam=iht_cfg.lam / scale ** 2,
                  tol=iht_cfg.tol / scale)
    beta = np.zeros(d * dp)
    beta[cols] = iht_solve(X / scale, np.asarray(T, dtype=np.float64) / scale, cfg)
    return beta.reshape(d, dp)


# --- chi-square conditional independence testing -----------------------------


def _bin_column(col: np.ndarray, n_bins: int) -> np.ndarray:
    """Quantile binning; small discrete supports map each value to its own bin."""
    uniq = np.unique(col)
    if len(uniq) <= n_bins:
        return np.searchsorted(uniq, col).astype(np.int64)
    qs = np.unique(np.quantile(col, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return np.searchsorted(qs, col, side="right").astype(np.int64)


def _chi2_stat(x: np.ndarray, y: np.ndarray, nx: int, ny: int) -> tuple[float, int]:
    """Pearson chi-square statistic and dof for one contingency table."""
    table = np.zeros((nx, ny))
    np.add.at(table, (x, y), 1.0)
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    keep_r = rows > 0
    keep_c = cols > 0
    table = table[keep_r][:, keep_c]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 0.0, 0
    rows = rows[keep_r]
    cols = cols[keep_c]
    n = table.sum()
    expected = np.outer(rows, cols) / n
    stat = float(np.sum((table - expected) ** 2 / expected))
    dof = (table.shape[0] - 1) * (table.shape[1] - 1)
    return stat, dof


def _strata_codes(bins: np.ndarray, min_stratum: int) -> np.ndarray:
    """Group rows by conditioning-bin tuple, merging small strata into one pool."""
    if bins.shape[1] == 0:
        return np.zeros(bins.shape[0], dtype=np.int64)
    _, codes = np.unique(bins, axis=0, return_inverse=True)
    counts = np.bincount(codes)
    small = counts < min_stratum
    if small.any():
        pool = codes.max() + 1
        codes = np.where(small[codes], pool, codes)
        # if even the pooled stratum is small, merge it into the largest one
        pool_count = int((codes == pool).sum())
        if 0 < pool_count < min_stratum:
            big = int(np.argmax(np.bincount(codes[codes != pool])))
            codes = np.where(codes == pool, big, codes)
    _, codes = np.unique(codes, return_inverse=True)
    return codes


def cit_edge_test_features(Phi: np.ndarray, Mu_next: np.ndarray, i: int, j: int,
                           cfg: CITConfig) -> float:
    """p-value for dependence of phi factor i and mu factor j given phi^(-i).

    Factors are quantile-binned; the chi-square statistic is pooled across
    conditioning strata (statistics and degrees of freedom both summed).
    Strata with fewer than min_stratum samples are merged.
    """
    x = _bin_column(Phi[:, i], cfg.n_bins)
    y = _bin_column(Mu_next[:, j], cfg.n_bins)
    if x.max() == 0 or y.max() == 0:
        return 1.0  # constant factor: no evidence of dependence
    others = [k for k in range(Phi.shape[1]) if k != i]
    cond = np.stack([_bin_column(Phi[:, k], cfg.n_bins) for k in others], axis=1) \
        if others else np.zeros((len(x), 0), dtype=np.int64)
    codes = _strata_codes(cond, cfg.min_stratum)
    stat_total, dof_total = 0.0, 0
    for c in range(codes.max() + 1):
        sel = codes == c
        stat, dof = _chi2_stat(x[sel], y[sel], cfg.n_bins, cfg.n_bins)
        stat_total += stat
        dof_total += dof
    if dof_total == 0:
        return 1.0
    return float(chi2_dist.sf(stat_total, dof_total))


def cit_edge_test(ds: OfflineDataset, phi: FeatureMapPhi, mu: FeatureMapMu,
                  i: int, j: int, cfg: CITConfig) -> float:
    X, S = dataset_arrays(ds)
    return cit_edge_test_features(phi.embed_batch(X), mu.embed_batch(S), i, j, cfg)


# --- mask estimation ----------------------------------------------------------


def estimate_mask_features(Phi: np.ndarray, Mu_next: np.ndarray, T: np.ndarray,
                           cit_cfg: CITConfig, iht_cfg: IHTConfig,
                           regression: tuple | None = None) -> CoreMatrix:
    """Support from per-edge CITs, magnitudes from support-restricted IHT.

    ``regression`` optionally supplies (Phi, Mu, T) rows for the magnitude
    fit when they differ from the CIT rows (candidate-expanded targets).
    """
    d, dp = Phi.shape[1], Mu_next.shape[1]
    pvals = np.ones((d, dp))
    for i in range(d):
        for j in range(dp):
            pvals[i, j] = cit_edge_test_features(Phi, Mu_next, i, j, cit_cfg)
    if cit_cfg.edge_rule == "keep_dependent":
        support = pvals < cit_cfg.p_thres
    else:
        support = pvals >= cit_cfg.p_thres
    if not support.any():
        warnings.warn("empty CIT support; falling back to the full graph",
                      stacklevel=2)
        support = np.ones((d, dp), dtype=bool)
    Phi_r, Mu_r, T_r = regression if regression is not None else (Phi, Mu_next, T)
    m = _solve_masked_magnitudes(Phi_r, Mu_r, T_r, support, iht_cfg)
    return CoreMatrix(m, p_values=pvals)


def candidate_expanded_regression(phi: FeatureMapPhi, mu: FeatureMapMu,
                                  ds: OfflineDataset, candidate_fn,
                                  max_rows: int = 40_000
                                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Phi rows, Mu rows, targets) over the enumerated successor support.

    The empirical frequency n(s,a,c)/n(s,a) is evaluated at every candidate
    successor of each observed pair, so unrealized candidates contribute
    explicit zero targets to the magnitude regression.
    """
    from .core import count_sa, count_sas, _tr_sa_key

    sa = count_sa(ds.transitions)
    sas = count_sas(ds.transitions)
    phi_rows, mu_states, targets = [], [], []
    X, _ = dataset_arrays(ds)
    seen = set()
    for row, tr in zip(X, ds.transitions):
        key = _tr_sa_key(tr)
        if key in seen:
            continue
        seen.add(key)
        for cand in candidate_fn(tr.s, tr.a):
            ck = key + ((cand.factored if cand.factored is not None
                         else cand.values.tobytes()),)
            phi_rows.append(row)
            mu_states.append(cand.values)
            targets.append(sas.get(ck, 0) / sa[key])
        if len(targets) >= max_rows:
            break
    Phi = phi.embed_batch(np.asarray(phi_rows))
    Mu = mu.embed_batch(np.asarray(mu_states))
    return Phi, Mu, np.asarray(targets)


def estimate_mask(phi: FeatureMapPhi, mu: FeatureMapMu, ds: OfflineDataset,
                  cit_cfg: CITConfig, iht_cfg: IHTConfig,
                  candidate_fn=None) -> CoreMatrix:
    """Support from CITs on observed transitions; magnitudes from IHT.

    When a candidate enumerator is available the magnitude regression is
    evaluated over the full successor support (zero targets included), which
    is what gives the fitted scores their ranking behavior.
    """
    X, S = dataset_arrays(ds)
    Phi_obs = phi.embed_batch(X)
    Mu_obs = mu.embed_batch(S)
    if candidate_fn is None:
        T = empirical_transition_targets(ds)
        return estimate_mask_features(Phi_obs, Mu_obs, T, cit_cfg, iht_cfg)
    Phi_r, Mu_r, T_r = candidate_expanded_regression(phi, mu, ds, candidate_fn)
    return estimate_mask_features(Phi_obs, Mu_obs, None, cit_cfg, iht_cfg,
                                  regression=(Phi_r, Mu_r, T_r))


def reweight_mask(batch_masks: list[CoreMatrix], batch_weights: list[float]) -> CoreMatrix:
    """Entrywise convex combination of batch masks, weighted by pi_beta likelihood."""
    if not batch_masks:
        raise ValueError("need at least one batch mask")
    w = np.asarray(batch_weights, dtype=np.float64)
    if len(w) != len(batch_masks):
        raise ValueError("masks and weights disagree in length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total == 0:
        raise ValueError("all-zero batch weights")
    shape = batch_masks[0].shape
    if any(b.shape != shape for b in batch_masks):
        raise ValueError("batch masks must share a shape")
    w = w / total  # normalize first so a single batch collapses exactly
    m = sum(wi * b.m for wi, b in zip(w, batch_masks))
    return CoreMatrix(np.clip(m, 0.0, 1.0))


def behavior_likelihood_weight(ds: OfflineDataset, indices: np.ndarray,
                               action_dim: int | None = None) -> float:
    """Mean Laplace-smoothed empirical behavior likelihood over a batch.

    pi_hat(a|s) = (count(s,a) + 1) / (count(s) + |A|), counts within the batch.
    """
    action_dim = action_dim or ds.action_dim
    sa_counts: dict = {}
    s_counts: dict = {}
    keys = []
    for idx in indices:
        tr = ds.transitions[idx]
        fs = tr.s.factored
        skey = fs if fs is not None else tr.s.values.tobytes()
        keys.append((skey, tr.a))
        sa_counts[(skey, tr.a)] = sa_counts.get((skey, tr.a), 0) + 1
        s_counts[skey] = s_counts.get(skey, 0) + 1
    liks = [(sa_counts[k] + 1) / (s_counts[k[0]] + action_dim) for k in keys]
    return float(np.mean(liks))


def mask_to_graph(mask: CoreMatrix) -> CausalGraph:
    """Embed the support as the upper-right block of a bipartite DAG adjacency."""
    d, dp = mask.shape
    n = d + dp
    adj = np.zeros((n, n), dtype=bool)
    adj[:d, d:] = mask.support
    graph = CausalGraph(adj)
    if topological_order(adj) is None:
        raise AssertionError("bipartite construction produced a cycle")
    return graph


def topological_order(adj: np.ndarray) -> list[int] | None:
    """Kahn's algorithm; None if the graph has a cycle."""
    n = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int)
    queue = [i for i in range(n) if indeg[i] == 0]
    order: list[int] = []
    while queue:
        node = queue.pop()
        order.append(node)
        for nxt in np.flatnonzero(adj[node]):
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(int(nxt))
    return order if len(order) == n else None
