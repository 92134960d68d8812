"""Online / stochastic machinery.

Selection probabilities and expected routed value by piecewise
Gauss-Legendre quadrature (order-statistics subset enumeration), Monte
Carlo verification of the gradient moment formulas, Hessian edge weights
with the strong-convexity estimate, the expected-loss minimizer, and the
logarithmic-regret experiment.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import AffinityMatrix, BiasVector
from .deterministic import lagrangian
from .distributions import AffinityDistributionSet
from .errors import InvalidRange, NoConvergence, TooManyTerms
from .router import route_topk

MAX_ENUM_TERMS = 10**6
QUAD_TOL = 1e-8
QUAD_BASE_NODES = 256
QUAD_MAX_DOUBLINGS = 5


def sigma_squared(T: int, E: int, K: int) -> float:
    """Worst-case squared gradient norm T^2 (K - K^2/E)."""
    return T * T * (K - K * K / E)


# ---------------------------------------------------------------------------
# Quadrature plumbing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _segment_nodes(edges: np.ndarray, n: int):
    """Gauss-Legendre nodes/weights for every segment, concatenated."""
    x, w = _leggauss(n)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    half = 0.5 * (hi - lo)
    nodes = (0.5 * (hi + lo) + half * x[None, :]).ravel()
    weights = (half * w[None, :]).ravel()
    return nodes, weights


def piecewise_gauss_vec(f, a: float, b: float, cuts=(), tol: float = QUAD_TOL):
    """Integrate a vector-valued integrand f: (m,) -> (c, m) over [a, b].

    The interval is split at ``cuts`` (pdf / cdf kinks) and each segment is
    integrated with Gauss-Legendre, doubling the node count until two
    successive estimates agree to ``tol``.
    """
    if b <= a:
        probe = np.atleast_2d(f(np.array([0.5 * (a + b) if b > a else a])))
        return np.zeros(probe.shape[0])
    interior = sorted({c for c in cuts if a < c < b})
    edges = np.array([a, *interior, b])
    n = QUAD_BASE_NODES
    nodes, weights = _segment_nodes(edges, n)
    prev = np.atleast_2d(f(nodes)) @ weights
    for _ in range(QUAD_MAX_DOUBLINGS):
        n *= 2
        nodes, weights = _segment_nodes(edges, n)
        cur = np.atleast_2d(f(nodes)) @ weights
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    return prev


# ---------------------------------------------------------------------------
# Selection probabilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionProbabilities:
    """Per-expert probability of landing in the Top-K set."""

    pi: np.ndarray

    def __post_init__(self):
        v = np.array(self.pi, dtype=np.float64, copy=True)
        if np.any(v < -1e-9) or np.any(v > 1.0 + 1e-9):
            raise InvalidRange("selection probabilities must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        v.flags.writeable = False
        object.__setattr__(self, "pi", v)

    def sum_of_squares(self) -> float:
        return float(np.square(self.pi).sum())


def _enum_guard(count: int):
    if count > MAX_ENUM_TERMS:
        raise TooManyTerms(f"{count} subset terms exceed the {MAX_ENUM_TERMS} budget")


def _small_subsets(indices: list[int], max_size: int) -> list[tuple[int, ...]]:
    """All subsets of size < max_size + 1 ... i.e. sizes 0..max_size."""
    out = []
    for r in range(max_size + 1):
        out.extend(itertools.combinations(indices, r))
    return out


def _selection_kernel(dist: AffinityDistributionSet, p: np.ndarray, K: int, k: int):
    """Integrand pieces for expert k.

    Returns (f, cuts) where f(v) stacks [phi_k(v) * Q_k(v),
    (v + p_k) * phi_k(v) * Q_k(v)] and Q_k(v) is the probability that at
    most K-1 rival shifted scores exceed v + p_k.
    """
    E = dist.E
    others = [j for j in range(E) if j != k]
    _enum_guard(sum(math.comb(E - 1, r) for r in range(K)))
    subsets = _small_subsets(list(range(E - 1)), K - 1)
    dk = dist.dists[k]

    def f(v: np.ndarray) -> np.ndarray:
        cdfs = np.stack([dist.dists[j].cdf(v - p[j] + p[k]) for j in others])
        comp = 1.0 - cdfs
        q = np.zeros_like(v)
        for S in subsets:
            term = np.ones_like(v)
            in_s = np.zeros(E - 1, dtype=bool)
            in_s[list(S)] = True
            for idx in range(E - 1):
                term = term * (comp[idx] if in_s[idx] else cdfs[idx])
            q += term
        base = dk.pdf(v) * q
        return np.stack([base, (v + p[k]) * base])

    cuts = set(dk.breakpoints())
    for j in others:
        for bp in dist.dists[j].breakpoints():
            cuts.add(bp + p[j] - p[k])
    return f, cuts


def selection_moments(
    dist: AffinityDistributionSet, p: BiasVector, K: int, tol: float = QUAD_TOL
) -> tuple[SelectionProbabilities, float]:
    """Quadrature (pi(p), F_K(p)) where F_K is the expected routed Top-K
    value of a single token.
    """
    E = dist.E
    if p.E != E:
        raise InvalidRange("bias / distribution count mismatch")
    pi = np.empty(E)
    total_value = 0.0
    for k in range(E):
        f, cuts = _selection_kernel(dist, p.values, K, k)
        pi_k, val_k = piecewise_gauss_vec(f, 0.0, 1.0, cuts, tol)
        pi[k] = pi_k
        total_value += val_k
    return SelectionProbabilities(pi), float(total_value)


def pi_quadrature(
    dist: AffinityDistributionSet, p: BiasVector, K: int, tol: float = QUAD_TOL
) -> SelectionProbabilities:
    """Selection probabilities by numerical integration."""
    return selection_moments(dist, p, K, tol)[0]


def _topk_counts(samples: np.ndarray, p: np.ndarray, K: int) -> np.ndarray:
    """Per-expert Top-K membership counts for a (..., T, E) sample block."""
    shifted = samples + p
    E = shifted.shape[-1]
    T = shifted.shape[-2]
    lead = shifted.shape[:-2]
    if K == E:
        return np.full(lead + (E,), T, dtype=np.int64)
    batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
    chosen = np.argpartition(-shifted, K - 1, axis=-1)[..., :K]
    flat = chosen.reshape(batch * T, K)
    owner = np.repeat(np.arange(batch), T)
    counts = np.bincount((owner[:, None] * E + flat).ravel(), minlength=batch * E)
    return counts.reshape(lead + (E,))


def pi_monte_carlo(
    dist: AffinityDistributionSet,
    p: BiasVector,
    K: int,
    samples: int,
    rng: np.random.Generator,
    batch: int = 1 << 16,
) -> tuple[SelectionProbabilities, np.ndarray]:
    """Empirical selection frequencies over fresh score draws, with
    binomial standard errors.
    """
    if samples < 1000:
        raise InvalidRange("need at least 10^3 samples")
    E = dist.E
    counts = np.zeros(E, dtype=np.int64)
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        block = dist.sample_matrix(m, rng)
        counts += _topk_counts(block[None, :, :], p.values, K)[0]
        done += m
    pi_hat = counts / samples
    se = np.sqrt(pi_hat * (1.0 - pi_hat) / samples)
    return SelectionProbabilities(pi_hat), se


# ---------------------------------------------------------------------------
# Online loss and gradient
# ---------------------------------------------------------------------------

def online_loss(gamma: AffinityMatrix, p: BiasVector, K: int, L: float) -> float:
    """Per-round loss: routed shifted-score total minus L * sum_k p_k.

    Evaluated through the router so that for K=1 it agrees bitwise with the
    deterministic Lagrangian of the induced assignment.
    """
    outcome = route_topk(gamma, p, K)
    return lagrangian(gamma, outcome.assignment, p, L).value


def loss_gradient(gamma: AffinityMatrix, p: BiasVector, K: int, L: float) -> np.ndarray:
    """Gradient of the per-round loss: loads minus the target load."""
    outcome = route_topk(gamma, p, K)
    return outcome.loads.counts.astype(np.float64) - L


# ---------------------------------------------------------------------------
# Gradient moment verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientMomentReport:
    pi: np.ndarray
    replicas: int
    expected_mean: np.ndarray
    empirical_mean: np.ndarray
    mean_z: np.ndarray
    expected_var: float
    empirical_var: float
    var_z: float
    expected_second_moment: float
    empirical_second_moment: float
    second_moment_z: float

    @property
    def max_abs_z(self) -> float:
        return float(
            max(np.abs(self.mean_z).max(), abs(self.var_z), abs(self.second_moment_z))
        )


def check_gradient_moments(
    dist: AffinityDistributionSet,
    p: BiasVector,
    K: int,
    T: int,
    replicas: int,
    rng: np.random.Generator,
    pi: SelectionProbabilities | None = None,
    batch: int = 512,
) -> GradientMomentReport:
    """Monte Carlo check of the mean / variance / second-moment formulas
    against quadrature selection probabilities.  z-scores use the empirical
    replica spread.
    """
    E = dist.E
    L = K * T / E
    if pi is None:
        pi = pi_quadrature(dist, p, K)
    grad_mean = T * pi.pi - L
    sum_sq = pi.sum_of_squares()
    expected_var = T * (K - sum_sq)
    expected_second = T * T * (sum_sq - K * K / E) + expected_var

    g_all = np.empty((replicas, E))
    done = 0
    while done < replicas:
        m = min(batch, replicas - done)
        block = np.stack([dist.sample_matrix(T, rng) for _ in range(m)])
        counts = _topk_counts(block, p.values, K)
        g_all[done : done + m] = counts - L
        done += m

    emp_mean = g_all.mean(axis=0)
    mean_se = g_all.std(axis=0, ddof=1) / math.sqrt(replicas)
    mean_z = (emp_mean - grad_mean) / mean_se

    dev_sq = np.square(g_all - grad_mean).sum(axis=1)
    emp_var = float(dev_sq.mean())
    var_se = float(dev_sq.std(ddof=1)) / math.sqrt(replicas)
    var_z = (emp_var - expected_var) / var_se

    norm_sq = np.square(g_all).sum(axis=1)
    emp_second = float(norm_sq.mean())
    second_se = float(norm_sq.std(ddof=1)) / math.sqrt(replicas)
    second_z = (emp_second - expected_second) / second_se

    return GradientMomentReport(
        pi=pi.pi,
        replicas=replicas,
        expected_mean=grad_mean,
        empirical_mean=emp_mean,
        mean_z=mean_z,
        expected_var=expected_var,
        empirical_var=emp_var,
        var_z=float(var_z),
        expected_second_moment=expected_second,
        empirical_second_moment=emp_second,
        second_moment_z=float(second_z),
    )


# ---------------------------------------------------------------------------
# Hessian edge weights and strong convexity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeWeights:
    """Symmetric nonnegative pairwise curvature coefficients."""

    w: np.ndarray

    def __post_init__(self):
        m = np.array(self.w, dtype=np.float64, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidRange("edge weights must be square")
        if not np.array_equal(m, m.T) or np.any(np.diag(m) != 0.0) or np.any(m < 0.0):
            raise InvalidRange("edge weights must be symmetric, >= 0, zero diagonal")
        m.flags.writeable = False
        object.__setattr__(self, "w", m)

    def quadratic_form(self, delta: np.ndarray) -> float:
        """sum_{k<l} w_kl (delta_k - delta_l)^2 via the graph Laplacian."""
        delta = np.asarray(delta, dtype=np.float64)
        lap = np.diag(self.w.sum(axis=1)) - self.w
        return float(delta @ lap @ delta)

    def min_offdiag(self) -> float:
        E = self.w.shape[0]
        mask = ~np.eye(E, dtype=bool)
        return float(self.w[mask].min())


def edge_weights_quadrature(
    dist: AffinityDistributionSet, p: BiasVector, K: int, tol: float = QUAD_TOL
) -> EdgeWeights:
    """Pairwise Hessian weights w_kl = int phi_k(v-p_k) phi_l(v-p_l)
    B^(K-1)(v) dv with B assembled by subset enumeration.
    """
    E = dist.E
    if p.E != E:
        raise InvalidRange("bias / distribution count mismatch")
    if K >= 2:
        _enum_guard(math.comb(E - 2, K - 1))
    pv = p.values
    w = np.zeros((E, E))
    for k in range(E):
        for l in range(k + 1, E):
            others = [j for j in range(E) if j not in (k, l)]
            if K - 1 > len(others):
                continue  # not enough rivals: weight is 0
            subsets = list(itertools.combinations(range(len(others)), K - 1))
            dk, dl = dist.dists[k], dist.dists[l]
            lo = max(dk.support[0] + pv[k], dl.support[0] + pv[l])
            hi = min(dk.support[1] + pv[k], dl.support[1] + pv[l])
            if hi <= lo:
                continue

            def f(v: np.ndarray) -> np.ndarray:
                base = dk.pdf(v - pv[k]) * dl.pdf(v - pv[l])
                if others:
                    cdfs = np.stack(
                        [dist.dists[j].cdf(v - pv[j]) for j in others]
                    )
                    comp = 1.0 - cdfs
                    b = np.zeros_like(v)
                    for S in subsets:
                        term = np.ones_like(v)
                        in_s = np.zeros(len(others), dtype=bool)
                        in_s[list(S)] = True
                        for idx in range(len(others)):
                            term = term * (comp[idx] if in_s[idx] else cdfs[idx])
                        b += term
                else:
                    b = np.ones_like(v)
                return base * b

            cuts = set()
            for j in range(E):
                for bp in dist.dists[j].breakpoints():
                    cuts.add(bp + pv[j])
            val = piecewise_gauss_vec(f, lo, hi, cuts, tol)[0]
            w[k, l] = w[l, k] = max(val, 0.0)
    return EdgeWeights(w)


@dataclass(frozen=True)
class StrongConvexityEstimate:
    c_hat: float       # grid minimum of min_{k<l} w_kl (upper bound on the inf)
    mu: float          # T * c_hat * E
    argmin_p: np.ndarray
    grid_size: int


def _domain_grid(E: int, kappa: float, grid_points: int, rng: np.random.Generator):
    """Zero-sum candidate biases with diameter <= 1 - kappa, boundary-biased."""
    d = 1.0 - kappa
    pts = [np.zeros(E)]
    if d > 0.0:
        # structured extreme points: +-d/2 sign patterns, mean-centered
        n_patterns = min(2**E - 2, max(grid_points // 2, 1))
        patterns = []
        if 2**E - 2 <= n_patterns:
            for bits in range(1, 2**E - 1):
                v = np.array([1.0 if bits >> j & 1 else -1.0 for j in range(E)])
                patterns.append(v)
        else:
            while len(patterns) < n_patterns:
                v = rng.choice([-1.0, 1.0], size=E)
                if not np.all(v == v[0]):
                    patterns.append(v)
        for v in patterns:
            q = 0.5 * d * v
            pts.append(q - q.mean())
        # random interior / boundary points
        while len(pts) < grid_points:
            q = rng.uniform(-0.5 * d, 0.5 * d, size=E)
            q -= q.mean()
            diam = q.max() - q.min()
            if diam > 0:
                if rng.random() < 0.5:
                    q *= d / diam  # push to the diameter boundary
                elif diam > d:
                    q *= d / diam
            pts.append(q)
    return pts[:grid_points]


def strong_convexity_estimate(
    dist: AffinityDistributionSet,
    K: int,
    kappa: float,
    T: int,
    grid_points: int,
    rng: np.random.Generator,
    tol: float = QUAD_TOL,
) -> StrongConvexityEstimate:
    """Grid scan of the minimum pairwise curvature weight over the zero-sum,
    diameter-limited bias domain.  The result is an upper bound on the true
    infimum, used as a practical strong-convexity estimate.
    """
    if not (0.0 < kappa <= 1.0):
        raise InvalidRange("kappa must lie in (0, 1]")
    grid = _domain_grid(dist.E, kappa, grid_points, rng)
    best = math.inf
    best_p = grid[0]
    for q in grid:
        w = edge_weights_quadrature(dist, BiasVector(q), K, tol)
        m = w.min_offdiag()
        if m < best:
            best, best_p = m, q
    return StrongConvexityEstimate(
        c_hat=best,
        mu=T * best * dist.E,
        argmin_p=best_p,
        grid_size=len(grid),
    )


# ---------------------------------------------------------------------------
# Expected loss and its minimizer
# ---------------------------------------------------------------------------

def expected_loss(
    dist: AffinityDistributionSet, p: BiasVector, K: int, T: int, L: float
) -> float:
    """T * F_K(p) - L * sum_k p_k via quadrature."""
    _, value = selection_moments(dist, p, K)
    return T * value - L * float(p.values.sum())


def expected_loss_minimizer(
    dist: AffinityDistributionSet,
    K: int,
    T: int,
    L: float,
    tolerance: float | None = None,
    max_iter: int = 500,
) -> BiasVector:
    """Projected gradient descent on the expected loss over the zero-sum
    subspace, using the exact quadrature gradient T pi(p) - L 1.
    """
    E = dist.E
    if tolerance is None:
        tolerance = 1e-6 * T
    p = np.zeros(E)
    pi, value = selection_moments(dist, BiasVector(p), K)
    fval = T * value - L * p.sum()
    step = 1.0 / T
    for _ in range(max_iter):
        grad = T * pi.pi - L
        grad_z = grad - grad.mean()
        if np.abs(grad_z).max() <= tolerance:
            return BiasVector(p)
        # backtracking line search with a mild re-expansion on success
        while True:
            cand = p - step * grad_z
            cand -= cand.mean()
            pi_c, value_c = selection_moments(dist, BiasVector(cand), K)
            f_cand = T * value_c - L * cand.sum()
            if f_cand <= fval - 0.25 * step * float(grad_z @ grad_z):
                p, pi, fval = cand, pi_c, f_cand
                step *= 1.5
                break
            step *= 0.5
            if step < 1e-14:
                raise NoConvergence("line search collapsed")
    grad = T * pi.pi - L
    grad_z = grad - grad.mean()
    if np.abs(grad_z).max() <= tolerance:
        return BiasVector(p)
    raise NoConvergence(f"gradient sup-norm {np.abs(grad_z).max():.3g} > {tolerance:.3g}")


# ---------------------------------------------------------------------------
# Regret experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegretAccounting:
    """Per-round regret trace averaged over replicas.

    s_n is a plug-in proxy estimated from realized loads (quadrature
    per-round would dominate the runtime); delta_n is the mean squared
    distance to the precomputed minimizer.
    """

    rounds: int
    replicas: int
    mu: float
    sigma2: float
    mean_cum_regret: np.ndarray    # (N,)
    bound: np.ndarray              # (N,) sigma^2/(2 mu) (1 + ln n)
    mean_gap: np.ndarray           # (N,) mean per-round f-gap (a_n proxy)
    mean_delta: np.ndarray         # (N,) mean ||p - p*||^2
    mean_diam: np.ndarray          # (N,)
    s_n_proxy: np.ndarray          # (N,)
    diam_violations: int           # rounds with diam > 1 - kappa
    final_per_replica: np.ndarray  # (R,) cumulative regret at round N


def regret_experiment(
    dist: AffinityDistributionSet,
    T: int,
    K: int,
    mu: float,
    p_star: BiasVector,
    rounds: int,
    replicas: int,
    rng: np.random.Generator,
    kappa: float = 0.1,
) -> RegretAccounting:
    """Projected online gradient descent with step 1/(mu n), paired against
    the fixed minimizer on the same sampled batches.
    """
    E = dist.E
    L = K * T / E
    ps = p_star.values
    sig2 = sigma_squared(T, E, K)

    P = np.zeros((replicas, E))
    cum = np.zeros(replicas)
    mean_cum = np.empty(rounds)
    mean_gap = np.empty(rounds)
    mean_delta = np.empty(rounds)
    mean_diam = np.empty(rounds)
    s_proxy = np.empty(rounds)
    diam_violations = 0
    d_cap = 1.0 - kappa

    for n in range(1, rounds + 1):
        block = np.stack(
            [d.sample(rng, (replicas, T)) for d in dist.dists], axis=2
        )
        # shifted top-K values under the iterate and under p*
        shifted = block + P[:, None, :]
        top_vals = -np.partition(-shifted, K - 1, axis=2)[:, :, :K]
        f_iter = top_vals.sum(axis=(1, 2)) - L * P.sum(axis=1)
        shifted_star = block + ps[None, None, :]
        top_star = -np.partition(-shifted_star, K - 1, axis=2)[:, :, :K]
        f_star = top_star.sum(axis=(1, 2)) - L * ps.sum()

        gap = f_iter - f_star
        cum += gap
        mean_cum[n - 1] = cum.mean()
        mean_gap[n - 1] = gap.mean()
        mean_delta[n - 1] = float(np.square(P - ps).sum(axis=1).mean())
        diams = P.max(axis=1) - P.min(axis=1)
        mean_diam[n - 1] = float(diams.mean())
        if np.any(diams > d_cap):
            diam_violations += 1

        counts = _topk_counts(shifted, np.zeros(E), K)
        s_proxy[n - 1] = float(np.square(counts / T).sum(axis=1).mean())
        g = counts - L
        P = P - g / (mu * n)
        P -= P.mean(axis=1, keepdims=True)

    bound = sig2 / (2.0 * mu) * (1.0 + np.log(np.arange(1, rounds + 1)))
    return RegretAccounting(
        rounds=rounds,
        replicas=replicas,
        mu=mu,
        sigma2=sig2,
        mean_cum_regret=mean_cum,
        bound=bound,
        mean_gap=mean_gap,
        mean_delta=mean_delta,
        mean_diam=mean_diam,
        s_n_proxy=s_proxy,
        diam_violations=diam_violations,
        final_per_replica=cum.copy(),
    )
