"""Bound quantities for route-and-aggregate D-FL and their Monte Carlo checks.

Conventions
-----------
* ``rho[m, n]`` is the end-to-end success of source ``m`` at receiver ``n``
  with ``rho[n, n] == 1``.
* Bias entries are ``lambda[m, n] = p_m - coef[m, n]``; matrix norms are
  spectral (largest singular value) unless a name says otherwise.
* ``q = 1 - 3 mu eta / 2 + 2 L mu eta^2`` and ``r = (1 + eta)(1 + 4 L^2 eta)``
  are the two growth ratios shared by the zeta constants.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .errors import DomainError, SizeWarning, UnsupportedTask
from .learning import QuadraticTask, segment_bounds, task_constants
from .protocol import normalized_coefficients, spectral_norm_sq
from .routing import RoutePlan, routing_objective

EXACT_SUBSET_MAX_N = 12


def _as_rho(rho) -> np.ndarray:
    if isinstance(rho, RoutePlan):
        rho = rho.e2e_success
    rho = np.array(rho, dtype=float)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DomainError("success matrix must be square")
    if np.any(rho < 0) or np.any(rho > 1):
        raise DomainError("success probabilities must lie in [0, 1]")
    np.fill_diagonal(rho, 1.0)
    return rho


def _as_p(p, n=None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
        raise DomainError("weights must be positive and sum to 1")
    if n is not None and len(p) != n:
        raise DomainError("weights and success matrix disagree on N")
    return p


# -- bias matrices -----------------------------------------------------------

def bias_matrix(p, e: np.ndarray, l: int = 0) -> np.ndarray:
    """``Lambda_l`` from a success tensor ``e[m, n, l]`` under coefficient normalisation."""
    p = np.asarray(p, dtype=float)
    coef = normalized_coefficients(p, np.asarray(e)[:, :, l:l + 1])[:, :, 0]
    return p[:, None] - coef


def segment_norm_sq_sum(models: np.ndarray, K: int) -> float:
    """``sum_l ||W_l||^2`` where ``W_l`` stacks every client's segment ``l`` as rows."""
    models = np.asarray(models, dtype=float)
    total = 0.0
    for a, b in segment_bounds(models.shape[1], K):
        total += float(np.linalg.norm(models[:, a:b], 2) ** 2)
    return total


# -- bias moments ------------------------------------------------------------

def _subset_table(rho_col: np.ndarray, members: list[int]):
    """Every subset of ``members`` as a bool mask with its probability."""
    k = len(members)
    masks = ((np.arange(2 ** k)[:, None] >> np.arange(k)) & 1).astype(bool)
    r = rho_col[members]
    prob = np.prod(np.where(masks, r, 1.0 - r), axis=1)
    return masks, prob


def exact_lambda_sq(p, rho) -> np.ndarray:
    """Exact ``E[lambda_{m,n}^2]`` by enumerating which other sources arrive.

    Column ``n`` depends only on that receiver's own success draws, which
    are independent across sources.
    """
    rho = _as_rho(rho)
    p = _as_p(p, len(rho))
    N = len(p)
    if N > EXACT_SUBSET_MAX_N + 4:
        raise DomainError(f"exact enumeration is limited to N <= {EXACT_SUBSET_MAX_N + 4}")
    out = np.zeros((N, N))
    for n in range(N):
        for m in range(N):
            others = [k for k in range(N) if k != m]
            masks, prob = _subset_table(rho[:, n], others)
            got = masks @ p[others]
            missing = 1.0 - p[m] - got
            arrived = prob * (p[m] * missing / (got + p[m])) ** 2
            out[m, n] = rho[m, n] * float(np.sum(arrived)) + (1.0 - rho[m, n]) * p[m] ** 2
    return out


def lemma3_norm_bound(p, rho) -> float:
    """``sum_n sum_m (1 - rho[m, n]) (p_m^2 + p_m)``."""
    return routing_objective(_as_rho(rho), p)


def _entry_inner_exact(p, rho_col, j, m, N):
    members = [k for k in range(N) if k != j]
    masks, prob = _subset_table(rho_col, members)
    pos = members.index(m)
    keep = masks[:, pos]
    weight = masks[keep] @ p[members]
    return float(np.sum(p[m] / weight * prob[keep]))


def _entry_inner_mc(p, rho_col, j, m, N, rng, draws):
    members = [k for k in range(N) if k != j]
    r = rho_col[members]
    pos = members.index(m)
    sub = rng.random((draws, len(members))) < r
    vals = np.where(sub[:, pos], p[m] / np.maximum(sub @ p[members], 1e-300), 0.0)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(draws))


@dataclass
class Lemma3Bounds:
    entry: np.ndarray  # (N, N) bound on E[lambda_{m,n}^2]
    norm: float  # bound on E||Lambda||^2
    entry_se: np.ndarray | None = None  # set when the subset sums were sampled


def lemma3_bounds(p, rho, *, mc_draws: int = 20000, seed: int = 0) -> Lemma3Bounds:
    """Entry-wise and norm bounds on the bias moments.

    The entry bound's subset sums are enumerated exactly up to
    ``EXACT_SUBSET_MAX_N`` clients; beyond that each inner sum is estimated
    from ``mc_draws`` sampled subsets (``SizeWarning`` is raised and the
    standard errors are returned). The norm bound is always exact.
    """
    rho = _as_rho(rho)
    p = _as_p(p, len(rho))
    N = len(p)
    exact = N <= EXACT_SUBSET_MAX_N
    if not exact:
        warnings.warn(f"N={N} > {EXACT_SUBSET_MAX_N}: entry bound uses sampled subsets", SizeWarning)
    rng = np.random.default_rng(seed)
    entry = np.zeros((N, N))
    var = np.zeros((N, N))
    for n in range(N):
        col = rho[:, n]
        for m in range(N):
            total = (1.0 - col[m]) * p[m] ** 2
            for j in range(N):
                if j == m or col[j] == 1.0:
                    continue
                if exact:
                    inner = _entry_inner_exact(p, col, j, m, N)
                else:
                    inner, se = _entry_inner_mc(p, col, j, m, N, rng, mc_draws)
                    var[m, n] += (p[j] * (1.0 - col[j]) * se) ** 2
                total += p[j] * (1.0 - col[j]) * inner
            entry[m, n] = total
    return Lemma3Bounds(entry, lemma3_norm_bound(p, rho), None if exact else np.sqrt(var))


@dataclass
class LambdaMoments:
    draws: int
    mean_sq: np.ndarray  # E[lambda^2] per (m, n)
    se_sq: np.ndarray
    mean_spectral: float  # E||Lambda||^2, spectral norm
    se_spectral: float
    mean_frobenius: float  # E||Lambda||_F^2


def monte_carlo_lambda(p, rho, draws: int, seed: int, chunk: int = 100_000) -> LambdaMoments:
    """Sample single-segment success tensors and estimate the bias moments.

    Chunks use independent child streams of ``seed`` and are combined with
    exactly rounded sums, so the estimate depends only on ``(draws, seed, chunk)``.
    """
    rho = _as_rho(rho)
    p = _as_p(p, len(rho))
    N = len(p)
    sizes = [min(chunk, draws - s) for s in range(0, draws, chunk)]
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    s1 = [[[] for _ in range(N)] for _ in range(N)]
    s2 = [[[] for _ in range(N)] for _ in range(N)]
    n1, n2, fro = [], [], []
    idx = np.arange(N)
    for size, ss in zip(sizes, streams):
        rng = np.random.default_rng(ss)
        e = (rng.random((size, N, N)) < rho).astype(np.uint8)
        e[:, idx, idx] = 1
        coef = normalized_coefficients(p, e[..., None])[..., 0]
        lam = p[None, :, None] - coef
        sq = lam ** 2
        for m in range(N):
            for n in range(N):
                s1[m][n].append(float(sq[:, m, n].sum()))
                s2[m][n].append(float((sq[:, m, n] ** 2).sum()))
        spec = spectral_norm_sq(lam)
        n1.append(float(spec.sum()))
        n2.append(float((spec ** 2).sum()))
        fro.append(float(sq.sum()))
    mean = np.array([[math.fsum(s1[m][n]) / draws for n in range(N)] for m in range(N)])
    second = np.array([[math.fsum(s2[m][n]) / draws for n in range(N)] for m in range(N)])
    se = np.sqrt(np.maximum(second - mean ** 2, 0.0) / max(draws - 1, 1))
    mspec = math.fsum(n1) / draws
    se_spec = math.sqrt(max(math.fsum(n2) / draws - mspec ** 2, 0.0) / max(draws - 1, 1))
    return LambdaMoments(draws, mean, se, mspec, se_spec, math.fsum(fro) / draws)


# -- zeta constants ----------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    L: float
    mu: float
    eta: float
    I: int
    tau: float
    p: tuple
    rho: tuple  # row-major N x N
    sigma_bar_sq: float = 0.0

    def __post_init__(self):
        if not (self.L > 0 and self.mu > 0 and self.mu <= self.L):
            raise DomainError("need 0 < mu <= L")
        if not (0 < self.eta < 1.0 / (2.0 * self.L)):
            raise DomainError("learning rate must satisfy 0 < eta < 1/(2L)")
        if int(self.I) != self.I or self.I < 1:
            raise DomainError("I must be a positive integer")
        if self.tau < 0 or self.sigma_bar_sq < 0:
            raise DomainError("tau and sigma_bar_sq must be nonnegative")
        p = _as_p(self.p)
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (len(p), len(p)):
            raise DomainError("rho must be N x N")
        if np.any(rho < 0) or np.any(rho > 1) or np.any(np.diag(rho) != 1.0):
            raise DomainError("rho entries must lie in [0, 1] with a unit diagonal")

    @classmethod
    def build(cls, L, mu, eta, I, p, rho, sigma_bar_sq=0.0, tau=None) -> "BoundInputs":
        rho = _as_rho(rho)
        tau = calibrate_tau(rho) if tau is None else tau
        return cls(float(L), float(mu), float(eta), int(I), float(tau), tuple(float(x) for x in p),
                   tuple(tuple(float(x) for x in row) for row in rho), float(sigma_bar_sq))

    @property
    def p_array(self) -> np.ndarray:
        return np.asarray(self.p, dtype=float)

    @property
    def rho_array(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float)

    def to_dict(self) -> dict:
        return {"L": self.L, "mu": self.mu, "eta": self.eta, "I": self.I, "tau": self.tau,
                "p": list(self.p), "rho": [list(r) for r in self.rho], "sigma_bar_sq": self.sigma_bar_sq}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        unknown = set(d) - {"L", "mu", "eta", "I", "tau", "p", "rho", "sigma_bar_sq"}
        if unknown:
            raise DomainError(f"unknown keys: {sorted(unknown)}")
        return cls.build(d["L"], d["mu"], d["eta"], d["I"], d["p"], d["rho"], d.get("sigma_bar_sq", 0.0),
                         d.get("tau"))


def calibrate_tau(rho) -> float:
    """Default noise level: the worst end-to-end loss rate, ``max (1 - rho)``."""
    rho = _as_rho(rho)
    return float(np.max(1.0 - rho))


@dataclass(frozen=True)
class Zetas:
    z1: float
    z2: float
    z3: float
    z4: float

    def as_tuple(self):
        return (self.z1, self.z2, self.z3, self.z4)


def _ratios(L, mu, eta):
    q = 1.0 - 1.5 * mu * eta + 2.0 * L * mu * eta ** 2
    r = (1.0 + eta) * (1.0 + 4.0 * L ** 2 * eta)
    return q, r


def _pow_minus_one(x: float, k: int) -> float:
    """``x**k - 1`` without cancellation for ``x`` near 1."""
    return math.expm1(k * math.log1p(x - 1.0)) if k else 0.0


def zeta_constants(inp: BoundInputs) -> Zetas:
    """The four one-round bound coefficients in binary64.

    The divided differences ``(r^k - q^k)/(r - q)`` are evaluated as finite
    geometric sums, which is also their limit when ``r == q``.
    """
    L, mu, eta, I, tau = inp.L, inp.mu, inp.eta, inp.I, inp.tau
    q, r = _ratios(L, mu, eta)
    k = I - 1
    qk = q ** k
    contraction = 1.0 - 2.0 * mu * eta + eta ** 2 * L ** 2
    z1 = qk * (1.0 + tau) * contraction
    z3 = math.inf if tau == 0 else qk * (1.0 + 1.0 / tau) * (1.0 + eta * L)
    drift = 2.0 * eta ** 2 * L ** 2 + (L + mu) * eta
    # sum_{i<k} r^i q^(k-1-i)  and  sum_{i<k} r^i (q^(k-1-i) - 1)
    dd = math.fsum(r ** i * q ** (k - 1 - i) for i in range(k))
    gap = math.fsum(r ** i * _pow_minus_one(q, k - 1 - i) for i in range(k))
    z2 = 2.0 * (1.0 + eta) * drift * r ** 2 / (1.0 + 4.0 * L ** 2 + 4.0 * L ** 2 * eta) * gap
    z4 = drift * r ** 2 * dd
    return Zetas(z1, z2, z3, z4)


def zeta_constants_highprec(inp: BoundInputs, dps: int = 60) -> Zetas:
    """Independent arbitrary-precision evaluation of the displayed formulas."""
    with mpmath.workdps(dps):
        L, mu, eta, tau = (mpmath.mpf(x) for x in (inp.L, inp.mu, inp.eta, inp.tau))
        I = inp.I
        q = 1 - 3 * mu * eta / 2 + 2 * L * mu * eta ** 2
        r = (1 + eta) * (1 + 4 * L ** 2 * eta)
        drift = 2 * eta ** 2 * L ** 2 + (L + mu) * eta

        def divided(a, b):
            if a == b:
                return (I - 1) * a ** (I - 2) if I >= 2 else mpmath.mpf(0)
            return (a ** (I - 1) - b ** (I - 1)) / (a - b)

        z1 = q ** (I - 1) * (1 + tau) * (1 - 2 * mu * eta + eta ** 2 * L ** 2)
        z2 = (2 * (1 + eta) * drift * r ** 2 / (1 + 4 * L ** 2 + 4 * L ** 2 * eta)
              * (divided(r, q) - divided(r, mpmath.mpf(1))))
        z3 = mpmath.inf if tau == 0 else q ** (I - 1) * (1 + 1 / tau) * (1 + eta * L)
        z4 = drift * r ** 2 * divided(r, q)
        return Zetas(float(z1), float(z2), float(z3), float(z4))


def bias_factor(inp: BoundInputs, z: Zetas | None = None) -> float:
    """``zeta3 N ||diag p||^2 + zeta3 eta L ||diag p|| + zeta4 ||diag(sqrt p - p)||^2``."""
    z = zeta_constants(inp) if z is None else z
    p = inp.p_array
    dp = float(np.max(p))
    ds = float(np.max(np.abs(np.sqrt(p) - p)))
    return z.z3 * len(p) * dp ** 2 + z.z3 * inp.eta * inp.L * dp + z.z4 * ds ** 2


def _scaled(factor: float, amount: float) -> float:
    # an error-free network contributes nothing even when tau = 0 sends zeta3 to inf
    return 0.0 if amount == 0 else factor * amount


def theorem1_rhs(inp: BoundInputs, delta_prev: float, sum_w2: float, objective: float | None = None) -> float:
    """One-round bound on ``E||omega_bar^t - w*||^2``.

    ``objective`` defaults to the routing objective of ``inp.rho``.
    """
    if delta_prev < 0 or sum_w2 < 0:
        raise DomainError("delta_prev and sum_w2 must be nonnegative")
    z = zeta_constants(inp)
    obj = routing_objective(inp.rho_array, inp.p_array) if objective is None else objective
    return z.z1 * delta_prev + z.z2 * inp.sigma_bar_sq + _scaled(bias_factor(inp, z), sum_w2 * obj)


@dataclass(frozen=True)
class Asymptote:
    value: float | None
    divergent: bool

    def to_json_value(self):
        return "divergent (zeta1 >= 1)" if self.divergent else self.value


def theorem2_asymptote(inp: BoundInputs, lambda_max: float, objective: float | None = None) -> Asymptote:
    """Limit of the bound under a stationary success matrix, or divergent when ``zeta1 >= 1``."""
    z = zeta_constants(inp)
    if z.z1 >= 1.0:
        return Asymptote(None, True)
    obj = routing_objective(inp.rho_array, inp.p_array) if objective is None else objective
    series = z.z1 / (1.0 - z.z1)
    return Asymptote(z.z2 * inp.sigma_bar_sq / (1.0 - z.z1)
                     + _scaled(bias_factor(inp, z), series * obj * lambda_max), False)


def theorem2_partial_sum(inp: BoundInputs, lambda_max: float, T: int, objective: float | None = None) -> float:
    """The same bound with the series truncated after ``T`` rounds."""
    z = zeta_constants(inp)
    obj = routing_objective(inp.rho_array, inp.p_array) if objective is None else objective
    head = z.z2 * inp.sigma_bar_sq / (1.0 - z.z1)
    terms = math.fsum(z.z1 ** t for t in range(1, T + 1))
    return head + _scaled(bias_factor(inp, z), terms * obj * lambda_max)


@dataclass
class BoundReport:
    inputs: BoundInputs
    zetas: Zetas
    lemma3: Lemma3Bounds
    objective: float
    factor: float
    asymptote: Asymptote | None

    def to_dict(self) -> dict:
        z = self.zetas

        def num(x):
            return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")

        out = {
            "inputs": self.inputs.to_dict(),
            "zeta": {"zeta1": num(z.z1), "zeta2": num(z.z2), "zeta3": num(z.z3), "zeta4": num(z.z4)},
            "lemma3_entry_bounds": self.lemma3.entry.tolist(),
            "lemma3_norm_bound": self.lemma3.norm,
            "routing_objective": self.objective,
            "theorem1": {
                "delta_coefficient": num(z.z1),
                "constant": num(z.z2 * self.inputs.sigma_bar_sq),
                "sum_w2_coefficient": num(_scaled(self.factor, self.objective)),
            },
            "theorem2_asymptote": None if self.asymptote is None else self.asymptote.to_json_value(),
        }
        if self.lemma3.entry_se is not None:
            out["lemma3_entry_se"] = self.lemma3.entry_se.tolist()
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def bound_report(inp: BoundInputs, lambda_max: float | None = None) -> BoundReport:
    z = zeta_constants(inp)
    lemma = lemma3_bounds(inp.p_array, inp.rho_array)
    obj = routing_objective(inp.rho_array, inp.p_array)
    asym = None if lambda_max is None else theorem2_asymptote(inp, lambda_max, obj)
    return BoundReport(inp, z, lemma, obj, bias_factor(inp, z), asym)


# -- coefficient statistics --------------------------------------------------

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class CoefficientStats:
    mean: np.ndarray
    var: np.ndarray
    quantiles: np.ndarray  # (len(QUANTILES), N, N)
    edges: np.ndarray
    counts: np.ndarray  # (N, N, bins)
    trials: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "bin_lo", "bin_hi", "count"])
        N = self.mean.shape[0]
        for m, n in itertools.product(range(N), range(N)):
            for b in range(len(self.edges) - 1):
                w.writerow([f"{m}-{n}", repr(float(self.edges[b])), repr(float(self.edges[b + 1])),
                            int(self.counts[m, n, b])])
        return buf.getvalue()


def coefficient_distribution(p, plan, K: int, trials: int, seed: int, bins: int = 20) -> CoefficientStats:
    """Distribution of normalised coefficients over ``trials`` single-segment draws."""
    if trials < 1:
        raise DomainError("trials must be at least 1")
    rho = _as_rho(plan.success_matrix(K) if isinstance(plan, RoutePlan) else plan)
    p = _as_p(p, len(rho))
    N = len(p)
    rng = np.random.default_rng(seed)
    e = (rng.random((trials, N, N)) < rho).astype(np.uint8)
    idx = np.arange(N)
    e[:, idx, idx] = 1
    coef = normalized_coefficients(p, e[..., None])[..., 0]
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros((N, N, bins), dtype=np.int64)
    for m, n in itertools.product(range(N), range(N)):
        counts[m, n] = np.histogram(coef[:, m, n], bins=edges)[0]
    return CoefficientStats(coef.mean(axis=0), coef.var(axis=0), np.quantile(coef, QUANTILES, axis=0),
                            edges, counts, trials)


# -- one-round bound check on quadratic tasks --------------------------------

@dataclass
class Theorem1Check:
    lhs_mean: np.ndarray  # E||omega_bar^t - w*||^2 per round
    lhs_se: np.ndarray
    rhs: np.ndarray
    tau: float
    inputs: BoundInputs = field(repr=False)

    @property
    def holds(self) -> np.ndarray:
        return self.lhs_mean <= self.rhs + 4.0 * self.lhs_se


def theorem1_check(task: QuadraticTask, plan: RoutePlan, eta: float, I: int, K: int, rounds: int,
                   reps: int, seed: int, tau: float | None = None) -> Theorem1Check:
    """Monte Carlo of the one-round bound on a quadratic task.

    All ``reps`` trajectories start from the task's initial model and run
    R&A with coefficient normalisation. Round ``t``'s right-hand side uses
    the Monte Carlo means of round ``t-1``'s distance and ``sum_l ||W_l||^2``.
    """
    if not isinstance(task, QuadraticTask):
        raise UnsupportedTask("the bound check needs a quadratic task")
    consts = task_constants(task)
    rho = plan.success_matrix(K)
    inp = BoundInputs.build(consts.L, consts.mu, eta, I, task.p, rho, consts.sigma_bar_sq, tau)
    w_star = consts.center
    N, M = task.n_clients, task.dim
    A = np.stack(task.A)
    b = np.stack(task.b)
    p = task.p
    rng = np.random.default_rng(seed)
    models = np.broadcast_to(task.initial_model(), (reps, N, M)).copy()
    bounds = segment_bounds(M, K)
    seg_rho = np.stack([plan.success_matrix(bb - aa) for aa, bb in bounds], axis=-1)
    idx = np.arange(N)
    prev_delta = float(np.sum((task.initial_model() - w_star) ** 2))
    prev_w2 = 0.0  # identical starting models carry no aggregation bias
    lhs, se, rhs = [], [], []
    for _ in range(rounds):
        w = models
        for _ in range(I):
            g = (np.einsum("nij,rnj->rni", A, w) if A.ndim == 3 else A[None] * w) - b[None]
            w = w - eta * g
        bar = np.einsum("n,rnm->rm", p, w)
        d = np.sum((bar - w_star) ** 2, axis=1)
        lhs.append(float(d.mean()))
        se.append(float(d.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0)
        rhs.append(theorem1_rhs(inp, prev_delta, prev_w2))
        e = (rng.random((reps, N, N, len(bounds))) < seg_rho).astype(np.uint8)
        e[:, idx, idx, :] = 1
        coef = normalized_coefficients(p, e)
        new = np.empty_like(w)
        for l, (aa, bb) in enumerate(bounds):
            new[:, :, aa:bb] = np.einsum("rmn,rmj->rnj", coef[..., l], w[:, :, aa:bb])
        prev_delta = lhs[-1]
        prev_w2 = float(sum(spectral_norm_sq(w[:, :, aa:bb]).mean() for aa, bb in bounds))
        models = new
    return Theorem1Check(np.array(lhs), np.array(se), np.array(rhs), inp.tau, inp)
