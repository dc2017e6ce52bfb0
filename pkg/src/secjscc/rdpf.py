"""Multimodal rate-distortion-perception function.

The program is

    minimise    I(S_E; hat S)        over test channels p(hat s | s_E)
    subject to  E d_i(S_i, hat S_i)        <= D_i   (i observed)
                E dhat_i(S_E, hat S_i)     <= D_i   (i unobserved)
                phi_i(p_{S_i}, p_{hat S_i}) <= P_i

for every modality in the active set.  It is convex.  ``solve_rdpf`` works
on the Lagrange dual: for fixed multipliers the inner problem is a
rate-distortion Lagrangian that Blahut-Arimoto solves exactly, and the outer
problem is a smooth-ish concave maximisation over non-negative multipliers.

TV perception constraints are expanded into the equivalent finite family of
linear constraints  p(U) - q(U) <= P  over symbol subsets U.  KL constraints
are handled by tangent-plane cuts added until the KL ball is respected.

``rdpf_oracle_grid`` is an independent brute-force check: it only evaluates
the objective and constraints at test channels whose rows lie on a simplex
grid, and never touches the dual machinery.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from .errors import ArgumentError, ResourceError, ValidationError
from .lattice import (DistortionSpec, MultimodalSource, PerceptionSpec, SourceModel,
                      modified_distortion)
from .prob import ConditionalPmf, kl_divergence, tv_distance

LN2 = math.log(2.0)
ORACLE_ROUNDOFF = 1e-12


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-4          # duality gap, bits
    feasibility_tol: float = 1e-6
    max_iters: int = 20000           # Blahut-Arimoto / alternating-minimisation steps
    dual_steps: int = 500            # L-BFGS-B iterations per multiplier solve
    inner_tol: float = 1e-9          # nats, BA optimality bound
    kl_cut_rounds: int = 80
    oracle_resolution: float = 1.0 / 64
    oracle_cap: int = 4_000_000      # grid points evaluated exhaustively


@dataclass(frozen=True, eq=False)
class RdpfProblem:
    source: MultimodalSource
    distortion: DistortionSpec
    perception: PerceptionSpec
    active: frozenset
    reconstruction: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "active", frozenset(int(i) for i in self.active))
        object.__setattr__(self, "reconstruction", tuple(int(r) for r in self.reconstruction))
        m = self.source.m
        if not self.active:
            raise ArgumentError("active constraint set must be non-empty")
        if not self.active <= set(range(1, m + 1)):
            raise ArgumentError(f"active set {sorted(self.active)} outside 1..{m}")
        if len(self.reconstruction) != m:
            raise ValidationError("one reconstruction alphabet per modality required")
        for i in self.active:
            if i not in self.distortion.matrices or i not in self.distortion.thresholds:
                raise ValidationError(f"no distortion constraint for active modality {i}")
            d = self.distortion.matrices[i]
            if d.shape != (self.source.alphabets[i - 1], self.reconstruction[i - 1]):
                raise ValidationError(f"distortion matrix {i} has shape {d.shape}")
            if i in self.perception.metrics and self.reconstruction[i - 1] != self.source.alphabets[i - 1]:
                raise ValidationError(
                    f"perception for modality {i} compares p_S and p_hatS, alphabets must match")

    @classmethod
    def from_model(cls, model: SourceModel, active=None) -> "RdpfProblem":
        active = frozenset(range(1, model.source.m + 1)) if active is None else frozenset(active)
        return cls(model.source, model.distortion, model.perception, active, model.reconstruction)

    def with_thresholds(self, D: Optional[Mapping[int, float]] = None,
                        P: Optional[Mapping[int, float]] = None) -> "RdpfProblem":
        dist = self.distortion.with_thresholds(D) if D else self.distortion
        perc = self.perception.with_thresholds(P) if P else self.perception
        return replace(self, distortion=dist, perception=perc)

    def perception_active(self) -> Dict[int, Tuple[str, float]]:
        return {i: (self.perception.metrics[i], self.perception.thresholds[i])
                for i in sorted(self.active) if i in self.perception.metrics}


def restrict(p: RdpfProblem, a) -> RdpfProblem:
    """Same problem with constraints kept only for modalities in ``a``."""
    a = frozenset(int(i) for i in a)
    if not a:
        raise ArgumentError("restrict() needs a non-empty subset")
    return replace(p, active=a)


@dataclass(frozen=True, eq=False)
class RdpfSolution:
    rate: float
    test_channel: Optional[ConditionalPmf]
    achieved_distortions: Dict[int, float]
    achieved_perceptions: Dict[int, float]
    multipliers: Dict[str, float]
    status: Status
    iterations: int
    primal_dual_gap: float
    lower_bound: float = 0.0

    def to_dict(self) -> dict:
        return {
            "rate": None if math.isinf(self.rate) else self.rate,
            "lower_bound": self.lower_bound,
            "status": self.status.value,
            "iterations": self.iterations,
            "primal_dual_gap": None if math.isinf(self.primal_dual_gap) else self.primal_dual_gap,
            "achieved_distortions": {str(i): v for i, v in sorted(self.achieved_distortions.items())},
            "achieved_perceptions": {str(i): v for i, v in sorted(self.achieved_perceptions.items())},
            "multipliers": dict(sorted(self.multipliers.items())),
            "test_channel": None if self.test_channel is None else self.test_channel.rows.tolist(),
        }


# --------------------------------------------------------------------------
# problem compilation


@dataclass
class _Compiled:
    p: np.ndarray                  # p(s_E) on the rows kept (p > 0)
    keep: np.ndarray               # mask of kept rows over the flat s_E index
    e_shape: Tuple[int, ...]
    recon: Tuple[int, ...]
    n_hat: int
    costs: Dict[int, np.ndarray]   # modality -> (n_s, n_hat) distortion cost
    proj: Dict[int, np.ndarray]    # modality -> (n_hat, |hat S_i|) one-hot
    p_mod: Dict[int, np.ndarray]   # modality -> p(s_i)


def _compile(prob: RdpfProblem) -> _Compiled:
    src = prob.source
    e_list = sorted(src.observed)
    e_shape = tuple(src.alphabets[i - 1] for i in e_list)
    p_full = src.observed_pmf().reshape(-1)
    keep = p_full > 0
    s_idx = np.indices(e_shape).reshape(len(e_shape), -1)[:, keep]
    recon = prob.reconstruction
    n_hat = int(np.prod(recon))
    h_idx = np.indices(recon).reshape(len(recon), -1)
    costs, proj, p_mod = {}, {}, {}
    for i in range(1, src.m + 1):
        proj[i] = np.eye(recon[i - 1])[h_idx[i - 1]]
        p_mod[i] = src.modality_pmf(i)
        d = prob.distortion.matrices.get(i)
        if d is None:
            continue
        if i in src.observed:
            k = e_list.index(i)
            costs[i] = d[s_idx[k][:, None], h_idx[i - 1][None, :]]
        else:
            dh = modified_distortion(src, i, d).reshape(-1, recon[i - 1])[keep]
            costs[i] = dh[:, h_idx[i - 1]]
    return _Compiled(p_full[keep], keep, e_shape, recon, n_hat, costs, proj, p_mod)


@dataclass
class _Constraint:
    a: np.ndarray          # coefficient on the joint P(s, hat s), shape (n_s, n_hat)
    b: float
    kind: str              # "D" or "P"
    modality: int


def _linear_constraints(prob: RdpfProblem, c: _Compiled) -> List[_Constraint]:
    out = []
    for i in sorted(prob.active):
        out.append(_Constraint(c.costs[i], prob.distortion.thresholds[i], "D", i))
    for i, (metric, level) in prob.perception_active().items():
        if metric == "kl" and level > 0:
            continue                                  # cuts added lazily
        pi = c.p_mod[i]
        k = pi.size
        # TV(p, q) <= P  <=>  p(U) - q(U) <= P for every symbol subset U
        for r in range(1, k):
            for u in itertools.combinations(range(k), r):
                pu = float(pi[list(u)].sum())
                if pu <= level:
                    continue
                ind = c.proj[i][:, list(u)].sum(axis=1)
                out.append(_Constraint(np.broadcast_to(-ind, (c.p.size, c.n_hat)).copy(),
                                       level - pu, "P", i))
    return out


def _kl_cut(c: _Compiled, i: int, level: float, q_bad: np.ndarray) -> _Constraint:
    """Supporting hyperplane of {q : KL(p_i || q) <= level} separating q_bad."""
    p = c.p_mod[i]

    def kl(t):
        return kl_divergence(p, (1 - t) * p + t * q_bad)

    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if kl(mid) <= level:
            lo = mid
        else:
            hi = mid
    q0 = (1 - lo) * p + lo * q_bad
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(p > 0, -p / (q0 * LN2), 0.0)
    rhs = level - kl_divergence(p, q0) + float(g @ q0)
    coeff = c.proj[i] @ g
    return _Constraint(np.broadcast_to(coeff, (c.p.size, c.n_hat)).copy(), rhs, "P", i)


# --------------------------------------------------------------------------
# inner Blahut-Arimoto


def _blahut_arimoto(p, cost, log_r0, tol, max_iters):
    """min_W I(W) + E cost (nats).

    Returns (W, log_r, upper, lower, iters) where upper/lower bracket the
    optimum of the Lagrangian.
    """
    log_r = log_r0.copy()
    log_p = np.log(p)
    neg = -cost
    it = 0
    while True:
        logits = log_r[None, :] + neg
        log_z = logsumexp(logits, axis=1)
        upper = -float(p @ log_z)
        log_c = logsumexp(log_p[:, None] + neg - log_z[:, None], axis=0)
        gap = float(log_c.max())
        it += 1
        if gap <= tol or it >= max_iters:
            break
        log_r = np.maximum(log_r + log_c, -690.0)
        log_r -= logsumexp(log_r)
    w = np.exp(logits - log_z[:, None])
    return w, log_r, upper, upper - max(gap, 0.0), it


def _mi_nats(p, w) -> float:
    joint = p[:, None] * w
    q = joint.sum(axis=0)
    mask = joint > 0
    denom = (p[:, None] * q[None, :])[mask]
    return max(float(np.sum(joint[mask] * np.log(joint[mask] / denom))), 0.0)


# --------------------------------------------------------------------------
# feasibility pre-check


def _feasible_point(c: _Compiled, cons: List[_Constraint], prob: RdpfProblem, tol: float,
                    tied: bool = False):
    """Channel maximising the common slack of every constraint, or None.

    With ``tied`` every row of the channel is the same distribution, so a
    feasible answer certifies that rate zero is achievable.
    """
    n_s, n_hat = c.p.size, c.n_hat
    n_w = n_hat if tied else n_s * n_hat
    nv = n_w + 1
    obj = np.zeros(nv)
    obj[-1] = -1.0
    rows_eq = 1 if tied else n_s
    a_eq = np.zeros((rows_eq, nv))
    for s in range(rows_eq):
        a_eq[s, s * n_hat:(s + 1) * n_hat] = 1.0
    bounds = [(0, None)] * n_w + [(None, 1.0)]
    kl_items = [(i, lvl) for i, (mt, lvl) in prob.perception_active().items() if mt == "kl" and lvl > 0]
    cuts: List[_Constraint] = []

    def row(con):
        coeff = c.p @ con.a if tied else (con.a * c.p[:, None]).ravel()
        return np.append(coeff, 1.0)

    for _ in range(200):
        rows = cons + cuts
        if rows:
            a_ub = np.array([row(con) for con in rows])
            b_ub = np.array([con.b for con in rows])
        else:
            a_ub, b_ub = None, None
        res = linprog(obj, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=np.ones(rows_eq),
                      bounds=bounds, method="highs")
        if res.status != 0:
            return None, -math.inf
        x = np.clip(res.x[:-1], 0, None)
        w = np.tile(x, (n_s, 1)) if tied else x.reshape(n_s, n_hat)
        w = w / w.sum(axis=1, keepdims=True)
        slack = float(res.x[-1])
        if slack < -tol:
            return None, slack
        q = c.p @ w
        added = False
        for i, lvl in kl_items:
            qi = q @ c.proj[i]
            if kl_divergence(c.p_mod[i], qi) > lvl + tol:
                cuts.append(_kl_cut(c, i, lvl, qi))
                added = True
        if not added:
            return w, slack
    return None, -math.inf


# --------------------------------------------------------------------------
# evaluation helpers shared by solver reporting


def _achieved(prob: RdpfProblem, c: _Compiled, w: np.ndarray):
    joint = c.p[:, None] * w
    q = joint.sum(axis=0)
    dist = {i: float(np.sum(joint * c.costs[i])) for i in sorted(c.costs)}
    perc = {}
    for i, metric in sorted(prob.perception.metrics.items()):
        qi = q @ c.proj[i]
        perc[i] = tv_distance(c.p_mod[i], qi) if metric == "tv" else kl_divergence(c.p_mod[i], qi)
    return dist, perc


def _violation(prob: RdpfProblem, c: _Compiled, w: np.ndarray) -> float:
    dist, perc = _achieved(prob, c, w)
    worst = -math.inf
    for i in prob.active:
        worst = max(worst, dist[i] - prob.distortion.thresholds[i])
    for i, (_, lvl) in prob.perception_active().items():
        worst = max(worst, perc[i] - lvl)
    return worst


def _to_conditional(c: _Compiled, w: np.ndarray) -> ConditionalPmf:
    full = np.empty((c.keep.size, c.n_hat))
    q = c.p @ w
    full[:] = q / q.sum()
    full[c.keep] = w
    full /= full.sum(axis=1, keepdims=True)
    return ConditionalPmf(full.reshape(c.e_shape + c.recon), n_given=len(c.e_shape))


# --------------------------------------------------------------------------
# solver


def solve_rdpf(prob: RdpfProblem, cfg: SolverConfig = SolverConfig()) -> RdpfSolution:
    """Rate-distortion-perception function of ``prob`` (bits per source symbol)."""
    c = _compile(prob)
    cons = _linear_constraints(prob, c)
    kl_items = [(i, lvl) for i, (mt, lvl) in prob.perception_active().items() if mt == "kl" and lvl > 0]

    w_feas, slack = _feasible_point(c, cons, prob, cfg.feasibility_tol)
    if w_feas is None:
        return RdpfSolution(math.inf, None, {}, {}, {}, Status.INFEASIBLE, 0, math.inf, math.inf)
    w_zero, _ = _feasible_point(c, cons, prob, cfg.feasibility_tol, tied=True)
    if w_zero is not None and _violation(prob, c, w_zero) <= cfg.feasibility_tol:
        dist, perc = _achieved(prob, c, w_zero)
        return RdpfSolution(0.0, _to_conditional(c, w_zero), dist, perc, {}, Status.CONVERGED, 0, 0.0, 0.0)

    n_s, n_hat = c.p.size, c.n_hat
    log_r = np.full(n_hat, -math.log(n_hat))
    total_iters = 0
    lam = np.zeros(0)
    best = None
    primal: List[np.ndarray] = []
    for _round in range(cfg.kl_cut_rounds + 1):
        k = len(cons)
        if k == 0:
            w, log_r, up, low, it = _blahut_arimoto(c.p, np.zeros((n_s, n_hat)), log_r,
                                                    cfg.inner_tol, cfg.max_iters)
            total_iters += it
            lam = np.zeros(0)
            lower_nats = low
        else:
            lam, w, log_r, lower_nats, it, cand = _dual_ascent(c, cons, lam, log_r, cfg)
            total_iters += it
            if cand is not None:
                primal.append(cand)
        best = (w, lam, lower_nats)
        if not kl_items:
            break
        q = c.p @ w
        added = False
        for i, lvl in kl_items:
            qi = q @ c.proj[i]
            if kl_divergence(c.p_mod[i], qi) > lvl + 0.1 * cfg.feasibility_tol:
                cons.append(_kl_cut(c, i, lvl, qi))
                added = True
        if not added:
            break
        lam = np.append(lam, np.zeros(len(cons) - lam.size))

    w, lam, lower_nats = best
    # Repair residual infeasibility by moving toward the max-slack channel.
    viol = _violation(prob, c, w)
    if viol > cfg.feasibility_tol:
        lo, hi = 0.0, 1.0
        if _violation(prob, c, w_feas) > cfg.feasibility_tol:
            hi = 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _violation(prob, c, (1 - mid) * w + mid * w_feas) <= cfg.feasibility_tol:
                hi = mid
            else:
                lo = mid
        w = (1 - hi) * w + hi * w_feas
        viol = _violation(prob, c, w)
    # A feasible dual iterate may beat the repaired channel.
    for cand in primal:
        if (_violation(prob, c, cand) <= cfg.feasibility_tol
                and _mi_nats(c.p, cand) < _mi_nats(c.p, w)):
            w = cand
            viol = _violation(prob, c, w)

    rate = _mi_nats(c.p, w) / LN2
    # The dual bound is for the exact constraints while the reported channel
    # may violate them by up to feasibility_tol, so the bound can exceed the
    # rate by a hair.  Clipping only weakens the bound.
    lower = min(max(lower_nats / LN2, 0.0), rate)
    gap = max(rate - lower, 0.0)
    dist, perc = _achieved(prob, c, w)
    mult: Dict[str, float] = {}
    for con, l in zip(cons, lam):
        key = f"{con.kind}_{con.modality}"
        mult[key] = mult.get(key, 0.0) + float(l) / LN2
    ok = gap <= cfg.tolerance and viol <= cfg.feasibility_tol
    return RdpfSolution(rate, _to_conditional(c, w), dist, perc, mult,
                        Status.CONVERGED if ok else Status.ITER_LIMIT,
                        total_iters, gap, lower)


def _dual_ascent(c: _Compiled, cons: List[_Constraint], lam0: np.ndarray, log_r0: np.ndarray,
                 cfg: SolverConfig):
    """Minimise I(W) under the linear constraints by alternating over (W, r) (nats).

    For a fixed output law r, min_W sum p W log(W / r) under the constraints
    has the unique minimiser W ~ r exp(-lam . a), so its dual is smooth in
    lam and L-BFGS-B handles it reliably.  r then moves to the output
    marginal of W.  The full Lagrange dual is not smooth (its minimiser
    collapses at lam = 0), which is why it is not maximised directly.  Every
    step certifies a lower bound through the Blahut-Arimoto bound at the
    current (lam, r).
    """
    a = np.stack([con.a for con in cons])                  # (k, n_s, n_hat)
    b = np.array([con.b for con in cons])
    spread = np.array([max(float(con.a.max() - con.a.min()), 1e-12) for con in cons])
    lam_max = 200.0 / spread
    bounds = list(zip(np.zeros(len(cons)), lam_max))
    opts = {"maxiter": cfg.dual_steps, "ftol": 1e-15, "gtol": 1e-12, "maxcor": 20}
    pa = a * c.p[None, :, None]
    log_p = np.log(c.p)
    tol = cfg.tolerance * LN2
    lam = np.clip(lam0 if lam0.size == len(cons) else np.zeros(len(cons)), 0, lam_max)
    log_r = log_r0.copy()
    evals = 0
    best_low, best_lam = -np.inf, lam
    primal = None

    def neg_h(l):
        nonlocal evals
        evals += 1
        logits = log_r[None, :] - np.tensordot(l, a, axes=1)
        log_z = logsumexp(logits, axis=1)
        w = np.exp(logits - log_z[:, None])
        vals = np.tensordot(pa, w, axes=([1, 2], [0, 1]))
        return float(c.p @ log_z) + float(l @ b), b - vals

    w = None
    for _ in range(cfg.max_iters):
        lam = np.clip(minimize(neg_h, lam, jac=True, method="L-BFGS-B", bounds=bounds,
                               options=opts).x, 0, lam_max)
        cost = np.tensordot(lam, a, axes=1)
        logits = log_r[None, :] - cost
        log_z = logsumexp(logits, axis=1)
        w = np.exp(logits - log_z[:, None])
        log_c = logsumexp(log_p[:, None] - cost - log_z[:, None], axis=0)
        low = -float(c.p @ log_z) - max(float(log_c.max()), 0.0) - float(lam @ b)
        if low > best_low:
            best_low, best_lam = low, lam.copy()
        vals = np.tensordot(pa, w, axes=([1, 2], [0, 1]))
        if np.all(vals - b <= cfg.feasibility_tol):
            mi = _mi_nats(c.p, w)
            if primal is None or mi < primal[0]:
                primal = (mi, w)
        if primal is not None and primal[0] - best_low <= tol:
            break
        log_r = np.maximum(logsumexp(log_p[:, None] + np.log(np.maximum(w, 1e-300)), axis=0), -690.0)
        log_r -= logsumexp(log_r)
    cand = None if primal is None else primal[1]
    return best_lam, w, log_r, best_low, evals, cand


# --------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class CurvePoint:
    D: Tuple[float, ...]
    P: Tuple[float, ...]
    rate: float
    status: str


def rdpf_curve(prob: RdpfProblem, d_grid: Sequence, cfg: SolverConfig = SolverConfig(),
               p_values: Optional[Mapping[int, float]] = None) -> List[CurvePoint]:
    """One solve per distortion tuple, returned in lexicographic D order."""
    m = prob.source.m
    tuples = []
    for d in d_grid:
        d = (float(d),) * 1 if np.isscalar(d) else tuple(float(x) for x in d)
        if len(d) == 1 and m > 1:
            d = d * m
        if len(d) != m:
            raise ArgumentError(f"distortion tuple {d} needs {m} entries")
        tuples.append(d)
    tuples.sort()
    base = prob.with_thresholds(P=p_values) if p_values else prob
    out = []
    for d in tuples:
        sub = base.with_thresholds(D={i + 1: v for i, v in enumerate(d)})
        ptuple = tuple(sub.perception.thresholds.get(i, math.nan) for i in range(1, m + 1))
        try:
            sol = solve_rdpf(sub, cfg)
            out.append(CurvePoint(d, ptuple, sol.rate, sol.status.value))
        except (ArgumentError, ValidationError) as exc:
            out.append(CurvePoint(d, ptuple, math.nan, f"Error: {exc}"))
    return out


def curve_to_csv(points: Sequence[CurvePoint], m: int) -> str:
    head = [f"D_{i}" for i in range(1, m + 1)] + [f"P_{i}" for i in range(1, m + 1)] + ["rate", "status"]
    lines = [",".join(head)]
    for pt in points:
        vals = [repr(x) for x in pt.D] + ["" if math.isnan(x) else repr(x) for x in pt.P]
        vals += ["" if math.isnan(pt.rate) or math.isinf(pt.rate) else repr(pt.rate), pt.status]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# grid oracle


@dataclass(frozen=True, eq=False)
class GridOracleResult:
    rate: float                    # +inf when no feasible grid point was found
    feasible: bool
    channel: Optional[np.ndarray]  # rows over kept s_E symbols
    resolution: float
    exhaustive: bool
    evaluated: int

    @property
    def status(self) -> Status:
        return Status.CONVERGED if self.feasible else Status.INFEASIBLE


def _compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of length ``parts`` summing to ``total``."""
    out = []
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        row = []
        for b_ in bars:
            row.append(b_ - prev - 1)
            prev = b_
        row.append(total + parts - 2 - prev)
        out.append(row)
    return np.array(out, dtype=np.int64)


class _GridEvaluator:
    """Objective and constraint values for batches of test channels."""

    def __init__(self, prob: RdpfProblem):
        src = prob.source
        e_list = sorted(src.observed)
        e_shape = tuple(src.alphabets[i - 1] for i in e_list)
        p_full = src.observed_pmf().reshape(-1)
        self.keep = p_full > 0
        self.p = p_full[self.keep]
        s_idx = np.indices(e_shape).reshape(len(e_shape), -1)[:, self.keep]
        recon = prob.reconstruction
        self.n_hat = int(np.prod(recon))
        h_idx = np.indices(recon).reshape(len(recon), -1)
        self.dist = []
        for i in sorted(prob.active):
            d = prob.distortion.matrices[i]
            if i in src.observed:
                cost = d[s_idx[e_list.index(i)][:, None], h_idx[i - 1][None, :]]
            else:
                dh = modified_distortion(src, i, d).reshape(-1, recon[i - 1])[self.keep]
                cost = dh[:, h_idx[i - 1]]
            self.dist.append((cost, prob.distortion.thresholds[i]))
        self.perc = []
        for i, (metric, lvl) in prob.perception_active().items():
            onehot = np.eye(recon[i - 1])[h_idx[i - 1]]
            self.perc.append((onehot, src.modality_pmf(i), metric, lvl))

    def evaluate(self, w: np.ndarray):
        """w: (batch, n_s, n_hat). Returns (rate_bits, max_violation)."""
        joint = self.p[None, :, None] * w
        q = joint.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = joint / (self.p[None, :, None] * q[:, None, :])
            terms = np.where(joint > 0, joint * np.log2(np.where(joint > 0, ratio, 1.0)), 0.0)
        rate = np.maximum(terms.sum(axis=(1, 2)), 0.0)
        viol = np.full(w.shape[0], -np.inf)
        for cost, lvl in self.dist:
            viol = np.maximum(viol, np.einsum("bsh,sh->b", joint, cost) - lvl)
        for onehot, pi, metric, lvl in self.perc:
            qi = q @ onehot
            if metric == "tv":
                val = 0.5 * np.abs(qi - pi[None, :]).sum(axis=1)
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    lr = np.where(pi[None, :] > 0, pi[None, :] * np.log2(pi[None, :] / qi), 0.0)
                val = np.where(np.any((qi <= 0) & (pi[None, :] > 0), axis=1), np.inf, lr.sum(axis=1))
            viol = np.maximum(viol, val - lvl)
        # Forgive floating-point round-off when a grid point sits on a constraint.
        return rate, viol - ORACLE_ROUNDOFF


def rdpf_oracle_grid(prob: RdpfProblem, resolution: float, cap: int = 4_000_000,
                     local_cap: int = 200_000, allow_local: bool = True) -> GridOracleResult:
    """Minimum rate over test channels whose rows lie on the grid of step ``resolution``.

    The whole grid is enumerated when it has at most ``cap`` points.  Larger
    grids are searched coarse-to-fine: exhaustive on the finest dyadic grid
    under the cap, then repeated exhaustive searches of a box neighbourhood
    of the incumbent at each finer level.  Every returned value is the rate
    of an actual feasible grid channel, so it upper-bounds the true optimum.
    With ``allow_local=False`` an over-cap grid raises ``ArgumentError``.
    """
    if not 0 < resolution <= 1:
        raise ArgumentError("resolution must be in (0, 1]")
    n_target = int(round(1.0 / resolution))
    if abs(n_target * resolution - 1.0) > 1e-9:
        raise ArgumentError("resolution must be 1/N for an integer N")
    ev = _GridEvaluator(prob)
    n_s, n_hat = ev.p.size, ev.n_hat

    def grid_size(n):
        return math.comb(n + n_hat - 1, n_hat - 1) ** n_s

    if grid_size(n_target) <= cap:
        return _exhaustive(ev, n_target, resolution)
    if not allow_local:
        raise ArgumentError(f"grid with {grid_size(n_target)} points exceeds cap {cap}")
    levels = [n_target]
    while levels[-1] % 2 == 0 and levels[-1] > 1:
        levels.append(levels[-1] // 2)
    levels.reverse()
    start = next((n for n in reversed(levels) if grid_size(n) <= cap), None)
    if start is None:
        raise ArgumentError(f"no dyadic coarsening of 1/{n_target} fits the cap {cap}")
    counts, key, evaluated = _exhaustive_counts(ev, start)
    n = start
    while True:
        counts, key, ev_count = _local_search(ev, counts, n, key, local_cap)
        evaluated += ev_count
        if n == n_target:
            break
        counts = counts * 2
        n *= 2
    rate, viol = key
    feasible = viol <= 0
    return GridOracleResult(rate if feasible else math.inf, feasible,
                            counts / n if feasible else None, resolution, False, evaluated)


def _key(rate, viol):
    # lexicographic: feasibility first (violation clipped at 0), then rate
    return (np.maximum(viol, 0.0), rate)


def _exhaustive_counts(ev: _GridEvaluator, n: int):
    rows = _compositions(n, ev.n_hat)
    n_s = ev.p.size
    best = None
    total = 0
    idx_iter = itertools.product(range(len(rows)), repeat=n_s)
    chunk = 50_000
    while True:
        block = list(itertools.islice(idx_iter, chunk))
        if not block:
            break
        idx = np.array(block)
        w = rows[idx] / n
        rate, viol = ev.evaluate(w)
        total += len(block)
        v, r = _key(rate, viol)
        order = np.lexsort((r, v))[0]
        cand = (float(v[order]), float(r[order]))
        if best is None or cand < best[0]:
            best = (cand, rows[idx[order]].copy(), (float(rate[order]), float(viol[order])))
    return best[1], best[2], total


def _exhaustive(ev: _GridEvaluator, n: int, resolution: float) -> GridOracleResult:
    counts, (rate, viol), total = _exhaustive_counts(ev, n)
    feasible = viol <= 0
    return GridOracleResult(rate if feasible else math.inf, feasible,
                            counts / n if feasible else None, resolution, True, total)


def _moves(n_hat: int, radius: int) -> np.ndarray:
    rng = range(-radius, radius + 1)
    return np.array([v for v in itertools.product(rng, repeat=n_hat) if sum(v) == 0], dtype=np.int64)


def _local_search(ev: _GridEvaluator, counts: np.ndarray, n: int, key, local_cap: int):
    n_s, n_hat = counts.shape
    radius = 1
    while radius < n and len(_moves(n_hat, radius + 1)) ** n_s <= local_cap:
        radius += 1
    moves = _moves(n_hat, radius)
    rate0, viol0 = ev.evaluate((counts / n)[None])
    best = (float(max(viol0[0], 0.0)), float(rate0[0]))
    best_raw = (float(rate0[0]), float(viol0[0]))
    evaluated = 0
    while True:
        improved = False
        combos = itertools.product(range(len(moves)), repeat=n_s)
        while True:
            block = list(itertools.islice(combos, 50_000))
            if not block:
                break
            cand = counts[None] + moves[np.array(block)]
            ok = np.all(cand >= 0, axis=(1, 2))
            cand = cand[ok]
            if cand.size == 0:
                continue
            rate, viol = ev.evaluate(cand / n)
            evaluated += len(cand)
            v, r = _key(rate, viol)
            j = np.lexsort((r, v))[0]
            c_key = (float(v[j]), float(r[j]))
            if c_key < (best[0], best[1] - 1e-15):
                best, best_raw, new_counts = c_key, (float(rate[j]), float(viol[j])), cand[j].copy()
                improved = True
        if not improved:
            break
        counts = new_counts
    return counts, best_raw, evaluated
