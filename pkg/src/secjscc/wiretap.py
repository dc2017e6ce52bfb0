"""Discrete memoryless wiretap channel, capacity and the secrecy term.

The channel is kept as its two marginal transition matrices p(y|x) and
p(z|x); every quantity computed here depends on nothing else.

The secrecy term max I(W;Y) - I(W;Z) over joints p(w, x) is non-concave.
``secrecy_term`` runs projected gradient ascent from many seeded starts and
returns the best value found (a lower bound on the maximum).
``secrecy_oracle_grid`` is an independent check for |X| <= 3 that uses the
identity

    max_{p(w,x)} I(W;Y) - I(W;Z) = max_{p_X} f(p_X) - conv f (p_X),
    f(p) = H(p P_Y) - H(p P_Z),

with ``conv f`` the lower convex envelope of f over the input simplex.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import ArgumentError, ResourceError, ValidationError
from .lattice import SubsetLattice, build_lattice, parents
from .prob import (MAX_ENTRIES, ConditionalPmf, JointPmf, SUM_TOL, entropy_array,
                   mutual_information_array)

LN2 = math.log(2.0)
N_RESTARTS = 64


class CapacityStatus(str, enum.Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"


@dataclass(frozen=True, eq=False)
class WiretapChannel:
    py_given_x: ConditionalPmf
    pz_given_x: ConditionalPmf

    def __post_init__(self):
        for name in ("py_given_x", "pz_given_x"):
            v = getattr(self, name)
            if not isinstance(v, ConditionalPmf):
                v = ConditionalPmf(np.asarray(v, dtype=float))
                object.__setattr__(self, name, v)
            if v.rows.ndim != 2:
                raise ValidationError(f"{name} must be a |X| x |out| matrix")
        if self.py_given_x.rows.shape[0] != self.pz_given_x.rows.shape[0]:
            raise ValidationError("p(y|x) and p(z|x) disagree on |X|")

    @property
    def x_alpha(self) -> int:
        return self.py_given_x.rows.shape[0]

    @property
    def y_alpha(self) -> int:
        return self.py_given_x.rows.shape[1]

    @property
    def z_alpha(self) -> int:
        return self.pz_given_x.rows.shape[1]

    @property
    def py(self) -> np.ndarray:
        return self.py_given_x.rows

    @property
    def pz(self) -> np.ndarray:
        return self.pz_given_x.rows

    @classmethod
    def from_joint(cls, pyz_given_x) -> "WiretapChannel":
        """Build from p(y, z | x) with shape (|X|, |Y|, |Z|); only the marginals are kept."""
        arr = ConditionalPmf(np.asarray(pyz_given_x, dtype=float), n_given=1).rows
        if arr.ndim != 3:
            raise ValidationError("pyz_given_x must have shape (|X|, |Y|, |Z|)")
        return cls(ConditionalPmf(arr.sum(axis=2)), ConditionalPmf(arr.sum(axis=1)))

    @classmethod
    def from_dict(cls, data: Mapping) -> "WiretapChannel":
        if "pyz_given_x" in data:
            ch = cls.from_joint(data["pyz_given_x"])
        else:
            for key in ("py_given_x", "pz_given_x"):
                if key not in data:
                    raise ValidationError(f"missing field '{key}'")
            ch = cls(ConditionalPmf(np.asarray(data["py_given_x"], dtype=float)),
                     ConditionalPmf(np.asarray(data["pz_given_x"], dtype=float)))
        for key, val in (("x", ch.x_alpha), ("y", ch.y_alpha), ("z", ch.z_alpha)):
            if key in data and int(data[key]) != val:
                raise ValidationError(f"field '{key}' = {data[key]} but matrices give {val}")
        return ch

    def to_dict(self) -> dict:
        return {"x": self.x_alpha, "y": self.y_alpha, "z": self.z_alpha,
                "py_given_x": self.py.tolist(), "pz_given_x": self.pz.tolist()}


def load_channel(path) -> WiretapChannel:
    with open(Path(path)) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return WiretapChannel.from_dict(data)


def bsc(eps: float) -> ConditionalPmf:
    return ConditionalPmf(np.array([[1 - eps, eps], [eps, 1 - eps]]))


def degraded_bsc_pair(eps_y: float, eps_z: float) -> WiretapChannel:
    """X -> BSC(eps_y) -> Y and X -> BSC(eps_z) -> Z with eps_y <= eps_z <= 1/2."""
    if not 0 <= eps_y <= eps_z <= 0.5:
        raise ArgumentError("need 0 <= eps_y <= eps_z <= 1/2")
    return WiretapChannel(bsc(eps_y), bsc(eps_z))


# --------------------------------------------------------------------------
# capacity


@dataclass(frozen=True, eq=False)
class CapacityResult:
    value: float
    input_pmf: np.ndarray
    upper_bound: float
    status: CapacityStatus
    iterations: int

    def __float__(self):
        return self.value


def _rows_kl(w: np.ndarray, q: np.ndarray) -> np.ndarray:
    """D(w_x || q) in bits for every row x."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(w > 0, w * np.log2(np.where(w > 0, w, 1.0) / np.where(q > 0, q, 1.0)), 0.0)
    return t.sum(axis=1)


def channel_capacity(ch, tol: float = 1e-6, max_iters: int = 100_000) -> CapacityResult:
    """max_{p_X} I(X;Y) for the legitimate link by Blahut-Arimoto.

    ``ch`` may be a WiretapChannel or a transition matrix.  Stops when the
    upper bound max_x D(p(.|x) || q) minus the achieved I(X;Y) is below ``tol``.
    """
    w = ch.py if isinstance(ch, WiretapChannel) else np.asarray(getattr(ch, "rows", ch), dtype=float)
    nx = w.shape[0]
    if np.allclose(w, w[0:1], atol=0, rtol=0):
        return CapacityResult(0.0, np.full(nx, 1.0 / nx), 0.0, CapacityStatus.CONVERGED, 0)
    p = np.full(nx, 1.0 / nx)
    it = 0
    while True:
        q = p @ w
        d = _rows_kl(w, q)
        lower = float(p @ d)
        upper = float(d.max())
        it += 1
        if upper - lower < tol or it >= max_iters:
            break
        p = p * np.exp2(d - d.max())
        p /= p.sum()
    status = CapacityStatus.CONVERGED if upper - lower < tol else CapacityStatus.ITER_LIMIT
    return CapacityResult(max(lower, 0.0), p, upper, status, it)


# --------------------------------------------------------------------------
# secrecy term


@dataclass(frozen=True, eq=False)
class SecrecySolution:
    value: float
    p_w: np.ndarray
    p_x_given_w: np.ndarray
    restarts_used: int
    oracle_gap: Optional[float] = None


def secrecy_objective(a: np.ndarray, py: np.ndarray, pz: np.ndarray) -> float:
    """I(W;Y) - I(W;Z) in bits for a joint a(w, x)."""
    pwy = np.asarray(a) @ py
    pwz = np.asarray(a) @ pz
    return (entropy_array(pwy.sum(axis=0)) - entropy_array(pwy)
            - entropy_array(pwz.sum(axis=0)) + entropy_array(pwz))


def _objective_and_grad(a, py, pz):
    """Objective (bits) and gradient for a batch of joints a[r, w, x]."""
    pwy = a @ py
    pwz = a @ pz
    p_y = pwy.sum(axis=1, keepdims=True)
    p_z = pwz.sum(axis=1, keepdims=True)
    # Clipping the log-ratio where p(w, y) = 0 keeps the ascent direction finite;
    # those cells carry zero mass so the objective is unaffected.
    ly = np.maximum(np.log2(np.maximum(pwy, 1e-300) / np.maximum(p_y, 1e-300)), -60.0)
    lz = np.maximum(np.log2(np.maximum(pwz, 1e-300) / np.maximum(p_z, 1e-300)), -60.0)
    val = np.sum(pwy * ly, axis=(1, 2)) - np.sum(pwz * lz, axis=(1, 2))
    grad = ly @ py.T - lz @ pz.T
    return val, grad


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex along the last axis."""
    v = np.asarray(v, dtype=float)
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, v.shape[-1] + 1)
    rho = np.sum(u - css / k > 0, axis=-1, keepdims=True)
    theta = np.take_along_axis(css, rho - 1, axis=-1) / rho
    return np.maximum(v - theta, 0.0)


def _ascend(a, py, pz, iters=5000, tol=1e-13):
    """Projected gradient ascent with backtracking, run on a batch of starts."""
    r, nw, nx = a.shape
    val, g = _objective_and_grad(a, py, pz)
    step = np.ones(r)
    active = np.ones(r, dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        cand = project_simplex((a[idx] + step[idx, None, None] * g[idx]).reshape(idx.size, -1))
        cand = cand.reshape(idx.size, nw, nx)
        cval, cg = _objective_and_grad(cand, py, pz)
        lin = np.sum(g[idx] * (cand - a[idx]), axis=(1, 2))
        ok = (cval > val[idx]) & (cval >= val[idx] + 1e-4 * lin)
        gain = cval - val[idx]
        acc = idx[ok]
        a[acc], val[acc], g[acc] = cand[ok], cval[ok], cg[ok]
        step[acc] *= 2.0
        rej = idx[~ok]
        step[rej] *= 0.5
        done = np.zeros(r, dtype=bool)
        done[acc[gain[ok] <= tol]] = True
        done[rej[step[rej] < 1e-12]] = True
        active &= ~done
    return a, val


def _structured_starts(nx: int, w_size: int, p_cap: np.ndarray) -> List[np.ndarray]:
    starts = []
    if w_size >= nx:
        a = np.zeros((w_size, nx))
        a[np.arange(nx), np.arange(nx)] = p_cap
        starts.append(a)
        a = np.zeros((w_size, nx))
        a[np.arange(nx), np.arange(nx)] = 1.0 / nx
        starts.append(a)
    a = np.zeros((w_size, nx))
    for x in range(nx):
        a[x % w_size, x] = 1.0 / nx
    starts.append(a)
    return starts


def secrecy_term(ch: WiretapChannel, w_size: Optional[int] = None, seed: int = 0,
                 restarts: int = N_RESTARTS, oracle_resolution: Optional[float] = None) -> SecrecySolution:
    """Best I(W;Y) - I(W;Z) found over joints p(w, x) with |W| = ``w_size``.

    The result is clamped at 0 (a constant W is always admissible).  With
    ``oracle_resolution`` set, the distance to the grid oracle is reported.
    """
    nx = ch.x_alpha
    w_size = nx if w_size is None else int(w_size)
    if not 1 <= w_size <= nx:
        raise ArgumentError(f"w_size must be in 1..|X|={nx}, got {w_size}")
    py, pz = ch.py, ch.pz
    best_a = np.full((w_size, nx), 1.0 / (w_size * nx))
    best = 0.0
    used = 0
    degenerate = w_size == 1 or channel_capacity(py).value <= 1e-12 or np.array_equal(py, pz)
    if not degenerate:
        cap = channel_capacity(py)
        starts = _structured_starts(nx, w_size, cap.input_pmf)
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(restarts)]
        starts += [r.dirichlet(np.full(w_size * nx, 0.5)).reshape(w_size, nx) for r in rngs]
        if w_size > 2:
            # The best joint for one fewer auxiliary symbol, padded with an empty
            # row, is admissible here, so the value cannot fall as |W| grows.
            smaller = secrecy_term(ch, w_size - 1, seed=seed, restarts=restarts)
            if smaller.value > 0:
                starts.append(np.vstack([smaller.p_w[:, None] * smaller.p_x_given_w,
                                         np.zeros((1, nx))]))
        a, vals = _ascend(np.stack(starts), py, pz)
        used = len(starts)
        j = int(np.argmax(vals))
        # Small gains stop the batch early on flat objectives, so the winner
        # gets a longer run with a finer stopping threshold.
        a_j, v_j = _ascend(a[j:j + 1].copy(), py, pz, iters=3000, tol=1e-16)
        a[j], vals[j] = a_j[0], v_j[0]
        if vals[j] > best:
            best, best_a = float(vals[j]), a[j]
    p_w = best_a.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(p_w[:, None] > 0, best_a / np.where(p_w[:, None] > 0, p_w[:, None], 1.0), 1.0 / nx)
    gap = None
    if oracle_resolution is not None:
        gap = secrecy_oracle_grid(ch, oracle_resolution).lower - max(best, 0.0)
    return SecrecySolution(max(best, 0.0), p_w, cond, used, gap)


# --------------------------------------------------------------------------
# grid oracle


@dataclass(frozen=True)
class SecrecyOracleResult:
    lower: float           # achieved by an explicit gridded (p_W, p_X|W)
    upper: float           # lower + 2 * modulus of continuity of f at grid scale
    argmax_input: Tuple[float, ...]
    points: int


def _simplex_grid(n: int, k: int) -> np.ndarray:
    if k == 1:
        return np.ones((1, 1))
    i = np.arange(n + 1)
    if k == 2:
        return np.stack([i, n - i], axis=1) / n
    pts = [(a, b, n - a - b) for a in range(n + 1) for b in range(n + 1 - a)]
    return np.array(pts, dtype=float) / n


def _f(points: np.ndarray, py: np.ndarray, pz: np.ndarray) -> np.ndarray:
    def h(q):
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.sum(np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0)), 0.0), axis=1)
    return h(points @ py) - h(points @ pz)


def _lower_envelope(coords: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Lower convex envelope of (coords, vals) evaluated at the same coords."""
    pts = np.column_stack([coords, vals])
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # All points on one hyperplane: f is affine on the grid.
        return vals.copy()
    eq = hull.equations                           # normal . x + offset <= 0 inside
    lower = eq[eq[:, -2] < -1e-12]                # outward normal points down in the value axis
    # plane: n_c . c + n_v v + off = 0  ->  v = -(n_c . c + off) / n_v
    planes = -(coords @ lower[:, :-2].T + lower[:, -1]) / lower[:, -2]
    return np.minimum(planes.max(axis=1), vals)


def secrecy_oracle_grid(ch: WiretapChannel, resolution: float, cap: int = 200_000) -> SecrecyOracleResult:
    """Independent estimate of max_{p(w,x)} I(W;Y) - I(W;Z) for |X| <= 3.

    Conditionals p(x|w) range over the grid of step ``resolution``; the best
    mixing weights for each input law are found through the lower convex
    envelope of f(p) = H(pP_Y) - H(pP_Z) over the grid points.
    """
    nx = ch.x_alpha
    if nx > 3:
        raise ArgumentError("grid oracle supports |X| <= 3")
    if not 0 < resolution <= 1:
        raise ArgumentError("resolution must be in (0, 1]")
    n = int(round(1.0 / resolution))
    if abs(n * resolution - 1.0) > 1e-9:
        raise ArgumentError("resolution must be 1/N for an integer N")
    size = math.comb(n + nx - 1, nx - 1)
    if size > cap:
        raise ArgumentError(f"grid with {size} points exceeds cap {cap}")
    grid = _simplex_grid(n, nx)
    vals = _f(grid, ch.py, ch.pz)
    if nx == 1:
        return SecrecyOracleResult(0.0, 0.0, (1.0,), 1)
    env = _lower_envelope(grid[:, :-1], vals)
    gain = vals - env
    j = int(np.argmax(gain))
    lower = max(float(gain[j]), 0.0)
    # Continuity of entropy on a grid of step 1/n: |H(p) - H(p')| <= d log2(|A|-1) + h(d)
    # for TV distance d <= (nx - 1) / (2n), applied to both entropies of f.
    d = min((nx - 1) / (2.0 * n), 0.5)
    hb = 0.0 if d <= 0 else -(d * math.log2(d) + (1 - d) * math.log2(1 - d))
    omega = 2 * (d * math.log2(max(max(ch.y_alpha, ch.z_alpha) - 1, 1)) + hb)
    return SecrecyOracleResult(lower, lower + 2 * omega, tuple(grid[j]), len(grid))


# --------------------------------------------------------------------------
# layered auxiliaries


@dataclass(frozen=True, eq=False)
class LayeredAuxiliary:
    """Joint law of one auxiliary per lattice subset and the channel input X.

    ``joint_wx`` axes are the layers in the lattice order followed by X.
    """

    lattice: SubsetLattice
    joint_wx: JointPmf

    def __post_init__(self):
        if not isinstance(self.joint_wx, JointPmf):
            object.__setattr__(self, "joint_wx", JointPmf(np.asarray(self.joint_wx, dtype=float)))
        if self.joint_wx.ndim != len(self.lattice) + 1:
            raise ValidationError(
                f"auxiliary joint has {self.joint_wx.ndim} axes, expected {len(self.lattice) + 1}")
        nx = self.joint_wx.shape[-1]
        for a, size in zip(self.lattice, self.joint_wx.shape[:-1]):
            if size > nx:
                raise ValidationError(f"layer {sorted(a)} has |W| = {size} > |X| = {nx}")

    @property
    def x_size(self) -> int:
        return self.joint_wx.shape[-1]

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return self.joint_wx.shape[:-1]

    def axis(self, a) -> int:
        return self.lattice.position(frozenset(a))

    @classmethod
    def from_dict(cls, data: Mapping, m: int) -> "LayeredAuxiliary":
        lat = build_lattice(m)
        sizes = [int(s) for s in data["sizes"]]
        nx = int(data["x"])
        flat = np.asarray(data["joint"], dtype=float)
        if len(sizes) != len(lat):
            raise ValidationError(f"field 'sizes' has {len(sizes)} entries, expected {len(lat)}")
        if flat.size != int(np.prod(sizes)) * nx:
            raise ValidationError("field 'joint' size does not match sizes and x")
        return cls(lat, JointPmf(flat.reshape(tuple(sizes) + (nx,))))

    def to_dict(self) -> dict:
        return {"sizes": list(self.layer_sizes), "x": self.x_size,
                "joint": self.joint_wx.probs.ravel().tolist()}

    @classmethod
    def independent(cls, lattice: SubsetLattice, layer_pmfs: Sequence, p_x_given_w) -> "LayeredAuxiliary":
        """Independent layers with p(x | w_1, ..., w_L) given as an array."""
        joint = np.array(1.0)
        for p in layer_pmfs:
            joint = np.multiply.outer(joint, np.asarray(p, dtype=float))
        return cls(lattice, JointPmf(joint[..., None] * np.asarray(p_x_given_w, dtype=float)))


def load_auxiliary(path, m: int) -> LayeredAuxiliary:
    with open(Path(path)) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return LayeredAuxiliary.from_dict(data, m)


@dataclass(frozen=True)
class LayerTerm:
    subset: frozenset
    i_y: float
    i_z: float


@dataclass(frozen=True)
class LayeredMI:
    i_y: float
    i_z: float
    per_layer: Tuple[LayerTerm, ...]
    chain_residual_y: float      # i_y minus the sum of the per-layer terms
    chain_residual_z: float


def _cmi(p: np.ndarray, a, b, c) -> float:
    a, b, c = tuple(a), tuple(b), tuple(c)
    if not c:
        return mutual_information_array(p, a, b)
    return (entropy_array(_marg(p, a + c)) + entropy_array(_marg(p, b + c))
            - entropy_array(_marg(p, a + b + c)) - entropy_array(_marg(p, c)))


def _marg(p, keep):
    keep = tuple(sorted(set(keep)))
    drop = tuple(i for i in range(p.ndim) if i not in keep)
    return p.sum(axis=drop) if drop else p


def layered_mi(aux: LayeredAuxiliary, ch: WiretapChannel, a) -> LayeredMI:
    """I(W_A; Y), I(W_A; Z) for W_A = all layers A' within A, plus per-layer terms.

    Each per-layer term is I(W_A'; . | W_B for the proper non-empty subsets B
    of A').  The per-layer terms add up to the totals whenever the layers
    below A are nested, e.g. for a single modality; otherwise the difference
    is returned as the chain residual.
    """
    a = frozenset(a)
    if aux.x_size != ch.x_alpha:
        raise ArgumentError(f"auxiliary |X| = {aux.x_size} but channel |X| = {ch.x_alpha}")
    if not a or a not in aux.lattice.order:
        raise ArgumentError(f"subset {sorted(a)} not in the lattice")
    p = aux.joint_wx.probs
    nl = p.ndim - 1
    layers = [b for b in aux.lattice if b <= a]
    ax = tuple(aux.axis(b) for b in layers)
    pw = _marg(p, ax + (nl,))                         # layers of A, then X
    k = len(ax)
    if pw.size * max(ch.y_alpha, ch.z_alpha) > MAX_ENTRIES:
        raise ResourceError("layered joint too large", required=pw.size * max(ch.y_alpha, ch.z_alpha),
                            cap=MAX_ENTRIES)
    pwy = np.tensordot(pw, ch.py, axes=([k], [0]))    # (w..., y)
    pwz = np.tensordot(pw, ch.pz, axes=([k], [0]))
    local = {b: i for i, b in enumerate(layers)}
    terms = []
    for b in layers:
        cond = tuple(local[c] for c in parents(b) if c in local)
        iy = _cmi(pwy, (local[b],), (k,), cond)
        iz = _cmi(pwz, (local[b],), (k,), cond)
        terms.append(LayerTerm(b, iy, iz))
    all_w = tuple(range(k))
    ty = mutual_information_array(pwy, all_w, (k,))
    tz = mutual_information_array(pwz, all_w, (k,))
    return LayeredMI(max(ty, 0.0), max(tz, 0.0), tuple(terms),
                     ty - sum(t.i_y for t in terms), tz - sum(t.i_z for t in terms))
