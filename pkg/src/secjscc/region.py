"""Outer and inner bounds on the achievable equivocation region.

For a concrete source model, wiretap channel and operating tuple
(r, key rates, D, P, Delta) this module evaluates

* the necessary conditions (``converse_check``)

      R(D, P) <= r C
      Delta_A <= H(S_A) - R(D_A, P_A) + Rkey_A + r * max_W [I(W;Y) - I(W;Z)]

* the sufficient conditions for a caller-supplied layered auxiliary
  (``achievability_check``)

      Rkey_A   <= r I(W_A; Z)
      R(D_A,P_A) <= r [I(W_A; Y) - I(W_A; Z)] + Rkey_A
      Delta_A  <= min(H(S_A), H(S_A) - R(D_A,P_A) + Rkey_A + r [I(W_A;Y) - I(W_A;Z)])

* an explicit per-layer codebook rate allocation (``feasible_rate_allocation``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, ValidationError
from .lattice import (SourceModel, build_lattice, parse_subset_label, subset_entropy,
                      subset_label)
from .rdpf import RdpfProblem, RdpfSolution, SolverConfig, Status, restrict, solve_rdpf
from .wiretap import (LayeredAuxiliary, LayerTerm, WiretapChannel, channel_capacity,
                      layered_mi, secrecy_term)

SLACK_TOL = 1e-9


@dataclass(frozen=True)
class RegionConfig:
    solver: SolverConfig = SolverConfig()
    seed: int = 0
    restarts: int = 64
    capacity_tol: float = 1e-9


@dataclass(frozen=True, eq=False)
class SystemTuple:
    r: float
    key_rates: Mapping[frozenset, float] = field(default_factory=dict)
    D: Mapping[int, float] = field(default_factory=dict)
    P: Mapping[int, float] = field(default_factory=dict)
    deltas: Mapping[frozenset, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.r > 0:
            raise ValidationError(f"r must be > 0, got {self.r}")
        keys = {frozenset(a): float(v) for a, v in self.key_rates.items()}
        deltas = {frozenset(a): float(v) for a, v in self.deltas.items()}
        for name, mp in (("key rate", keys), ("delta", deltas)):
            for a, v in mp.items():
                if not v >= 0:
                    raise ValidationError(f"{name} for {subset_label(a)} must be >= 0, got {v}")
        object.__setattr__(self, "key_rates", keys)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "D", {int(i): float(v) for i, v in self.D.items()})
        object.__setattr__(self, "P", {int(i): float(v) for i, v in self.P.items()})

    def key(self, a) -> float:
        return self.key_rates.get(frozenset(a), 0.0)

    def delta(self, a) -> float:
        return self.deltas.get(frozenset(a), 0.0)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SystemTuple":
        if "r" not in data:
            raise ValidationError("missing field 'r'")
        return cls(
            r=float(data["r"]),
            key_rates={parse_subset_label(k): v for k, v in (data.get("key_rates") or {}).items()},
            D={int(k): v for k, v in (data.get("D") or {}).items()},
            P={int(k): v for k, v in (data.get("P") or {}).items()},
            deltas={parse_subset_label(k): v for k, v in (data.get("deltas") or {}).items()},
        )

    def to_dict(self) -> dict:
        return {"r": self.r,
                "key_rates": {subset_label(a): v for a, v in sorted(self.key_rates.items(), key=_ok)},
                "D": {str(i): v for i, v in sorted(self.D.items())},
                "P": {str(i): v for i, v in sorted(self.P.items())},
                "deltas": {subset_label(a): v for a, v in sorted(self.deltas.items(), key=_ok)}}


def _ok(item):
    a = sorted(item[0])
    return (len(a), a)


@dataclass(frozen=True)
class RegionEntry:
    subset: frozenset
    constraint: str            # "rate", "key" or "equivocation"
    bound_value: float
    candidate: float
    slack: float
    satisfied: bool
    status: str = "ok"         # "ok", "Unverified" (solver iteration limit) or "Infeasible"

    def to_dict(self) -> dict:
        def num(x):
            return None if not math.isfinite(x) else x
        return {"subset": subset_label(self.subset), "constraint": self.constraint,
                "bound_value": num(self.bound_value), "candidate": self.candidate,
                "slack": num(self.slack), "satisfied": self.satisfied, "status": self.status}


@dataclass(frozen=True)
class RegionReport:
    side: str
    entries: Tuple[RegionEntry, ...]

    @property
    def overall(self) -> bool:
        return all(e.satisfied for e in self.entries)

    def entry(self, a, constraint: str = "equivocation") -> RegionEntry:
        a = frozenset(a)
        for e in self.entries:
            if e.subset == a and e.constraint == constraint:
                return e
        raise KeyError((subset_label(a), constraint))

    def to_dict(self) -> dict:
        return {"side": self.side, "overall": self.overall,
                "entries": [e.to_dict() for e in self.entries]}


def _entry(a, constraint, bound, candidate, status="ok") -> RegionEntry:
    slack = bound - candidate
    ok = bool(slack >= -SLACK_TOL) and status != "Infeasible"
    return RegionEntry(frozenset(a), constraint, float(bound), float(candidate), float(slack), ok, status)


# --------------------------------------------------------------------------
# shared pieces


def _problem(model: SourceModel, tup: Optional[SystemTuple]) -> RdpfProblem:
    prob = RdpfProblem.from_model(model)
    if tup is None:
        return prob
    extra = set(tup.P) - set(model.perception.metrics)
    if extra:
        raise ArgumentError(f"perception threshold given for modalities {sorted(extra)} without a metric")
    return prob.with_thresholds(D=tup.D or None, P=tup.P or None)


def _source_rates(model: SourceModel, tup: Optional[SystemTuple], cfg: RegionConfig
                  ) -> Dict[frozenset, RdpfSolution]:
    prob = _problem(model, tup)
    lat = build_lattice(model.source.m)
    return {a: solve_rdpf(restrict(prob, a), cfg.solver) for a in lat}


def _rate_status(sol: RdpfSolution) -> str:
    if sol.status == Status.INFEASIBLE:
        return "Infeasible"
    return "ok" if sol.status == Status.CONVERGED else "Unverified"


def source_rate_table(model: SourceModel, tup: Optional[SystemTuple] = None,
                      cfg: RegionConfig = RegionConfig()) -> Dict[frozenset, float]:
    """R(D_A, P_A) for every subset A (inf when the constraints cannot be met)."""
    return {a: s.rate for a, s in _source_rates(model, tup, cfg).items()}


# --------------------------------------------------------------------------
# bounds


def converse_check(model: SourceModel, ch: WiretapChannel, tup: SystemTuple,
                   cfg: RegionConfig = RegionConfig()) -> RegionReport:
    src = model.source
    rates = _source_rates(model, tup, cfg)
    cap = channel_capacity(ch, tol=cfg.capacity_tol).value
    sec = secrecy_term(ch, seed=cfg.seed, restarts=cfg.restarts).value
    lat = build_lattice(src.m)
    full = lat.full
    entries = [_entry(full, "rate", tup.r * cap, rates[full].rate, _rate_status(rates[full]))]
    for a in lat:
        sol = rates[a]
        bound = subset_entropy(src, a) - sol.rate + tup.key(a) + tup.r * sec
        entries.append(_entry(a, "equivocation", bound, tup.delta(a), _rate_status(sol)))
    return RegionReport("converse", tuple(entries))


def achievability_check(model: SourceModel, ch: WiretapChannel, aux: LayeredAuxiliary,
                        tup: SystemTuple, cfg: RegionConfig = RegionConfig()) -> RegionReport:
    src = model.source
    if aux.lattice.m != src.m:
        raise ArgumentError(f"auxiliary has {aux.lattice.m} modalities, source has {src.m}")
    rates = _source_rates(model, tup, cfg)
    entries = []
    for a in aux.lattice:
        mi = layered_mi(aux, ch, a)
        sol = rates[a]
        st = _rate_status(sol)
        excess = tup.r * (mi.i_y - mi.i_z)
        h = subset_entropy(src, a)
        entries.append(_entry(a, "key", tup.r * mi.i_z, tup.key(a)))
        entries.append(_entry(a, "rate", excess + tup.key(a), sol.rate, st))
        entries.append(_entry(a, "equivocation", min(h, h - sol.rate + tup.key(a) + excess),
                              tup.delta(a), st))
    return RegionReport("achievable", tuple(entries))


def max_equivocation(model: SourceModel, ch: WiretapChannel, a, r: float, key_rate: float,
                     D: Optional[Mapping[int, float]] = None, P: Optional[Mapping[int, float]] = None,
                     side: str = "converse", aux: Optional[LayeredAuxiliary] = None,
                     cfg: RegionConfig = RegionConfig()) -> float:
    """Right-hand side of the equivocation bound for subset ``a``."""
    side = side.lower()
    if side not in ("converse", "achievable"):
        raise ArgumentError(f"side must be 'converse' or 'achievable', got {side!r}")
    if side == "achievable" and aux is None:
        raise ArgumentError("the achievable side needs a layered auxiliary")
    if r <= 0 or key_rate < 0:
        raise ArgumentError("need r > 0 and key_rate >= 0")
    a = frozenset(a)
    tup = SystemTuple(r, {a: key_rate}, D or {}, P or {}, {})
    rate = solve_rdpf(restrict(_problem(model, tup), a), cfg.solver).rate
    h = subset_entropy(model.source, a)
    if side == "converse":
        return h - rate + key_rate + r * secrecy_term(ch, seed=cfg.seed, restarts=cfg.restarts).value
    mi = layered_mi(aux, ch, a)
    return min(h, h - rate + key_rate + r * (mi.i_y - mi.i_z))


# --------------------------------------------------------------------------
# layered rate allocation


@dataclass(frozen=True)
class LayerRates:
    r0: float          # source index bits carried by the private channel field
    r1: float          # encrypted source index bits (= sub-key rate)
    rp0: float         # channel field carrying the encrypted index
    rp1: float         # private channel field
    r_decoy: float     # decoy index rate
    r_kappa: float     # sub-key rate


@dataclass(frozen=True)
class RateAllocation:
    layers: Mapping[frozenset, LayerRates]
    feasible: bool
    violated: Optional[str] = None
    violations: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "violated": self.violated,
                "violations": list(self.violations),
                "layers": {subset_label(a): vars(v) for a, v in
                           sorted(self.layers.items(), key=_ok)}}


def subkey_rates(key_rates: Mapping[frozenset, float], m: int) -> Dict[frozenset, float]:
    """Solve Rkey_A = sum over A' within A of Rkappa_A' by Moebius inversion."""
    lat = build_lattice(m)
    out = {}
    for a in lat:
        out[a] = sum((-1) ** (len(a) - len(b)) * float(key_rates.get(b, 0.0)) for b in lat.down_set(a))
    return out


def _layer_pair(v) -> Tuple[float, float]:
    if isinstance(v, LayerTerm):
        return v.i_y, v.i_z
    iy, iz = v
    return float(iy), float(iz)


def feasible_rate_allocation(src_rates: Mapping, layer_mi: Mapping, r: float,
                             key_rates: Mapping, eps: float = 0.0, tol: float = SLACK_TOL
                             ) -> RateAllocation:
    """Per-layer codebook rates meeting the layered scheme's constraints.

    ``src_rates`` maps each subset A to the source rate the layers within A
    must cover; ``layer_mi`` maps each subset to its per-layer (I_Y, I_Z)
    pair (or a ``LayerTerm``); ``key_rates`` maps subsets to Rkey_A.
    ``eps`` is the finite-length back-off applied to every constraint.

    Constraints, per layer A (all rates >= 0):
        private field      rp1 = max(I_Y - I_Z - eps, 0), needs I_Y >= I_Z
        public + decoy     rp0 + r_decoy = max(I_Z - eps, 0)
        key fit            r1 = Rkappa_A <= r (rp0 + r_decoy)
        private fit        r0 <= r rp1
        covering           sum over A' within A of (r0 + r1) >= src_rates[A] + eps
    The private source rate is set to its maximum r * rp1, which is optimal
    for every covering constraint at once.
    """
    if not r > 0:
        raise ArgumentError("r must be > 0")
    layers_in = {frozenset(a): _layer_pair(v) for a, v in layer_mi.items()}
    srcs = {frozenset(a): float(v) for a, v in src_rates.items()}
    keys = {frozenset(a): float(v) for a, v in key_rates.items()}
    for name, mp in (("source rate", srcs), ("key rate", keys)):
        for a, v in mp.items():
            if v < 0 or math.isnan(v):
                raise ArgumentError(f"{name} for {subset_label(a)} is negative")
    for a, (iy, iz) in layers_in.items():
        if iy < -tol or iz < -tol:
            raise ArgumentError(f"negative mutual information for layer {subset_label(a)}")
    if eps < 0:
        raise ArgumentError("eps must be >= 0")
    m = max((max(a) for a in list(layers_in) + list(srcs) + list(keys)), default=1)
    lat = build_lattice(m)
    kappa = subkey_rates(keys, m)
    violations: List[str] = []
    layers: Dict[frozenset, LayerRates] = {}
    for a in lat:
        lab = subset_label(a)
        iy, iz = layers_in.get(a, (0.0, 0.0))
        if kappa[a] < -tol:
            violations.append(f"sub-key rate for {{{lab}}} is {kappa[a]:.6g} < 0 (Moebius residual)")
        if iy - iz < -tol:
            violations.append(f"private channel rate for {{{lab}}}: I_Y - I_Z = {iy - iz:.6g} < 0")
        # The back-off only shrinks a rate; a rate backed off below zero is an empty field.
        rp1 = max(iy - iz - eps, 0.0)
        pub = max(iz - eps, 0.0)
        rk = max(kappa[a], 0.0)
        if rk > r * pub + tol:
            violations.append(f"key fit for {{{lab}}}: sub-key rate {rk:.6g} > r*(I_Z - eps) = {r * pub:.6g}")
        rp0 = min(rk / r, pub)
        layers[a] = LayerRates(r0=r * rp1, r1=rk, rp0=rp0, rp1=rp1, r_decoy=pub - rp0, r_kappa=rk)
    for a in lat:
        need = srcs.get(a, 0.0)
        if need <= tol:
            continue                      # nothing to describe, no back-off needed
        need += eps
        have = sum(layers[b].r0 + layers[b].r1 for b in lat.down_set(a))
        if have < need - tol:
            violations.append(f"covering for {{{subset_label(a)}}}: layered source rate {have:.6g} "
                              f"< required {need:.6g}")
    return RateAllocation(layers, not violations, violations[0] if violations else None, tuple(violations))


def achievability_rate_conditions(src_rates: Mapping, totals: Mapping, r: float,
                                  key_rates: Mapping, tol: float = SLACK_TOL) -> bool:
    """Direct test of the two rate conditions of the achievability bound.

    ``totals`` maps each subset A to (I(W_A; Y), I(W_A; Z)).
    """
    for a, (iy, iz) in totals.items():
        a = frozenset(a)
        k = float(key_rates.get(a, 0.0))
        if k > r * iz + tol:
            return False
        if float(src_rates.get(a, 0.0)) > r * (iy - iz) + k + tol:
            return False
    return True


def allocation_inputs(aux: LayeredAuxiliary, ch: WiretapChannel):
    """(per-layer terms, totals) as consumed by the two functions above."""
    full = layered_mi(aux, ch, aux.lattice.full)
    per_layer = {t.subset: t for t in full.per_layer}
    totals = {}
    for a in aux.lattice:
        mi = layered_mi(aux, ch, a)
        totals[a] = (mi.i_y, mi.i_z)
    return per_layer, totals
