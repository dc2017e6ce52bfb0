"""Random instance generators and fixed instances shared by the test modules."""
from __future__ import annotations

import numpy as np

from secjscc.lattice import (DistortionSpec, MultimodalSource, PerceptionSpec, SourceModel,
                             build_lattice, modified_distortion, subset)
from secjscc.prob import JointPmf
from secjscc.rdpf import RdpfProblem
from secjscc.region import SystemTuple, allocation_inputs, feasible_rate_allocation
from secjscc.simulator import LayeredTestChannels
from secjscc.wiretap import LayeredAuxiliary, WiretapChannel


def random_pmf(rng, shape, alpha=1.0, min_mass=0.0):
    p = rng.dirichlet(np.full(int(np.prod(shape)), alpha))
    if min_mass:
        p = p + min_mass
    p = p / p.sum()
    # Round-trip so sums are exact enough for strict validation.
    p[-1] = 1.0 - p[:-1].sum()
    if p[-1] < 0:
        p = np.abs(p)
        p /= p.sum()
    return p.reshape(shape)


def random_stochastic(rng, rows, cols, alpha=1.0):
    w = rng.dirichlet(np.full(cols, alpha), size=rows)
    w[:, -1] = 1.0 - w[:, :-1].sum(axis=1)
    return np.clip(w, 0, None)


def random_channel(rng, nx=2, ny=2, nz=2, alpha=1.0) -> WiretapChannel:
    return WiretapChannel(random_stochastic(rng, nx, ny, alpha), random_stochastic(rng, nx, nz, alpha))


def _threshold(rng, d, p_rows, cols_weight=None):
    """A distortion level between the smallest and the zero-rate value."""
    d_min = float(p_rows @ d.min(axis=1))
    d_max = float((p_rows @ d).min())
    return d_min + rng.uniform(0.05, 1.0) * max(d_max - d_min, 0.0)


def random_rdpf_problem(rng, perception=True) -> RdpfProblem:
    """Instances with at most 3 observed source symbols and 3 reconstruction symbols.

    Roughly a third of them have an unobserved modality, constrained through
    the modified distortion.
    """
    kind = rng.integers(3)
    if kind < 2:
        ns = int(rng.integers(2, 4))
        nh = int(rng.integers(2, 4)) if kind == 0 else ns
        p = random_pmf(rng, (ns,), min_mass=0.02)
        src = MultimodalSource(JointPmf(p), {1})
        d = rng.uniform(0, 1, size=(ns, nh)).round(3)
        dist = DistortionSpec({1: d}, {1: _threshold(rng, d, p)})
        perc = PerceptionSpec.none()
        if perception and nh == ns and rng.uniform() < 0.6:
            metric = "tv" if rng.uniform() < 0.5 else "kl"
            perc = PerceptionSpec({1: metric}, {1: float(rng.uniform(0, 0.3))})
        return RdpfProblem(src, dist, perc, subset(1), (nh,))
    n1 = int(rng.integers(2, 4))
    nh = int(rng.integers(2, 4))
    p = random_pmf(rng, (n1, 2), min_mass=0.02)
    src = MultimodalSource(JointPmf(p), {1})
    d2 = rng.uniform(0, 1, size=(2, nh)).round(3)
    dh = modified_distortion(src, 2, d2)
    th = _threshold(rng, dh, p.sum(axis=1))
    dist = DistortionSpec({2: d2}, {2: th})
    return RdpfProblem(src, dist, PerceptionSpec.none(), subset(2), (1, nh))


def random_source_model(rng, m=None) -> SourceModel:
    m = int(rng.integers(1, 3)) if m is None else m
    alph = tuple(int(a) for a in rng.integers(2, 4, size=m))
    p = random_pmf(rng, alph, min_mass=0.01)
    observed = set(range(1, m + 1))
    if m > 1 and rng.uniform() < 0.3:
        observed.discard(int(rng.integers(1, m + 1)))
    src = MultimodalSource(JointPmf(p), observed)
    mats = {i: 1.0 - np.eye(alph[i - 1]) for i in range(1, m + 1)}
    th = {i: float(rng.uniform(0.05, 0.6)) for i in range(1, m + 1)}
    return SourceModel(src, DistortionSpec(mats, th), PerceptionSpec.none())


def random_aux(rng, m, nx, max_size=2) -> LayeredAuxiliary:
    lat = build_lattice(m)
    sizes = tuple(int(s) for s in rng.integers(1, min(max_size, nx) + 1, size=len(lat)))
    joint = random_pmf(rng, sizes + (nx,), alpha=0.7)
    return LayeredAuxiliary(lat, JointPmf(joint))


def random_key_rates(rng, m, high=0.3) -> dict:
    """Key rates Rkey_A = sum of independent non-negative sub-key rates over A' within A."""
    lat = build_lattice(m)
    kappa = {a: float(rng.uniform(0, high)) for a in lat}
    return {a: sum(kappa[b] for b in lat.down_set(a)) for a in lat}


def random_region_instance(seed):
    """(source model, wiretap channel, layered auxiliary, tuple) for region checks."""
    rng = np.random.default_rng(seed)
    model = random_source_model(rng, m=int(rng.integers(1, 3)))
    nx = int(rng.integers(2, 4))
    ch = random_channel(rng, nx, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    aux = random_aux(rng, model.source.m, nx)
    return model, ch, aux, random_tuple(rng, model)


def random_tuple(rng, model: SourceModel) -> SystemTuple:
    lat = build_lattice(model.source.m)
    keys = {}
    # Nested key rates: each subset gets at least the sum over its parents' sub-keys.
    for a in lat:
        base = max((keys[b] for b in lat if b < a), default=0.0)
        keys[a] = base + float(rng.uniform(0, 0.5))
    deltas = {a: float(rng.uniform(0, 1.5)) for a in lat}
    return SystemTuple(float(rng.uniform(0.5, 2.0)), keys, dict(model.distortion.thresholds), {}, deltas)


# --------------------------------------------------------------------------
# the binary two-modality simulation instance

HAMMING = 1.0 - np.eye(2)
PAIR_JOINT = np.array([[0.81, 0.09], [0.01, 0.09]])
PAIR_D = {1: 0.1, 2: 0.25}


def bec_pair(e_bob=0.2, e_eve=31 / 60) -> WiretapChannel:
    def bec(e):
        return np.array([[1 - e, 0.0, e], [0.0, 1 - e, e]])
    return WiretapChannel(bec(e_bob), bec(e_eve))


def pair_instance():
    """(test channels, wiretap channel, rate allocation) of the binary m=2 scheme.

    Layer {1} carries a quantised copy of S1; the reconstruction of S2 is
    S1 as well.  Half of the layer's source bits are one-time padded.
    """
    src = MultimodalSource(JointPmf(PAIR_JOINT), {1, 2})
    lat = build_lattice(2)
    a1, a2, a12 = subset(1), subset(2), subset(1, 2)
    jw = np.zeros((2, 1, 1, 2))
    jw[0, 0, 0, 0] = jw[1, 0, 0, 1] = 0.5
    aux = LayeredAuxiliary(lat, JointPmf(jw))
    tc = LayeredTestChannels(src, {a1: np.array([0, 1]), a2: np.array([0, 0]),
                                   a12: np.array([[0, 0], [1, 1]])},
                             {1: np.array([[0, 0], [1, 1]]), 2: np.array([[0, 1]])}, aux)
    ch = bec_pair()
    per_layer, _ = allocation_inputs(aux, ch)
    alloc = feasible_rate_allocation({}, per_layer, 3.0, {a1: 0.5, a12: 0.5}, eps=0.15)
    return tc, ch, alloc
