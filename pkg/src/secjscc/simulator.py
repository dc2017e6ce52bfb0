"""Monte Carlo simulation of the layered secure source-channel scheme.

One lattice layer per non-empty modality subset A carries

* a source index l_A = (l0, l1) into a codebook of T_A sequences built on
  top of the parent layers' codewords,
* a sub-key slice kappa_A that one-time-pads l1 into l_enc,
* a channel index (l'_1, l'_0, l~) into a codebook of W_A sequences:
  l0 fills the private field l'_1, l_enc fills the public field l'_0, and
  the decoy l~ is drawn uniformly.  Unused bits in l'_1 and l'_0 are random
  padding.

Everything is exact integer bookkeeping on bit fields, so every index map
is a bijection by construction.  The eavesdropper's posterior over all
channel indices is computed by exhaustive enumeration.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, ResourceError, ValidationError
from .lattice import MultimodalSource, SubsetLattice, build_lattice, parents, subset_label
from .prob import MAX_ENTRIES, entropy_array
from .region import LayerRates, RateAllocation
from .wiretap import LayeredAuxiliary, WiretapChannel

DEFAULT_EPS = 0.15
CODEBOOK_REFRESH = 64

# random-stream identifiers; every stream is seeded by (seed, block or trial, id)
_STREAM_CODEBOOK, _STREAM_SOURCE, _STREAM_KEY, _STREAM_ENCODER, _STREAM_CHANNEL = range(5)


def _ceil_bits(x: float) -> int:
    # guard against 2.4000000000000004 style round-off before the ceiling
    return max(int(math.ceil(x - 1e-9)), 0)


# --------------------------------------------------------------------------
# bit layout and keys


@dataclass(frozen=True)
class LayerBits:
    b0: int        # source index bits sent in the private channel field
    b1: int        # encrypted source index bits (= sub-key bits)
    c1: int        # private channel field l'_1
    c0: int        # public channel field l'_0
    cd: int        # decoy field

    def __post_init__(self):
        if min(self.b0, self.b1, self.c1, self.c0, self.cd) < 0:
            raise ArgumentError("bit counts must be >= 0")
        if self.b0 > self.c1:
            raise ArgumentError(f"{self.b0} private source bits do not fit in {self.c1} channel bits")
        if self.b1 > self.c0:
            raise ArgumentError(f"{self.b1} encrypted source bits do not fit in {self.c0} channel bits")

    @property
    def b(self) -> int:
        return self.b0 + self.b1

    @property
    def c(self) -> int:
        return self.c1 + self.c0 + self.cd


def layer_bits(rates: RateAllocation, lattice: SubsetLattice, k: int, n: int) -> Dict[frozenset, LayerBits]:
    """Ceiling of block length times rate for every field of every layer."""
    out = {}
    for a in lattice:
        lr = rates.layers.get(a, LayerRates(0, 0, 0, 0, 0, 0))
        out[a] = LayerBits(_ceil_bits(k * lr.r0), _ceil_bits(k * lr.r1), _ceil_bits(n * lr.rp1),
                           _ceil_bits(n * lr.rp0), _ceil_bits(n * lr.r_decoy))
    return out


@dataclass(frozen=True)
class IndexFields:
    l0: int
    l_enc: int
    pad1: int
    pad0: int
    decoy: int


def channel_index(bits: LayerBits, f: IndexFields) -> int:
    """Pack (l0, l_enc, padding, decoy) into the channel codeword index."""
    lp1 = f.l0 | (f.pad1 << bits.b0)
    lp0 = f.l_enc | (f.pad0 << bits.b1)
    return (((lp1 << bits.c0) | lp0) << bits.cd) | f.decoy


def split_channel_index(bits: LayerBits, j: int) -> IndexFields:
    decoy = j & ((1 << bits.cd) - 1)
    lp0 = (j >> bits.cd) & ((1 << bits.c0) - 1)
    lp1 = j >> (bits.cd + bits.c0)
    return IndexFields(lp1 & ((1 << bits.b0) - 1), lp0 & ((1 << bits.b1) - 1),
                       lp1 >> bits.b0, lp0 >> bits.b1, decoy)


def source_index(bits: LayerBits, l0: int, l1: int) -> int:
    return (l0 << bits.b1) | l1


def split_source_index(bits: LayerBits, l: int) -> Tuple[int, int]:
    return l >> bits.b1, l & ((1 << bits.b1) - 1)


@dataclass(frozen=True)
class KeySystem:
    """Secret key K split into disjoint bit slices kappa_A in lattice order."""

    lattice: SubsetLattice
    slice_bits: Mapping[frozenset, int]

    @property
    def total_bits(self) -> int:
        return sum(self.slice_bits.get(a, 0) for a in self.lattice)

    def offsets(self) -> Dict[frozenset, int]:
        out, pos = {}, 0
        for a in self.lattice:
            out[a] = pos
            pos += self.slice_bits.get(a, 0)
        return out

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, 2, size=self.total_bits, dtype=np.int64)

    def subkey(self, key_bits: np.ndarray, a) -> int:
        """kappa_A as an integer (first bit is the least significant)."""
        a = frozenset(a)
        off = self.offsets()[a]
        nb = self.slice_bits.get(a, 0)
        return int(sum(int(b) << i for i, b in enumerate(key_bits[off:off + nb])))

    def extract(self, key_bits: np.ndarray, a) -> np.ndarray:
        """K_A: concatenation of the slices of every subset of ``a``."""
        a = frozenset(a)
        offs = self.offsets()
        parts = [key_bits[offs[b]:offs[b] + self.slice_bits.get(b, 0)] for b in self.lattice.down_set(a)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------
# test channels


@dataclass(frozen=True, eq=False)
class LayeredTestChannels:
    """Deterministic quantisers psi_A, reconstruction maps g_i and a channel auxiliary.

    ``psi[A]`` has one axis per modality of A (ascending) and holds T_A
    symbols; ``recon[i]`` has one axis per layer containing i (lattice
    order) and holds reconstruction symbols of modality i.
    """

    source: MultimodalSource
    psi: Mapping[frozenset, np.ndarray]
    recon: Mapping[int, np.ndarray]
    aux: LayeredAuxiliary
    t_sizes: Mapping[frozenset, int] = field(default_factory=dict)

    def __post_init__(self):
        lat = self.lattice
        psi = {}
        for a in lat:
            if a not in self.psi:
                raise ValidationError(f"missing quantiser for layer {{{subset_label(a)}}}")
            arr = np.asarray(self.psi[a], dtype=np.int64)
            want = tuple(self.source.alphabets[i - 1] for i in sorted(a))
            if arr.shape != want:
                raise ValidationError(f"quantiser {{{subset_label(a)}}} has shape {arr.shape}, expected {want}")
            if arr.min() < 0:
                raise ValidationError("quantiser symbols must be >= 0")
            psi[a] = arr
        sizes = {a: int(self.t_sizes.get(a, psi[a].max() + 1)) for a in lat}
        recon = {}
        for i in range(1, self.source.m + 1):
            if i not in self.recon:
                raise ValidationError(f"missing reconstruction map for modality {i}")
            arr = np.asarray(self.recon[i], dtype=np.int64)
            want = tuple(sizes[a] for a in lat if i in a)
            if arr.shape != want:
                raise ValidationError(f"reconstruction map {i} has shape {arr.shape}, expected {want}")
            recon[i] = arr
        if self.aux.lattice.m != self.source.m:
            raise ValidationError("auxiliary lattice does not match the source")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "recon", recon)
        object.__setattr__(self, "t_sizes", sizes)

    @property
    def lattice(self) -> SubsetLattice:
        return self.aux.lattice

    def t_joint(self) -> np.ndarray:
        """p(s_E, t_A for every layer), s_E flattened on the first axis."""
        src = self.source
        lat = self.lattice
        e_list = sorted(src.observed)
        e_shape = tuple(src.alphabets[i - 1] for i in e_list)
        n_e = int(np.prod(e_shape))
        shape = (n_e,) + tuple(self.t_sizes[a] for a in lat)
        if int(np.prod(shape)) > MAX_ENTRIES:
            raise ResourceError("source/test-channel joint too large", required=int(np.prod(shape)),
                                cap=MAX_ENTRIES)
        out = np.zeros(shape)
        p = src.joint.probs
        for s in zip(*np.nonzero(p)):
            e_idx = np.ravel_multi_index(tuple(s[i - 1] for i in e_list), e_shape)
            t = tuple(int(self.psi[a][tuple(s[i - 1] for i in sorted(a))]) for a in lat)
            out[(e_idx,) + t] += p[s]
        return out

    def reconstruct(self, i: int, t_letters: Mapping[frozenset, np.ndarray]) -> np.ndarray:
        idx = tuple(t_letters[a] for a in self.lattice if i in a)
        return self.recon[i][idx]


def _conditional(joint: np.ndarray, cond_axes: Sequence[int], out_axis: int) -> np.ndarray:
    """p(out | cond) as a (prod cond sizes, |out|) table; unseen contexts are uniform."""
    keep = tuple(sorted(set(cond_axes) | {out_axis}))
    drop = tuple(i for i in range(joint.ndim) if i not in keep)
    m = joint.sum(axis=drop) if drop else joint
    order = [keep.index(c) for c in cond_axes] + [keep.index(out_axis)]
    m = np.transpose(m, order).reshape(-1, joint.shape[out_axis])
    tot = m.sum(axis=1, keepdims=True)
    return np.where(tot > 0, m / np.where(tot > 0, tot, 1.0), 1.0 / m.shape[1])


# --------------------------------------------------------------------------
# codebooks


@dataclass(eq=False)
class LayeredCodebook:
    """Superposition codebooks: layer A holds one sub-codebook per parent index tuple."""

    lattice: SubsetLattice
    sizes: Dict[frozenset, int]
    words: Dict[frozenset, np.ndarray]      # A -> (prod parent sizes, sizes[A], length)

    def parent_combo(self, a, indices: Mapping[frozenset, int]) -> int:
        pa = parents(a)
        if not pa:
            return 0
        return int(np.ravel_multi_index(tuple(indices[b] for b in pa), tuple(self.sizes[b] for b in pa)))

    def candidates(self, a, indices: Mapping[frozenset, int]) -> np.ndarray:
        return self.words[frozenset(a)][self.parent_combo(a, indices)]

    def codeword(self, a, indices: Mapping[frozenset, int]) -> np.ndarray:
        return self.candidates(a, indices)[indices[frozenset(a)]]


def _generate_layered(rng: np.random.Generator, lattice: SubsetLattice, sizes: Dict[frozenset, int],
                      conds: Dict[frozenset, np.ndarray], alph: Dict[frozenset, int], length: int
                      ) -> LayeredCodebook:
    total = 0
    for a in lattice:
        combos = int(np.prod([sizes[b] for b in parents(a)])) if parents(a) else 1
        total += combos * sizes[a] * max(length, 1)
    if total > MAX_ENTRIES:
        raise ResourceError(f"codebooks need {total} letters", required=total, cap=MAX_ENTRIES)
    words: Dict[frozenset, np.ndarray] = {}
    for a in lattice:
        pa = parents(a)
        psizes = tuple(sizes[b] for b in pa)
        n_combo = int(np.prod(psizes)) if pa else 1
        combo_idx = np.indices(psizes).reshape(len(pa), -1) if pa else np.zeros((0, 1), dtype=np.int64)
        # parent letters for every combo: (n_combo, len(pa), length)
        plet = np.zeros((n_combo, len(pa), length), dtype=np.int64)
        for j, b in enumerate(pa):
            pb = parents(b)
            if pb:
                pos = [pa.index(c) for c in pb]
                cb = np.ravel_multi_index(tuple(combo_idx[p] for p in pos), tuple(sizes[c] for c in pb))
            else:
                cb = np.zeros(n_combo, dtype=np.int64)
            plet[:, j, :] = words[b][cb, combo_idx[j]]
        if pa:
            ctx = np.ravel_multi_index(tuple(plet[:, j, :] for j in range(len(pa))),
                                       tuple(alph[b] for b in pa))
        else:
            ctx = np.zeros((n_combo, length), dtype=np.int64)
        cdf = np.cumsum(conds[a], axis=1)
        cdf[:, -1] = 1.0
        u = rng.random((n_combo, sizes[a], length))
        rows = cdf[ctx][:, None, :, :]                               # (combo, 1, len, |out|)
        words[a] = (u[..., None] >= rows).sum(axis=-1).astype(np.int64)
    return LayeredCodebook(lattice, dict(sizes), words)


@dataclass(eq=False)
class Codebooks:
    tc: LayeredTestChannels
    bits: Dict[frozenset, LayerBits]
    source: LayeredCodebook
    channel: LayeredCodebook
    k: int
    n: int
    # typicality references
    enc_joint: Dict[frozenset, Tuple[np.ndarray, Tuple[int, ...]]]
    ch_joint_y: Dict[frozenset, Tuple[np.ndarray, Tuple[int, ...]]]
    px_given_w: np.ndarray
    w_sizes: Tuple[int, ...]


def _layer_tables(tc: LayeredTestChannels, ch: WiretapChannel):
    lat = tc.lattice
    tj = tc.t_joint()
    t_axis = {a: i + 1 for i, a in enumerate(lat)}
    t_conds = {a: _conditional(tj, [t_axis[b] for b in parents(a)], t_axis[a]) for a in lat}
    enc = {}
    for a in lat:
        down = lat.down_set(a)
        keep = (0,) + tuple(t_axis[b] for b in down)
        drop = tuple(i for i in range(tj.ndim) if i not in keep)
        m = tj.sum(axis=drop) if drop else tj
        enc[a] = (m.ravel(), m.shape)
    pw = tc.aux.joint_wx.probs
    w_axis = {a: i for i, a in enumerate(lat)}
    w_conds = {a: _conditional(pw, [w_axis[b] for b in parents(a)], w_axis[a]) for a in lat}
    pw_only = pw.sum(axis=-1)
    pxw = pw.reshape(-1, pw.shape[-1])
    tot = pxw.sum(axis=1, keepdims=True)
    pxw = np.where(tot > 0, pxw / np.where(tot > 0, tot, 1.0), 1.0 / pw.shape[-1])
    chy = {}
    nl = len(lat)
    for a in lat:
        down = lat.down_set(a)
        keep = tuple(w_axis[b] for b in down) + (nl,)
        drop = tuple(i for i in range(nl + 1) if i not in keep)
        m = pw.sum(axis=drop) if drop else pw                      # (w_down..., x)
        my = np.tensordot(m, ch.py, axes=([m.ndim - 1], [0]))       # (w_down..., y)
        chy[a] = (my.ravel(), my.shape)
    return t_conds, enc, w_conds, pxw, pw_only.shape, chy


def generate_codebooks(rng: np.random.Generator, tc: LayeredTestChannels, ch: WiretapChannel,
                       rates: RateAllocation, k: int, n: int) -> Codebooks:
    if k < 1 or n < 1:
        raise ArgumentError("block lengths k and n must be >= 1")
    if tc.aux.x_size != ch.x_alpha:
        raise ArgumentError("auxiliary |X| does not match the channel")
    lat = tc.lattice
    bits = layer_bits(rates, lat, k, n)
    t_conds, enc, w_conds, pxw, w_sizes, chy = _layer_tables(tc, ch)
    src_sizes = {a: 1 << bits[a].b for a in lat}
    ch_sizes = {a: 1 << bits[a].c for a in lat}
    t_alph = dict(tc.t_sizes)
    w_alph = {a: s for a, s in zip(lat, tc.aux.layer_sizes)}
    sbook = _generate_layered(rng, lat, src_sizes, t_conds, t_alph, k)
    cbook = _generate_layered(rng, lat, ch_sizes, w_conds, w_alph, n)
    return Codebooks(tc, bits, sbook, cbook, k, n, enc, chy, pxw, w_sizes)


# --------------------------------------------------------------------------
# typicality


def typical_mask(letters: np.ndarray, p: np.ndarray, shape: Tuple[int, ...], eps: float) -> np.ndarray:
    """Strong eps-typicality of many sequences at once.

    ``letters`` has shape (batch, n_vars, length) with variable v ranging over
    ``shape[v]``.  A sequence is typical when cells of zero probability never
    occur and every other cell's empirical frequency is within eps * p of p.
    """
    batch, _, length = letters.shape
    cells = np.ravel_multi_index(tuple(letters[:, v, :] for v in range(letters.shape[1])), shape)
    n_cells = int(np.prod(shape))
    offs = (np.arange(batch) * n_cells)[:, None]
    counts = np.bincount((cells + offs).ravel(), minlength=batch * n_cells).reshape(batch, n_cells)
    freq = counts / length
    zero = p <= 0
    ok = ~np.any(counts[:, zero] > 0, axis=1)
    nz = ~zero
    ok &= np.all(np.abs(freq[:, nz] - p[nz]) <= eps * p[nz] + 1e-12, axis=1)
    return ok


# --------------------------------------------------------------------------
# encoder / decoder


@dataclass
class LayerTrace:
    source_index: int
    l0: int
    l1: int
    kappa: int
    l_enc: int
    pad1: int
    pad0: int
    decoy: int
    channel_index: int
    source_error: bool


@dataclass
class EncodeTrace:
    layers: Dict[frozenset, LayerTrace]
    w_letters: Dict[frozenset, np.ndarray]

    @property
    def source_error(self) -> bool:
        return any(t.source_error for t in self.layers.values())


def _sample_rows(rng: np.random.Generator, table: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(ctx.shape)
    return (u[..., None] >= cdf[ctx]).sum(axis=-1)


def encode(s_samples: np.ndarray, books: Codebooks, key: KeySystem, key_bits: np.ndarray,
           rng: np.random.Generator, eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, EncodeTrace]:
    """Layered joint-typicality encoding, encryption, index mapping and input generation.

    ``s_samples`` has shape (m, k) with 0-based symbols.
    """
    tc = books.tc
    src = tc.source
    lat = tc.lattice
    e_list = sorted(src.observed)
    e_shape = tuple(src.alphabets[i - 1] for i in e_list)
    s_e = np.ravel_multi_index(tuple(s_samples[i - 1] for i in e_list), e_shape)
    chosen: Dict[frozenset, int] = {}
    t_seq: Dict[frozenset, np.ndarray] = {}
    layers: Dict[frozenset, LayerTrace] = {}
    ch_idx: Dict[frozenset, int] = {}
    for a in lat:
        bits = books.bits[a]
        down = lat.down_set(a)
        cand = books.source.candidates(a, chosen)                       # (N, k)
        n_c = cand.shape[0]
        fixed = [s_e] + [t_seq[b] for b in down if b != a]
        letters = np.empty((n_c, len(fixed) + 1, books.k), dtype=np.int64)
        for v, seq in enumerate(fixed):
            letters[:, v, :] = seq
        letters[:, -1, :] = cand
        # the layer's own variable sits last in lattice order within the down-set
        p, shape = books.enc_joint[a]
        ok = typical_mask(letters, p, shape, eps)
        hits = np.nonzero(ok)[0]
        err = hits.size == 0
        l = 0 if err else int(hits[0])
        chosen[a] = l
        t_seq[a] = cand[l]
        l0, l1 = split_source_index(bits, l)
        kappa = key.subkey(key_bits, a)
        l_enc = l1 ^ kappa
        pad1 = int(rng.integers(0, 1 << (bits.c1 - bits.b0)))
        pad0 = int(rng.integers(0, 1 << (bits.c0 - bits.b1)))
        decoy = int(rng.integers(0, 1 << bits.cd))
        f = IndexFields(l0, l_enc, pad1, pad0, decoy)
        j = channel_index(bits, f)
        ch_idx[a] = j
        layers[a] = LayerTrace(l, l0, l1, kappa, l_enc, pad1, pad0, decoy, j, err)
    w_letters = {a: books.channel.codeword(a, ch_idx) for a in lat}
    w_flat = np.ravel_multi_index(tuple(w_letters[a] for a in lat), books.w_sizes)
    x = _sample_rows(rng, books.px_given_w, w_flat)
    return x, EncodeTrace(layers, w_letters)


@dataclass
class DecodeResult:
    reconstructions: np.ndarray            # (m, k)
    error_flag: bool
    channel_indices: Dict[frozenset, int]
    source_indices: Dict[frozenset, int]
    layer_errors: Dict[frozenset, bool]


def decode_legitimate(y_seq: np.ndarray, key: KeySystem, key_bits: np.ndarray, books: Codebooks,
                      eps: float = DEFAULT_EPS) -> DecodeResult:
    tc = books.tc
    lat = tc.lattice
    ch_idx: Dict[frozenset, int] = {}
    w_seq: Dict[frozenset, np.ndarray] = {}
    layer_err: Dict[frozenset, bool] = {}
    for a in lat:
        down = lat.down_set(a)
        cand = books.channel.candidates(a, ch_idx)                      # (N', n)
        letters = np.empty((cand.shape[0], len(down) + 1, books.n), dtype=np.int64)
        for v, b in enumerate(down):
            letters[:, v, :] = cand if b == a else w_seq[b]
        letters[:, -1, :] = y_seq
        p, shape = books.ch_joint_y[a]
        hits = np.nonzero(typical_mask(letters, p, shape, eps))[0]
        layer_err[a] = hits.size != 1
        j = int(hits[0]) if hits.size else 0
        ch_idx[a] = j
        w_seq[a] = cand[j]
    src_idx: Dict[frozenset, int] = {}
    t_seq: Dict[frozenset, np.ndarray] = {}
    for a in lat:
        bits = books.bits[a]
        f = split_channel_index(bits, ch_idx[a])
        l1 = f.l_enc ^ key.subkey(key_bits, a)
        src_idx[a] = source_index(bits, f.l0, l1)
        t_seq[a] = books.source.codeword(a, src_idx)
    m = tc.source.m
    recon = np.stack([tc.reconstruct(i, t_seq) for i in range(1, m + 1)])
    return DecodeResult(recon, any(layer_err.values()), ch_idx, src_idx, layer_err)


# --------------------------------------------------------------------------
# eavesdropper


@dataclass(frozen=True)
class LayerEquivocation:
    h_l1: float                  # H(l1 | Z): one-time-padded source bits
    h_kappa: float               # H(kappa | Z)
    h_lenc: float                # H(l_enc | Z)
    h_lenc_given_private: float  # H(l_enc | Z, l'_1)
    h_l0: float                  # H(l0 | Z)
    key_bits: int


def _entropy_bits(p: np.ndarray) -> float:
    return max(entropy_array(p / p.sum()), 0.0) + 0.0


def _all_channel_words(books: Codebooks):
    """Every joint index tuple over all layers and its per-layer letters."""
    lat = books.tc.lattice
    sizes = tuple(books.channel.sizes[a] for a in lat)
    total = int(np.prod(sizes))
    if total * books.n > MAX_ENTRIES:
        raise ResourceError(f"eavesdropper enumeration needs {total} x {books.n} letters",
                            required=total * books.n, cap=MAX_ENTRIES)
    grid = np.indices(sizes).reshape(len(sizes), -1)
    idx = {a: grid[i] for i, a in enumerate(lat)}
    letters = {}
    for a in lat:
        pa = parents(a)
        if pa:
            combo = np.ravel_multi_index(tuple(idx[b] for b in pa), tuple(books.channel.sizes[b] for b in pa))
        else:
            combo = np.zeros(total, dtype=np.int64)
        letters[a] = books.channel.words[a][combo, idx[a]]
    return idx, letters


def eavesdropper_equivocation(z_seq: np.ndarray, books: Codebooks, ch: WiretapChannel,
                              private_index: Optional[Mapping[frozenset, int]] = None,
                              _cache: Optional[dict] = None) -> Dict[frozenset, LayerEquivocation]:
    """Exact posterior entropies of every layer's indices given Z^n.

    All message, padding and decoy indices are taken uniform a priori and
    the key independent and uniform.  ``private_index`` optionally gives the
    true l'_1 of each layer, for the entropy of l_enc given that side
    information.
    """
    lat = books.tc.lattice
    if _cache is not None and "words" in _cache:
        idx, lz = _cache["words"], _cache["logpz"]
    else:
        idx, letters = _all_channel_words(books)
        w_flat = np.ravel_multi_index(tuple(letters[a] for a in lat), books.w_sizes)
        pz_w = books.px_given_w @ ch.pz                                  # p(z | w tuple)
        with np.errstate(divide="ignore"):
            lz = np.log(pz_w)[w_flat]                                    # (tuples, n, |Z|)
        if _cache is not None:
            _cache["words"], _cache["logpz"] = idx, lz
    n = z_seq.size
    ll = lz[:, np.arange(n), z_seq].sum(axis=1)
    post = np.exp(ll - ll.max())
    post /= post.sum()
    out = {}
    for a in lat:
        bits = books.bits[a]
        j = idx[a]
        cd, c0, b0, b1 = bits.cd, bits.c0, bits.b0, bits.b1
        lp0 = (j >> cd) & ((1 << c0) - 1)
        lp1 = j >> (cd + c0)
        l_enc = lp0 & ((1 << b1) - 1)
        l0 = lp1 & ((1 << b0) - 1)
        nk = 1 << b1
        p_enc = np.bincount(l_enc, weights=post, minlength=nk)
        # joint posterior of (l1, kappa) with l_enc = l1 xor kappa, both uniform a priori
        grid = np.arange(nk)
        joint = p_enc[grid[:, None] ^ grid[None, :]] / nk
        h_l1 = _entropy_bits(joint.sum(axis=1))
        h_k = _entropy_bits(joint.sum(axis=0))
        h_enc = _entropy_bits(p_enc)
        if private_index is not None and a in private_index:
            sel = lp1 == private_index[a]
            w = np.where(sel, post, 0.0)
            h_priv = _entropy_bits(np.bincount(l_enc, weights=w, minlength=nk)) if w.sum() > 0 else 0.0
        else:
            h_priv = math.nan
        h_l0 = _entropy_bits(np.bincount(l0, weights=post, minlength=1 << b0))
        out[a] = LayerEquivocation(h_l1, h_k, h_enc, h_priv, h_l0, b1)
    return out


# --------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class SimulationConfig:
    k: int
    n: int
    trials: int
    seed: int = 0
    eps: float = DEFAULT_EPS
    codebook_refresh: int = CODEBOOK_REFRESH
    equivocation: bool = True


@dataclass(eq=False)
class SimulationReport:
    distortion: Dict[int, float]
    perception_tv: Dict[int, float]
    source_error_rate: float
    decode_error_rate: float
    error_rate: float
    equivocation: Dict[frozenset, Dict[str, float]]
    otp_max_deviation: float
    layer_bits: Dict[frozenset, LayerBits]
    trials: int
    k: int
    n: int
    seed: int
    eps: float
    wall_time: float = 0.0
    per_trial: List[dict] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "trials": self.trials, "k": self.k, "n": self.n, "seed": self.seed, "eps": self.eps,
            "distortion": {str(i): v for i, v in sorted(self.distortion.items())},
            "perception_tv": {str(i): v for i, v in sorted(self.perception_tv.items())},
            "source_error_rate": self.source_error_rate,
            "decode_error_rate": self.decode_error_rate,
            "error_rate": self.error_rate,
            "otp_max_deviation": self.otp_max_deviation,
            "layers": {subset_label(a): {**vars(b), **self.equivocation.get(a, {})}
                       for a, b in self.layer_bits.items()},
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


def _rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(block), int(stream)])


def run_trials(tc: LayeredTestChannels, ch: WiretapChannel, distortion: Mapping[int, np.ndarray],
               rates: RateAllocation, cfg: SimulationConfig, keep_per_trial: bool = False
               ) -> SimulationReport:
    """Encode, transmit, decode and account for equivocation over many trials."""
    if cfg.trials < 1:
        raise ArgumentError("trials must be >= 1")
    t0 = time.perf_counter()
    src = tc.source
    lat = tc.lattice
    m = src.m
    flat_p = src.joint.probs.ravel()
    bits = layer_bits(rates, lat, cfg.k, cfg.n)
    key = KeySystem(lat, {a: bits[a].b1 for a in lat})
    dist_sum = {i: 0.0 for i in range(1, m + 1)}
    hat_counts = {i: np.zeros(np.asarray(distortion[i]).shape[1]) for i in range(1, m + 1)}
    n_src_err = n_dec_err = n_err = 0
    eq_sum: Dict[frozenset, Dict[str, float]] = {a: {} for a in lat}
    otp_dev = 0.0
    records = []
    books = None
    cache: dict = {}
    for t in range(cfg.trials):
        if t % cfg.codebook_refresh == 0:
            books = generate_codebooks(_rng(cfg.seed, t // cfg.codebook_refresh, _STREAM_CODEBOOK),
                                       tc, ch, rates, cfg.k, cfg.n)
            cache = {}
        s_flat = _rng(cfg.seed, t, _STREAM_SOURCE).choice(flat_p.size, size=cfg.k, p=flat_p)
        s = np.stack(np.unravel_index(s_flat, src.alphabets))
        kbits = key.draw(_rng(cfg.seed, t, _STREAM_KEY))
        x, trace = encode(s, books, key, kbits, _rng(cfg.seed, t, _STREAM_ENCODER), cfg.eps)
        crng = _rng(cfg.seed, t, _STREAM_CHANNEL)
        y = _sample_rows(crng, ch.py, x)
        z = _sample_rows(crng, ch.pz, x)
        dec = decode_legitimate(y, key, kbits, books, cfg.eps)
        wrong = any(dec.channel_indices[a] != trace.layers[a].channel_index for a in lat)
        dec_err = dec.error_flag or wrong
        src_err = trace.source_error
        n_src_err += src_err
        n_dec_err += dec_err
        n_err += src_err or dec_err
        rec = {"trial": t, "source_error": int(src_err), "decode_error": int(dec_err)}
        for i in range(1, m + 1):
            d = np.asarray(distortion[i])[s[i - 1], dec.reconstructions[i - 1]].mean()
            dist_sum[i] += d
            hat_counts[i] += np.bincount(dec.reconstructions[i - 1], minlength=hat_counts[i].size)
            rec[f"distortion_{i}"] = float(d)
        if cfg.equivocation:
            trial_dev = 0.0
            priv = {a: (trace.layers[a].l0 | (trace.layers[a].pad1 << bits[a].b0)) for a in lat}
            eq = eavesdropper_equivocation(z, books, ch, priv, cache)
            for a, e in eq.items():
                acc = eq_sum[a]
                for name in ("h_l1", "h_kappa", "h_lenc", "h_lenc_given_private", "h_l0"):
                    acc[name] = acc.get(name, 0.0) + getattr(e, name)
                if e.key_bits > 0:
                    trial_dev = max(trial_dev, abs(e.h_l1 - e.key_bits))
                rec[f"h_lenc_given_private_{subset_label(a)}"] = e.h_lenc_given_private
            otp_dev = max(otp_dev, trial_dev)
            rec["otp_deviation"] = trial_dev
        if keep_per_trial:
            records.append(rec)
    T = cfg.trials
    perception = {}
    for i in range(1, m + 1):
        q = hat_counts[i] / hat_counts[i].sum()
        p = src.modality_pmf(i)
        if q.size == p.size:
            perception[i] = float(0.5 * np.abs(q - p).sum())
    equiv = {a: {name: v / T for name, v in acc.items()} for a, acc in eq_sum.items()}
    return SimulationReport(
        distortion={i: v / T for i, v in dist_sum.items()},
        perception_tv=perception,
        source_error_rate=n_src_err / T,
        decode_error_rate=n_dec_err / T,
        error_rate=n_err / T,
        equivocation=equiv,
        otp_max_deviation=otp_dev,
        layer_bits=bits,
        trials=T, k=cfg.k, n=cfg.n, seed=cfg.seed, eps=cfg.eps,
        wall_time=time.perf_counter() - t0,
        per_trial=records,
    )
