"""Subset lattice over the modalities and the multimodal source model.

Modalities are 1-indexed, subsets are ``frozenset`` of ints.  Axis ``i - 1``
of a source joint tensor belongs to modality ``i``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import ArgumentError, ValidationError
from .prob import JointPmf, conditional_entropy, entropy_array, marginal_array

MAX_MODALITIES = 4

Subset = frozenset


def subset(*items) -> frozenset:
    """``subset(1, 2)`` or ``subset([1, 2])`` -> frozenset({1, 2})."""
    if len(items) == 1 and not isinstance(items[0], (int, np.integer)):
        items = tuple(items[0])
    return frozenset(int(i) for i in items)


def order_key(a: Iterable[int]) -> tuple:
    s = tuple(sorted(a))
    return (len(s), s)


def subset_label(a: Iterable[int]) -> str:
    return ",".join(str(i) for i in sorted(a))


def parse_subset_label(label: str) -> frozenset:
    """Inverse of ``subset_label``; also accepts surrounding braces."""
    text = str(label).strip().strip("{}[]()").replace(" ", "")
    if not text:
        raise ValidationError("empty subset label")
    toks = text.split(",")
    if not all(t.isdigit() and int(t) >= 1 for t in toks) or len(set(toks)) != len(toks):
        raise ValidationError(f"bad subset label {label!r}")
    return frozenset(int(t) for t in toks)


@dataclass(frozen=True)
class SubsetLattice:
    """All non-empty subsets of {1..m} in a fixed linear extension of inclusion."""

    m: int
    order: Tuple[frozenset, ...]

    def __post_init__(self):
        order = tuple(frozenset(int(i) for i in a) for a in self.order)
        universe = frozenset(range(1, self.m + 1))
        expected = 2 ** self.m - 1
        if len(order) != expected or len(set(order)) != expected or not all(
                a and a <= universe for a in order):
            raise ValidationError(f"lattice order must list the {expected} non-empty subsets of 1..{self.m} once each")
        for i, a in enumerate(order):
            for b in order[:i]:
                if a < b:
                    raise ValidationError(
                        f"{{{subset_label(a)}}} comes after its superset {{{subset_label(b)}}}")
        object.__setattr__(self, "order", order)

    def position(self, a) -> int:
        return self.order.index(frozenset(a))

    def __iter__(self):
        return iter(self.order)

    def __len__(self):
        return len(self.order)

    @property
    def full(self) -> frozenset:
        return frozenset(range(1, self.m + 1))

    def down_set(self, a) -> Tuple[frozenset, ...]:
        """Lattice elements contained in ``a`` (``a`` included), in lattice order."""
        a = frozenset(a)
        return tuple(b for b in self.order if b <= a)


def build_lattice(m: int, max_m: int = MAX_MODALITIES) -> SubsetLattice:
    if int(m) != m or not 1 <= m <= max_m:
        raise ArgumentError(f"modality count must be in [1, {max_m}], got {m}")
    items = range(1, m + 1)
    subsets = [frozenset(c) for r in range(1, m + 1) for c in itertools.combinations(items, r)]
    subsets.sort(key=order_key)
    return SubsetLattice(m=m, order=tuple(subsets))


def parents(a) -> Tuple[frozenset, ...]:
    """Non-empty proper subsets of ``a`` in canonical order.

    The empty set (always a parent) is the root context and carries no
    codeword, so it is not returned.
    """
    a = frozenset(a)
    if not a:
        raise ArgumentError("parents() of the empty set")
    items = sorted(a)
    out = [frozenset(c) for r in range(1, len(items)) for c in itertools.combinations(items, r)]
    out.sort(key=order_key)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class MultimodalSource:
    joint: JointPmf
    observed: frozenset

    def __post_init__(self):
        object.__setattr__(self, "observed", frozenset(int(i) for i in self.observed))
        if not self.observed:
            raise ValidationError("observed subset E must be non-empty")
        bad = [i for i in self.observed if not 1 <= i <= self.m]
        if bad:
            raise ValidationError(f"observed modalities {bad} outside 1..{self.m}")

    @property
    def m(self) -> int:
        return self.joint.ndim

    @property
    def alphabets(self) -> Tuple[int, ...]:
        return self.joint.shape

    @property
    def unobserved(self) -> frozenset:
        return frozenset(range(1, self.m + 1)) - self.observed

    def axes(self, a) -> Tuple[int, ...]:
        """0-based tensor axes of the modalities in ``a``."""
        return tuple(sorted(i - 1 for i in a))

    def marginal(self, a) -> np.ndarray:
        return marginal_array(self.joint.probs, self.axes(a))

    def modality_pmf(self, i: int) -> np.ndarray:
        return self.marginal({i})

    def observed_pmf(self) -> np.ndarray:
        """p(s_E) with axes in increasing modality order."""
        return self.marginal(self.observed)


@dataclass(frozen=True, eq=False)
class DistortionSpec:
    """Per-modality distortion matrices d_i(s_i, hat s_i) and thresholds D_i."""

    matrices: Mapping[int, np.ndarray]
    thresholds: Mapping[int, float]

    def __post_init__(self):
        mats = {}
        for i, d in self.matrices.items():
            arr = np.array(d, dtype=float)
            if arr.ndim != 2:
                raise ValidationError(f"distortion matrix for modality {i} must be 2-d")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValidationError(f"distortion matrix for modality {i} must be finite and >= 0")
            arr.setflags(write=False)
            mats[int(i)] = arr
        th = {int(i): float(v) for i, v in self.thresholds.items()}
        for i, v in th.items():
            if not v >= 0:
                raise ValidationError(f"distortion threshold D_{i} must be >= 0")
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "thresholds", th)

    def with_thresholds(self, thresholds: Mapping[int, float]) -> "DistortionSpec":
        th = dict(self.thresholds)
        th.update({int(i): float(v) for i, v in thresholds.items()})
        return DistortionSpec(self.matrices, th)


@dataclass(frozen=True, eq=False)
class PerceptionSpec:
    """Per-modality perception metric ('tv' or 'kl') and threshold P_i."""

    metrics: Mapping[int, str]
    thresholds: Mapping[int, float]

    def __post_init__(self):
        metrics = {int(i): str(k).lower() for i, k in self.metrics.items()}
        for i, k in metrics.items():
            if k not in ("tv", "kl"):
                raise ValidationError(f"perception metric for modality {i} must be 'tv' or 'kl', got {k!r}")
        th = {int(i): float(v) for i, v in self.thresholds.items()}
        for i, v in th.items():
            if not v >= 0:
                raise ValidationError(f"perception threshold P_{i} must be >= 0")
        missing = set(metrics) ^ set(th)
        if missing:
            raise ValidationError(f"perception metric/threshold mismatch for modalities {sorted(missing)}")
        object.__setattr__(self, "metrics", metrics)
        object.__setattr__(self, "thresholds", th)

    @classmethod
    def none(cls) -> "PerceptionSpec":
        return cls({}, {})

    def with_thresholds(self, thresholds: Mapping[int, float]) -> "PerceptionSpec":
        th = dict(self.thresholds)
        th.update({int(i): float(v) for i, v in thresholds.items() if int(i) in self.metrics})
        return PerceptionSpec(self.metrics, th)


def modified_distortion(src: MultimodalSource, i: int, d) -> np.ndarray:
    """Expected distortion of modality ``i`` given the observed symbols.

    Returns a tensor indexed by (s_E..., hat s_i); rows for s_E of zero
    probability are 0.
    """
    i = int(i)
    if i in src.observed:
        raise ArgumentError(f"modality {i} is observed; the modified metric applies to unobserved ones")
    if not 1 <= i <= src.m:
        raise ArgumentError(f"modality {i} out of range")
    d = np.asarray(d, dtype=float)
    if d.shape[0] != src.alphabets[i - 1]:
        raise ArgumentError(f"distortion matrix rows {d.shape[0]} != |S_{i}| = {src.alphabets[i - 1]}")
    keep = src.axes(src.observed | {i})
    p_ei = marginal_array(src.joint.probs, keep)        # axes: modalities of E ∪ {i} ascending
    pos = sorted(src.observed | {i}).index(i)
    p_ei = np.moveaxis(p_ei, pos, -1)                   # (s_E..., s_i)
    p_e = p_ei.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(p_e > 0, p_ei / np.where(p_e > 0, p_e, 1.0), 0.0)
    return cond @ d


def subset_entropy(src: MultimodalSource, a) -> float:
    a = frozenset(a)
    if not a:
        raise ArgumentError("subset_entropy of the empty set")
    return max(entropy_array(src.marginal(a)), 0.0)


def subset_equivocation(joint_szn: JointPmf, a) -> float:
    """H(S_A | Z) for a joint over m source axes followed by one observation axis."""
    a = frozenset(a)
    if not a:
        raise ArgumentError("subset_equivocation of the empty set")
    m = joint_szn.ndim - 1
    if max(a) > m or min(a) < 1:
        raise ArgumentError(f"subset {sorted(a)} outside 1..{m}")
    return conditional_entropy(joint_szn, [i - 1 for i in a], [m])


# --- model files -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SourceModel:
    """Everything a source model file describes."""

    source: MultimodalSource
    distortion: DistortionSpec
    perception: PerceptionSpec
    reconstruction: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        recon = tuple(self.reconstruction) or tuple(
            self.distortion.matrices[i].shape[1] if i in self.distortion.matrices else self.source.alphabets[i - 1]
            for i in range(1, self.source.m + 1))
        object.__setattr__(self, "reconstruction", recon)
        for i, d in self.distortion.matrices.items():
            if not 1 <= i <= self.source.m:
                raise ValidationError(f"distortion given for unknown modality {i}")
            if d.shape != (self.source.alphabets[i - 1], recon[i - 1]):
                raise ValidationError(
                    f"distortion.{i}.matrix has shape {d.shape}, expected "
                    f"({self.source.alphabets[i - 1]}, {recon[i - 1]})")
        for i in self.perception.metrics:
            if not 1 <= i <= self.source.m:
                raise ValidationError(f"perception given for unknown modality {i}")


def _field(obj, key, where):
    if key not in obj:
        raise ValidationError(f"missing field '{where}{key}'")
    return obj[key]


def source_model_from_dict(data: Mapping) -> SourceModel:
    m = int(_field(data, "m", ""))
    alphabets = [int(a) for a in _field(data, "alphabets", "")]
    if len(alphabets) != m:
        raise ValidationError(f"field 'alphabets' has {len(alphabets)} entries, expected m={m}")
    flat = np.asarray(_field(data, "joint", ""), dtype=float)
    if flat.size != int(np.prod(alphabets)):
        raise ValidationError(f"field 'joint' has {flat.size} entries, expected {int(np.prod(alphabets))}")
    try:
        joint = JointPmf(flat.reshape(alphabets))
    except ValidationError as exc:
        raise ValidationError(f"field 'joint': {exc}") from exc
    observed = frozenset(int(i) for i in _field(data, "observed", ""))
    src = MultimodalSource(joint, observed)

    dist = _field(data, "distortion", "")
    mats, th = {}, {}
    for i in range(1, m + 1):
        entry = dist.get(str(i), dist.get(i))
        if entry is None:
            raise ValidationError(f"missing field 'distortion.{i}'")
        mats[i] = np.asarray(_field(entry, "matrix", f"distortion.{i}."), dtype=float)
        th[i] = float(_field(entry, "D", f"distortion.{i}."))
    perc = data.get("perception", {}) or {}
    metrics, pth = {}, {}
    for key, entry in perc.items():
        i = int(key)
        metrics[i] = _field(entry, "metric", f"perception.{i}.")
        pth[i] = float(_field(entry, "P", f"perception.{i}."))
    recon = tuple(int(r) for r in data.get("reconstruction", ()))
    if recon and len(recon) != m:
        raise ValidationError(f"field 'reconstruction' has {len(recon)} entries, expected m={m}")
    return SourceModel(src, DistortionSpec(mats, th), PerceptionSpec(metrics, pth), recon)


def source_model_to_dict(model: SourceModel) -> dict:
    src = model.source
    return {
        "m": src.m,
        "alphabets": list(src.alphabets),
        "joint": src.joint.probs.ravel().tolist(),
        "observed": sorted(src.observed),
        "reconstruction": list(model.reconstruction),
        "distortion": {str(i): {"matrix": model.distortion.matrices[i].tolist(),
                                "D": model.distortion.thresholds.get(i, 0.0)}
                       for i in sorted(model.distortion.matrices)},
        "perception": {str(i): {"metric": model.perception.metrics[i],
                                "P": model.perception.thresholds[i]}
                       for i in sorted(model.perception.metrics)},
    }


def load_source_model(path) -> SourceModel:
    with open(Path(path)) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return source_model_from_dict(data)


def xor_pair_source() -> MultimodalSource:
    """S1 ~ B(1/2), S2 = S1 xor B with B ~ B(1/2) independent, both observed."""
    joint = np.full((2, 2), 0.25)
    return MultimodalSource(JointPmf(joint), frozenset({1, 2}))


def xor_pair_with_sum() -> JointPmf:
    """Joint of (S1, S2, Z) of two independent fair bits with Z = S1 xor S2."""
    p = np.zeros((2, 2, 2))
    for s1, s2 in itertools.product(range(2), repeat=2):
        p[s1, s2, s1 ^ s2] = 0.25
    return JointPmf(p)
