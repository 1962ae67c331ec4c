"""Descriptor datasets: synthetic generator and the DTEN binary format.

DTEN layout (little-endian)::

    b"DTEN"  u16 version=1  u32 n_classes  u32 D  u64 sample_count
    per sample:  u32 label  u32 N  N*D float32, row-major

Values are stored as float32 and upcast to float64 on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import Rng, derive_seed, matmul, ordered_sum

DTEN_MAGIC = b"DTEN"
DTEN_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")
_SAMPLE = struct.Struct("<II")


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


@dataclass
class DescriptorDataset:
    samples: list[tuple[np.ndarray, int]]
    n_classes: int
    D: int

    def __post_init__(self):
        for i, (X, y) in enumerate(self.samples):
            if X.ndim != 2 or X.shape[1] != self.D or X.shape[0] < 1:
                raise ValueError(f"sample {i}: expected (N>=1, {self.D}) descriptors, got {X.shape}")
            if not 0 <= y < self.n_classes:
                raise ValueError(f"sample {i}: label {y} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.samples], dtype=np.int64)


def save_dataset(ds: DescriptorDataset, path) -> None:
    parts = [_HEADER.pack(DTEN_MAGIC, DTEN_VERSION, ds.n_classes, ds.D, len(ds.samples))]
    for X, y in ds.samples:
        parts.append(_SAMPLE.pack(int(y), X.shape[0]))
        parts.append(np.ascontiguousarray(X, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> DescriptorDataset:
    """Read a DTEN file; any defect raises FormatError naming the byte offset."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    if len(data) < 4 or data[:4] != DTEN_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    _, version, n_classes, D, count = _HEADER.unpack_from(data, 0)
    if version != DTEN_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = _HEADER.size
    samples = []
    for i in range(count):
        if off + _SAMPLE.size > len(data):
            raise FormatError(f"{path}: truncated sample {i} header at byte offset {off}")
        label, N = _SAMPLE.unpack_from(data, off)
        off += _SAMPLE.size
        nbytes = N * D * 4
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated sample {i} data at byte offset {off}")
        if label >= n_classes:
            raise FormatError(f"{path}: sample {i} label {label} >= n_classes at byte offset {off - 8}")
        if N == 0:
            raise FormatError(f"{path}: sample {i} has no descriptors at byte offset {off - 4}")
        X = np.frombuffer(data, dtype="<f4", count=N * D, offset=off).astype(np.float64).reshape(N, D)
        samples.append((X, int(label)))
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes at byte offset {off}")
    return DescriptorDataset(samples, n_classes, D)


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class Component:
    mean: np.ndarray
    stddev: float
    weight: float


@dataclass
class SynthSpec:
    """Classes as Gaussian mixtures over descriptor space.

    Each sample draws N ~ U[n_min, n_max] descriptors i.i.d. from its class
    mixture, so only the descriptor distribution carries the label.
    """

    classes: list[list[Component]]
    n_min: int
    n_max: int
    train_per_class: int
    test_per_class: int
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def D(self) -> int:
        return len(self.classes[0][0].mean)

    def validate(self) -> None:
        if not self.classes:
            raise ValueError("synth spec has no classes")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("samples per class must be non-negative")
        D = self.D
        for c, comps in enumerate(self.classes):
            if not comps:
                raise ValueError(f"class {c} has no mixture components")
            total = sum(m.weight for m in comps)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"class {c} mixture weights sum to {total}, expected 1")
            for m in comps:
                if len(m.mean) != D:
                    raise ValueError(f"class {c}: component mean has dim {len(m.mean)}, expected {D}")
                if not m.stddev > 0:
                    raise ValueError(f"class {c}: stddev must be > 0, got {m.stddev}")
                if m.weight < 0:
                    raise ValueError(f"class {c}: negative mixture weight {m.weight}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        allowed = {"classes", "n_range", "train_per_class", "test_per_class", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        try:
            classes = [[Component(np.asarray(m["mean"], dtype=np.float64), float(m["stddev"]), float(m["weight"]))
                        for m in c["components"]] for c in d["classes"]]
            n_min, n_max = d["n_range"]
            spec = cls(classes, int(n_min), int(n_max), int(d["train_per_class"]),
                       int(d["test_per_class"]), int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed synth spec: {exc}") from None
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "classes": [{"components": [{"mean": m.mean.tolist(), "stddev": m.stddev, "weight": m.weight}
                                        for m in comps]} for comps in self.classes],
            "n_range": [self.n_min, self.n_max],
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "seed": self.seed,
        }


def load_synth_spec(path) -> SynthSpec:
    with open(path) as fh:
        return SynthSpec.from_dict(json.load(fh))


def _draw_sample(comps: list[Component], n: int, rng: Rng) -> np.ndarray:
    cum = np.cumsum([m.weight for m in comps])
    u = rng.random((n,)) * cum[-1]
    which = np.minimum(np.searchsorted(cum, u, side="right"), len(comps) - 1)
    means = np.stack([m.mean for m in comps])[which]
    stds = np.array([m.stddev for m in comps])[which]
    X = means + stds[:, None] * rng.normal((n, means.shape[1]))
    return X[rng.permutation(n)]


def synth_generate(spec: SynthSpec) -> tuple[DescriptorDataset, DescriptorDataset]:
    """Seeded (train, test) pair; samples are class-major within each split."""
    spec.validate()
    out = []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        rng = Rng(derive_seed(spec.seed, split))
        samples = []
        for c, comps in enumerate(spec.classes):
            for _ in range(per_class):
                n = int(rng.integers(spec.n_min, spec.n_max + 1, 1)[0])
                samples.append((_draw_sample(comps, n, rng), c))
        out.append(DescriptorDataset(samples, spec.n_classes, spec.D))
    return out[0], out[1]


def mixture_weights_spec(seed: int = 0, D: int = 8, n_classes: int = 4, spread: float = 2.0,
                         stddev: float = 0.5, major: float = 0.35, tilt: float = 0.02,
                         n_range: tuple[int, int] = (50, 100), train_per_class: int = 50,
                         test_per_class: int = 25) -> SynthSpec:
    """The mixture-weights task.

    All classes share the same ``2 * n_classes`` components, placed at
    +-spread along the first ``n_classes`` axes, and differ only in how much
    weight they put on each.  Class c puts ``major +- tilt`` on the pair of components along
    axis c and spreads the rest evenly, so class means differ only by the
    small tilt while the descriptor distributions are clearly distinct.
    """
    if n_classes > D:
        raise ValueError("mixture-weights task needs n_classes <= D")
    means = []
    for axis in range(n_classes):
        for sign in (1.0, -1.0):
            m = np.zeros(D)
            m[axis] = sign * spread
            means.append(m)
    n_comp = len(means)
    rest = (1.0 - 2.0 * major) / (n_comp - 2)
    classes = []
    for c in range(n_classes):
        weights = [rest] * n_comp
        weights[2 * c] = major + tilt
        weights[2 * c + 1] = major - tilt
        classes.append([Component(means[j], stddev, weights[j]) for j in range(n_comp)])
    return SynthSpec(classes, n_range[0], n_range[1], train_per_class, test_per_class, seed)


def embed_dataset(ds: DescriptorDataset, G: np.ndarray, nuisance_std: float, seed: int) -> DescriptorDataset:
    """Map latent descriptors through ``G`` and add nuisance noise off its row space.

    ``G`` (d_lat x D_out) must have orthonormal rows.  Noise is isotropic
    Gaussian projected onto the orthogonal complement of those rows, so the
    latent structure survives intact inside a higher-dimensional space.
    """
    G = np.asarray(G, dtype=np.float64)
    rng = Rng(seed)
    samples = []
    for X, y in ds.samples:
        Z = nuisance_std * rng.normal((X.shape[0], G.shape[1]))
        Z = Z - matmul(matmul(Z, G.T), G)
        samples.append((matmul(X, G) + Z, y))
    return DescriptorDataset(samples, ds.n_classes, G.shape[1])


def orthonormal_rows(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded rows x cols matrix with orthonormal rows (Gram-Schmidt on normals)."""
    if rows > cols:
        raise ValueError("need rows <= cols for orthonormal rows")
    M = Rng(seed).normal((rows, cols))
    out = np.zeros_like(M)
    for i in range(rows):
        v = M[i].copy()
        for j in range(i):
            v = v - float(ordered_sum(v * out[j], axis=0)) * out[j]
        out[i] = v / np.sqrt(float(ordered_sum(v * v, axis=0)))
    return out


def shared_projection_pair(seed: int, D_in: int = 32, nuisance_std: float = 1.25, latent_D: int = 8,
                           n_range: tuple[int, int] = (20, 40), large_per_class: int = 200,
                           small_per_class: int = 20, test_per_class: int = 25):
    """Two 4-class mixture-weights tasks seen through one generative projection.

    Both tasks live in the same ``latent_D``-dim space and are mapped into
    ``D_in`` dims by a single seeded orthonormal ``G``, with nuisance noise
    off its row space.  The small task relabels the classes, so only the
    projection (not a classifier) can be shared.  Returns
    ``((large_train, large_test), (small_train, small_test))``; with the
    defaults the large task has 800 training samples and the small one 80.
    """
    G = orthonormal_rows(latent_D, D_in, derive_seed(seed, "projection"))
    out = []
    for tag, per_class, relabel in (("large", large_per_class, (0, 1, 2, 3)),
                                    ("small", small_per_class, (2, 0, 3, 1))):
        spec = mixture_weights_spec(seed=derive_seed(seed, tag), D=latent_D, n_range=n_range,
                                    train_per_class=per_class, test_per_class=test_per_class)
        spec.classes = [spec.classes[i] for i in relabel]
        train, test = synth_generate(spec)
        out.append((embed_dataset(train, G, nuisance_std, derive_seed(seed, tag, "train")),
                    embed_dataset(test, G, nuisance_std, derive_seed(seed, tag, "test"))))
    return out[0], out[1]
