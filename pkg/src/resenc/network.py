"""Small classifier: projection -> encoding layer -> L2 norm -> FC, and its trainer.

A sample is an unordered descriptor set ``X`` of shape (N, D_in).  The
learnable linear projection stands in for the 1x1 channel-reduction
convolution; everything above it follows the encoding head.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoding import (
    NORMALIZE_MODES,
    encode_backward,
    encode_forward,
    l2norm_backward,
    l2norm_forward,
)
from .numeric import Rng, ShapeError, as_mat, colsum, derive_seed, matmul, ordered_sum

HEAD_FIELDS = ("C", "s", "W_fc", "b_fc")
BIAS_NAMES = {"b_proj", "b_fc"}


@dataclass
class NetworkParams:
    W_proj: np.ndarray  # (D_in, D_proj)
    b_proj: np.ndarray  # (D_proj,)
    C: np.ndarray  # (K, D_proj)
    s: np.ndarray  # (K,)
    W_fc: np.ndarray  # (K * D_proj, n_classes)
    b_fc: np.ndarray  # (n_classes,)
    normalize: str = "global"

    def __post_init__(self):
        D_in, D_proj = self.W_proj.shape
        K = self.C.shape[0]
        if (
            self.b_proj.shape != (D_proj,)
            or self.C.shape != (K, D_proj)
            or self.s.shape != (K,)
            or self.W_fc.shape[0] != K * D_proj
            or self.b_fc.shape != (self.W_fc.shape[1],)
        ):
            raise ShapeError("inconsistent parameter shapes in NetworkParams")
        if self.normalize not in NORMALIZE_MODES:
            raise ValueError(f"unknown normalize mode {self.normalize!r}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(D_in, D_proj, K, n_classes)"""
        return self.W_proj.shape[0], self.W_proj.shape[1], self.C.shape[0], self.W_fc.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        """Name -> array, by reference; in-place updates change the model."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "normalize"}

    def copy(self) -> "NetworkParams":
        return NetworkParams(**{k: v.copy() for k, v in self.tensors().items()}, normalize=self.normalize)


def init_params(D_in: int, D_proj: int, K: int, n_classes: int, seed: int,
                normalize: str = "global") -> NetworkParams:
    """Uniform init: C and s in +-1/sqrt(K), weights in +-1/sqrt(fan_in), zero biases."""
    for name, v in (("D_in", D_in), ("D_proj", D_proj), ("K", K), ("n_classes", n_classes)):
        if int(v) < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = Rng(seed)
    bw = 1.0 / math.sqrt(D_in)
    bk = 1.0 / math.sqrt(K)
    bf = 1.0 / math.sqrt(K * D_proj)
    W_proj = rng.uniform(-bw, bw, (D_in, D_proj))
    C = rng.uniform(-bk, bk, (K, D_proj))
    s = rng.uniform(-bk, bk, (K,))
    W_fc = rng.uniform(-bf, bf, (K * D_proj, n_classes))
    return NetworkParams(W_proj, np.zeros(D_proj), C, s, W_fc, np.zeros(n_classes), normalize)


@dataclass
class NetCache:
    X: np.ndarray
    P: np.ndarray
    enc: object
    norm: object
    vhat: np.ndarray
    params: NetworkParams


def forward(params: NetworkParams, X) -> tuple[np.ndarray, NetCache]:
    X = as_mat(X, "descriptors")
    if X.shape[1] != params.W_proj.shape[0]:
        raise ShapeError(f"descriptor dim {X.shape[1]} != model input dim {params.W_proj.shape[0]}")
    P = matmul(X, params.W_proj) + params.b_proj[None, :]
    E, enc = encode_forward(P, params.C, params.s)
    vhat, norm = l2norm_forward(E, params.normalize)
    logits = matmul(vhat.reshape(1, -1), params.W_fc)[0] + params.b_fc
    return logits, NetCache(X=X, P=P, enc=enc, norm=norm, vhat=vhat, params=params)


def predict(params: NetworkParams, X) -> int:
    logits, _ = forward(params, X)
    return int(np.argmax(logits))


def softmax_xent(logits, label: int) -> tuple[float, np.ndarray]:
    """Max-shifted softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} outside [0, {logits.shape[0]})")
    z = logits - logits.max()
    ez = np.exp(z)
    total = float(ordered_sum(ez, axis=0))
    loss = math.log(total) - z[label]
    p = ez / total
    p[label] -= 1.0
    return float(loss), p


def backward(cache: NetCache, dlogits) -> dict[str, np.ndarray]:
    """Gradients of every parameter, keyed like :meth:`NetworkParams.tensors`."""
    p = cache.params
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(-1)
    flat = cache.vhat.reshape(-1, 1)
    dW_fc = matmul(flat, dlogits[None, :])
    dvhat = matmul(p.W_fc, dlogits[:, None])[:, 0].reshape(cache.vhat.shape)
    dE = l2norm_backward(cache.norm, dvhat)
    g = encode_backward(cache.enc, dE)
    dW_proj = matmul(np.ascontiguousarray(cache.X.T), g.dX)
    return {
        "W_proj": dW_proj,
        "b_proj": colsum(g.dX)[0],
        "C": g.dC,
        "s": g.ds,
        "W_fc": dW_fc,
        "b_fc": dlogits.copy(),
    }


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: list[int] = field(default_factory=list)
    decay_smoothing: bool = False
    frozen: set[str] = field(default_factory=set)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: divided by 10 at each milestone passed."""
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.learning_rate / 10.0**drops


def _decays(name: str, decay_smoothing: bool) -> bool:
    base = name.rsplit(".", 1)[-1]
    if base in BIAS_NAMES:
        return False
    if base == "s":
        return decay_smoothing
    return True


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: float | None = None) -> None:
    """In-place momentum SGD: v <- m v + g + wd p ; p <- p - lr v."""
    lr = state.learning_rate if lr is None else lr
    for name, p in params.items():
        if name in state.frozen or name.rsplit(".", 1)[-1] in state.frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}: {g.shape} != {p.shape}")
        if _decays(name, state.decay_smoothing) and state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        p -= lr * v


# --------------------------------------------------------------------------
# training


def resample(X: np.ndarray, n: int | None, rng: Rng) -> np.ndarray:
    """Bring a descriptor set to exactly ``n`` rows.

    Larger sets are subsampled without replacement; smaller ones keep every
    descriptor and top up by sampling with replacement.  ``n=None`` keeps X.
    """
    if n is None:
        return X
    N = X.shape[0]
    if N >= n:
        return X[np.sort(rng.permutation(N)[:n])]
    extra = rng.integers(0, N, n - N)
    return np.concatenate([X, X[extra]], axis=0)


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float


def _accumulate(total: dict | None, g: dict, w: float = 1.0) -> dict:
    if total is None:
        return {k: (v * w if w != 1.0 else v.copy()) for k, v in g.items()}
    for k, v in g.items():
        total[k] = total[k] + (v * w if w != 1.0 else v)
    return total


def batch_grads(params: NetworkParams, samples, n_desc: int | None, rng: Rng):
    """Mean loss, mean gradients and correct count over one batch (ascending order)."""
    total = None
    loss_sum = 0.0
    correct = 0
    for X, y in samples:
        logits, cache = forward(params, resample(X, n_desc, rng))
        loss, dlogits = softmax_xent(logits, y)
        loss_sum += loss
        correct += int(np.argmax(logits) == y)
        total = _accumulate(total, backward(cache, dlogits))
    b = len(samples)
    return loss_sum / b, {k: v / b for k, v in total.items()}, correct


def _check_dataset(dataset, D_in: int) -> None:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    for X, _ in dataset:
        if X.shape[1] != D_in:
            raise ShapeError(f"dataset descriptor dim {X.shape[1]} != model input dim {D_in}")


def train_epoch(params: NetworkParams, dataset, state: OptimizerState, n_descriptors: int | None,
                seed: int, batch: int = 8, lr: float | None = None) -> EpochMetrics:
    """One pass over ``dataset`` (a sequence of (X, label)) in seeded shuffled order."""
    samples = list(dataset)
    _check_dataset(samples, params.dims[0])
    rng = Rng(seed)
    order = rng.permutation(len(samples))
    tensors = params.tensors()
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(order), batch):
        chunk = [samples[i] for i in order[start:start + batch]]
        loss, grads, c = batch_grads(params, chunk, n_descriptors, rng)
        loss_sum += loss * len(chunk)
        correct += c
        sgd_step(tensors, grads, state, lr)
    return EpochMetrics(loss_sum / len(samples), correct / len(samples))


def evaluate(params: NetworkParams, dataset) -> float:
    """Top-1 accuracy; ties between logits go to the lowest class index."""
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    hits = sum(int(predict(params, X) == y) for X, y in samples)
    return hits / len(samples)


def cycle_size(size_cycle, epoch: int) -> int | None:
    if not size_cycle:
        return None
    return int(size_cycle[epoch % len(size_cycle)])


def train(params: NetworkParams, dataset, state: OptimizerState, epochs: int, seed: int,
          batch: int = 8, size_cycle=(), log=None) -> list[EpochMetrics]:
    """Run ``epochs`` epochs; epoch e uses size_cycle[e % len] descriptors per sample."""
    history = []
    for epoch in range(epochs):
        m = train_epoch(params, dataset, state, cycle_size(size_cycle, epoch),
                        derive_seed(seed, "epoch", epoch), batch, state.lr_at(epoch))
        history.append(m)
        if log is not None:
            log(epoch, m)
    return history


# --------------------------------------------------------------------------
# joint training


@dataclass
class JointNetwork:
    """Shared projection with one encoding head per dataset."""

    W_proj: np.ndarray
    b_proj: np.ndarray
    heads: tuple[dict[str, np.ndarray], dict[str, np.ndarray]]
    normalize: str = "global"

    def head(self, i: int) -> NetworkParams:
        """View of head ``i`` as a standalone network; arrays are shared, not copied."""
        h = self.heads[i]
        return NetworkParams(self.W_proj, self.b_proj, h["C"], h["s"], h["W_fc"], h["b_fc"], self.normalize)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"W_proj": self.W_proj, "b_proj": self.b_proj}
        for tag, h in zip("AB", self.heads):
            for k in HEAD_FIELDS:
                out[f"{tag}.{k}"] = h[k]
        return out


def init_joint(D_in: int, D_proj: int, K: int, n_classes: tuple[int, int], seed: int,
               normalize: str = "global") -> JointNetwork:
    """Shared projection and head A match ``init_params(..., seed)`` exactly."""
    a = init_params(D_in, D_proj, K, n_classes[0], seed, normalize)
    b = init_params(D_in, D_proj, K, n_classes[1], derive_seed(seed, "head-B"), normalize)
    heads = tuple({k: getattr(p, k) for k in HEAD_FIELDS} for p in (a, b))
    return JointNetwork(a.W_proj, a.b_proj, heads, normalize)


def joint_train_epoch(joint: JointNetwork, dataset_a, dataset_b, state: OptimizerState, seed: int,
                      batch: int = 8, n_desc: tuple[int | None, int | None] = (None, None),
                      loss_weights: tuple[float, float] = (1.0, 1.0), lr: float | None = None,
                      ) -> tuple[EpochMetrics, EpochMetrics]:
    """One epoch over dataset A; each step pairs an A batch with a B batch.

    The step loss is wA * loss_A + wB * loss_B, so shared projection
    gradients from both heads are summed while each head only sees its own
    dataset.  B is reshuffled whenever it runs out.  A term with weight 0 is
    skipped entirely, which makes (1, 0) reproduce individual training of A.
    """
    samples_a, samples_b = list(dataset_a), list(dataset_b)
    D_in = joint.W_proj.shape[0]
    _check_dataset(samples_a, D_in)
    _check_dataset(samples_b, D_in)
    wa, wb = (float(w) for w in loss_weights)
    # stream A is identical to the one train_epoch would use with the same seed
    rng_a = Rng(seed)
    rng_b = Rng(derive_seed(seed, "joint-B"))
    order_a = rng_a.permutation(len(samples_a))
    order_b = rng_b.permutation(len(samples_b))
    pos_b = 0
    head_a, head_b = joint.head(0), joint.head(1)
    tensors = joint.tensors()
    stats = [[0.0, 0, 0], [0.0, 0, 0]]
    for start in range(0, len(order_a), batch):
        chunk_a = [samples_a[i] for i in order_a[start:start + batch]]
        chunk_b = []
        while len(chunk_b) < len(chunk_a):
            if pos_b == len(order_b):
                order_b = rng_b.permutation(len(samples_b))
                pos_b = 0
            chunk_b.append(samples_b[order_b[pos_b]])
            pos_b += 1
        grads = {k: np.zeros_like(v) for k, v in tensors.items()}
        shared = None
        for tag, idx, w, head, chunk, rng in (("A", 0, wa, head_a, chunk_a, rng_a),
                                              ("B", 1, wb, head_b, chunk_b, rng_b)):
            if w == 0.0:
                continue
            loss, g, c = batch_grads(head, chunk, n_desc[idx], rng)
            stats[idx][0] += loss * len(chunk)
            stats[idx][1] += c
            stats[idx][2] += len(chunk)
            for k in HEAD_FIELDS:
                grads[f"{tag}.{k}"] = g[k] * w if w != 1.0 else g[k]
            part = {k: g[k] for k in ("W_proj", "b_proj")}
            shared = _accumulate(shared, part, w)
        if shared is not None:
            grads.update(shared)
        sgd_step(tensors, grads, state, lr)
    metrics = tuple(EpochMetrics(l / n if n else float("nan"), c / n if n else float("nan"))
                    for l, c, n in stats)
    return metrics[0], metrics[1]


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TENM"
CKPT_VERSION = 1
_NORMALIZE_CODE = {m: float(i) for i, m in enumerate(NORMALIZE_MODES)}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path) -> None:
    """Write a TENM checkpoint for a NetworkParams or JointNetwork.

    Layout: b"TENM", u16 version, then per tensor: u16 name length, name
    bytes, u32 rows, u32 cols, row-major little-endian float64.  Vectors are
    stored as 1 x n.  The normalize mode travels as the 1 x 1 tensor
    ``meta.normalize``.
    """
    items = dict(model.tensors())
    items["meta.normalize"] = np.array([_NORMALIZE_CODE[model.normalize]])
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for name, arr in items.items():
        arr = np.asarray(arr, dtype="<f8")
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *mat.shape))
        parts.append(np.ascontiguousarray(mat).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Raw name -> 2-D array mapping from a TENM file."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    if len(data) < 6:
        raise CheckpointError(f"{path}: truncated header at byte offset 4")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} at byte offset 4")
    off = 6
    out: dict[str, np.ndarray] = {}
    while off < len(data):
        start = off
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            if off + nlen > len(data):
                raise struct.error
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"{path}: truncated tensor header at byte offset {start}") from None
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r} at byte offset {off}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += nbytes
    return out


def load_checkpoint(path):
    """Load a NetworkParams or, when head-prefixed tensors are present, a JointNetwork."""
    raw = read_checkpoint(path)
    code = raw.pop("meta.normalize", np.zeros((1, 1)))
    normalize = NORMALIZE_MODES[int(code[0, 0])]
    vec = {"b_proj", "s", "b_fc"}

    def get(name):
        if name not in raw:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        a = raw[name]
        return a.reshape(-1).copy() if name.rsplit(".", 1)[-1] in vec else a.copy()

    try:
        if "A.C" in raw:
            heads = tuple({k: get(f"{t}.{k}") for k in HEAD_FIELDS} for t in "AB")
            return JointNetwork(get("W_proj"), get("b_proj"), heads, normalize)
        return NetworkParams(*(get(n) for n in ("W_proj", "b_proj", "C", "s", "W_fc", "b_fc")), normalize)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
