"""Per-point MLP -> spatial pyramid max-pool -> dense softmax classifier.

Architecture (defaults in brackets)::

    X (N, D[32]) -> relu(X W1 + b1) (N, H1[64]) -> relu(. W2 + b2) (N, H2[32])
      -> SPP max-pool -> e (S * H2)                      <- retrieval embedding
      -> relu(e W3 + b3) (C[64]) -> softmax(. W4 + b4) (F)

Input columns are first standardised with a fixed per-column shift and
scale (``x_mean``, ``x_scale``) taken from the training split; these are
stored with the network but not optimised.

Forward/backward run in float64; parameters are stored as float32 after
every optimiser step. Gradients through the pyramid flow only to the
first point attaining each bin/channel maximum.
"""

from dataclasses import dataclass, field
import math
import struct

import numpy as np

from .errors import (BadMagicError, DivergenceError, EmptySplitError, IoFailure, MalformedError,
                     ShapeMismatchError, TruncatedError, VersionUnsupportedError)
from .descriptor import rotate_quarter_turns
from .pooling import SppConfig, bin_indices, pool_with_argmax
from .rng import SplitMix64
from ._fileio import atomic_write_bytes

PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
NORM_KEYS = ("x_mean", "x_scale")
PROB_FLOOR = 1e-12

FNET_MAGIC = b"FNET"
FNET_VERSION = 1
_DOMAIN_CODES = {"cube": 0, "bbox": 1}


@dataclass
class NetParams:
    arrays: dict
    spp: SppConfig = field(default_factory=SppConfig)

    @property
    def sizes(self) -> tuple:
        """``(D, H1, H2, C, F)``."""
        a = self.arrays
        return (a["w1"].shape[0], a["w1"].shape[1], a["w2"].shape[1], a["w3"].shape[1], a["w4"].shape[1])

    @property
    def n_families(self) -> int:
        return self.arrays["w4"].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.spp.output_dim(self.sizes[2])

    def parameter_count(self) -> int:
        return int(sum(self.arrays[k].size for k in PARAM_ORDER))

    def astype(self, dtype) -> "NetParams":
        return NetParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.spp)

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.arrays.items()}, self.spp)


def expected_shapes(sizes, spp: SppConfig) -> dict:
    d, h1, h2, c, f = sizes
    s = spp.output_dim(h2)
    return {"w1": (d, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
            "w3": (s, c), "b3": (c,), "w4": (c, f), "b4": (f,)}


def init_params(n_families: int, in_dim: int = 32, hidden=(64, 32), classifier_hidden: int = 64,
                spp: SppConfig = SppConfig(), seed: int = 0) -> NetParams:
    """He-uniform weights for ReLU layers, Glorot-uniform for the output layer, zero biases."""
    sizes = (in_dim, hidden[0], hidden[1], classifier_hidden, n_families)
    rng = SplitMix64(seed)
    arrays = {}
    for name, shape in expected_shapes(sizes, spp).items():
        if name.startswith("b"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out)) if name == "w4" else math.sqrt(6.0 / fan_in)
        u = rng.random(fan_in * fan_out).reshape(shape)
        arrays[name] = ((2.0 * u - 1.0) * bound).astype(np.float32)
    arrays["x_mean"] = np.zeros(in_dim, dtype=np.float32)
    arrays["x_scale"] = np.ones(in_dim, dtype=np.float32)
    return NetParams(arrays, spp)


def input_stats(feature_mats, floor: float = 1e-6):
    """Per-column mean and inverse std over all rows of ``feature_mats``.

    Columns whose std is below ``floor`` (e.g. constant padding) get scale 1.
    """
    X = np.concatenate([np.asarray(m, dtype=np.float64) for m in feature_mats])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.where(std > floor, 1.0 / np.where(std > floor, std, 1.0), 1.0)
    return mean.astype(np.float32), scale.astype(np.float32)


# ---------------------------------------------------------------------------
# forward / backward

def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def loss(probabilities, true_family: int) -> float:
    """Categorical cross-entropy ``-log p[true]`` with ``p`` floored at 1e-12."""
    return float(-math.log(max(float(probabilities[true_family]), PROB_FLOOR)))


def _forward(params: NetParams, X: np.ndarray, bins: np.ndarray):
    a = params.arrays
    X = (np.asarray(X, dtype=np.float64) - a["x_mean"]) * a["x_scale"].astype(np.float64)
    z1 = X @ a["w1"].astype(np.float64) + a["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ a["w2"].astype(np.float64) + a["b2"]
    h2 = np.maximum(z2, 0.0)
    pooled, argmax = pool_with_argmax(bins, h2, params.spp.n_bins, params.spp.empty_fill)
    e = pooled.reshape(-1)
    z3 = e @ a["w3"].astype(np.float64) + a["b3"]
    h3 = np.maximum(z3, 0.0)
    z4 = h3 @ a["w4"].astype(np.float64) + a["b4"]
    p = softmax(z4)
    cache = dict(X=X, z1=z1, h1=h1, z2=z2, h2=h2, argmax=argmax, e=e, z3=z3, h3=h3, p=p)
    return e, p, cache


def _check_shapes(params: NetParams, n_rows: int, X: np.ndarray):
    if X.ndim != 2 or X.shape[0] != n_rows:
        raise ShapeMismatchError(f"feature matrix {X.shape} does not match {n_rows} points")
    if X.shape[1] != params.sizes[0]:
        raise ShapeMismatchError(f"network expects {params.sizes[0]}-D features, got {X.shape[1]}")


def forward(params: NetParams, cloud, fm, cfg: SppConfig | None = None):
    """Returns ``(embedding, probabilities)``; the embedding is the pooled vector."""
    if cfg is not None and cfg != params.spp:
        raise ShapeMismatchError(f"SPP config {cfg} differs from the network's {params.spp}")
    points = np.asarray(getattr(cloud, "points", cloud))
    X = np.asarray(getattr(fm, "features", fm))
    _check_shapes(params, len(points), X)
    e, p, _ = _forward(params, X, bin_indices(points, params.spp))
    return e, p


def backward(params: NetParams, cache: dict, y: int) -> dict:
    a = {k: params.arrays[k].astype(np.float64) for k in PARAM_ORDER}
    p = cache["p"]
    if p[y] < PROB_FLOOR:
        dz4 = np.zeros_like(p)  # clamped region: loss is constant
    else:
        dz4 = p.copy()
        dz4[y] -= 1.0
    g = {}
    g["w4"] = np.outer(cache["h3"], dz4)
    g["b4"] = dz4
    dz3 = (a["w4"] @ dz4) * (cache["z3"] > 0)
    g["w3"] = np.outer(cache["e"], dz3)
    g["b3"] = dz3
    de = (a["w3"] @ dz3).reshape(cache["argmax"].shape)

    argmax = cache["argmax"]
    hit = argmax >= 0
    dh2 = np.zeros_like(cache["h2"])
    channel = np.broadcast_to(np.arange(argmax.shape[1]), argmax.shape)
    np.add.at(dh2, (argmax[hit], channel[hit]), de[hit])

    dz2 = dh2 * (cache["z2"] > 0)
    g["w2"] = cache["h1"].T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ a["w2"].T) * (cache["z1"] > 0)
    g["w1"] = cache["X"].T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return g


def loss_and_grad(params: NetParams, X, bins, y: int):
    _, p, cache = _forward(params, X, bins)
    l = loss(p, y)
    if not math.isfinite(l):
        raise DivergenceError("non-finite loss")
    return l, backward(params, cache, y), p


# ---------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Return updated parameters (same dtypes as ``params``)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, w in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            new = w.astype(np.float64) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = new.astype(w.dtype)
        return out


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 42
    split: tuple = (0.70, 0.15, 0.15)
    hidden: tuple = (64, 32)
    classifier_hidden: int = 64
    augment: bool = True  # random quarter-turns about the cube's z axis

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.train_loss)

    def as_dict(self) -> dict:
        return {"train_loss": self.train_loss, "train_acc": self.train_acc,
                "val_loss": self.val_loss, "val_acc": self.val_acc, "best_epoch": self.best_epoch}


@dataclass
class Sample:
    points: np.ndarray
    features: np.ndarray
    label: int
    bins: np.ndarray | None = None


def _prepare(samples, spp):
    out = []
    for s in samples:
        if isinstance(s, Sample):
            pts, X, y = s.points, s.features, s.label
        else:
            cloud, fm, y = s
            pts = getattr(cloud, "points", cloud)
            X = getattr(fm, "features", fm)
        pts = np.asarray(pts, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        out.append(Sample(pts, X, int(y), bin_indices(pts, spp)))
    return out


def evaluate_split(params: NetParams, samples) -> tuple:
    """Mean loss and accuracy over prepared samples."""
    if not samples:
        return float("nan"), float("nan")
    losses, hits = [], 0
    for s in samples:
        _, p, _ = _forward(params, s.features, s.bins)
        losses.append(loss(p, s.label))
        hits += int(np.argmax(p) == s.label)
    return float(np.mean(losses)), hits / len(samples)


def train(train_set, tcfg: TrainConfig = TrainConfig(), scfg: SppConfig = SppConfig(),
          val_set=(), n_families: int | None = None, log=None, augment=None):
    """Mini-batch Adam on categorical cross-entropy.

    ``train_set`` and ``val_set`` hold ``(cloud, feature_matrix, label)``
    triples (or :class:`Sample`). Labels are dense class indices. The
    returned parameters are those of the epoch with the best validation
    accuracy (lower validation loss breaks ties); without a validation set
    the last epoch wins.

    ``augment(points, features, k)`` maps a training sample to a
    transformed copy; ``k`` in 0..3 is drawn per sample per epoch from the
    training seed and ``k == 0`` is left untouched. With ``tcfg.augment``
    set and no callable given, quarter-turn rotation is used.
    """
    if augment is None and tcfg.augment:
        augment = rotate_quarter_turns
    train_s = _prepare(train_set, scfg)
    val_s = _prepare(val_set, scfg)
    if not train_s:
        raise EmptySplitError("training split is empty")
    labels = {s.label for s in train_s}
    if n_families is None:
        n_families = max(labels | {s.label for s in val_s}) + 1
    missing = set(range(n_families)) - labels
    if missing:
        raise EmptySplitError(f"no training samples for classes {sorted(missing)}")
    in_dim = train_s[0].features.shape[1]
    for s in train_s + val_s:
        if s.features.shape[1] != in_dim:
            raise ShapeMismatchError("feature width differs between samples")

    rng = SplitMix64(tcfg.seed)
    params = init_params(n_families, in_dim, tcfg.hidden, tcfg.classifier_hidden, scfg,
                         seed=int(rng.next_u64(1)[0]))
    params.arrays["x_mean"], params.arrays["x_scale"] = input_stats([s.features for s in train_s])
    opt = Adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    hist = TrainHistory()
    best = None

    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_s))
        turns = rng.integers(4, len(train_s)) if augment is not None else None
        losses, hits = [], 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            total = None
            for idx in batch:
                s = train_s[idx]
                if turns is not None and turns[idx]:
                    pts, X = augment(s.points, s.features, turns[idx])
                    s = Sample(pts, X, s.label, bin_indices(pts, scfg))
                l, g, p = loss_and_grad(params, s.features, s.bins, s.label)
                if not math.isfinite(l):
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
                losses.append(l)
                hits += int(np.argmax(p) == s.label)
                total = g if total is None else {k: total[k] + g[k] for k in PARAM_ORDER}
            grads = {k: v / len(batch) for k, v in total.items()}
            trainable = {k: params.arrays[k] for k in PARAM_ORDER}
            params = NetParams({**params.arrays, **opt.step(trainable, grads)}, scfg)
        for k in PARAM_ORDER:
            if not np.all(np.isfinite(params.arrays[k])):
                raise DivergenceError(f"non-finite parameter {k} at epoch {epoch + 1}")

        hist.train_loss.append(float(np.mean(losses)))
        hist.train_acc.append(hits / len(train_s))
        vl, va = evaluate_split(params, val_s)
        hist.val_loss.append(vl)
        hist.val_acc.append(va)
        if log:
            log(f"epoch {epoch + 1:3d}  loss {hist.train_loss[-1]:.4f}  acc {hist.train_acc[-1]:.3f}"
                f"  val_loss {vl:.4f}  val_acc {va:.3f}")
        if val_s:
            key = (va, -vl)
            if best is None or key > best[0]:
                best = (key, epoch, params.copy())
        else:
            best = (None, epoch, params.copy())

    hist.best_epoch = best[1] + 1
    return best[2], hist


# ---------------------------------------------------------------------------
# gradient check

def _signature(cache):
    return (cache["z1"] > 0, cache["z2"] > 0, cache["z3"] > 0, cache["argmax"])


def _same_signature(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(params: NetParams, sample, eps: float = 1e-5, n_params: int = 200, seed: int = 0,
               return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. Parameters are drawn evenly across the eight tensors;
    a draw whose ``+-eps`` evaluations cross a ReLU kink or switch a
    pooling argmax is discarded and redrawn, since the loss is not
    differentiable there.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    p64 = params.astype(np.float64)
    if isinstance(sample, Sample):
        pts, X, y = sample.points, sample.features, sample.label
    else:
        cloud, fm, y = sample
        pts, X = getattr(cloud, "points", cloud), getattr(fm, "features", fm)
    pts = np.asarray(pts, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_shapes(p64, len(pts), X)
    bins = bin_indices(pts, p64.spp)

    _, _, cache = _forward(p64, X, bins)
    base_sig = _signature(cache)
    analytic = backward(p64, cache, y)

    rng = SplitMix64(seed)
    per_tensor = -(-n_params // len(PARAM_ORDER))
    worst, checked, skipped = 0.0, 0, 0
    for name in PARAM_ORDER:
        arr = p64.arrays[name]
        flat = arr.reshape(-1)
        done, attempts = 0, 0
        while done < per_tensor and attempts < 20 * per_tensor:
            attempts += 1
            i = rng.integers(flat.size)
            old = flat[i]
            flat[i] = old + eps
            _, pp, cp = _forward(p64, X, bins)
            flat[i] = old - eps
            _, pm, cm = _forward(p64, X, bins)
            flat[i] = old
            if not (_same_signature(base_sig, _signature(cp)) and _same_signature(base_sig, _signature(cm))):
                skipped += 1
                continue
            num = (loss(pp, y) - loss(pm, y)) / (2.0 * eps)
            ana = analytic[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana))
            rel = 0.0 if denom == 0.0 else abs(num - ana) / denom
            worst = max(worst, rel)
            done += 1
        checked += done
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst


# ---------------------------------------------------------------------------
# FNET serialisation

def encode_fnet(params: NetParams) -> bytes:
    """``FNET`` | u16 version | u32 n_sizes, sizes (D H1 H2 C F) | u32 n_levels, levels |
    u8 domain | f32 empty_fill | tensors w1 b1 w2 b2 w3 b3 w4 b4 x_mean x_scale as f32 LE,
    row-major."""
    sizes = params.sizes
    levels = params.spp.levels
    head = FNET_MAGIC + struct.pack("<H", FNET_VERSION)
    head += struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    head += struct.pack(f"<I{len(levels)}I", len(levels), *levels)
    head += struct.pack("<Bf", _DOMAIN_CODES[params.spp.domain], params.spp.empty_fill)
    body = b"".join(np.ascontiguousarray(params.arrays[k], dtype="<f4").tobytes() for k in PARAM_ORDER + NORM_KEYS)
    return head + body


def decode_fnet(data: bytes) -> NetParams:
    if len(data) < 4 or data[:4] != FNET_MAGIC:
        raise BadMagicError("not an FNET file")
    try:
        off = 4
        (version,) = struct.unpack_from("<H", data, off)
        off += 2
        if version != FNET_VERSION:
            raise VersionUnsupportedError(f"FNET version {version} not supported")
        (ns,) = struct.unpack_from("<I", data, off)
        off += 4
        if ns != 5:
            raise MalformedError(f"expected 5 layer sizes, got {ns}")
        sizes = struct.unpack_from(f"<{ns}I", data, off)
        off += 4 * ns
        (nl,) = struct.unpack_from("<I", data, off)
        off += 4
        if nl == 0 or nl > 64:
            raise MalformedError(f"implausible pyramid level count {nl}")
        levels = struct.unpack_from(f"<{nl}I", data, off)
        off += 4 * nl
        domain_code, fill = struct.unpack_from("<Bf", data, off)
        off += 5
    except struct.error as e:
        raise TruncatedError(f"FNET header truncated: {e}") from None
    domains = {v: k for k, v in _DOMAIN_CODES.items()}
    if domain_code not in domains:
        raise MalformedError(f"unknown SPP domain code {domain_code}")
    try:
        spp = SppConfig(tuple(levels), domains[domain_code], float(fill))
    except ValueError as e:
        raise MalformedError(str(e)) from None
    shapes = expected_shapes(sizes, spp)
    shapes.update({k: (sizes[0],) for k in NORM_KEYS})
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(data) - off != 4 * total:
        raise TruncatedError(f"FNET payload has {len(data) - off} bytes, expected {4 * total}")
    arrays = {}
    for k in PARAM_ORDER + NORM_KEYS:
        count = int(np.prod(shapes[k]))
        arrays[k] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shapes[k]).astype(np.float32)
        off += 4 * count
    return NetParams(arrays, spp)


def save_params(params: NetParams, path) -> None:
    atomic_write_bytes(path, encode_fnet(params))


def load_params(path) -> NetParams:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return decode_fnet(data)
