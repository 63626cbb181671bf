"""Learned, concept-conditioned energy over attention maps.

A two-layer perceptron embeds ``[flattened map ; concept vector]`` into ``d``
dimensions and a final row ``wf`` turns the embedding into a scalar energy.
Training runs four weight-shared branches per item (false anchor, true
anchor, positive, negative) and combines a hinge energy loss with a cosine
triplet loss, keeping only the hardest candidates of each mini-batch.

Forward passes use ``einsum`` rather than BLAS matmul so that a row's result
does not depend on how many other rows share the batch.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .embedding import ConceptVocabulary
from .energy import VideoScoreTable
from .netcore import TrainingDiverged

logger = logging.getLogger(__name__)

ENERGYNET_MAGIC = b"ATEN"
ENERGYNET_VERSION = 1


@dataclass
class EnergyNetParams:
    w1: np.ndarray  # (H, map_dim + dim_c)
    b1: np.ndarray
    w2: np.ndarray  # (d, H)
    b2: np.ndarray
    wf: np.ndarray  # (d,)
    dim_c: int
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def map_dim(self) -> int:
        return self.input_dim - self.dim_c

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.wf]

    def copy(self) -> "EnergyNetParams":
        return replace(self, w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy(),
                       b2=self.b2.copy(), wf=self.wf.copy())

    def equal(self, other: "EnergyNetParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class EnergyNetGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wf: np.ndarray


def init_energynet(map_dim: int, dim_c: int, hidden: int = 128, d: int = 64, seed: int = 0) -> EnergyNetParams:
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    w1 = glorot(hidden, map_dim + dim_c)
    w2 = glorot(d, hidden)
    wf = glorot(1, d)[0]
    return EnergyNetParams(w1, np.zeros(hidden), w2, np.zeros(d), wf, dim_c, seed)


def _affine(x, w, b):
    return np.einsum("bi,hi->bh", x, w) + b


def _forward(x, params):
    z1 = _affine(x, params.w1, params.b1)
    h = np.maximum(z1, 0.0)
    f = _affine(h, params.w2, params.b2)
    e = np.einsum("bi,i->b", f, params.wf)
    return z1, h, f, e


def _inputs(v_l, v_c, params) -> np.ndarray:
    v_l = np.asarray(v_l, dtype=np.float64)
    v_c = np.asarray(v_c, dtype=np.float64)
    v_l = v_l.reshape(v_l.shape[0], -1) if v_l.ndim > 1 and v_c.ndim > 1 else v_l.reshape(-1)
    x = np.concatenate([v_l, v_c], axis=-1)
    if x.shape[-1] != params.input_dim or v_c.shape[-1] != params.dim_c:
        raise ValueError(
            f"input of size {v_l.shape[-1]} + {v_c.shape[-1]} does not match "
            f"network ({params.map_dim} + {params.dim_c})"
        )
    return x


def embed(v_l, v_c, params: EnergyNetParams) -> np.ndarray:
    """``layer2(relu(layer1([v_l ; v_c])))`` for one input or a batch of rows."""
    x = _inputs(v_l, v_c, params)
    single = x.ndim == 1
    f = _forward(np.atleast_2d(x), params)[2]
    return f[0] if single else f


def energy_net(attention, concept: int, vocab: ConceptVocabulary, params: EnergyNetParams) -> float:
    """Scalar energy ``wf . f(map, V_c)`` of one map for one concept."""
    x = _inputs(np.ravel(attention), vocab.vectors[concept], params)
    return float(_forward(x[None], params)[3][0])


def energy_loss(e_gt: float, e_fa: float, m: float = 1.0) -> float:
    if m <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, e_fa - e_gt + m)


def cosine_distance(u, v) -> float:
    """``1 - cos(u, v)``; a zero vector gives the neutral value 1."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        logger.warning("zero-norm embedding in cosine distance; using distance 1")
        return 1.0
    return float(1.0 - np.dot(u, v) / (nu * nv))


def triplet_loss(f_a, f_p, f_n, beta: float = 0.5) -> float:
    if beta <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, cosine_distance(f_a, f_p) - cosine_distance(f_a, f_n) + beta)


def _cosine_rows(u, v):
    """Row-wise cosine distance and its gradients w.r.t. u and v."""
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    dot = np.einsum("bi,bi->b", u, v)
    ok = (nu > 0) & (nv > 0)
    denom = np.where(ok, nu * nv, 1.0)
    cos = np.where(ok, dot / denom, 0.0)
    du = -(v / denom[:, None] - (cos / np.where(ok, nu * nu, 1.0))[:, None] * u)
    dv = -(u / denom[:, None] - (cos / np.where(ok, nv * nv, 1.0))[:, None] * v)
    du[~ok] = 0.0
    dv[~ok] = 0.0
    if not ok.all():
        logger.debug("%d zero-norm embeddings; distance set to 1", int((~ok).sum()))
    return 1.0 - cos, du, dv


# --------------------------------------------------------------------------
# Siamese joint loss
# --------------------------------------------------------------------------


@dataclass
class SiameseBatch:
    """Rows of network inputs for B items, one array per branch."""

    x_fa: np.ndarray  # anchor frame with its false concept
    x_gt: np.ndarray  # anchor frame with its true concept
    x_pos: np.ndarray  # same-class frame with its true concept
    x_neg: np.ndarray  # other-class frame with its true concept

    def __len__(self):
        return self.x_fa.shape[0]

    def take(self, idx) -> "SiameseBatch":
        return SiameseBatch(self.x_fa[idx], self.x_gt[idx], self.x_pos[idx], self.x_neg[idx])


@dataclass
class SiameseItem:
    """One training item with frame references kept for bookkeeping."""

    anchor_maps: np.ndarray  # (n, h, w) maps of the anchor frame
    c_gt: int
    c_fa: int
    pos_map: np.ndarray  # true map of the positive frame
    neg_map: np.ndarray  # true map of the negative frame
    c_neg: int
    anchor_ref: tuple = ()
    pos_ref: tuple = ()
    neg_ref: tuple = ()

    def __post_init__(self):
        if self.c_fa == self.c_gt:
            raise ValueError("false concept must differ from the true concept")
        if self.c_neg == self.c_gt:
            raise ValueError("negative frame must belong to another class")

    def to_batch(self, vocab: ConceptVocabulary) -> SiameseBatch:
        v = vocab.vectors
        row = lambda m, c: np.concatenate([np.ravel(m), v[c]])[None]
        return SiameseBatch(
            row(self.anchor_maps[self.c_fa], self.c_fa),
            row(self.anchor_maps[self.c_gt], self.c_gt),
            row(self.pos_map, self.c_gt),
            row(self.neg_map, self.c_neg),
        )


@dataclass
class JointTerms:
    joint: np.ndarray
    energy: np.ndarray
    triplet: np.ndarray


def joint_terms(batch: SiameseBatch, params: EnergyNetParams, m=1.0, beta=0.5, lambda_t=1.0,
                _cache=None) -> JointTerms:
    """Per-item energy, triplet and joint losses (forward only)."""
    b = len(batch)
    x = np.concatenate([batch.x_fa, batch.x_gt, batch.x_pos, batch.x_neg])
    z1, h, f, e = _forward(x, params)
    e_fa, e_gt = e[:b], e[b : 2 * b]
    f_gt, f_pos, f_neg = f[b : 2 * b], f[2 * b : 3 * b], f[3 * b :]
    el = np.maximum(0.0, e_fa - e_gt + m)
    d_ap, dap_a, dap_p = _cosine_rows(f_gt, f_pos)
    d_an, dan_a, dan_n = _cosine_rows(f_gt, f_neg)
    tl = np.maximum(0.0, d_ap - d_an + beta)
    if _cache is not None:
        _cache.update(x=x, z1=z1, h=h, f=f, el=el, tl=tl, dap_a=dap_a, dap_p=dap_p, dan_a=dan_a, dan_n=dan_n)
    return JointTerms(el + lambda_t * tl, el, tl)


def joint_loss_batch(batch: SiameseBatch, params: EnergyNetParams, m=1.0, beta=0.5, lambda_t=1.0):
    """Mean joint loss over the batch and its gradient w.r.t. all parameters.

    All four branches share ``params``; their gradients are summed.
    """
    cache = {}
    terms = joint_terms(batch, params, m, beta, lambda_t, _cache=cache)
    b = len(batch)
    f, h, z1, x = cache["f"], cache["h"], cache["z1"], cache["x"]
    e_act = (cache["el"] > 0).astype(np.float64)
    t_act = lambda_t * (cache["tl"] > 0).astype(np.float64)
    # dL/dE per row
    de = np.concatenate([e_act, -e_act, np.zeros(b), np.zeros(b)]) / b
    df = de[:, None] * params.wf[None, :]
    scale = (t_act / b)[:, None]
    df[b : 2 * b] += scale * (cache["dap_a"] - cache["dan_a"])
    df[2 * b : 3 * b] += scale * cache["dap_p"]
    df[3 * b :] -= scale * cache["dan_n"]
    g_wf = de @ f
    g_w2 = df.T @ h
    g_b2 = df.sum(axis=0)
    dz1 = (df @ params.w2) * (z1 > 0)
    g_w1 = dz1.T @ x
    g_b1 = dz1.sum(axis=0)
    return float(terms.joint.mean()), EnergyNetGrads(g_w1, g_b1, g_w2, g_b2, g_wf), terms


def joint_loss(item: SiameseItem, params: EnergyNetParams, vocab: ConceptVocabulary,
               m=1.0, beta=0.5, lambda_t=1.0):
    """Joint loss of one Siamese item and the gradient of all shared weights."""
    loss, grads, _ = joint_loss_batch(item.to_batch(vocab), params, m, beta, lambda_t)
    return loss, grads


def sgd_update(params: EnergyNetParams, grads: EnergyNetGrads, lr: float, wd: float) -> EnergyNetParams:
    """``w <- w - lr (g + wd w)`` on weights; biases get no decay."""
    for name, g in vars(grads).items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
    return replace(
        params,
        w1=params.w1 - lr * (grads.w1 + wd * params.w1),
        b1=params.b1 - lr * grads.b1,
        w2=params.w2 - lr * (grads.w2 + wd * params.w2),
        b2=params.b2 - lr * grads.b2,
        wf=params.wf - lr * (grads.wf + wd * params.wf),
    )


# --------------------------------------------------------------------------
# Online hard negative mining
# --------------------------------------------------------------------------


def mine_hard_negatives(losses, k: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``k`` highest losses plus ``r`` random others.

    Ties keep candidate order. The random extras are drawn uniformly from the
    candidates not already selected.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if k < 1 or r < 0:
        raise ValueError("need k >= 1 and r >= 0")
    if len(losses) < k + r:
        raise ValueError(f"candidate pool of {len(losses)} is smaller than k + r = {k + r}")
    order = np.argsort(-losses, kind="stable")
    top = order[:k]
    if r == 0:
        return top
    rest = np.sort(order[k:])
    extra = rng.choice(rest, size=r, replace=False)
    return np.concatenate([top, extra])


@dataclass(frozen=True)
class MiningState:
    batch_size: int = 32
    small: int = 32
    large: int = 256
    tau: float = 0.5
    k: int = 16
    r: int = 4
    grown: bool = False

    def __post_init__(self):
        if self.k < 1 or self.r < 0:
            raise ValueError("need k >= 1 and r >= 0")
        if self.batch_size < self.k + self.r:
            raise ValueError("candidate batch smaller than k + r")


def grow_schedule(state: MiningState, recent_mean_loss: float) -> MiningState:
    """Switch to the large candidate batch once the loss drops below ``tau``."""
    if state.grown or not recent_mean_loss < state.tau:
        return state
    return replace(state, batch_size=state.large, grown=True)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainSample:
    video_id: str
    frame: int
    label: int
    maps: np.ndarray  # (n, h, w): one cached map per concept


@dataclass
class EnergyNetConfig:
    margin: float = 1.0
    beta: float = 0.5
    lambda_t: float = 1.0
    d: int = 64
    hidden: int = 128
    lr: float = 1e-4
    wd: float = 5e-4
    k: int = 16
    r: int = 4
    batch_small: int = 32
    batch_large: int = 256
    tau: float = 0.5
    epochs: int = 10
    seed: int = 0
    loss_window: int = 10


@dataclass
class EnergyNetResult:
    params: EnergyNetParams
    log: list  # dicts: iter, joint_loss, energy_loss, triplet_loss, batch_size


class _Sampler:
    """Draws Siamese candidates from per-frame samples."""

    def __init__(self, samples, vocab: ConceptVocabulary):
        self.n = len(vocab)
        self.maps = np.stack([s.maps.reshape(s.maps.shape[0], -1) for s in samples]).astype(np.float64)
        if self.maps.shape[1] != self.n:
            raise ValueError("every sample needs one map per concept")
        self.vectors = vocab.vectors
        self.labels = np.array([s.label for s in samples])
        self.videos = [s.video_id for s in samples]
        if np.any(self.labels < 0) or np.any(self.labels >= self.n):
            raise ValueError("sample label out of range")
        classes = np.unique(self.labels)
        if len(classes) < 2:
            raise ValueError("training needs at least two classes")
        by_class = {c: np.flatnonzero(self.labels == c) for c in classes}
        self.pos_pool = {}
        same_video_classes = set()
        for i, c in enumerate(self.labels):
            pool = [j for j in by_class[c] if self.videos[j] != self.videos[i]]
            if not pool:
                pool = [j for j in by_class[c] if j != i]
                same_video_classes.add(int(c))
            if pool:
                self.pos_pool[i] = np.array(pool)
        for c in sorted(same_video_classes):
            logger.info("class %d has a single training video; positives come from the same video", c)
        excluded = sorted({int(c) for i, c in enumerate(self.labels) if i not in self.pos_pool})
        if excluded:
            logger.warning("classes %s have no positive partner and are not used as anchors", excluded)
        self.anchors = np.array(sorted(self.pos_pool))
        if len(self.anchors) == 0:
            raise ValueError("no anchor frame has a positive partner")
        self.neg_pool = {c: np.flatnonzero(self.labels != c) for c in classes}

    def row(self, sample: np.ndarray, concept: np.ndarray) -> np.ndarray:
        return np.concatenate([self.maps[sample, concept], self.vectors[concept]], axis=1)

    def draw(self, size: int, rng: np.random.Generator):
        anchor = self.anchors[rng.integers(len(self.anchors), size=size)]
        c_gt = self.labels[anchor]
        shift = rng.integers(self.n - 1, size=size)
        c_fa = shift + (shift >= c_gt)
        pos = np.array([self.pos_pool[a][rng.integers(len(self.pos_pool[a]))] for a in anchor])
        neg = np.array([self.neg_pool[c][rng.integers(len(self.neg_pool[c]))] for c in c_gt])
        c_neg = self.labels[neg]
        batch = SiameseBatch(self.row(anchor, c_fa), self.row(anchor, c_gt),
                             self.row(pos, c_gt), self.row(neg, c_neg))
        return batch, dict(anchor=anchor, c_fa=c_fa, pos=pos, neg=neg)


def train_energynet(samples, vocab: ConceptVocabulary, config: EnergyNetConfig,
                    init: EnergyNetParams | None = None) -> EnergyNetResult:
    """Siamese training with online hard negative mining.

    Each iteration draws a candidate pool (random false concepts, random
    positives and negatives), scores it, keeps the top ``k`` by joint loss plus
    ``r`` random extras and takes one SGD step on them. Positives are never
    mined. The candidate pool grows from ``batch_small`` to ``batch_large``
    once the recent mean pool loss falls below ``tau``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    sampler = _Sampler(samples, vocab)
    map_dim = sampler.maps.shape[2]
    params = init.copy() if init is not None else init_energynet(
        map_dim, vocab.dim, config.hidden, config.d, config.seed)
    if params.map_dim != map_dim or params.dim_c != vocab.dim:
        raise ValueError("initial parameters do not match the sample dimensions")
    state = MiningState(config.batch_small, config.batch_small, config.batch_large,
                        config.tau, config.k, config.r)
    rng = np.random.default_rng([config.seed, 2])
    per_epoch = math.ceil(len(samples) / (config.k + config.r))
    log = []
    it = 0
    for epoch in range(config.epochs):
        for _ in range(per_epoch):
            batch, _refs = sampler.draw(state.batch_size, rng)
            terms = joint_terms(batch, params, config.margin, config.beta, config.lambda_t)
            chosen = mine_hard_negatives(terms.joint, config.k, config.r, rng)
            loss, grads, _ = joint_loss_batch(batch.take(chosen), params, config.margin,
                                              config.beta, config.lambda_t)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at iteration {it} (epoch {epoch})", epoch)
            params = sgd_update(params, grads, config.lr, config.wd)
            log.append({
                "iter": it,
                "joint_loss": float(terms.joint.mean()),
                "energy_loss": float(terms.energy.mean()),
                "triplet_loss": float(terms.triplet.mean()),
                "batch_size": int(state.batch_size),
            })
            recent = np.mean([e["joint_loss"] for e in log[-config.loss_window:]])
            if len(log) >= config.loss_window:
                state = grow_schedule(state, float(recent))
            it += 1
    return EnergyNetResult(params, log)


def energy_table(stacks, vocab: ConceptVocabulary, params: EnergyNetParams) -> np.ndarray:
    """Energies of every (frame, concept) pair, shape ``(N, n)``."""
    stacks = np.asarray(stacks, dtype=np.float64)
    n_frames, n = stacks.shape[:2]
    maps = stacks.reshape(n_frames * n, -1)
    vecs = np.tile(vocab.vectors, (n_frames, 1))
    x = np.concatenate([maps, vecs], axis=1)
    return _forward(x, params)[3].reshape(n_frames, n)


def classify_energynet(stacks, vocab: ConceptVocabulary, params: EnergyNetParams):
    """Mean learned energy per concept over the frames; lowest index wins ties."""
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim != 4 or stacks.shape[0] == 0:
        raise ValueError("expected a non-empty (frames, concepts, h, w) array")
    table = VideoScoreTable(energy_table(stacks, vocab, params).mean(axis=0), stacks.shape[0])
    return table.winner, table


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def dumps_energynet(params: EnergyNetParams) -> bytes:
    buf = io.BytesIO()
    buf.write(ENERGYNET_MAGIC)
    buf.write(struct.pack("<IIIIIQ", ENERGYNET_VERSION, params.input_dim, params.hidden,
                          params.d, params.dim_c, params.seed))
    for arr in params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_energynet(data: bytes) -> EnergyNetParams:
    if data[:4] != ENERGYNET_MAGIC:
        raise ValueError("not an EnergyNet checkpoint (bad magic)")
    fmt = "<IIIIIQ"
    version, n_in, hidden, d, dim_c, seed = struct.unpack_from(fmt, data, 4)
    if version != ENERGYNET_VERSION:
        raise ValueError(f"unsupported EnergyNet checkpoint version {version}")
    off = 4 + struct.calcsize(fmt)
    arrays = []
    for shape in ((hidden, n_in), (hidden,), (d, hidden), (d,), (d,)):
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in EnergyNet checkpoint")
    return EnergyNetParams(*arrays, dim_c=dim_c, seed=seed)


def save_energynet(path, params: EnergyNetParams) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_energynet(params))


def load_energynet(path) -> EnergyNetParams:
    with open(path, "rb") as fh:
        return loads_energynet(fh.read())


def write_log(path, log) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
