"""Identity embeddings, the gallery, and k-closest matching.

A small convolutional classifier stands in for a large pretrained face
network: three conv/batch-norm/pool blocks into a 64-dimensional
fully-connected stage (the embedding) and a softmax identity head.  The
gallery (FeatDB) stores one mean-embedding template per enrolled identity;
probes are matched by cosine similarity and the top-k identities become
the generator's identity-mixing weights.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import store
from .imgops import resize_bilinear
from .layers import (
    Adam,
    AvgPool2x,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    LeakyReLU,
    Network,
    TrainConfig,
    one_hot,
)

logger = logging.getLogger(__name__)


class EncoderModel(Network):
    """Conv classifier whose penultimate fully-connected stage is the
    embedding."""

    def __init__(
        self,
        num_classes: int,
        input_size: int = 32,
        channels: tuple[int, ...] = (8, 16, 32),
        embed_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        if input_size % (2 ** len(channels)) != 0:
            raise ValueError(
                f"input size {input_size} not divisible by 2^{len(channels)}"
            )
        self.num_classes = num_classes
        self.input_size = input_size
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        self.seed = seed

        rng = np.random.default_rng([seed, 0])
        self.stages = []
        c_prev = 3
        for i, c_out in enumerate(self.channels):
            conv = self.add(f"stage{i}.conv", Conv2d(c_prev, c_out, 3, rng))
            bn = self.add(f"stage{i}.bn", BatchNorm(c_out))
            act = self.add(f"stage{i}.act", LeakyReLU())
            pool = self.add(f"stage{i}.pool", AvgPool2x())
            self.stages.append((conv, bn, act, pool))
            c_prev = c_out
        self.flatten = self.add("flatten", Flatten())
        final_hw = input_size // (2 ** len(self.channels))
        self.fc_embed = self.add(
            "fc_embed", Dense(final_hw * final_hw * c_prev, embed_dim, rng)
        )
        self.act_embed = self.add("act_embed", LeakyReLU())
        self.fc_out = self.add("fc_out", Dense(embed_dim, num_classes, rng))

        self.identity_labels: list[str] | None = None
        self.final_accuracy: float | None = None
        self.loss_curve: np.ndarray | None = None
        self.accuracy_curve: np.ndarray | None = None
        self._embedding = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for conv, bn, act, pool in self.stages:
            x = pool.forward(act.forward(bn.forward(conv.forward(x, training), training), training), training)
        x = self.flatten.forward(x, training)
        emb = self.act_embed.forward(self.fc_embed.forward(x, training), training)
        self._embedding = emb
        return self.fc_out.forward(emb, training)

    def backward(self, grad_logits: np.ndarray) -> None:
        g = self.fc_out.backward(grad_logits)
        g = self.fc_embed.backward(self.act_embed.backward(g))
        g = self.flatten.backward(g)
        for conv, bn, act, pool in reversed(self.stages):
            g = conv.backward(bn.backward(act.backward(pool.backward(g))))

    def hyperparameters(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
            "seed": self.seed,
        }


@dataclass
class EncoderCorpus:
    """Labeled image set for classifier training."""

    images: np.ndarray  # (n, s, s, 3)
    labels: np.ndarray  # (n,) integer identity indices
    identity_labels: list[str]

    def __len__(self) -> int:
        return len(self.images)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_encoder(corpus: EncoderCorpus, cfg: TrainConfig) -> EncoderModel:
    """Softmax identity-classification training, deterministic per seed."""
    labels = np.asarray(corpus.labels, dtype=int)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("encoder training needs at least 2 identities")
    if counts.min() < 2:
        raise ValueError("encoder training needs at least 2 images per identity")

    model = EncoderModel(num_classes=len(corpus.identity_labels), seed=cfg.seed)
    model.identity_labels = list(corpus.identity_labels)
    images = np.asarray(corpus.images, dtype=float)
    if images.shape[1:3] != (model.input_size, model.input_size):
        raise ValueError(
            f"encoder corpus images must be {model.input_size}x{model.input_size}"
        )
    logger.info(
        "training encoder: %d images, %d identities, %d parameters",
        len(corpus),
        len(classes),
        model.param_count,
    )

    rng = np.random.default_rng([cfg.seed, 1])
    adam = Adam(
        model.named_parameters(),
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
    )
    n = len(images)
    loss_curve = []
    acc_curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        hits = 0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            model.zero_grads()
            logits = model.forward(images[sel], training=True)
            loss, grad = softmax_cross_entropy(logits, labels[sel])
            losses.append(loss)
            hits += int((logits.argmax(axis=1) == labels[sel]).sum())
            model.backward(grad)
            adam.step()
        loss_curve.append(float(np.mean(losses)))
        acc_curve.append(hits / n)

    from .generator import calibrate_batchnorm  # shared layer machinery

    calibrate_batchnorm(model, images)
    logits = model.forward(images, training=False)
    model.final_accuracy = float(np.mean(logits.argmax(axis=1) == labels))
    model.loss_curve = np.asarray(loss_curve)
    model.accuracy_curve = np.asarray(acc_curve)
    logger.info("final training accuracy: %.3f", model.final_accuracy)
    return model


def extract_embedding(model: EncoderModel, img: np.ndarray) -> np.ndarray:
    """Embedding of one image; resized internally to the model input dims."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected a color image, got shape {img.shape}")
    s = model.input_size
    if img.shape[:2] != (s, s):
        img = resize_bilinear(img, s, s)
    model.forward(img[None], training=False)
    return model._embedding[0].copy()


def extract_embeddings(model: EncoderModel, imgs: list[np.ndarray]) -> np.ndarray:
    """Batched embedding extraction (one forward pass)."""
    s = model.input_size
    batch = np.stack(
        [im if im.shape[:2] == (s, s) else resize_bilinear(im, s, s) for im in imgs]
    )
    model.forward(batch, training=False)
    return model._embedding.copy()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|), clipped into [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class FeatDB:
    """Gallery of per-identity embedding templates, in enrollment order."""

    ids: tuple[str, ...]
    templates: np.ndarray  # (m, d)

    def __post_init__(self):
        if len(self.ids) != len(self.templates) or len(self.ids) < 1:
            raise ValueError("gallery needs one template per identity")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery identity ids must be unique")

    @property
    def size(self) -> int:
        return len(self.ids)

    def index_of(self, identity: str) -> int:
        return self.ids.index(identity)


def build_gallery(model: EncoderModel, images_by_identity: dict) -> FeatDB:
    """Mean-embedding template per identity, preserving the given order."""
    ids = []
    templates = []
    for identity, images in images_by_identity.items():
        if len(images) == 0:
            raise ValueError(f"identity {identity!r} has no enrollment images")
        embs = extract_embeddings(model, list(images))
        ids.append(str(identity))
        templates.append(embs.mean(axis=0))
    return FeatDB(ids=tuple(ids), templates=np.stack(templates))


def match_k_closest(db: FeatDB, probe: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k gallery identities by cosine similarity (ties: ascending id)."""
    if not 1 <= k <= db.size:
        raise ValueError(f"k must be in [1, {db.size}], got {k}")
    sims = [cosine_similarity(probe, t) for t in db.templates]
    order = sorted(range(db.size), key=lambda i: (-sims[i], db.ids[i]))
    return [(db.ids[i], sims[i]) for i in order[:k]]


def identities_to_y(
    matches: list[tuple[str, float]], db: FeatDB, mode: str = "uniform"
) -> np.ndarray:
    """Turn a match list into identity-mixing weights over the gallery.

    uniform: 1/k on each matched identity.  similarity: proportional to
    max(similarity, 0); if every similarity is <= 0 this falls back to
    uniform weighting.
    """
    if len(matches) == 0:
        raise ValueError("cannot build identity weights from an empty match list")
    if mode not in ("uniform", "similarity"):
        raise ValueError(f"unknown weighting mode {mode!r}")
    y = np.zeros(db.size)
    indices = [db.index_of(identity) for identity, _ in matches]
    if mode == "similarity":
        weights = np.array([max(sim, 0.0) for _, sim in matches])
        if weights.sum() <= 0.0:
            weights = np.ones(len(matches))
    else:
        weights = np.ones(len(matches))
    y[indices] = weights / weights.sum()
    return y


# --- gallery file format ---

_FEATDB_MAGIC = b"FDB1"
_FEATDB_VERSION = 1


def save_featdb(db: FeatDB, path) -> None:
    """Write the gallery: magic, version, M, D, then per-identity records
    (id length, id bytes, D little-endian float64 template values)."""
    from pathlib import Path

    parts = [
        _FEATDB_MAGIC,
        int(_FEATDB_VERSION).to_bytes(4, "little"),
        int(db.size).to_bytes(4, "little"),
        int(db.templates.shape[1]).to_bytes(4, "little"),
    ]
    for identity, template in zip(db.ids, db.templates):
        raw = identity.encode("utf-8")
        parts.append(len(raw).to_bytes(4, "little"))
        parts.append(raw)
        parts.append(np.ascontiguousarray(template, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_featdb(path) -> FeatDB:
    from pathlib import Path

    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _FEATDB_MAGIC:
        raise store.CheckpointError(f"{path}: not a gallery file")
    version = int.from_bytes(data[4:8], "little")
    if version != _FEATDB_VERSION:
        raise store.CheckpointError(f"{path}: unsupported gallery version {version}")
    m = int.from_bytes(data[8:12], "little")
    d = int.from_bytes(data[12:16], "little")
    pos = 16
    ids = []
    templates = []
    for _ in range(m):
        if len(data) < pos + 4:
            raise store.CheckpointError(f"{path}: truncated at byte {pos}")
        idlen = int.from_bytes(data[pos : pos + 4], "little")
        pos += 4
        if len(data) < pos + idlen + d * 8:
            raise store.CheckpointError(f"{path}: truncated at byte {pos}")
        ids.append(data[pos : pos + idlen].decode("utf-8"))
        pos += idlen
        templates.append(np.frombuffer(data, dtype="<f8", count=d, offset=pos).astype(float))
        pos += d * 8
    if pos != len(data):
        raise store.CheckpointError(f"{path}: trailing bytes after gallery payload")
    return FeatDB(ids=tuple(ids), templates=np.stack(templates))


def save_encoder(model: EncoderModel, path) -> None:
    meta = model.hyperparameters()
    meta["identity_labels"] = model.identity_labels
    meta["final_accuracy"] = model.final_accuracy
    arrays = [(name, value) for name, value, _ in model.named_parameters()]
    arrays += model.named_buffers()
    store.write_blob(path, "encoder", meta, arrays)


def load_encoder(path) -> EncoderModel:
    from .generator import _restore_arrays

    meta, arrays = store.read_blob(path, "encoder")
    try:
        model = EncoderModel(
            num_classes=meta["num_classes"],
            input_size=meta["input_size"],
            channels=tuple(meta["channels"]),
            embed_dim=meta["embed_dim"],
            seed=meta["seed"],
        )
    except KeyError as exc:
        raise store.CheckpointError(f"{path}: header is missing {exc}") from None
    _restore_arrays(model, arrays, path)
    model.identity_labels = meta.get("identity_labels")
    model.final_accuracy = meta.get("final_accuracy")
    return model
