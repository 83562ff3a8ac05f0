"""The surrogate-face generator: parameter vectors in, face image out.

The network maps an identity-mixing vector y (convex weights over the M
gallery identities) and an expression one-hot z to a 64x64 RGB image:
two linear fully-connected input branches are concatenated and projected
to an 8x8x32 feature map, which passes through three deconvolution blocks
(nearest-neighbor 2x upscale followed by a 3x3 convolution) with batch
normalization and leaky-rectifier activations between blocks, and a final
3x3 convolution squashed to [0, 1] by a logistic output.  Keeping the
input stages linear makes identity mixing behave like feature-space
averaging, so k-identity mixtures converge toward an average face.

Training minimizes the pixel-wise mean square difference against the
target images with adaptive-moment gradient descent; backpropagation is
implemented by hand in facedeid.layers and verified against central
finite differences in the test suite.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import store
from .layers import (
    Adam,
    BatchNorm,
    Conv2d,
    Dense,
    LeakyReLU,
    Network,
    Sigmoid,
    TrainConfig,
    UpsampleNearest2x,
    one_hot,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


def validate_identity_vector(y: np.ndarray, num_identities: int) -> np.ndarray:
    """Check the identity-mixing invariants: length M, >= 0, sums to 1."""
    y = np.asarray(y, dtype=float)
    if y.shape != (num_identities,):
        raise ValueError(
            f"identity vector must have length {num_identities}, got shape {y.shape}"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("identity vector contains non-finite weights")
    if y.min() < 0.0:
        raise ValueError(f"identity weights must be non-negative, got min {y.min()}")
    if abs(float(y.sum()) - 1.0) > 1e-9:
        raise ValueError(f"identity weights must sum to 1, got {y.sum()!r}")
    return y


def validate_appearance_vector(z: np.ndarray, num_expressions: int) -> np.ndarray:
    """Check the one-hot expression invariant."""
    z = np.asarray(z, dtype=float)
    if z.shape != (num_expressions,):
        raise ValueError(
            f"appearance vector must have length {num_expressions}, got shape {z.shape}"
        )
    ones = np.flatnonzero(z == 1.0)
    if len(ones) != 1 or not np.all((z == 0.0) | (z == 1.0)):
        raise ValueError("appearance vector must be exactly one-hot")
    return z


class GeneratorModel(Network):
    """Deconvolutional generator; see the module docstring for the layout."""

    def __init__(
        self,
        num_identities: int,
        num_expressions: int = 4,
        seed: int = 0,
        base_size: int = 8,
        base_channels: int = 32,
        block_channels: tuple[int, ...] = (16, 8, 8),
        identity_features: int = 64,
        expression_features: int = 16,
    ):
        super().__init__()
        if num_identities < 1 or num_expressions < 1:
            raise ValueError("generator needs at least one identity and expression")
        self.num_identities = num_identities
        self.num_expressions = num_expressions
        self.seed = seed
        self.base_size = base_size
        self.base_channels = base_channels
        self.block_channels = tuple(block_channels)
        self.identity_features = identity_features
        self.expression_features = expression_features
        self.output_size = base_size * 2 ** len(self.block_channels)

        rng = np.random.default_rng([seed, 0])
        self.fc_y = self.add("fc_y", Dense(num_identities, identity_features, rng))
        self.fc_z = self.add("fc_z", Dense(num_expressions, expression_features, rng))
        map_size = base_size * base_size * base_channels
        self.fc_map = self.add(
            "fc_map", Dense(identity_features + expression_features, map_size, rng)
        )

        self.blocks = []
        c_prev = base_channels
        for i, c_out in enumerate(self.block_channels):
            up = self.add(f"block{i}.up", UpsampleNearest2x())
            conv = self.add(f"block{i}.conv", Conv2d(c_prev, c_out, 3, rng))
            bn = self.add(f"block{i}.bn", BatchNorm(c_out))
            act = self.add(f"block{i}.act", LeakyReLU(LEAKY_SLOPE))
            self.blocks.append((up, conv, bn, act))
            c_prev = c_out
        self.conv_out = self.add("conv_out", Conv2d(c_prev, 3, 3, rng))
        self.act_out = self.add("act_out", Sigmoid())

        # filled in by training / checkpoint loading
        self.identity_labels: list[str] | None = None
        self.expression_labels: list[str] | None = None
        self.canonical_landmarks: np.ndarray | None = None
        self.final_loss: float | None = None
        self.last_identity_input: np.ndarray | None = None

    def forward(self, ys: np.ndarray, zs: np.ndarray, training: bool = False) -> np.ndarray:
        # the identity weights are consumed as given, never renormalized;
        # last_identity_input lets tests verify that
        self.last_identity_input = ys
        hy = self.fc_y.forward(ys, training)
        hz = self.fc_z.forward(zs, training)
        h = np.concatenate([hy, hz], axis=1)
        m = self.fc_map.forward(h, training)
        m = m.reshape(len(ys), self.base_size, self.base_size, self.base_channels)
        for up, conv, bn, act in self.blocks:
            m = act.forward(bn.forward(conv.forward(up.forward(m, training), training), training), training)
        return self.act_out.forward(self.conv_out.forward(m, training), training)

    def backward(self, grad_out: np.ndarray) -> None:
        g = self.conv_out.backward(self.act_out.backward(grad_out))
        for up, conv, bn, act in reversed(self.blocks):
            g = up.backward(conv.backward(bn.backward(act.backward(g))))
        g = g.reshape(g.shape[0], -1)
        g = self.fc_map.backward(g)
        self.fc_y.backward(g[:, : self.identity_features])
        self.fc_z.backward(g[:, self.identity_features :])

    def hyperparameters(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "num_expressions": self.num_expressions,
            "seed": self.seed,
            "base_size": self.base_size,
            "base_channels": self.base_channels,
            "block_channels": list(self.block_channels),
            "identity_features": self.identity_features,
            "expression_features": self.expression_features,
        }


def generate(model: GeneratorModel, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Deterministic inference pass for a single (y, z) pair."""
    y = validate_identity_vector(y, model.num_identities)
    z = validate_appearance_vector(z, model.num_expressions)
    out = model.forward(y[None, :], z[None, :], training=False)
    return out[0]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all samples of the squared difference."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def parameter_gradients(
    model: GeneratorModel, ys: np.ndarray, zs: np.ndarray, targets: np.ndarray
) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean batch MSE w.r.t. every parameter.

    Batch normalization runs in training mode (batch statistics), matching
    what the training loop differentiates.
    """
    ys = np.asarray(ys, dtype=float)
    zs = np.asarray(zs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(ys) == 0:
        raise ValueError("gradient batch must not be empty")
    model.zero_grads()
    pred = model.forward(ys, zs, training=True)
    model.backward(2.0 * (pred - targets) / pred.size)
    return {name: grad.copy() for name, _, grad in model.named_parameters()}


@dataclass
class GeneratorCorpus:
    """Training set for the generator: one target image per (identity,
    expression) pair, plus the label vocabularies."""

    images: np.ndarray  # (n, s, s, 3)
    identity_idx: np.ndarray  # (n,)
    expression_idx: np.ndarray  # (n,)
    identity_labels: list[str]
    expression_labels: list[str]
    canonical_landmarks: np.ndarray | None = field(default=None)

    @property
    def num_identities(self) -> int:
        return len(self.identity_labels)

    @property
    def num_expressions(self) -> int:
        return len(self.expression_labels)

    def __len__(self) -> int:
        return len(self.images)


def calibrate_batchnorm(model: Network, *forward_args) -> None:
    """Replace running statistics with full-set statistics.

    One training-mode pass over the whole set, then each normalization
    layer adopts that batch's statistics, so inference on the training
    distribution matches training behavior.
    """
    model.forward(*forward_args, training=True)
    for bn in model.batchnorm_layers():
        bn.set_running_stats(bn.last_batch_mean, bn.last_batch_var)


def train_generator(
    corpus: GeneratorCorpus, cfg: TrainConfig
) -> tuple[GeneratorModel, np.ndarray]:
    """Train from scratch on the corpus; returns the model and the per-epoch
    loss curve.  Identical configs reproduce both bit-exactly."""
    if len(corpus) == 0:
        raise ValueError("generator corpus is empty")
    model = GeneratorModel(
        corpus.num_identities, corpus.num_expressions, seed=cfg.seed
    )
    model.identity_labels = list(corpus.identity_labels)
    model.expression_labels = list(corpus.expression_labels)
    if corpus.canonical_landmarks is not None:
        model.canonical_landmarks = np.asarray(corpus.canonical_landmarks, dtype=float)
    logger.info(
        "training generator: %d images, %d parameters, %d epochs",
        len(corpus),
        model.param_count,
        cfg.epochs,
    )

    ys = one_hot(corpus.identity_idx, corpus.num_identities)
    zs = one_hot(corpus.expression_idx, corpus.num_expressions)
    targets = np.asarray(corpus.images, dtype=float)

    rng = np.random.default_rng([cfg.seed, 1])
    adam = Adam(
        model.named_parameters(),
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
    )
    n = len(corpus)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            model.zero_grads()
            pred = model.forward(ys[sel], zs[sel], training=True)
            diff = pred - targets[sel]
            losses.append(float(np.mean(diff * diff)))
            model.backward(2.0 * diff / pred.size)
            adam.step()
        curve.append(float(np.mean(losses)))
        if (epoch + 1) % 50 == 0 or epoch == cfg.epochs - 1:
            logger.info("epoch %d/%d: loss %.6f", epoch + 1, cfg.epochs, curve[-1])

    calibrate_batchnorm(model, ys, zs)
    model.final_loss = mse_loss(model.forward(ys, zs, training=False), targets)
    logger.info("final training-set loss (inference mode): %.6f", model.final_loss)
    return model, np.asarray(curve)


def save_generator(model: GeneratorModel, path) -> None:
    meta = model.hyperparameters()
    meta["identity_labels"] = model.identity_labels
    meta["expression_labels"] = model.expression_labels
    meta["final_loss"] = model.final_loss
    meta["param_count"] = model.param_count
    arrays = [(name, value) for name, value, _ in model.named_parameters()]
    arrays += model.named_buffers()
    if model.canonical_landmarks is not None:
        arrays.append(("canonical_landmarks", model.canonical_landmarks))
    store.write_blob(path, "generator", meta, arrays)


def load_generator(path) -> GeneratorModel:
    meta, arrays = store.read_blob(path, "generator")
    try:
        model = GeneratorModel(
            num_identities=meta["num_identities"],
            num_expressions=meta["num_expressions"],
            seed=meta["seed"],
            base_size=meta["base_size"],
            base_channels=meta["base_channels"],
            block_channels=tuple(meta["block_channels"]),
            identity_features=meta["identity_features"],
            expression_features=meta["expression_features"],
        )
    except KeyError as exc:
        raise store.CheckpointError(f"{path}: header is missing {exc}") from None
    _restore_arrays(model, arrays, path)
    model.identity_labels = meta.get("identity_labels")
    model.expression_labels = meta.get("expression_labels")
    model.final_loss = meta.get("final_loss")
    if "canonical_landmarks" in arrays:
        model.canonical_landmarks = arrays["canonical_landmarks"]
    return model


def _restore_arrays(model: Network, arrays: dict, path) -> None:
    """Copy checkpoint arrays into parameters and buffers, shape-checked."""
    targets = {name: value for name, value, _ in model.named_parameters()}
    targets.update(dict(model.named_buffers()))
    for name, value in targets.items():
        if name not in arrays:
            raise store.CheckpointError(f"{path}: missing array {name!r}")
        if arrays[name].shape != value.shape:
            raise store.CheckpointError(
                f"{path}: array {name!r} has shape {arrays[name].shape}, "
                f"expected {value.shape}"
            )
        value[...] = arrays[name]
