"""Contrastive semantic space: backbone, projector, classifier head and
learnable class prototypes trained with a prototype-augmented supervised
contrastive loss."""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (
    SGD,
    Conv3x3,
    Flatten,
    GlobalAvgPool,
    Linear,
    ReLU,
    Sequential,
    l2_normalize,
    l2_normalize_backward,
)

CHECKPOINT_MAGIC = b"CCMX1"
PROTOTYPES = "prototypes"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureBatch:
    raw: np.ndarray
    normalized: np.ndarray
    labels: np.ndarray | None = None


class SemanticModel:
    """Backbone -> (projector -> prototypes space, classifier head).

    ``backbone="mlp"`` flattens the image into a 2-layer perceptron;
    ``backbone="conv"`` uses two 3x3 conv stages and global average pooling.
    No layer uses batch statistics, so every sample is embedded independently.
    """

    def __init__(self, input_shape, num_classes: int, *, backbone: str = "mlp",
                 hidden_dim: int = 64, feature_dim: int = 16, temperature: float = 0.1,
                 seed: int = 0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = num_classes
        self.backbone_kind = backbone
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.temperature = temperature
        self.seed = seed

        w, h, c = self.input_shape
        if backbone == "mlp":
            self.backbone = Sequential(
                Flatten(),
                Linear("backbone.fc1", w * h * c, hidden_dim), ReLU(),
                Linear("backbone.fc2", hidden_dim, hidden_dim), ReLU(),
            )
        elif backbone == "conv":
            self.backbone = Sequential(
                Conv3x3("backbone.conv1", c, hidden_dim // 2), ReLU(),
                Conv3x3("backbone.conv2", hidden_dim // 2, hidden_dim), ReLU(),
                GlobalAvgPool(),
            )
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.projector = Sequential(
            Linear("projector.fc1", hidden_dim, hidden_dim), ReLU(),
            Linear("projector.fc2", hidden_dim, feature_dim),
        )
        self.classifier = Linear("classifier", hidden_dim, num_classes)

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.backbone.init(self.params, rng)
        self.projector.init(self.params, rng)
        self.classifier.init(self.params, rng)
        protos = rng.standard_normal((num_classes, feature_dim))
        self.params[PROTOTYPES] = protos / np.linalg.norm(protos, axis=1, keepdims=True)

    def copy(self) -> SemanticModel:
        return copy.deepcopy(self)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _inputs(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected images of shape {self.input_shape}, got {x.shape[1:]}")
        return x

    def features(self, images):
        """Backbone features (pre-projector)."""
        return self.backbone.forward(self.params, self._inputs(images))[0]

    def project(self, hidden):
        return self.projector.forward(self.params, hidden)[0]

    def logits(self, images):
        return self.classifier.forward(self.params, self.features(images))[0]

    def normalize_prototypes(self):
        """Project prototype rows back onto the unit sphere.

        Rows already unit-norm to 1e-10 are left bit-for-bit untouched, so a
        step that does not move a prototype does not perturb it either.
        """
        protos = self.params[PROTOTYPES]
        normed, norms = l2_normalize(protos)
        moved = np.abs(norms[:, 0] - 1.0) > 1e-10
        protos[moved] = normed[moved]

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "backbone": self.backbone_kind,
            "hidden_dim": self.hidden_dim,
            "feature_dim": self.feature_dim,
            "temperature": self.temperature,
            "seed": self.seed,
        }


def embed(model: SemanticModel, images, labels=None) -> FeatureBatch:
    raw = model.project(model.features(images))
    return FeatureBatch(raw, l2_normalize(raw)[0], labels)


def class_centers(model: SemanticModel) -> np.ndarray:
    """Normalized prototype matrix (a copy); these are the class centers."""
    return l2_normalize(model.params[PROTOTYPES])[0]


def contrastive_loss(features, labels, prototypes, temperature: float):
    """Supervised contrastive loss with one learnable prototype per class.

    ``features`` (B, D) and ``prototypes`` (|Y|, D) must already be unit rows.
    For anchor i the candidate set is every batch feature (the anchor
    included) plus every prototype; a candidate of class l is weighted by
    ``1/|A_l|`` where ``A_l`` is the batch members of class l plus ``c_l``.
    Positives are ``A_{y_i}`` without the anchor itself.

    Returns ``(loss, grad_features, grad_prototypes)``, the loss being the
    mean over anchors.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = len(prototypes)
    b = len(features)
    if b == 0:
        raise ValueError("degenerate contrastive batch: no anchors")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    cand = np.concatenate([features, prototypes])
    cand_labels = np.concatenate([labels, np.arange(num_classes)])
    set_sizes = np.bincount(cand_labels, minlength=num_classes).astype(np.float64)
    weights = 1.0 / set_sizes[cand_labels]

    logits = features @ cand.T / temperature
    positive = labels[:, None] == cand_labels[None, :]
    positive[np.arange(b), np.arange(b)] = False
    n_pos = positive.sum(axis=1)

    row_max = logits.max(axis=1, keepdims=True)
    weighted = weights[None, :] * np.exp(logits - row_max)
    denom = weighted.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    per_anchor = log_denom - (positive * logits).sum(axis=1) / n_pos
    loss = per_anchor.mean()

    dlogits = (weighted / denom - positive / n_pos[:, None]) / b
    dcand = dlogits.T @ features / temperature
    grad_features = dlogits @ cand / temperature + dcand[:b]
    grad_prototypes = dcand[b:]
    return float(loss), grad_features, grad_prototypes


def contrastive_backward(model: SemanticModel, hidden, labels, grads, scale: float = 1.0):
    """Contrastive loss on backbone features ``hidden``; accumulates
    ``scale * dL`` into ``grads`` for projector and prototypes and returns
    ``(loss, dL/dhidden * scale)``."""
    params = model.params
    z, proj_caches = model.projector.forward(params, hidden)
    zbar, z_norms = l2_normalize(z)
    cbar, c_norms = l2_normalize(params[PROTOTYPES])
    loss, g_zbar, g_cbar = contrastive_loss(zbar, labels, cbar, model.temperature)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"non-finite contrastive loss {loss}")
    g_z = l2_normalize_backward(z, z_norms, g_zbar * scale)
    grads[PROTOTYPES] += l2_normalize_backward(params[PROTOTYPES], c_norms, g_cbar * scale)
    g_hidden = model.projector.backward(params, proj_caches, g_z, grads)
    return loss, g_hidden


def contrastive_objective(model: SemanticModel, images, labels):
    """``(loss, grads)`` of the contrastive loss w.r.t. every model parameter."""
    grads = model.zero_grads()
    x = model._inputs(images)
    hidden, caches = model.backbone.forward(model.params, x)
    loss, g_hidden = contrastive_backward(model, hidden, labels, grads)
    model.backbone.backward(model.params, caches, g_hidden, grads)
    return loss, grads


def train_semantic_step(model: SemanticModel, images, labels, optimizer: SGD,
                        alpha: float = 1.0) -> float:
    """One SGD step on ``alpha * L_con``; prototypes are re-normalized after."""
    loss, grads = contrastive_objective(model, images, labels)
    if alpha != 1.0:
        grads = {k: alpha * g for k, g in grads.items()}
    optimizer.step(model.params, grads)
    model.normalize_prototypes()
    return loss


def save_checkpoint(model: SemanticModel, path) -> None:
    """``CCMX1`` | u32 header length | JSON header | float32 LE tensors."""
    header = model.config()
    header["tensors"] = [[name, list(p.shape)] for name, p in model.params.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> SemanticModel:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CCMX1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + n])
    tensors = header.pop("tensors")
    model = SemanticModel(
        header["input_shape"], header["num_classes"], backbone=header["backbone"],
        hidden_dim=header["hidden_dim"], feature_dim=header["feature_dim"],
        temperature=header["temperature"], seed=header["seed"],
    )
    offset = 9 + n
    for name, shape in tensors:
        if name not in model.params or list(model.params[name].shape) != shape:
            raise ValueError(f"{path}: unexpected tensor {name} {shape}")
        size = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        model.params[name] = data.reshape(shape).astype(np.float64)
        offset += 4 * size
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    return model
