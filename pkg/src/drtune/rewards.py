"""Differentiable image rewards.

All rewards accept a single (h, w) image or an (n, h, w) batch and return one
value per image (a scalar tensor for a single image, shape (n,) for a batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .diffusion import MLP
from .errors import DomainError, ShapeError
from .optim import AdamW
from .tensor import GradTape, Tensor, backward

EPS_STD = 1e-4

DIRECTIONS = {
    "symmetry": "minimize",
    "compressibility": "minimize",
    "brightness": "maximize",
    "toy_classifier": "maximize",
}


def _image_axes(x: Tensor) -> tuple[int, int]:
    if x.ndim < 2:
        raise ShapeError("reward input must be an image (h, w) or a batch (n, h, w)", shape=x.shape)
    return (x.ndim - 2, x.ndim - 1)


def symmetry_reward(image, eps_std: float = EPS_STD) -> Tensor:
    """mean |I - mirror(I)| / (std(I) + eps_std). Lower is more symmetric."""
    x = tn.as_tensor(image)
    axes = _image_axes(x)
    diff = tn.absolute(x - tn.flip_lr(x)).mean(axis=axes)
    return diff / (x.std(axis=axes) + eps_std)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    mat.setflags(write=False)
    return mat


def dct2(image) -> Tensor:
    x = tn.as_tensor(image)
    h, w = x.shape[-2:]
    return (Tensor(dct_matrix(h)) @ x) @ Tensor(dct_matrix(w).T)


def idct2(coeffs) -> Tensor:
    c = tn.as_tensor(coeffs)
    h, w = c.shape[-2:]
    return (Tensor(dct_matrix(h).T) @ c) @ Tensor(dct_matrix(w))


def compress_error(image, k: int) -> Tensor:
    """Mean squared error after keeping only the k x k lowest DCT frequencies."""
    x = tn.as_tensor(image)
    axes = _image_axes(x)
    h, w = x.shape[-2:]
    if not 1 <= k <= min(h, w):
        raise DomainError("DCT keep size out of range", k=k, h=h, w=w)
    mask = np.zeros((h, w))
    mask[:k, :k] = 1.0
    mask = np.broadcast_to(mask, x.shape)
    recon = idct2(dct2(x) * Tensor(mask))
    return tn.square(x - recon).mean(axis=axes)


def brightness_reward(image) -> Tensor:
    x = tn.as_tensor(image)
    if x.ndim < 2:
        return x.mean()
    return x.mean(axis=_image_axes(x))


# ---------------------------------------------------------------- toy classifier


@dataclass(eq=False)
class ToyClassifier:
    """Frozen MLP classifier; stands in for a learned perceptual reward."""

    mlp: MLP
    image_shape: tuple[int, int]

    @property
    def n_classes(self) -> int:
        return self.mlp.layers[-1].n_out

    def logits(self, image) -> Tensor:
        x = tn.as_tensor(image)
        if x.shape[-2:] != self.image_shape:
            raise ShapeError("classifier resolution mismatch", got=x.shape, expected=self.image_shape)
        n = x.shape[0] if x.ndim == 3 else 1
        return self.mlp.forward(x.reshape(n, int(np.prod(self.image_shape))))

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.mlp.state_dict(prefix="clf")
        state["meta.image_shape"] = np.array(self.image_shape, dtype=np.float64)
        return state

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ToyClassifier":
        shape = tuple(int(v) for v in state["meta.image_shape"])
        return cls(MLP.from_state(state, prefix="clf"), shape)


def train_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    rng: np.random.Generator,
    iters: int = 1500,
    lr: float = 1e-3,
    batch: int = 64,
    hidden: int = 128,
) -> ToyClassifier:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shape = images.shape[1:]
    n_pix = int(np.prod(shape))
    mlp = MLP.init([n_pix, hidden, hidden, n_classes], rng, name="clf")
    mlp.set_trainable(True)
    opt = AdamW(mlp.parameters(), lr=lr, weight_decay=0.0)
    for _ in range(iters):
        idx = rng.integers(0, len(images), size=batch)
        with GradTape() as tape:
            logits = mlp.forward(Tensor(images[idx].reshape(batch, n_pix)))
            nll = tn.logsumexp(logits, axis=1) - tn.take_columns(logits, labels[idx])
            loss = nll.mean()
        opt.step(backward(loss, tape, mlp.parameters()))
    mlp.set_trainable(False)
    return ToyClassifier(mlp, tuple(shape))


def toy_classifier_reward(image, target_class: int, clf: ToyClassifier) -> Tensor:
    """Target-class logit; the classifier's own parameters stay frozen."""
    if not 0 <= target_class < clf.n_classes:
        raise DomainError("target class out of range", target_class=target_class, n_classes=clf.n_classes)
    if any(p.requires_grad for p in clf.parameters()):
        raise DomainError("classifier must be frozen before it is used as a reward")
    x = tn.as_tensor(image)
    logits = clf.logits(x)
    picked = tn.take_columns(logits, np.full(logits.shape[0], target_class))
    return picked if x.ndim == 3 else picked.reshape(())


# ---------------------------------------------------------------- RewardSpec


@dataclass
class RewardSpec:
    kind: str = "symmetry"
    k: int = 4
    eps_std: float = EPS_STD
    target_class: int = 0
    classifier: ToyClassifier | None = field(default=None, repr=False)
    # optional toy-classifier regularizer added to the objective
    reg_weight: float = 0.0
    # decode step: clamp the generated image to the valid pixel range before scoring
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in DIRECTIONS:
            raise DomainError(f"unknown reward kind {self.kind!r}", known=sorted(DIRECTIONS))
        if self.kind == "toy_classifier" and self.classifier is None:
            raise DomainError("toy_classifier reward needs a classifier")
        if self.reg_weight and self.classifier is None:
            raise DomainError("classifier regularizer needs a classifier")

    @property
    def direction(self) -> str:
        return DIRECTIONS[self.kind]

    @property
    def sign(self) -> float:
        """Loss = sign * reward, so descending the loss honours the direction."""
        return -1.0 if self.direction == "maximize" else 1.0

    def decode(self, images) -> Tensor:
        x = tn.as_tensor(images)
        return tn.clip(x, -1.0, 1.0) if self.clamp else x

    def value(self, images) -> Tensor:
        images = self.decode(images)
        if self.kind == "symmetry":
            return symmetry_reward(images, self.eps_std)
        if self.kind == "compressibility":
            return compress_error(images, self.k)
        if self.kind == "brightness":
            return brightness_reward(images)
        return toy_classifier_reward(images, self.target_class, self.classifier)

    def loss(self, images) -> tuple[Tensor, Tensor]:
        """Returns (scalar loss, per-image reward values)."""
        values = self.value(images)
        loss = values.mean() * self.sign
        if self.reg_weight:
            reg = toy_classifier_reward(self.decode(images), self.target_class, self.classifier).mean()
            loss = loss - reg * self.reg_weight
        return loss, values
