"""Day/night routing: luminance features and a logistic discriminator.

Night is the positive class. Features are z-scored with constants stored
in the model so inference matches training exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import Image

FEATURE_NAMES = ("mean_luma", "std_luma", "dark_fraction", "warm_bias")
DARK_Y = 0.2


class DomainLabel(Enum):
    DAY = "day"
    NIGHT = "night"


@dataclass(frozen=True)
class DomainFeatures:
    mean_luma: float
    std_luma: float
    dark_fraction: float
    warm_bias: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.mean_luma, self.std_luma, self.dark_fraction, self.warm_bias],
            dtype=np.float64,
        )


@dataclass
class DiscriminatorModel:
    weights: np.ndarray  # (4,)
    bias: float
    feature_means: np.ndarray  # (4,)
    feature_stds: np.ndarray  # (4,), guarded to be > 0
    decision_threshold: float = 0.5

    def to_json(self) -> str:
        return json.dumps(
            {
                "features": list(FEATURE_NAMES),
                "weights": [float(v) for v in self.weights],
                "bias": float(self.bias),
                "feature_means": [float(v) for v in self.feature_means],
                "feature_stds": [float(v) for v in self.feature_stds],
                "decision_threshold": float(self.decision_threshold),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "DiscriminatorModel":
        obj = json.loads(text)
        return DiscriminatorModel(
            weights=np.array(obj["weights"], dtype=np.float64),
            bias=float(obj["bias"]),
            feature_means=np.array(obj["feature_means"], dtype=np.float64),
            feature_stds=np.array(obj["feature_stds"], dtype=np.float64),
            decision_threshold=float(obj["decision_threshold"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "DiscriminatorModel":
        return DiscriminatorModel.from_json(Path(path).read_text(encoding="utf-8"))


def extract_features(img: Image) -> DomainFeatures:
    y = img.luminance()
    px = img.pixels
    return DomainFeatures(
        mean_luma=float(np.mean(y)),
        std_luma=float(np.std(y)),
        dark_fraction=float(np.mean(y < DARK_Y)),
        warm_bias=float(np.mean(px[:, :, 0]) - np.mean(px[:, :, 2])),
    )


def _sigmoid_scalar(z: float) -> float:
    # clamp keeps the output strictly inside (0, 1) in float64
    z = min(max(z, -34.0), 34.0)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -500.0, 500.0)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss_and_grad(
    w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean cross-entropy and its analytic gradient.

    Uses the softplus form max(z, 0) + log1p(exp(-|z|)) - y*z, stable for
    any logit magnitude.
    """
    z = x @ w + b
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z))
    p = _sigmoid(z)
    grad_w = x.T @ (p - y) / len(y)
    grad_b = float(np.mean(p - y))
    return loss, grad_w, grad_b


def train_discriminator(
    samples: Sequence[tuple[DomainFeatures, DomainLabel]],
    lr: float = 0.5,
    epochs: int = 300,
    seed: int = 0,
) -> DiscriminatorModel:
    """Full-batch gradient descent on cross-entropy over z-scored features.

    Weights start at zero, so the run is deterministic for a fixed epoch
    count; ``seed`` is accepted for interface symmetry with the other
    trainers. Raises if only one label is present.
    """
    del seed
    labels = {label for _, label in samples}
    if labels != {DomainLabel.DAY, DomainLabel.NIGHT}:
        raise ValueError(f"training needs both labels, got {sorted(l.value for l in labels)}")
    x_raw = np.stack([f.as_array() for f, _ in samples])
    y = np.array([1.0 if label is DomainLabel.NIGHT else 0.0 for _, label in samples])

    means = x_raw.mean(axis=0)
    stds = x_raw.std(axis=0)
    stds = np.where(stds < 1e-12, 1.0, stds)
    x = (x_raw - means) / stds

    w = np.zeros(x.shape[1], dtype=np.float64)
    b = 0.0
    for _ in range(epochs):
        _, grad_w, grad_b = logistic_loss_and_grad(w, b, x, y)
        w = w - lr * grad_w
        b = b - lr * grad_b
    return DiscriminatorModel(
        weights=w, bias=b, feature_means=means, feature_stds=stds
    )


def predict_domain(
    model: DiscriminatorModel, features: DomainFeatures
) -> tuple[DomainLabel, float]:
    """Return (label, P(night)); Night wins when p >= decision_threshold."""
    x = features.as_array()
    z = model.bias
    for i in range(4):
        z += model.weights[i] * (x[i] - model.feature_means[i]) / model.feature_stds[i]
    p = _sigmoid_scalar(z)
    label = DomainLabel.NIGHT if p >= model.decision_threshold else DomainLabel.DAY
    return label, p
