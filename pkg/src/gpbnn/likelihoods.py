"""Observation models: Gaussian regression and multinomial classification.

Each likelihood can build its negative log-likelihood as a tape graph (for
gradients inside samplers and MAP training) and evaluate per-point
log-densities eagerly (for predictive metrics). Network outputs are raw
values; classification applies the softmax here, not in the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class GaussianLikelihood:
    """Homoscedastic Gaussian observation noise with variance ``noise_variance``."""

    noise_variance: float

    kind = "gaussian"

    def __post_init__(self):
        if self.noise_variance <= 0:
            raise ValueError("noise variance must be positive")

    def negloglik_node(self, tape: ad.Tape, f: ad.Node, batch: int):
        """Scalar node: -sum_i log N(y_i | f_i, noise_variance).

        Declares a ``y`` parameter of shape ``(batch, 1)`` on the tape.
        """
        y = tape.param("y", (batch, 1))
        s2 = self.noise_variance
        const = 0.5 * batch * (np.log(2.0 * np.pi) + np.log(s2))
        return tape.sum(tape.square(y - f)) * (0.5 / s2) + const

    def y_binding(self, y: np.ndarray) -> dict:
        return {"y": np.asarray(y, dtype=np.float64).reshape(-1, 1)}

    def point_log_density(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """log N(y | f, noise_variance), elementwise over broadcasted shapes."""
        s2 = self.noise_variance
        return -0.5 * (np.log(2.0 * np.pi * s2) + (y - f) ** 2 / s2)


@dataclass(frozen=True)
class CategoricalLikelihood:
    """Multinomial likelihood over softmax class probabilities."""

    n_classes: int

    kind = "categorical"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def negloglik_node(self, tape: ad.Tape, f: ad.Node, batch: int):
        """Scalar node: cross-entropy of logits ``f`` against one-hot ``y``."""
        y = tape.param("y", (batch, self.n_classes))
        lse = tape.logsumexp(f, axis=1)
        picked = tape.sum(f * y, axis=1)
        return tape.sum(lse - picked)

    def y_binding(self, y: np.ndarray) -> dict:
        labels = np.asarray(y).astype(np.int64).reshape(-1)
        onehot = np.zeros((labels.size, self.n_classes))
        onehot[np.arange(labels.size), labels] = 1.0
        return {"y": onehot}

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        z = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
        return np.exp(z)


def make_likelihood(kind: str, noise_variance: float | None = None, n_classes: int | None = None):
    if kind == "gaussian":
        if noise_variance is None:
            raise ValueError("gaussian likelihood needs noise_variance")
        return GaussianLikelihood(noise_variance=noise_variance)
    if kind == "categorical":
        if n_classes is None:
            raise ValueError("categorical likelihood needs n_classes")
        return CategoricalLikelihood(n_classes=n_classes)
    raise ValueError(f"unknown likelihood kind {kind!r}")
