"""Target functional priors: RBF/ARD kernels and exact GP sampling.

Kernel convention: ``k(x, x') = amplitude^2 * exp(-sum_d (x_d - x'_d)^2 / l_d^2)``
with a single lengthscale for ``rbf`` and one per input dimension for
``ard_rbf``. Function draws are ``L z`` with ``L`` a jittered Cholesky factor
and ``z`` standard normal.

The hierarchical variant redraws ``(lengthscale, amplitude^2)`` from
log-normal hyper-priors for every sampled function, which costs one Cholesky
factorization per draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GPError(Exception):
    pass


class CholeskyError(GPError):
    """Factorization failed after the full jitter escalation schedule."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class KernelSpec:
    """RBF-family kernel hyperparameters.

    ``lengthscales`` is a scalar for ``family="rbf"`` or a length-D vector
    for ``family="ard_rbf"``.
    """

    amplitude: float
    lengthscales: np.ndarray
    family: str = "rbf"

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if self.family not in ("rbf", "ard_rbf"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "rbf" and ls.size != 1:
            raise ValueError("rbf takes a single lengthscale")
        if self.amplitude <= 0 or np.any(ls <= 0):
            raise ValueError("amplitude and lengthscales must be positive")


@dataclass(frozen=True)
class HyperPriorSpec:
    """Log-normal hyper-priors on the lengthscale and the variance.

    Each entry is ``(m, s)``: location and scale of a LogNormal. The variance
    prior is on ``amplitude^2``; the amplitude is its positive square root.
    """

    lengthscale_lognormal: tuple
    variance_lognormal: tuple

    def __post_init__(self):
        for name in ("lengthscale_lognormal", "variance_lognormal"):
            m, s = getattr(self, name)
            object.__setattr__(self, name, (float(m), float(s)))
            if s <= 0:
                raise ValueError(f"{name}: scale must be positive, got {s}")


@dataclass
class FunctionBatch:
    """``count`` sampled functions evaluated at shared measurement points.

    ``values`` has shape ``(count, M * output_dim)``; multi-output functions
    are flattened point-major (all outputs of point 0, then point 1, ...).
    """

    values: np.ndarray
    measurement_points: np.ndarray
    output_dim: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.measurement_points = np.asarray(self.measurement_points, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D (count, M * output_dim)")
        m = self.measurement_points.shape[0]
        if self.values.shape[1] != m * self.output_dim:
            raise ValueError(
                f"values have {self.values.shape[1]} columns, expected "
                f"{m} points x {self.output_dim} outputs"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite function values")

    @property
    def count(self) -> int:
        return self.values.shape[0]


def kernel_matrix(spec: KernelSpec, X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Cross-covariance ``k(X, X2)``; symmetric with diagonal amplitude^2 when X2 is X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=np.float64))
    if X.shape[1] != X2.shape[1]:
        raise ValueError(f"input dims differ: {X.shape[1]} vs {X2.shape[1]}")
    ls = spec.lengthscales
    if spec.family == "ard_rbf" and ls.size != X.shape[1]:
        raise ValueError(f"ARD needs {X.shape[1]} lengthscales, got {ls.size}")
    a = X / ls
    b = X2 / ls
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return spec.amplitude**2 * np.exp(-sq)


def cholesky_with_jitter(K: np.ndarray, max_retries: int = 5):
    """Lower-triangular factor of ``K + jitter * I``.

    The first attempt uses no jitter; failures escalate from
    ``1e-8 * mean(diag(K))`` by a factor of 10 per retry. Raises
    :class:`CholeskyError` carrying the final jitter if all attempts fail.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"covariance must be square, got {K.shape}")
    base = 1e-8 * float(np.mean(np.diag(K)))
    jitter = 0.0
    for attempt in range(max_retries + 1):
        try:
            if jitter == 0.0:
                return np.linalg.cholesky(K), jitter
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
    raise CholeskyError(
        f"Cholesky failed after {max_retries} jittered retries", jitter=jitter
    )


def sample_gp(
    spec: KernelSpec,
    X_M: np.ndarray,
    count: int,
    rng: np.random.Generator,
    output_dim: int = 1,
) -> FunctionBatch:
    """``count`` i.i.d. zero-mean draws from the GP at the measurement points.

    With ``output_dim > 1`` each output channel is an independent GP with the
    same kernel; rows are flattened point-major to match the network side.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    X_M = np.atleast_2d(np.asarray(X_M, dtype=np.float64))
    K = kernel_matrix(spec, X_M)
    L, _ = cholesky_with_jitter(K)
    z = rng.standard_normal((count * output_dim, X_M.shape[0]))
    values = z @ L.T
    if output_dim > 1:
        values = (
            values.reshape(count, output_dim, X_M.shape[0])
            .transpose(0, 2, 1)
            .reshape(count, -1)
        )
    return FunctionBatch(values=values, measurement_points=X_M, output_dim=output_dim)


def sample_hyperparameters(hp: HyperPriorSpec, count: int, rng: np.random.Generator):
    """Draw ``(lengthscale, amplitude)`` pairs from the log-normal hyper-priors."""
    m_l, s_l = hp.lengthscale_lognormal
    m_v, s_v = hp.variance_lognormal
    ls = rng.lognormal(mean=m_l, sigma=s_l, size=count)
    variance = rng.lognormal(mean=m_v, sigma=s_v, size=count)
    return ls, np.sqrt(variance)


def sample_hierarchical_gp(
    hp: HyperPriorSpec,
    X_M: np.ndarray,
    count: int,
    rng: np.random.Generator,
    output_dim: int = 1,
) -> FunctionBatch:
    """Hierarchical draws: fresh hyperparameters, then one GP function each."""
    if count < 1:
        raise ValueError("count must be >= 1")
    X_M = np.atleast_2d(np.asarray(X_M, dtype=np.float64))
    ls, amp = sample_hyperparameters(hp, count, rng)
    values = np.empty((count, X_M.shape[0] * output_dim))
    for i in range(count):
        spec = KernelSpec(amplitude=amp[i], lengthscales=ls[i])
        K = kernel_matrix(spec, X_M)
        L, _ = cholesky_with_jitter(K)
        z = rng.standard_normal((output_dim, X_M.shape[0]))
        draw = z @ L.T
        values[i] = draw.T.reshape(-1) if output_dim > 1 else draw[0]
    return FunctionBatch(values=values, measurement_points=X_M, output_dim=output_dim)


def uci_lengthscale_location(input_dim: int) -> float:
    """Default log-location for the lengthscale hyper-prior: log sqrt(2 D)."""
    return float(np.log(np.sqrt(2.0 * input_dim)))
