"""Predictive aggregation, point-estimate training, and evaluation metrics.

The regression test log-density uses the marginal mixture form: per point,
``log mean_s N(y | f_s(x), noise)`` over posterior samples, not the mean of
per-sample log-densities. Classification averages per-sample softmax
probabilities and scores the averaged probabilities.

``mmd_squared`` is the unbiased U-statistic with an RBF kernel over whole
function vectors, computed in row blocks so large sample counts never
materialize a full Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from . import optim
from . import priors as pr
from .gp import FunctionBatch
from .likelihoods import CategoricalLikelihood, GaussianLikelihood


class EvaluationError(Exception):
    pass


# ----------------------------------------------------------------------
# predictive posterior
# ----------------------------------------------------------------------


@dataclass
class PredictiveSummary:
    kind: str  # "regression" | "classification"
    mean: np.ndarray | None = None
    variance: np.ndarray | None = None
    probabilities: np.ndarray | None = None
    point_log_density: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)


def _sample_matrix(samples) -> list:
    if hasattr(samples, "chains"):
        return [w for chain in samples.chains for w in chain]
    return list(samples)


def predictive_posterior(samples, spec: net.NetworkSpec, X_test, likelihood, y_test=None) -> PredictiveSummary:
    """Aggregate posterior draws into predictive moments and test metrics.

    Regression: the predictive density at each point is the equal-weight
    Gaussian mixture over samples; its mean/variance are the mixture moments
    and the reported NLL is the negative log marginal density. Classification
    averages softmax probabilities across samples.
    """
    ws = _sample_matrix(samples)
    if not ws:
        raise EvaluationError("no posterior samples")
    X_test = np.asarray(X_test, dtype=np.float64)
    outputs = np.stack([net.forward(spec, w, X_test) for w in ws])  # (S, n, C)
    if isinstance(likelihood, GaussianLikelihood):
        f = outputs[:, :, 0]
        mean = f.mean(axis=0)
        variance = f.var(axis=0) + likelihood.noise_variance
        summary = PredictiveSummary(kind="regression", mean=mean, variance=variance)
        if y_test is not None:
            y = np.asarray(y_test, dtype=np.float64).reshape(-1)
            logps = likelihood.point_log_density(f, y[None, :])  # (S, n)
            point_ld = ad.logsumexp(logps, axis=0) - np.log(len(ws))
            summary.point_log_density = point_ld
            summary.metrics = {
                "nll": float(-np.mean(point_ld)),
                "rmse": rmse(mean, y),
            }
        return summary
    if isinstance(likelihood, CategoricalLikelihood):
        probs = likelihood.probabilities(outputs).mean(axis=0)  # (n, C)
        summary = PredictiveSummary(kind="classification", probabilities=probs)
        if y_test is not None:
            y = np.asarray(y_test).astype(np.int64).reshape(-1)
            point_ld = np.log(probs[np.arange(y.size), y])
            summary.point_log_density = point_ld
            summary.metrics = {
                "nll": float(-np.mean(point_ld)),
                "accuracy": accuracy(probs, y),
            }
        return summary
    raise EvaluationError(f"unsupported likelihood {type(likelihood).__name__}")


def predictive_traces(samples, spec: net.NetworkSpec, X) -> list:
    """Per-chain arrays ``(n_samples, n_points * output_dim)`` of raw outputs.

    Feeds the convergence diagnostic on the predictive posterior.
    """
    if not hasattr(samples, "chains"):
        raise EvaluationError("need per-chain samples for predictive traces")
    X = np.asarray(X, dtype=np.float64)
    out = []
    for chain in samples.chains:
        rows = [net.forward(spec, w, X).reshape(-1) for w in chain]
        out.append(np.stack(rows) if rows else np.zeros((0, X.shape[0] * spec.output_dim)))
    return out


# ----------------------------------------------------------------------
# scalar metrics
# ----------------------------------------------------------------------


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.shape != targets.shape:
        raise EvaluationError("prediction/target lengths differ")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def gaussian_nll(means, targets, variance) -> float:
    """Average negative log-density of independent Gaussians, in nats."""
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if means.shape != targets.shape:
        raise EvaluationError("prediction/target lengths differ")
    var = np.broadcast_to(np.asarray(variance, dtype=np.float64), means.shape)
    return float(
        np.mean(0.5 * (np.log(2.0 * np.pi * var) + (targets - means) ** 2 / var))
    )


def categorical_nll(probabilities, labels) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if probabilities.shape[0] != labels.size:
        raise EvaluationError("prediction/target lengths differ")
    return float(-np.mean(np.log(probabilities[np.arange(labels.size), labels])))


def accuracy(probabilities, labels) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if probabilities.shape[0] != labels.size:
        raise EvaluationError("prediction/target lengths differ")
    return float(np.mean(np.argmax(probabilities, axis=1) == labels))


# ----------------------------------------------------------------------
# kernel two-sample diagnostics
# ----------------------------------------------------------------------


def _pairwise_sq_dists(a, b):
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(sq, 0.0)


def _mmd_terms(a, b, ls2, block=512):
    """Off-diagonal kernel sums (aa, bb, ab) accumulated in row blocks."""
    m, n_b = a.shape[0], b.shape[0]
    saa = sbb = sab = 0.0
    for i0 in range(0, m, block):
        ab_rows = a[i0 : i0 + block]
        for j0 in range(0, m, block):
            k = np.exp(-_pairwise_sq_dists(ab_rows, a[j0 : j0 + block]) / ls2)
            saa += float(k.sum())
            if i0 == j0:
                saa -= float(np.trace(k))
        for j0 in range(0, n_b, block):
            sab += float(np.exp(-_pairwise_sq_dists(ab_rows, b[j0 : j0 + block]) / ls2).sum())
    for i0 in range(0, n_b, block):
        rows = b[i0 : i0 + block]
        for j0 in range(0, n_b, block):
            k = np.exp(-_pairwise_sq_dists(rows, b[j0 : j0 + block]) / ls2)
            sbb += float(k.sum())
            if i0 == j0:
                sbb -= float(np.trace(k))
    return saa, sbb, sab


def mmd_squared(batch_a, batch_b, kernel_lengthscale: float) -> float:
    """Unbiased squared maximum mean discrepancy between two function batches.

    Kernel: ``exp(-||f - f'||^2 / lengthscale^2)`` over stacked function
    vectors; the diagonal is excluded, so the estimate can be slightly
    negative for matched distributions.
    """
    a, b = _mmd_values(batch_a), _mmd_values(batch_b)
    if isinstance(batch_a, FunctionBatch) and isinstance(batch_b, FunctionBatch):
        if not np.array_equal(batch_a.measurement_points, batch_b.measurement_points):
            raise EvaluationError("batches must share measurement points")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise EvaluationError("need at least two samples per batch")
    if a.shape[1] != b.shape[1]:
        raise EvaluationError("function vectors have different lengths")
    ls2 = float(kernel_lengthscale) ** 2
    m, n = a.shape[0], b.shape[0]
    saa, sbb, sab = _mmd_terms(a, b, ls2)
    return saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2.0 * sab / (m * n)


def _mmd_values(batch):
    vals = batch.values if isinstance(batch, FunctionBatch) else np.asarray(batch, dtype=np.float64)
    if vals.ndim != 2:
        raise EvaluationError("function batches must be 2-D")
    return vals


def mmd_permutation_threshold(
    batch_a,
    batch_b,
    kernel_lengthscale: float,
    rng: np.random.Generator,
    n_permutations: int = 200,
    level: float = 0.05,
) -> float:
    """Null quantile of the unbiased MMD^2 under label permutations.

    One blocked pass computes the pooled kernel's action on every permuted
    label vector, so the kernel is evaluated once regardless of the number of
    permutations.
    """
    a, b = _mmd_values(batch_a), _mmd_values(batch_b)
    m = a.shape[0]
    if a.shape[0] != b.shape[0]:
        raise EvaluationError("permutation null assumes equal batch sizes")
    z = np.concatenate([a, b], axis=0)
    total = z.shape[0]
    n = total - m
    ls2 = float(kernel_lengthscale) ** 2
    labels = np.zeros((total, n_permutations))
    for p in range(n_permutations):
        idx = rng.permutation(total)[:m]
        labels[idx, p] = 1.0
    # One pass over kernel blocks accumulates K @ labels and the row sums;
    # every permuted statistic is then a handful of dot products (with
    # K zb = rowsums - K za and unit diagonal entries).
    kz = np.zeros((total, n_permutations))
    row_sums = np.zeros(total)
    block = 512
    for i0 in range(0, total, block):
        rows = z[i0 : i0 + block]
        for j0 in range(0, total, block):
            kblk = np.exp(-_pairwise_sq_dists(rows, z[j0 : j0 + block]) / ls2)
            kz[j0 : j0 + block] += kblk.T @ labels[i0 : i0 + block]
            row_sums[i0 : i0 + block] += kblk.sum(axis=1)
    grand = float(row_sums.sum())
    stats = np.empty(n_permutations)
    for p in range(n_permutations):
        za = labels[:, p]
        s1 = float(za @ kz[:, p])
        sa_rows = float(za @ row_sums)
        qaa = s1 - m
        qab = sa_rows - s1
        qbb = grand - 2.0 * sa_rows + s1 - n
        stats[p] = qaa / (m * (m - 1)) + qbb / (n * (n - 1)) - 2.0 * qab / (m * n)
    return float(np.quantile(stats, 1.0 - level))


def predictive_entropy_ecdf(probabilities) -> tuple:
    """Sorted per-point Shannon entropies (nats) with cumulative fractions."""
    probs = np.asarray(probabilities, dtype=np.float64)
    logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    entropies = -np.sum(probs * logp, axis=-1)
    order = np.sort(entropies)
    fractions = np.arange(1, order.size + 1) / order.size
    return order, fractions


# ----------------------------------------------------------------------
# MAP training
# ----------------------------------------------------------------------


def map_train(
    spec: net.NetworkSpec,
    prior,
    data,
    likelihood,
    epochs: int = 200,
    lr: float = 0.01,
    batch_size: int | None = None,
    val_data=None,
    rng: np.random.Generator | None = None,
    lr_decay: float = 1.0,
) -> np.ndarray:
    """Point estimate maximizing the posterior under a Gaussian-family prior.

    Minimizes ``-log p(D | w) + 0.5 sum_i w_i^2 / sigma_i^2`` with Adam
    (beta1=0.9, beta2=0.999). Returns the parameters with the best validation
    NLL seen across epochs (training objective when no validation set is
    given). Raises on divergence.
    """
    if not isinstance(prior, pr.GaussianPriorParams):
        raise EvaluationError("MAP training supports the Gaussian prior family only")
    X, y = np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    rng = rng or np.random.default_rng(0)
    sigmas = pr.coordinate_sigmas(prior, spec)
    n = X.shape[0]
    dim = net.param_count(spec)
    batch = n if not batch_size else min(batch_size, n)

    programs = {}

    def build(bsize):
        tape = ad.Tape()
        w = tape.param("w", (dim,))
        x = tape.param("x", (bsize, spec.input_dim))
        f = net.forward(spec, w, x)
        nll = likelihood.negloglik_node(tape, f, bsize)
        scaled = nll * (n / bsize)
        penalty = tape.sum(tape.square(w / tape.const(sigmas))) * 0.5
        obj = scaled + penalty
        grad = tape.grad_nodes(obj, ["w"])["w"]
        programs[bsize] = tape.compile([obj, grad])

    def objective_and_grad(w, idx):
        bsize = len(idx)
        if bsize not in programs:
            build(bsize)
        return programs[bsize].run(
            {"w": w, "x": X[idx], **likelihood.y_binding(y[idx])}
        )

    def validation_nll(w):
        if val_data is None:
            obj, _ = objective_and_grad(w, np.arange(n))
            return float(obj)
        Xv = np.asarray(val_data[0], dtype=np.float64)
        yv = val_data[1]
        summ = predictive_posterior([w], spec, Xv, likelihood, y_test=yv)
        return summ.metrics["nll"]

    w = net.init_params(spec, rng)
    state = optim.adam_init(w)
    best_w = w.copy()
    best_score = validation_nll(w)
    current_lr = lr
    for _epoch in range(epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            obj, grad = objective_and_grad(w, idx)
            if not np.isfinite(obj) or float(obj) > 1e10:
                raise EvaluationError(f"MAP training diverged (objective {float(obj):.3g})")
            w, state = optim.adam_step(w, grad, state, current_lr)
        current_lr *= lr_decay
        score = validation_nll(w)
        if score <= best_score:
            best_score = score
            best_w = w.copy()
    return best_w


# ----------------------------------------------------------------------
# active-learning acquisition
# ----------------------------------------------------------------------


def acquire_by_variance(summary: PredictiveSummary, pool_indices, n: int) -> np.ndarray:
    """Indices of the ``n`` largest predictive variances; ties take the lower index."""
    pool = np.asarray(pool_indices, dtype=np.int64)
    if n > pool.size:
        raise EvaluationError(f"requested {n} points from a pool of {pool.size}")
    if summary.variance is None:
        raise EvaluationError("summary carries no predictive variance")
    var = np.asarray(summary.variance, dtype=np.float64)[pool]
    order = np.lexsort((pool, -var))
    return pool[order[:n]]
