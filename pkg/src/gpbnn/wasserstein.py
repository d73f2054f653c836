"""Dual 1-Wasserstein estimation and prior fitting against a GP target.

A softplus MLP critic (two hidden layers of 200 units) plays the 1-Lipschitz
test function; its constraint is enforced softly through a gradient penalty
``lam * E[(||grad_f phi(f_hat)||_2 - 1)^2]`` at random interpolates between
the two sample batches. The alternating scheme runs ``n_lipschitz`` critic
ascent steps (Adagrad) per single prior descent step (RMSprop) on the
estimated distance

    W1_hat = mean phi(f_gp) - mean phi(f_nn).

Function batches are compared at a measurement set that is resampled every
outer step: a configurable mix of training inputs and uniform draws from the
input bounding box. The critic warm-starts across outer steps.

All heavy paths run through compiled tape programs built once per shape, so
the inner loop is a sequence of numpy calls with fresh bindings.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

try:  # BLAS threading hurts on the small matmuls that dominate the loops
    from threadpoolctl import threadpool_limits as _blas_single_thread
except ImportError:  # pragma: no cover
    def _blas_single_thread(limits=None):
        return contextlib.nullcontext()

from . import autodiff as ad
from . import gp
from . import network as net
from . import optim
from . import priors as pr

CRITIC_HIDDEN = (200, 200)


class TunerError(Exception):
    pass


class TunerDiverged(TunerError):
    """Optimization aborted; the partial trace is attached."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TunerConfig:
    samples_per_batch: int = 128
    measurement_size: int = 100
    n_lipschitz: int = 200
    penalty_coeff: float = 10.0
    critic_lr: float = 0.02
    prior_lr: float = 0.05
    prior_lr_decay: float = 1.0  # per outer step, multiplicative
    outer_steps: int = 200
    train_fraction: float = 0.7
    seed: int = 0
    clip_norm: float = 100.0
    penalty_abort: float = 1e6

    def __post_init__(self):
        if min(
            self.samples_per_batch,
            self.measurement_size,
            self.n_lipschitz,
            self.outer_steps,
        ) < 1:
            raise ValueError("batch, measurement, and step counts must be positive")
        if self.penalty_coeff < 0 or self.critic_lr <= 0 or self.prior_lr <= 0:
            raise ValueError("penalty and learning rates must be positive")
        if not (0.0 <= self.train_fraction <= 1.0):
            raise ValueError("train_fraction must lie in [0, 1]")


@dataclass
class MeasurementSet:
    points: np.ndarray
    from_train: np.ndarray  # bool flag per row


def critic_spec(input_size: int) -> net.NetworkSpec:
    return net.NetworkSpec((input_size, *CRITIC_HIDDEN, 1), activation="softplus")


def sample_measurement_set(
    train_X: np.ndarray,
    bounds: np.ndarray,
    n_m: int,
    fraction: float,
    rng: np.random.Generator,
) -> MeasurementSet:
    """Mix of training rows and uniform draws from the bounding box.

    ``round(fraction * n_m)`` rows come from ``train_X`` (without replacement
    when possible), the remainder uniformly from ``bounds`` (one ``(lo, hi)``
    pair per input dimension).
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise TunerError("bounds must be (D, 2) with lo < hi per dimension")
    train_X = np.asarray(train_X, dtype=np.float64).reshape(-1, bounds.shape[0])
    n_train = int(round(fraction * n_m))
    if n_train > 0 and train_X.shape[0] == 0:
        raise TunerError("train fraction > 0 but the training set is empty")
    replace = n_train > train_X.shape[0]
    if n_train > 0:
        idx = rng.choice(train_X.shape[0], size=n_train, replace=replace)
        picked = train_X[idx]
    else:
        picked = np.zeros((0, bounds.shape[0]))
    uniform = rng.uniform(bounds[:, 0], bounds[:, 1], size=(n_m - n_train, bounds.shape[0]))
    points = np.concatenate([picked, uniform], axis=0)
    flags = np.zeros(n_m, dtype=bool)
    flags[:n_train] = True
    return MeasurementSet(points=points, from_train=flags)


def default_bounds(train_X: np.ndarray, pad: float = 0.0) -> np.ndarray:
    X = np.asarray(train_X, dtype=np.float64)
    lo = X.min(axis=0) - pad
    hi = X.max(axis=0) + pad
    hi = np.where(hi > lo, hi, lo + 1.0)
    return np.stack([lo, hi], axis=1)


# ----------------------------------------------------------------------
# compiled critic programs
# ----------------------------------------------------------------------


class CriticPrograms:
    """Loss/estimate programs for fixed batch size and input width."""

    def __init__(self, n_samples: int, input_size: int, lam: float):
        self.spec = critic_spec(input_size)
        self.n_samples = n_samples
        self.input_size = input_size
        self.lam = lam
        tape = ad.Tape()
        n_theta = net.param_count(self.spec)
        theta = tape.param("theta", (n_theta,))
        f_gp = tape.param("f_gp", (n_samples, input_size))
        f_nn = tape.param("f_nn", (n_samples, input_size))
        f_hat = tape.param("f_hat", (n_samples, input_size))
        phi_gp = net.forward(self.spec, theta, f_gp)
        phi_nn = net.forward(self.spec, theta, f_nn)
        phi_hat = net.forward(self.spec, theta, f_hat)
        # Gradient of the summed critic output w.r.t. the interpolated batch
        # is the stack of per-row input gradients.
        inner = tape.grad_nodes(tape.sum(phi_hat), ["f_hat"])["f_hat"]
        penalty = tape.mean(tape.square(tape.l2norm(inner, axis=1) - 1.0))
        loss = tape.mean(phi_nn) - tape.mean(phi_gp) + lam * penalty
        grad = tape.grad_nodes(loss, ["theta"])["theta"]
        west = tape.mean(phi_gp) - tape.mean(phi_nn)
        self._train = tape.compile([loss, penalty, grad])
        self._estimate = tape.compile([west])

    def loss_and_grad(self, theta, f_gp, f_nn, f_hat):
        loss, penalty, grad = self._train.run(
            {"theta": theta, "f_gp": f_gp, "f_nn": f_nn, "f_hat": f_hat}
        )
        return float(loss), float(penalty), grad

    def estimate(self, theta, f_gp, f_nn):
        return float(self._estimate.run({"theta": theta, "f_gp": f_gp, "f_nn": f_nn})[0])


_program_cache: dict = {}


def _programs(n_samples: int, input_size: int, lam: float) -> CriticPrograms:
    key = (n_samples, input_size, lam)
    if key not in _program_cache:
        _program_cache[key] = CriticPrograms(n_samples, input_size, lam)
    return _program_cache[key]


def interpolate_batches(f_nn, f_gp, rng):
    """Blend with one uniform coefficient per sampled function."""
    eps = rng.uniform(size=(f_nn.shape[0], 1))
    return eps * f_nn + (1.0 - eps) * f_gp


def critic_objective(theta, gp_batch, nn_batch, lam, rng) -> float:
    """Critic training loss: negated distance estimate plus gradient penalty."""
    f_gp, f_nn = _batch_values(gp_batch, nn_batch)
    progs = _programs(f_gp.shape[0], f_gp.shape[1], lam)
    f_hat = interpolate_batches(f_nn, f_gp, rng)
    loss, _penalty, _grad = progs.loss_and_grad(theta, f_gp, f_nn, f_hat)
    return loss


def wasserstein_estimate(theta, gp_batch, nn_batch) -> float:
    """Batch estimate of the dual distance under the current critic."""
    f_gp, f_nn = _batch_values(gp_batch, nn_batch)
    progs = _programs(f_gp.shape[0], f_gp.shape[1], 0.0)
    return progs.estimate(theta, f_gp, f_nn)


def _batch_values(gp_batch, nn_batch):
    f_gp = gp_batch.values if isinstance(gp_batch, gp.FunctionBatch) else np.asarray(gp_batch)
    f_nn = nn_batch.values if isinstance(nn_batch, gp.FunctionBatch) else np.asarray(nn_batch)
    if f_gp.shape != f_nn.shape:
        raise TunerError(f"batch shapes differ: {f_gp.shape} vs {f_nn.shape}")
    return f_gp, f_nn


class CriticTrainer:
    """Warm-started critic with its Adagrad state; used by the outer loop."""

    def __init__(self, n_samples, input_size, lam, lr, rng):
        self.programs = _programs(n_samples, input_size, lam)
        self.theta = net.init_params(self.programs.spec, rng)
        # Zero output layer: the first update then follows the pure dual
        # direction, which keeps the critic out of the sign-flipped basin the
        # gradient penalty would otherwise trap it in (the penalty's
        # subgradient at a zero input-gradient is 0).
        w_sl, b_sl, _ = net.layer_slices(self.programs.spec)[-1]
        self.theta[w_sl] = 0.0
        self.theta[b_sl] = 0.0
        self.state = optim.adagrad_init(self.theta)
        self.lr = lr
        self.clip_norm = 100.0

    def step(self, f_gp, f_nn, rng):
        f_hat = interpolate_batches(f_nn, f_gp, rng)
        loss, penalty, grad = self.programs.loss_and_grad(self.theta, f_gp, f_nn, f_hat)
        grad = optim.clip_global_norm(grad, self.clip_norm)
        self.theta, self.state = optim.adagrad_step(self.theta, grad, self.state, self.lr)
        return loss, penalty

    def reset_optimizer(self):
        """Fresh accumulator so warm-started weights keep a usable step size.

        Without this the growing Adagrad denominator freezes the critic after
        a few thousand cumulative updates and the inner maximization stops
        tracking the moving prior.
        """
        self.state = optim.adagrad_init(self.theta)

    def estimate(self, f_gp, f_nn):
        return self.programs.estimate(self.theta, f_gp, f_nn)


# ----------------------------------------------------------------------
# target samplers
# ----------------------------------------------------------------------


def make_target_sampler(target, output_dim: int = 1):
    """Callable ``(X_M, count, rng) -> (count, M * output_dim)`` of GP draws."""
    if isinstance(target, gp.KernelSpec):

        def fixed(X_M, count, rng):
            return gp.sample_gp(target, X_M, count, rng, output_dim=output_dim).values

        return fixed
    if isinstance(target, gp.HyperPriorSpec):

        def hierarchical(X_M, count, rng):
            return gp.sample_hierarchical_gp(target, X_M, count, rng, output_dim=output_dim).values

        return hierarchical
    raise TunerError(f"unsupported target type {type(target).__name__}")


# ----------------------------------------------------------------------
# the outer loop
# ----------------------------------------------------------------------


class PriorStepProgram:
    """Distance (and psi gradients) with the critic weights held fixed."""

    def __init__(self, sampler: pr.FunctionSampler, cspec: net.NetworkSpec, m_flat: int):
        tape = sampler.tape
        count = sampler.graph.count
        self.theta_node = tape.param("theta", (net.param_count(cspec),))
        self.f_gp_node = tape.param("f_gp", (count, m_flat))
        phi_nn = net.forward(cspec, self.theta_node, sampler.f_node)
        phi_gp = net.forward(cspec, self.theta_node, self.f_gp_node)
        west = tape.mean(phi_gp) - tape.mean(phi_nn)
        self.psi_names = list(sampler.psi_names)
        grads = tape.grad_nodes(west, self.psi_names)
        self._program = tape.compile([west] + [grads[n] for n in self.psi_names])

    def run(self, bindings):
        vals = self._program.run(bindings)
        return float(vals[0]), dict(zip(self.psi_names, vals[1:]))


def fit_prior(
    spec: net.NetworkSpec,
    prior,
    target,
    cfg: TunerConfig,
    train_X: np.ndarray,
    bounds: np.ndarray | None = None,
    callback=None,
):
    """Minimize the estimated 1-Wasserstein distance over prior parameters.

    Returns ``(tuned_prior, trace)`` where ``trace`` has one entry per outer
    step with keys ``outer_step``, ``wasserstein_estimate``, ``penalty_mean``
    and ``wall_ms``. Deterministic given the config seed.
    """
    rng = np.random.default_rng(cfg.seed)
    train_X = np.asarray(train_X, dtype=np.float64)
    if train_X.size:
        train_X = train_X.reshape(train_X.shape[0], -1)
    if bounds is None:
        if not train_X.size:
            raise TunerError("need explicit bounds when no training inputs are given")
        bounds = default_bounds(train_X)
    ns = cfg.samples_per_batch
    m_flat = cfg.measurement_size * spec.output_dim
    sampler = pr.FunctionSampler(prior, spec, ns, (cfg.measurement_size, spec.input_dim))
    cspec = critic_spec(m_flat)
    critic = CriticTrainer(ns, m_flat, cfg.penalty_coeff, cfg.critic_lr, rng)
    prior_step = PriorStepProgram(sampler, cspec, m_flat)
    target_sampler = make_target_sampler(target, spec.output_dim)
    psi = {k: np.array(v, dtype=np.float64) for k, v in sampler.graph.psi_values(prior).items()}
    rms_state = optim.rmsprop_init(psi)
    trace: list[dict] = []

    def fail(msg):
        raise TunerDiverged(msg, trace)

    ns = cfg.samples_per_batch
    prior_lr = cfg.prior_lr
    with _blas_single_thread(limits=1):
        for outer in range(cfg.outer_steps):
            t0 = time.perf_counter()
            ms = sample_measurement_set(
                train_X, bounds, cfg.measurement_size, cfg.train_fraction, rng
            )
            X_M = ms.points
            penalty = float("nan")
            critic.reset_optimizer()
            for _ in range(cfg.n_lipschitz):
                f_gp = target_sampler(X_M, ns, rng)
                f_nn = sampler.sample_values(X_M, rng, psi)
                loss, penalty = critic.step(f_gp, f_nn, rng)
                if not np.isfinite(loss):
                    fail(f"critic loss diverged at outer step {outer}")
                if penalty > cfg.penalty_abort:
                    fail(f"gradient penalty exceeded {cfg.penalty_abort:g} at outer step {outer}")
            f_gp = target_sampler(X_M, ns, rng)
            bindings = sampler.bindings(X_M, rng, psi)
            bindings["theta"] = critic.theta
            bindings["f_gp"] = f_gp
            west, gpsi = prior_step.run(bindings)
            if not np.isfinite(west):
                fail(f"distance estimate diverged at outer step {outer}")
            gpsi = optim.clip_global_norm(gpsi, cfg.clip_norm)
            psi, rms_state = optim.rmsprop_step(psi, gpsi, rms_state, prior_lr)
            prior_lr *= cfg.prior_lr_decay
            entry = {
                "outer_step": outer,
                "wasserstein_estimate": west,
                "penalty_mean": penalty,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            trace.append(entry)
            if callback is not None:
                callback(entry)
    return pr.replace_psi(prior, psi), trace


def write_trace_csv(trace, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outer_step", "wasserstein_estimate", "penalty_mean", "wall_ms"])
        for entry in trace:
            writer.writerow(
                [
                    entry["outer_step"],
                    repr(float(entry["wasserstein_estimate"])),
                    repr(float(entry["penalty_mean"])),
                    repr(float(entry["wall_ms"])),
                ]
            )
