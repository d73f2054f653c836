"""Scale-adapted stochastic-gradient HMC with multi-chain orchestration.

During burn-in three per-coordinate statistics are tracked from the incoming
stochastic gradients: an adaptive window ``tau``, a smoothed gradient ``g``
and an uncentered second moment ``v_hat``. After burn-in ``v_hat`` freezes
and preconditions the dynamics

    w <- w + v
    v <- v - eps^2 v_hat^{-1/2} grad - a v + N(0, max(2 eps^2 a v_hat^{-1/2} - eps^4, 0))

per coordinate, with step size ``eps`` and momentum coefficient ``a``. The
noise covariance is clamped at zero where the correction term would make it
negative.

Posterior tempering divides the whole potential (and its gradient) by the
temperature. Hierarchical priors interleave an exact Gibbs redraw of the
per-layer variances every ``gibbs_interval`` iterations.

Chains are independent given their seeds, which derive from the run seed via
``numpy.random.SeedSequence(seed, spawn_key=(chain_index,))``.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from . import priors as pr


class SamplerError(Exception):
    pass


class ChainFailure(SamplerError):
    def __init__(self, chain_index, cause):
        super().__init__(f"chain {chain_index} failed: {cause}")
        self.chain_index = chain_index
        self.cause = cause


@dataclass(frozen=True)
class SGHMCConfig:
    step_size: float = 0.01
    momentum: float = 0.01
    burn_in: int = 1000
    thinning: int = 100
    samples_per_chain: int = 30
    chains: int = 4
    batch_size: int | None = 32
    temperature: float = 1.0
    gibbs_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if not (0 < self.momentum <= 1):
            raise ValueError("momentum coefficient must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.gibbs_interval < 1:
            raise ValueError("gibbs interval must be >= 1")
        if min(self.burn_in, self.thinning, self.samples_per_chain, self.chains) < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class ChainState:
    """Position, velocity and burn-in adaptation statistics for one chain."""

    w: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    g: np.ndarray
    tau: np.ndarray
    iteration: int = 0
    phase: str = "burn-in"
    inv_sqrt_v: np.ndarray | None = None


def init_chain_state(w0: np.ndarray) -> ChainState:
    w0 = np.asarray(w0, dtype=np.float64)
    n = w0.size
    return ChainState(
        w=w0.copy(),
        v=np.zeros(n),
        v_hat=np.ones(n),
        g=np.zeros(n),
        tau=np.ones(n),
    )


def burn_in_adapt(state: ChainState, grad: np.ndarray) -> ChainState:
    """One step of the moving-average statistics (tau, then g, then v_hat).

    All three updates use the incoming gradient and the pre-update values;
    ``v_hat`` is clamped at 1e-16 and ``tau`` at 1.
    """
    if state.phase != "burn-in":
        raise SamplerError("burn_in_adapt called outside the burn-in phase")
    tau, g, v_hat = state.tau, state.g, state.v_hat
    inv_tau = 1.0 / tau
    new_tau = tau * (1.0 - g * g / v_hat) + 1.0
    new_g = g + inv_tau * (grad - g)
    new_v = v_hat + inv_tau * (grad * grad - v_hat)
    state.tau = np.maximum(new_tau, 1.0)
    state.g = new_g
    state.v_hat = np.maximum(new_v, 1e-16)
    return state


def freeze_adaptation(state: ChainState) -> ChainState:
    state.phase = "sampling"
    state.inv_sqrt_v = state.v_hat ** -0.5
    return state


def sghmc_step(state: ChainState, grad: np.ndarray, eps: float, a: float, rng: np.random.Generator) -> ChainState:
    """One discretized dynamics update (velocity, then position)."""
    inv_sqrt_v = state.inv_sqrt_v if state.inv_sqrt_v is not None else state.v_hat ** -0.5
    noise_var = np.maximum(2.0 * eps * eps * a * inv_sqrt_v - eps**4, 0.0)
    noise = np.sqrt(noise_var) * rng.standard_normal(state.w.size)
    state.v += -(eps * eps) * inv_sqrt_v * grad - a * state.v + noise
    state.w += state.v
    state.iteration += 1
    if not np.all(np.isfinite(state.w)):
        bad = int(np.flatnonzero(~np.isfinite(state.w))[0])
        raise SamplerError(f"non-finite chain state at coordinate {bad}")
    return state


def gibbs_resample_variances(
    prior: pr.HierarchicalPriorParams,
    spec: net.NetworkSpec,
    w: np.ndarray,
    rng: np.random.Generator,
):
    """Exact conditional redraw of each layer's weight and bias variances.

    The conditional is Inverse-Gamma(shape + n/2, rate + sum(w^2)/2) given
    the current parameter values of that layer.
    """
    (aw, bw), (ab, bb) = prior.shapes_rates()
    out = []
    for l, (w_sl, b_sl, _) in enumerate(net.layer_slices(spec)):
        wl = w[w_sl]
        bl = w[b_sl]
        shape_w = aw[l] + 0.5 * wl.size
        rate_w = bw[l] + 0.5 * float(wl @ wl)
        shape_b = ab[l] + 0.5 * bl.size
        rate_b = bb[l] + 0.5 * float(bl @ bl)
        s2w = rate_w / rng.gamma(shape=shape_w, scale=1.0)
        s2b = rate_b / rng.gamma(shape=shape_b, scale=1.0)
        out.append((float(s2w), float(s2b)))
    return out


# ----------------------------------------------------------------------
# potentials
# ----------------------------------------------------------------------


class AnalyticPotential:
    """Toy potential from a callable ``w -> (U, grad)``; no minibatching."""

    def __init__(self, fn, dim: int):
        self._fn = fn
        self.dim = dim
        self.n_data = 0

    def __call__(self, w, batch_idx=None, variances=None):
        return self._fn(w)


class BNNPotential:
    """Minibatch potential ``U(w) = [(N/B) nll_batch(w) - log p(w)] / T``."""

    def __init__(self, spec, prior, X, y, likelihood, batch_size=None, temperature=1.0):
        self.spec = spec
        self.prior = prior
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y)
        self.likelihood = likelihood
        self.temperature = float(temperature)
        self.n_data = self.X.shape[0]
        self.dim = net.param_count(spec)
        self._log_prior = pr.make_log_density_fn(prior, spec)
        self._programs: dict[int, tuple] = {}
        sizes = {self.n_data if not batch_size else min(batch_size, self.n_data)}
        if batch_size and self.n_data % batch_size:
            sizes.add(self.n_data % batch_size)
        for b in sizes:
            self._build(b)

    def _build(self, batch: int):
        tape = ad.Tape()
        w = tape.param("w", (self.dim,))
        x = tape.param("x", (batch, self.spec.input_dim))
        f = net.forward(self.spec, w, x)
        nll = self.likelihood.negloglik_node(tape, f, batch)
        grad = tape.grad_nodes(nll, ["w"])["w"]
        self._programs[batch] = (tape.compile([nll, grad]),)

    def __call__(self, w, batch_idx=None, variances=None):
        if batch_idx is None:
            batch_idx = np.arange(self.n_data)
        b = len(batch_idx)
        if b == 0:
            raise SamplerError("empty minibatch")
        if b not in self._programs:
            self._build(b)
        (program,) = self._programs[b]
        bindings = {
            "w": w,
            "x": self.X[batch_idx],
            **self.likelihood.y_binding(self.y[batch_idx]),
        }
        nll, grad_ll = program.run(bindings)
        scale = self.n_data / b
        logp, grad_p = self._log_prior(w, variances)
        u = (scale * float(nll) - logp) / self.temperature
        grad = (scale * grad_ll - grad_p) / self.temperature
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise SamplerError(f"non-finite potential gradient at coordinate {bad}")
        return u, grad


def potential_gradient(potential, w, batch_idx=None, variances=None):
    """Gradient of the (tempered) posterior potential at ``w``."""
    _, grad = potential(w, batch_idx, variances)
    return grad


# ----------------------------------------------------------------------
# chains
# ----------------------------------------------------------------------


@dataclass
class PosteriorSamples:
    """Thinned post-burn-in draws, kept per chain."""

    chains: list
    config: SGHMCConfig
    param_count: int
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(len(c) for c in self.chains)

    def stacked(self) -> np.ndarray:
        if self.n_samples == 0:
            return np.zeros((0, self.param_count))
        return np.stack([w for chain in self.chains for w in chain])


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chain_index,))))


class _EpochBatcher:
    """Shuffled-epoch minibatch indices; full-batch when size covers the data."""

    def __init__(self, n: int, batch_size: int | None, rng: np.random.Generator):
        self.n = n
        self.batch = n if not batch_size else min(batch_size, n)
        self.rng = rng
        self._order = None
        self._pos = 0

    def __next__(self):
        if self.n == 0:
            return None
        if self.batch >= self.n:
            return np.arange(self.n)
        if self._order is None or self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return out


def run_chain(
    potential,
    w0: np.ndarray,
    cfg: SGHMCConfig,
    rng: np.random.Generator,
    trace_writer=None,
    gibbs_prior=None,
    spec=None,
):
    """One chain: burn-in with adaptation, then frozen-scale sampling."""
    state = init_chain_state(w0)
    batcher = _EpochBatcher(getattr(potential, "n_data", 0), cfg.batch_size, rng)
    variances = None
    if gibbs_prior is not None:
        variances = pr.draw_variances(gibbs_prior, rng)
    samples = []
    total = cfg.burn_in + cfg.samples_per_chain * cfg.thinning
    for it in range(1, total + 1):
        batch = next(batcher)
        u, grad = potential(state.w, batch, variances)
        if state.phase == "burn-in":
            burn_in_adapt(state, grad)
        sghmc_step(state, grad, cfg.step_size, cfg.momentum, rng)
        if gibbs_prior is not None and it % cfg.gibbs_interval == 0:
            variances = gibbs_resample_variances(gibbs_prior, spec, state.w, rng)
        if trace_writer is not None:
            trace_writer(it, u, variances)
        if it == cfg.burn_in:
            freeze_adaptation(state)
        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            samples.append(state.w.copy())
    if state.phase == "burn-in":  # zero-sample runs never hit the freeze point
        freeze_adaptation(state)
    return samples, state


def run_chains(
    spec: net.NetworkSpec,
    prior,
    data,
    cfg: SGHMCConfig,
    likelihood,
    trace_dir: str | None = None,
    meta: dict | None = None,
) -> PosteriorSamples:
    """Independent chains over a BNN posterior; traces go to ``trace_dir``.

    A chain failure aborts the whole run (partial traces stay on disk) and is
    reported as :class:`ChainFailure` with the chain index.
    """
    X, y = data
    potential = BNNPotential(
        spec, prior, X, y, likelihood, batch_size=cfg.batch_size, temperature=cfg.temperature
    )
    gibbs_prior = prior if isinstance(prior, pr.HierarchicalPriorParams) else None
    chains = []
    for c in range(cfg.chains):
        rng = chain_rng(cfg.seed, c)
        w0 = net.init_params(spec, rng)
        writer_ctx = _TraceWriter(trace_dir, c, gibbs_prior is not None, spec) if trace_dir else None
        try:
            samples, _state = run_chain(
                potential,
                w0,
                cfg,
                rng,
                trace_writer=writer_ctx.write if writer_ctx else None,
                gibbs_prior=gibbs_prior,
                spec=spec,
            )
            chains.append(samples)
        except Exception as exc:
            raise ChainFailure(c, exc) from exc
        finally:
            if writer_ctx:
                writer_ctx.close()
    return PosteriorSamples(
        chains=chains,
        config=cfg,
        param_count=net.param_count(spec),
        meta=dict(meta or {}),
    )


class _TraceWriter:
    def __init__(self, trace_dir, chain_index, hierarchical, spec):
        os.makedirs(trace_dir, exist_ok=True)
        self.path = os.path.join(trace_dir, f"chain_{chain_index}.csv")
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        header = ["iteration", "potential"]
        if hierarchical:
            for l in range(spec.n_layers):
                header += [f"sigma2_w_{l}", f"sigma2_b_{l}"]
        self._csv.writerow(header)

    def write(self, iteration, potential, variances):
        row = [iteration, repr(float(potential))]
        if variances is not None:
            for s2w, s2b in variances:
                row += [repr(s2w), repr(s2b)]
        self._csv.writerow(row)

    def close(self):
        self._fh.close()


# ----------------------------------------------------------------------
# convergence diagnostic
# ----------------------------------------------------------------------


def r_hat(chains) -> float:
    """Potential scale reduction factor over per-chain scalar traces.

    ``chains`` is ``(n_chains, length)``. Degenerate inputs where both the
    within- and between-chain variances vanish return 1 by convention; zero
    within-chain variance with distinct chains diverges to infinity.
    """
    traces = np.asarray(chains, dtype=np.float64)
    if traces.ndim != 2 or traces.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    m, n = traces.shape
    if n < 10:
        raise ValueError("chains too short for a meaningful diagnostic")
    within = float(np.mean(np.var(traces, axis=1, ddof=1)))
    between_over_n = float(np.var(np.mean(traces, axis=1), ddof=1))
    if within == 0.0:
        return 1.0 if between_over_n == 0.0 else float("inf")
    var_plus = (n - 1) / n * within + between_over_n
    return float(np.sqrt(var_plus / within))


def r_hat_matrix(per_chain_values: list) -> np.ndarray:
    """R-hat per column for per-chain arrays of shape ``(samples, k)``."""
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in per_chain_values])
    return np.array([r_hat(stacked[:, :, j]) for j in range(stacked.shape[2])])


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def save_samples(samples: PosteriorSamples, path_prefix: str) -> None:
    """Write draws as length-prefixed float64 records plus a JSON sidecar."""
    bin_path = path_prefix + ".bin"
    with open(bin_path, "wb") as fh:
        for chain in samples.chains:
            for w in chain:
                fh.write(struct.pack("<Q", w.size))
                fh.write(np.asarray(w, dtype="<f8").tobytes())
    sidecar = {
        "param_count": samples.param_count,
        "chains": len(samples.chains),
        "samples_per_chain": [len(c) for c in samples.chains],
        "meta": samples.meta,
        "config": {
            "step_size": samples.config.step_size,
            "momentum": samples.config.momentum,
            "burn_in": samples.config.burn_in,
            "thinning": samples.config.thinning,
            "samples_per_chain": samples.config.samples_per_chain,
            "chains": samples.config.chains,
            "batch_size": samples.config.batch_size,
            "temperature": samples.config.temperature,
            "gibbs_interval": samples.config.gibbs_interval,
            "seed": samples.config.seed,
        },
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_samples(path_prefix: str) -> PosteriorSamples:
    with open(path_prefix + ".json") as fh:
        sidecar = json.load(fh)
    cfg = SGHMCConfig(**sidecar["config"])
    chains = []
    with open(path_prefix + ".bin", "rb") as fh:
        for count in sidecar["samples_per_chain"]:
            chain = []
            for _ in range(count):
                (size,) = struct.unpack("<Q", fh.read(8))
                chain.append(np.frombuffer(fh.read(8 * size), dtype="<f8").copy())
            chains.append(chain)
    return PosteriorSamples(
        chains=chains,
        config=cfg,
        param_count=sidecar["param_count"],
        meta=sidecar.get("meta", {}),
    )
