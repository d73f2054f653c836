"""Weight-prior families: layer-wise Gaussian, hierarchical, normalizing flow.

Five variants share one interface. ``fg`` and ``fh`` are fixed baselines
(unit Gaussian; Inverse-Gamma(1, 1) over layer variances). Their tunable
counterparts (``gpi_g``, ``gpi_h``) expose unconstrained parameters that map
through ``softplus`` to standard deviations or Inverse-Gamma shape/rate. The
flow family (``gpi_nf``) pushes a factorized Gaussian through four planar
flows per layer, acting on the concatenated weight+bias vector of the layer.

Sampling is reparameterized on the tape, so function draws stay
differentiable with respect to the unconstrained parameters: Gaussians via
``sigma * eps``, the hierarchical family via implicit reparameterization of
the Inverse-Gamma (exact pathwise partials injected as a local
linearization), and flows via the transform itself.

Log-densities are exact. For flows this requires inverting each planar layer
at an arbitrary point; a planar flow moves points only along its (constrained)
``u`` direction, so the inverse reduces to a bracketed scalar root-find.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import autodiff as ad
from . import network as net

LOG_2PI = float(np.log(2.0 * np.pi))
N_FLOWS = 4


class PriorError(Exception):
    pass


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus is positive")
    return float(y + np.log(-np.expm1(-y)))


def _softplus(x):
    return np.logaddexp(0.0, x)


# ----------------------------------------------------------------------
# parameter containers
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPriorParams:
    """Zero-mean Gaussian per layer; ``sigma = softplus(rho)`` stays positive."""

    rho_w: np.ndarray
    rho_b: np.ndarray
    tunable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rho_w", np.asarray(self.rho_w, dtype=np.float64))
        object.__setattr__(self, "rho_b", np.asarray(self.rho_b, dtype=np.float64))
        if self.rho_w.shape != self.rho_b.shape or self.rho_w.ndim != 1:
            raise ValueError("rho_w and rho_b must be 1-D with one entry per layer")

    @property
    def family(self) -> str:
        return "gpi_g" if self.tunable else "fg"

    @property
    def n_layers(self) -> int:
        return self.rho_w.size

    def sigma_w(self) -> np.ndarray:
        return _softplus(self.rho_w)

    def sigma_b(self) -> np.ndarray:
        return _softplus(self.rho_b)


@dataclass(frozen=True)
class HierarchicalPriorParams:
    """Inverse-Gamma distributed layer variances; conditionally Gaussian weights."""

    rho_alpha_w: np.ndarray
    rho_beta_w: np.ndarray
    rho_alpha_b: np.ndarray
    rho_beta_b: np.ndarray
    tunable: bool = True

    def __post_init__(self):
        for name in ("rho_alpha_w", "rho_beta_w", "rho_alpha_b", "rho_beta_b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (
            self.rho_alpha_w.shape
            == self.rho_beta_w.shape
            == self.rho_alpha_b.shape
            == self.rho_beta_b.shape
        ) or self.rho_alpha_w.ndim != 1:
            raise ValueError("hierarchical parameters must be 1-D, one entry per layer")

    @property
    def family(self) -> str:
        return "gpi_h" if self.tunable else "fh"

    @property
    def n_layers(self) -> int:
        return self.rho_alpha_w.size

    def shapes_rates(self):
        """Per-layer ((alpha_w, beta_w), (alpha_b, beta_b)) after softplus."""
        return (
            (_softplus(self.rho_alpha_w), _softplus(self.rho_beta_w)),
            (_softplus(self.rho_alpha_b), _softplus(self.rho_beta_b)),
        )


@dataclass(frozen=True)
class PlanarFlowParams:
    u: np.ndarray
    theta: np.ndarray
    b: float

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=np.float64))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "b", float(self.b))
        if self.u.shape != self.theta.shape or self.u.ndim != 1:
            raise ValueError("u and theta must be 1-D of equal length")


@dataclass(frozen=True)
class FlowLayerParams:
    rho_sigma: np.ndarray
    flows: tuple

    def __post_init__(self):
        object.__setattr__(self, "rho_sigma", np.asarray(self.rho_sigma, dtype=np.float64))
        object.__setattr__(self, "flows", tuple(self.flows))
        for fl in self.flows:
            if fl.u.size != self.rho_sigma.size:
                raise ValueError("flow dimension must match the layer parameter count")


@dataclass(frozen=True)
class FlowPriorParams:
    """Factorized Gaussian base pushed through planar flows, per layer."""

    layers: tuple
    tunable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def family(self) -> str:
        return "gpi_nf"

    @property
    def n_layers(self) -> int:
        return len(self.layers)


# ----------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------


def init_gaussian(spec: net.NetworkSpec, sigma: float = 1.0, tunable: bool = True) -> GaussianPriorParams:
    rho = softplus_inv(sigma)
    n = spec.n_layers
    return GaussianPriorParams(rho_w=np.full(n, rho), rho_b=np.full(n, rho), tunable=tunable)


def fixed_gaussian(spec: net.NetworkSpec) -> GaussianPriorParams:
    return init_gaussian(spec, sigma=1.0, tunable=False)


def init_hierarchical(
    spec: net.NetworkSpec, alpha: float = 1.0, beta: float = 1.0, tunable: bool = True
) -> HierarchicalPriorParams:
    ra, rb = softplus_inv(alpha), softplus_inv(beta)
    n = spec.n_layers
    return HierarchicalPriorParams(
        rho_alpha_w=np.full(n, ra),
        rho_beta_w=np.full(n, rb),
        rho_alpha_b=np.full(n, ra),
        rho_beta_b=np.full(n, rb),
        tunable=tunable,
    )


def fixed_hierarchical(spec: net.NetworkSpec) -> HierarchicalPriorParams:
    return init_hierarchical(spec, alpha=1.0, beta=1.0, tunable=False)


def init_flow(
    spec: net.NetworkSpec,
    rng: np.random.Generator,
    n_flows: int = N_FLOWS,
    sigma: float = 1.0,
) -> FlowPriorParams:
    """Near-identity flows around a unit Gaussian base."""
    layers = []
    for _w_sl, _b_sl, (d_out, d_in) in net.layer_slices(spec):
        dim = d_out * d_in + d_out
        flows = tuple(
            PlanarFlowParams(
                u=0.01 * rng.standard_normal(dim),
                theta=0.1 * rng.standard_normal(dim),
                b=0.0,
            )
            for _ in range(n_flows)
        )
        layers.append(FlowLayerParams(rho_sigma=np.full(dim, softplus_inv(sigma)), flows=flows))
    return FlowPriorParams(layers=tuple(layers))


# ----------------------------------------------------------------------
# inverse-gamma sampling with implicit reparameterization
# ----------------------------------------------------------------------


def invgamma_sample_implicit(alpha, beta, rng: np.random.Generator, size=None):
    """Sample Inverse-Gamma(shape, rate) with pathwise parameter gradients.

    Returns ``(z, dz_dalpha, dz_dbeta)``. The gradients follow the implicit
    function theorem on the CDF, ``dz/dpsi = -(dF/dpsi) / (dF/dz)``: the rate
    derivative is analytic (``z / beta``, exact by the scale family), the
    shape derivative differentiates the regularized incomplete gamma function
    numerically with a central step ``1e-4 * max(1, alpha)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise PriorError("inverse-gamma shape and rate must be positive")
    g = rng.gamma(shape=np.broadcast_to(alpha, size) if size else alpha, scale=1.0, size=size)
    z = beta / g
    dz_dbeta = z / beta
    h = np.minimum(1e-4 * np.maximum(1.0, alpha), alpha / 2.0)
    dF_dalpha = (special.gammaincc(alpha + h, g) - special.gammaincc(alpha - h, g)) / (2.0 * h)
    log_pdf = alpha * np.log(beta) - special.gammaln(alpha) - (alpha + 1.0) * np.log(z) - beta / z
    dz_dalpha = -dF_dalpha / np.exp(log_pdf)
    return z, dz_dalpha, dz_dbeta


# ----------------------------------------------------------------------
# planar flow helpers
# ----------------------------------------------------------------------


def flow_u_hat(u: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Constrained direction with ``u_hat . theta >= -1`` (keeps tanh flows invertible)."""
    ut = float(u @ theta)
    ss = float(theta @ theta)
    if ss == 0.0:
        return u.copy()
    m = -1.0 + _softplus(ut) - ut
    return u + m * theta / ss


def planar_forward(flow: PlanarFlowParams, w: np.ndarray) -> np.ndarray:
    """Apply one flow to points with the layer dimension last."""
    u_hat = flow_u_hat(flow.u, flow.theta)
    s = w @ flow.theta
    return w + np.tanh(s + flow.b)[..., None] * u_hat if w.ndim > 1 else w + np.tanh(s + flow.b) * u_hat

def planar_log_det(flow: PlanarFlowParams, w: np.ndarray):
    """log |det J| of one flow at pre-image ``w`` (rank-one determinant)."""
    u_hat = flow_u_hat(flow.u, flow.theta)
    c = float(u_hat @ flow.theta)
    s = w @ flow.theta + flow.b
    arg = 1.0 + c * (1.0 - np.tanh(s) ** 2)
    if np.any(arg <= 0):
        raise PriorError("non-invertible flow configuration: log-det argument <= 0")
    return np.log(arg)


def planar_invert(flow: PlanarFlowParams, y: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Exact inverse of one planar flow (moves points only along u_hat)."""
    u_hat = flow_u_hat(flow.u, flow.theta)
    c = float(u_hat @ flow.theta)
    ty = float(y @ flow.theta)

    def resid(s):
        return s + c * np.tanh(s + flow.b) - ty

    if c == 0.0:
        s = ty
    else:
        lo, hi = ty - abs(c) - 1e-9, ty + abs(c) + 1e-9
        s = optimize.brentq(resid, lo, hi, xtol=tol)
    return y - u_hat * np.tanh(s + flow.b)


def _tape_u_hat(tape: ad.Tape, u: ad.Node, theta: ad.Node) -> ad.Node:
    ut = tape.sum(u * theta)
    ss = tape.sum(theta * theta)
    m = tape.softplus(ut) - ut - 1.0
    return u + m * tape.safe_div(theta, ss)


def _tape_flow_chain(tape, w, flows):
    """Apply flow nodes to ``w`` (ndim 1 or 2, dimension last); returns chain."""
    chain = [w]
    for u, theta, b in flows:
        u_hat = _tape_u_hat(tape, u, theta)
        wl = chain[-1]
        theta_col = tape.reshape(theta, (theta.shape[0], 1))
        if wl.ndim == 2:
            s = tape.matmul(wl, theta_col)  # (count, 1)
        else:
            s = tape.sum(wl * theta)
        chain.append(wl + tape.tanh(s + b) * u_hat)
    return chain


# ----------------------------------------------------------------------
# reparameterized sampling graphs
# ----------------------------------------------------------------------


class PriorSampleGraph:
    """Tape graph drawing ``count`` flat parameter vectors from a prior.

    Exposes per-layer ``(W, b)`` nodes with a leading sample axis, the list
    of unconstrained parameter names, and a noise-binding sampler. Gradients
    of anything built on top flow back to the prior parameters.
    """

    def __init__(self, prior, spec: net.NetworkSpec, count: int, tape: ad.Tape | None = None):
        self.prior = prior
        self.spec = spec
        self.count = count
        self.tape = tape or ad.Tape()
        self.psi_names: list[str] = []
        self.layers: list = []
        self._noise_plan: list = []
        slices = net.layer_slices(spec)
        if prior.n_layers != len(slices):
            raise PriorError(
                f"prior has {prior.n_layers} layers, network needs {len(slices)}"
            )
        if isinstance(prior, GaussianPriorParams):
            self._build_gaussian(slices)
        elif isinstance(prior, HierarchicalPriorParams):
            self._build_hierarchical(slices)
        elif isinstance(prior, FlowPriorParams):
            self._build_flow(slices)
        else:
            raise PriorError(f"unknown prior type {type(prior).__name__}")

    def _psi(self, name, shape):
        node = self.tape.param(name, shape)
        self.psi_names.append(name)
        return node

    def _build_gaussian(self, slices):
        t = self.tape
        for l, (_w, _b, (d_out, d_in)) in enumerate(slices):
            rho_w = self._psi(f"psi.{l}.rho_w", ())
            rho_b = self._psi(f"psi.{l}.rho_b", ())
            eps_w = t.param(f"noise.{l}.w", (self.count, d_out * d_in))
            eps_b = t.param(f"noise.{l}.b", (self.count, d_out))
            self._noise_plan.append(("gauss", l, d_out, d_in))
            W = t.reshape(t.softplus(rho_w) * eps_w, (self.count, d_out, d_in))
            b = t.softplus(rho_b) * eps_b
            self.layers.append((W, b))

    def _build_hierarchical(self, slices):
        t = self.tape
        for l, (_w, _b, (d_out, d_in)) in enumerate(slices):
            pairs = []
            for part, width in (("w", d_out * d_in), ("b", d_out)):
                rho_a = self._psi(f"psi.{l}.rho_alpha_{part}", ())
                rho_b = self._psi(f"psi.{l}.rho_beta_{part}", ())
                alpha = t.softplus(rho_a)
                beta = t.softplus(rho_b)
                z0 = t.param(f"noise.{l}.{part}.z0", (self.count, 1))
                ca = t.param(f"noise.{l}.{part}.dz_dalpha", (self.count, 1))
                cb = t.param(f"noise.{l}.{part}.dz_dbeta", (self.count, 1))
                a0 = t.param(f"noise.{l}.{part}.alpha0", ())
                b0 = t.param(f"noise.{l}.{part}.beta0", ())
                eps = t.param(f"noise.{l}.{part}.eps", (self.count, width))
                # Local linearization of the implicit reparameterization: at the
                # current (alpha, beta) the value is the drawn variance and the
                # partials are exact.
                sigma2 = z0 + ca * (alpha - a0) + cb * (beta - b0)
                pairs.append(t.sqrt(sigma2) * eps)
            W = t.reshape(pairs[0], (self.count, d_out, d_in))
            self.layers.append((W, pairs[1]))
            self._noise_plan.append(("hier", l, d_out, d_in))

    def _build_flow(self, slices):
        t = self.tape
        for l, (_w, _b, (d_out, d_in)) in enumerate(slices):
            dim = d_out * d_in + d_out
            rho_sigma = self._psi(f"psi.{l}.rho_sigma", (dim,))
            eps = t.param(f"noise.{l}.eps", (self.count, dim))
            flows = []
            for k in range(len(self.prior.layers[l].flows)):
                u = self._psi(f"psi.{l}.flow{k}.u", (dim,))
                theta = self._psi(f"psi.{l}.flow{k}.theta", (dim,))
                b = self._psi(f"psi.{l}.flow{k}.b", ())
                flows.append((u, theta, b))
            w0 = t.softplus(rho_sigma) * eps
            wk = _tape_flow_chain(t, w0, flows)[-1]
            W = t.reshape(t.slice_last(wk, 0, d_out * d_in), (self.count, d_out, d_in))
            b_node = t.slice_last(wk, d_out * d_in, dim)
            self.layers.append((W, b_node))
            self._noise_plan.append(("flow", l, d_out, d_in))

    # -- bindings -------------------------------------------------------

    def psi_values(self, prior=None) -> dict:
        """Current unconstrained parameter values keyed by tape name."""
        prior = prior if prior is not None else self.prior
        out = {}
        if isinstance(prior, GaussianPriorParams):
            for l in range(prior.n_layers):
                out[f"psi.{l}.rho_w"] = np.float64(prior.rho_w[l])
                out[f"psi.{l}.rho_b"] = np.float64(prior.rho_b[l])
        elif isinstance(prior, HierarchicalPriorParams):
            for l in range(prior.n_layers):
                out[f"psi.{l}.rho_alpha_w"] = np.float64(prior.rho_alpha_w[l])
                out[f"psi.{l}.rho_beta_w"] = np.float64(prior.rho_beta_w[l])
                out[f"psi.{l}.rho_alpha_b"] = np.float64(prior.rho_alpha_b[l])
                out[f"psi.{l}.rho_beta_b"] = np.float64(prior.rho_beta_b[l])
        elif isinstance(prior, FlowPriorParams):
            for l, layer in enumerate(prior.layers):
                out[f"psi.{l}.rho_sigma"] = layer.rho_sigma
                for k, fl in enumerate(layer.flows):
                    out[f"psi.{l}.flow{k}.u"] = fl.u
                    out[f"psi.{l}.flow{k}.theta"] = fl.theta
                    out[f"psi.{l}.flow{k}.b"] = np.float64(fl.b)
        return out

    def noise_bindings(self, rng: np.random.Generator, psi: dict | None = None) -> dict:
        """Fresh reparameterization noise (and, for the hierarchical family,
        the variance draws with their pathwise partials at the current psi)."""
        psi = psi if psi is not None else self.psi_values()
        out = {}
        for kind, l, d_out, d_in in self._noise_plan:
            if kind == "gauss":
                out[f"noise.{l}.w"] = rng.standard_normal((self.count, d_out * d_in))
                out[f"noise.{l}.b"] = rng.standard_normal((self.count, d_out))
            elif kind == "hier":
                for part, width in (("w", d_out * d_in), ("b", d_out)):
                    alpha = float(_softplus(psi[f"psi.{l}.rho_alpha_{part}"]))
                    beta = float(_softplus(psi[f"psi.{l}.rho_beta_{part}"]))
                    z, da, db = invgamma_sample_implicit(alpha, beta, rng, size=(self.count, 1))
                    out[f"noise.{l}.{part}.z0"] = z
                    out[f"noise.{l}.{part}.dz_dalpha"] = da
                    out[f"noise.{l}.{part}.dz_dbeta"] = db
                    out[f"noise.{l}.{part}.alpha0"] = np.float64(alpha)
                    out[f"noise.{l}.{part}.beta0"] = np.float64(beta)
                    out[f"noise.{l}.{part}.eps"] = rng.standard_normal((self.count, width))
            else:
                dim = d_out * d_in + d_out
                out[f"noise.{l}.eps"] = rng.standard_normal((self.count, dim))
        return out

    def sample_layer_values(self, rng: np.random.Generator):
        """Eager draw: per-layer (W, b) arrays with the sample axis leading."""
        bindings = {**self.psi_values(), **self.noise_bindings(rng)}
        nodes = [n for pair in self.layers for n in pair]
        vals = self.tape.compile(nodes).run(bindings)
        return [(vals[2 * i], vals[2 * i + 1]) for i in range(len(self.layers))]


class FunctionSampler:
    """Sampling graph for prior function draws at bound measurement points."""

    def __init__(self, prior, spec: net.NetworkSpec, count: int, x_shape):
        self.graph = PriorSampleGraph(prior, spec, count)
        self.spec = spec
        tape = self.graph.tape
        m, d = int(x_shape[0]), int(x_shape[1])
        if d != spec.input_dim:
            raise PriorError(f"measurement points have dim {d}, network takes {spec.input_dim}")
        self.x_node = tape.param("x", (m, d))
        f = net.forward_layers(spec, self.graph.layers, self.x_node)
        self.f_node = tape.reshape(f, (count, m * spec.output_dim))
        self._program = tape.compile([self.f_node])

    @property
    def tape(self) -> ad.Tape:
        return self.graph.tape

    @property
    def psi_names(self):
        return self.graph.psi_names

    def bindings(self, X_M, rng, psi: dict | None = None) -> dict:
        psi = psi if psi is not None else self.graph.psi_values()
        return {**psi, "x": np.asarray(X_M, dtype=np.float64), **self.graph.noise_bindings(rng, psi)}

    def sample_values(self, X_M, rng: np.random.Generator, psi: dict | None = None) -> np.ndarray:
        return self._program.run(self.bindings(X_M, rng, psi))[0]


def build_function_sampler(prior, spec: net.NetworkSpec, count: int, x_shape) -> FunctionSampler:
    return FunctionSampler(prior, spec, count, x_shape)


def sample_reparameterized(prior, spec: net.NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """One flat parameter vector drawn through the reparameterized graph."""
    graph = PriorSampleGraph(prior, spec, count=1)
    layers = [(w[0], b[0]) for w, b in graph.sample_layer_values(rng)]
    return net.flatten(spec, layers)


def replace_psi(prior, psi: dict):
    """Rebuild a prior object from updated unconstrained parameter values."""
    if isinstance(prior, GaussianPriorParams):
        n = prior.n_layers
        return GaussianPriorParams(
            rho_w=np.array([float(psi[f"psi.{l}.rho_w"]) for l in range(n)]),
            rho_b=np.array([float(psi[f"psi.{l}.rho_b"]) for l in range(n)]),
            tunable=prior.tunable,
        )
    if isinstance(prior, HierarchicalPriorParams):
        n = prior.n_layers
        return HierarchicalPriorParams(
            rho_alpha_w=np.array([float(psi[f"psi.{l}.rho_alpha_w"]) for l in range(n)]),
            rho_beta_w=np.array([float(psi[f"psi.{l}.rho_beta_w"]) for l in range(n)]),
            rho_alpha_b=np.array([float(psi[f"psi.{l}.rho_alpha_b"]) for l in range(n)]),
            rho_beta_b=np.array([float(psi[f"psi.{l}.rho_beta_b"]) for l in range(n)]),
            tunable=prior.tunable,
        )
    if isinstance(prior, FlowPriorParams):
        layers = []
        for l, layer in enumerate(prior.layers):
            flows = tuple(
                PlanarFlowParams(
                    u=np.asarray(psi[f"psi.{l}.flow{k}.u"]),
                    theta=np.asarray(psi[f"psi.{l}.flow{k}.theta"]),
                    b=float(psi[f"psi.{l}.flow{k}.b"]),
                )
                for k in range(len(layer.flows))
            )
            layers.append(
                FlowLayerParams(rho_sigma=np.asarray(psi[f"psi.{l}.rho_sigma"]), flows=flows)
            )
        return FlowPriorParams(layers=tuple(layers), tunable=prior.tunable)
    raise PriorError(f"unknown prior type {type(prior).__name__}")


# ----------------------------------------------------------------------
# log densities
# ----------------------------------------------------------------------


def _gaussian_logpdf_sum(x: np.ndarray, sigma2: float) -> float:
    return float(-0.5 * x.size * (LOG_2PI + np.log(sigma2)) - np.sum(x * x) / (2.0 * sigma2))


def draw_variances(prior: HierarchicalPriorParams, rng: np.random.Generator):
    """Initial per-layer (sigma2_w, sigma2_b) draws from the Inverse-Gamma level."""
    (aw, bw), (ab, bb) = prior.shapes_rates()
    out = []
    for l in range(prior.n_layers):
        s2w = bw[l] / rng.gamma(shape=aw[l], scale=1.0)
        s2b = bb[l] / rng.gamma(shape=ab[l], scale=1.0)
        out.append((float(s2w), float(s2b)))
    return out


def log_density(prior, params: np.ndarray, spec: net.NetworkSpec, variances=None) -> float:
    """Exact log p(w) of a flat parameter vector.

    For the hierarchical family this is the conditional Gaussian density
    given ``variances`` (per-layer ``(sigma2_w, sigma2_b)``); the
    Inverse-Gamma level enters inference through the Gibbs step instead.
    """
    w = np.asarray(params, dtype=np.float64)
    slices = net.layer_slices(spec)
    if isinstance(prior, GaussianPriorParams):
        sw, sb = prior.sigma_w(), prior.sigma_b()
        return sum(
            _gaussian_logpdf_sum(w[w_sl], sw[l] ** 2) + _gaussian_logpdf_sum(w[b_sl], sb[l] ** 2)
            for l, (w_sl, b_sl, _) in enumerate(slices)
        )
    if isinstance(prior, HierarchicalPriorParams):
        if variances is None:
            raise PriorError("hierarchical log-density needs current layer variances")
        return sum(
            _gaussian_logpdf_sum(w[w_sl], variances[l][0])
            + _gaussian_logpdf_sum(w[b_sl], variances[l][1])
            for l, (w_sl, b_sl, _) in enumerate(slices)
        )
    if isinstance(prior, FlowPriorParams):
        total = 0.0
        for l, (w_sl, b_sl, _) in enumerate(slices):
            wl = np.concatenate([w[w_sl], w[b_sl]])
            total += _flow_layer_log_density(prior.layers[l], wl)
        return float(total)
    raise PriorError(f"unknown prior type {type(prior).__name__}")


def _flow_layer_log_density(layer: FlowLayerParams, y: np.ndarray) -> float:
    chain = [y]
    for fl in reversed(layer.flows):
        chain.append(planar_invert(fl, chain[-1]))
    chain.reverse()  # chain[0] is the base-space point
    sigma = _softplus(layer.rho_sigma)
    w0 = chain[0]
    logp = float(
        -0.5 * y.size * LOG_2PI - np.sum(np.log(sigma)) - 0.5 * np.sum((w0 / sigma) ** 2)
    )
    for fl, wk in zip(layer.flows, chain[:-1]):
        logp -= float(planar_log_det(fl, wk))
    return logp


class _FlowLayerGrad:
    """Compiled gradient of one flow layer's log-density in base coordinates."""

    def __init__(self, layer: FlowLayerParams):
        self.layer = layer
        dim = layer.rho_sigma.size
        t = ad.Tape()
        w0 = t.param("w0", (dim,))
        sigma = t.const(_softplus(layer.rho_sigma))
        flows = [(t.const(fl.u), t.const(fl.theta), t.const(fl.b)) for fl in layer.flows]
        chain = _tape_flow_chain(t, w0, flows)
        logp = t.const(-0.5 * dim * LOG_2PI - float(np.sum(np.log(_softplus(layer.rho_sigma)))))
        logp = logp - 0.5 * t.sum(t.square(w0 / sigma))
        for (u, theta, b), wk in zip(flows, chain[:-1]):
            u_hat = _tape_u_hat(t, u, theta)
            c = t.sum(u_hat * theta)
            s = t.sum(wk * theta) if wk.ndim == 1 else None
            hp = t.const(1.0) - t.square(t.tanh(s + b))
            logp = logp - t.log(c * hp + 1.0)
        self.tape = t
        self.grad_node = t.grad_nodes(logp, ["w0"])["w0"]
        self.logp_node = logp
        self.program = t.compile([self.logp_node, self.grad_node])

    def __call__(self, y: np.ndarray):
        """(log p(y), grad of log p at y) via inversion plus transpose-solves."""
        chain = [y]
        for fl in reversed(self.layer.flows):
            chain.append(planar_invert(fl, chain[-1]))
        chain.reverse()
        logp, g0 = self.program.run({"w0": chain[0]})
        # grad wrt y: apply inverse-transpose Jacobians of each flow in order,
        # each a rank-one (Sherman-Morrison) update.
        v = g0
        for fl, wk in zip(self.layer.flows, chain[:-1]):
            u_hat = flow_u_hat(fl.u, fl.theta)
            c = float(u_hat @ fl.theta)
            hp = 1.0 - np.tanh(float(wk @ fl.theta) + fl.b) ** 2
            denom = 1.0 + c * hp
            v = v - fl.theta * (hp * float(u_hat @ v) / denom)
        return float(logp), v


def make_log_density_fn(prior, spec: net.NetworkSpec):
    """Callable ``(w, variances=None) -> (log p(w), grad)`` for MCMC potentials."""
    slices = net.layer_slices(spec)
    if isinstance(prior, GaussianPriorParams):
        sw2 = prior.sigma_w() ** 2
        sb2 = prior.sigma_b() ** 2

        def gaussian(w, variances=None):
            w = np.asarray(w, dtype=np.float64)
            logp = 0.0
            grad = np.empty_like(w)
            for l, (w_sl, b_sl, _) in enumerate(slices):
                logp += _gaussian_logpdf_sum(w[w_sl], sw2[l]) + _gaussian_logpdf_sum(w[b_sl], sb2[l])
                grad[w_sl] = -w[w_sl] / sw2[l]
                grad[b_sl] = -w[b_sl] / sb2[l]
            return logp, grad

        return gaussian
    if isinstance(prior, HierarchicalPriorParams):

        def hierarchical(w, variances=None):
            if variances is None:
                raise PriorError("hierarchical log-density needs current layer variances")
            w = np.asarray(w, dtype=np.float64)
            logp = 0.0
            grad = np.empty_like(w)
            for l, (w_sl, b_sl, _) in enumerate(slices):
                s2w, s2b = variances[l]
                logp += _gaussian_logpdf_sum(w[w_sl], s2w) + _gaussian_logpdf_sum(w[b_sl], s2b)
                grad[w_sl] = -w[w_sl] / s2w
                grad[b_sl] = -w[b_sl] / s2b
            return logp, grad

        return hierarchical
    if isinstance(prior, FlowPriorParams):
        layer_fns = [_FlowLayerGrad(layer) for layer in prior.layers]

        def flow(w, variances=None):
            w = np.asarray(w, dtype=np.float64)
            logp = 0.0
            grad = np.empty_like(w)
            for l, (w_sl, b_sl, _) in enumerate(slices):
                y = np.concatenate([w[w_sl], w[b_sl]])
                lp, gy = layer_fns[l](y)
                logp += lp
                nw = w_sl.stop - w_sl.start
                grad[w_sl] = gy[:nw]
                grad[b_sl] = gy[nw:]
            return logp, grad

        return flow
    raise PriorError(f"unknown prior type {type(prior).__name__}")


def coordinate_sigmas(prior: GaussianPriorParams, spec: net.NetworkSpec) -> np.ndarray:
    """Per-coordinate prior standard deviations (Gaussian family only)."""
    if not isinstance(prior, GaussianPriorParams):
        raise PriorError("only the Gaussian family has per-coordinate sigmas")
    out = np.empty(net.param_count(spec))
    sw, sb = prior.sigma_w(), prior.sigma_b()
    for l, (w_sl, b_sl, _) in enumerate(net.layer_slices(spec)):
        out[w_sl] = sw[l]
        out[b_sl] = sb[l]
    return out


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def to_json(prior) -> str:
    """Canonical JSON text; byte-stable for identical parameter values."""
    if isinstance(prior, GaussianPriorParams):
        doc = {
            "family": prior.family,
            "layers": [
                {"rho_w": float(prior.rho_w[l]), "rho_b": float(prior.rho_b[l])}
                for l in range(prior.n_layers)
            ],
        }
    elif isinstance(prior, HierarchicalPriorParams):
        doc = {
            "family": prior.family,
            "layers": [
                {
                    "rho_alpha_w": float(prior.rho_alpha_w[l]),
                    "rho_beta_w": float(prior.rho_beta_w[l]),
                    "rho_alpha_b": float(prior.rho_alpha_b[l]),
                    "rho_beta_b": float(prior.rho_beta_b[l]),
                }
                for l in range(prior.n_layers)
            ],
        }
    elif isinstance(prior, FlowPriorParams):
        doc = {
            "family": prior.family,
            "layers": [
                {
                    "rho_sigma": [float(v) for v in layer.rho_sigma],
                    "flows": [
                        {
                            "u": [float(v) for v in fl.u],
                            "theta": [float(v) for v in fl.theta],
                            "b": float(fl.b),
                        }
                        for fl in layer.flows
                    ],
                }
                for layer in prior.layers
            ],
        }
    else:
        raise PriorError(f"unknown prior type {type(prior).__name__}")
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def from_json(text: str):
    doc = json.loads(text)
    family = doc["family"]
    layers = doc["layers"]
    if family in ("gpi_g", "fg"):
        return GaussianPriorParams(
            rho_w=np.array([l["rho_w"] for l in layers]),
            rho_b=np.array([l["rho_b"] for l in layers]),
            tunable=family == "gpi_g",
        )
    if family in ("gpi_h", "fh"):
        return HierarchicalPriorParams(
            rho_alpha_w=np.array([l["rho_alpha_w"] for l in layers]),
            rho_beta_w=np.array([l["rho_beta_w"] for l in layers]),
            rho_alpha_b=np.array([l["rho_alpha_b"] for l in layers]),
            rho_beta_b=np.array([l["rho_beta_b"] for l in layers]),
            tunable=family == "gpi_h",
        )
    if family == "gpi_nf":
        built = []
        for layer in layers:
            flows = tuple(
                PlanarFlowParams(u=np.array(f["u"]), theta=np.array(f["theta"]), b=f["b"])
                for f in layer["flows"]
            )
            built.append(FlowLayerParams(rho_sigma=np.array(layer["rho_sigma"]), flows=flows))
        return FlowPriorParams(layers=tuple(built))
    raise PriorError(f"unknown prior family {family!r}")


def make_prior(family: str, spec: net.NetworkSpec, rng: np.random.Generator | None = None):
    """Construct the default-initialized prior for a family tag."""
    if family == "fg":
        return fixed_gaussian(spec)
    if family == "fh":
        return fixed_hierarchical(spec)
    if family == "gpi_g":
        return init_gaussian(spec)
    if family == "gpi_h":
        return init_hierarchical(spec)
    if family == "gpi_nf":
        if rng is None:
            raise PriorError("flow prior initialization needs an rng")
        return init_flow(spec, rng)
    raise PriorError(f"unknown prior family {family!r}")
