"""Fully-connected networks with width-scaled (NTK) parameterization.

Layer ``l`` maps ``h -> (W_l h) / sqrt(D_{l-1}) + b_l``; the nonlinearity is
applied to hidden pre-activations only, never to the raw input or the final
output. Dividing by the square root of the fan-in keeps the induced output
variance stable as widths grow.

Parameters live in a single flat float64 vector with the layout
``[W_1 (row-major), b_1, W_2, b_2, ...]``; :func:`layer_slices` documents the
exact offsets. :func:`forward` accepts plain numpy arrays or tape nodes, so
the same code path serves fast prediction and differentiable graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "softplus": ad.softplus}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: ``layer_widths = [input dim, hidden..., output dim]``."""

    layer_widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]


def layer_slices(spec: NetworkSpec) -> list:
    """Per-layer ``(w_slice, b_slice, (d_out, d_in))`` into the flat vector."""
    out = []
    offset = 0
    for l in range(spec.n_layers):
        d_in = spec.layer_widths[l]
        d_out = spec.layer_widths[l + 1]
        w_size = d_out * d_in
        out.append((slice(offset, offset + w_size), slice(offset + w_size, offset + w_size + d_out), (d_out, d_in)))
        offset += w_size + d_out
    return out


def param_count(spec: NetworkSpec) -> int:
    return sum(
        spec.layer_widths[l + 1] * (spec.layer_widths[l] + 1)
        for l in range(spec.n_layers)
    )


def unflatten(spec: NetworkSpec, params) -> list:
    """Split a flat parameter vector into per-layer ``(W, b)`` pairs.

    ``params`` may be an ndarray of shape ``(P,)`` or ``(batch, P)``, or a
    tape node of either shape; weights come back as ``(..., d_out, d_in)``.
    """
    ndim = params.ndim if isinstance(params, ad.Node) else np.ndim(params)
    lead = () if ndim == 1 else (params.shape[0],)
    layers = []
    for w_sl, b_sl, (d_out, d_in) in layer_slices(spec):
        w = ad.reshape(ad.slice_last(params, w_sl.start, w_sl.stop), lead + (d_out, d_in))
        b = ad.slice_last(params, b_sl.start, b_sl.stop)
        layers.append((w, b))
    return layers


def flatten(spec: NetworkSpec, layers) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.reshape(w, (-1,)))
        parts.append(np.reshape(b, (-1,)))
    flat = np.concatenate(parts)
    if flat.size != param_count(spec):
        raise ValueError("layer shapes do not match the network spec")
    return flat


def forward_layers(spec: NetworkSpec, layers, X):
    """Apply the network given per-layer ``(W, b)``; see :func:`forward`."""
    act = _ACTIVATIONS[spec.activation]
    h = X
    for l, (w, b) in enumerate(layers):
        if l > 0:
            h = act(h)
        d_in = spec.layer_widths[l]
        wl = w.ndim if isinstance(w, ad.Node) else np.ndim(w)
        bias = ad.reshape(b, b.shape[:-1] + (1, b.shape[-1])) if wl == 3 else b
        # Fold the fan-in scale into the weights: one op on the weight matrix
        # instead of one on every batch activation.
        h = h @ ad.mT(w * (1.0 / np.sqrt(d_in))) + bias
    return h


def forward(spec: NetworkSpec, params, X):
    """Evaluate the network at inputs ``X`` (shape ``(B, D_in)``).

    ``params`` is a flat vector (array or tape node); a leading batch axis
    samples one network per row and returns ``(batch, B, D_out)``.
    Differentiability with respect to the parameters comes for free when a
    tape node is supplied.
    """
    xdim = X.ndim if isinstance(X, ad.Node) else np.ndim(X)
    if xdim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(
            f"inputs must be (batch, {spec.input_dim}), got {tuple(X.shape)}"
        )
    pdim = params.ndim if isinstance(params, ad.Node) else np.ndim(params)
    plen = params.shape[-1]
    if pdim not in (1, 2) or plen != param_count(spec):
        raise ValueError(
            f"parameter vector has length {plen}, spec needs {param_count(spec)}"
        )
    return forward_layers(spec, unflatten(spec, params), X)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal weights, zero biases."""
    flat = np.zeros(param_count(spec))
    for w_sl, _b_sl, (d_out, d_in) in layer_slices(spec):
        flat[w_sl] = rng.standard_normal(d_out * d_in)
    return flat


def sample_functions(spec: NetworkSpec, prior, X_M: np.ndarray, count: int, rng):
    """Draw ``count`` functions from the prior, evaluated at ``X_M``.

    Returns a :class:`gpbnn.gp.FunctionBatch` whose rows are the flattened
    ``(M * output_dim)`` function values. Sampling goes through the same
    reparameterized tape graph used during prior tuning, so gradients with
    respect to the prior parameters exist on that path.
    """
    from .gp import FunctionBatch
    from .priors import build_function_sampler

    X_M = np.asarray(X_M, dtype=np.float64)
    sampler = build_function_sampler(prior, spec, count, X_M.shape)
    values = sampler.sample_values(X_M, rng)
    return FunctionBatch(values=values, measurement_points=X_M, output_dim=spec.output_dim)
