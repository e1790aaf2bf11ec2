"""Discrete-time spiking neuron layers and the float/spike boundary.

Two neuron models:

* CUBA -- current-based leaky integrate-and-fire. Per step, with decay
  factors ``alpha_i`` (synaptic current) and ``alpha_v`` (membrane)::

      i' = alpha_i * i + x
      v_pre = alpha_v * v + i'
      spike = 1[v_pre >= v_th]          (binary)
      v' = v_pre * (1 - spike)          (hard reset to 0)

* Sigma-delta -- an event-driven encoder that integrates the error between
  its input and a running reconstruction of its own emissions::

      err = x - recon
      u' = u + err
      emit u' where |u'| >= v_th        (graded), then u' -> 0 there
      recon' = recon + emitted

  Emissions telescope: the summed graded spikes equal the final
  reconstruction exactly, and for a constant input the reconstruction
  tracks it to within one threshold.

Both steps are shape-agnostic (state buffers match the input, so a batch
row dimension just works) and record the autodiff graph through the
surrogate spike ops when gradients are enabled.

Encoding into the spike domain is current injection: observation columns
become per-step input currents, values untouched. Decoding back is either
the mean firing rate over the step axis or the mean of recorded
(pre-reset) membrane potentials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, SurrogateParams, Tensor


@dataclass(frozen=True)
class CubaParams:
    v_th: float
    alpha_i: float
    alpha_v: float
    surrogate: SurrogateParams

    def __post_init__(self):
        # alpha = 0 is allowed: it degenerates the layer to a per-step
        # threshold unit, which the contract relies on.
        if not (0.0 <= self.alpha_i < 1.0 and 0.0 <= self.alpha_v < 1.0):
            raise ContractError("decay factors must lie in [0, 1)")
        if not self.v_th > 0:
            raise ContractError("v_th must be positive")
        if self.surrogate.v_th != self.v_th:
            raise ContractError("surrogate window must be centred on the layer threshold")

    @classmethod
    def create(cls, v_th, alpha_i, alpha_v, tau_grad, s_grad):
        return cls(v_th, alpha_i, alpha_v, SurrogateParams(v_th, tau_grad, s_grad))


@dataclass(frozen=True)
class SdParams:
    v_th: float
    surrogate: SurrogateParams

    def __post_init__(self):
        if not self.v_th > 0:
            raise ContractError("v_th must be positive")
        if self.surrogate.v_th != self.v_th:
            raise ContractError("surrogate window must be centred on the emission threshold")

    @classmethod
    def create(cls, v_th, tau_grad, s_grad):
        return cls(v_th, SurrogateParams(v_th, tau_grad, s_grad))


@dataclass
class NeuronLayerState:
    """Dynamic per-neuron buffers for one layer; zeroed at sequence start.

    CUBA uses ``current`` and ``potential``; sigma-delta uses ``potential``
    (the accumulated error) and ``reconstruction``.
    """

    current: Tensor | None = None
    potential: Tensor | None = None
    reconstruction: Tensor | None = None


def zero_state(kind: str, shape) -> NeuronLayerState:
    z = lambda: Tensor(np.zeros(shape))
    if kind == "cuba":
        return NeuronLayerState(current=z(), potential=z())
    if kind == "sd":
        return NeuronLayerState(potential=z(), reconstruction=z())
    raise ContractError(f"unknown neuron kind {kind!r}")


def neuron_kind(params) -> str:
    if isinstance(params, CubaParams):
        return "cuba"
    if isinstance(params, SdParams):
        return "sd"
    raise ContractError(f"not a neuron parameter set: {params!r}")


def cuba_step(state: NeuronLayerState, input_current: Tensor, p: CubaParams):
    """One CUBA update. Returns (new state, binary spikes)."""
    if state.current.shape != input_current.shape:
        raise DimensionError("state buffers must match the input shape")
    current = dc.add(dc.mul(state.current, p.alpha_i), input_current)
    potential_pre = dc.add(dc.mul(state.potential, p.alpha_v), current)
    spikes = dc.spike_threshold(potential_pre, p.surrogate)
    potential = dc.mul(potential_pre, dc.sub(1.0, spikes))
    return NeuronLayerState(current=current, potential=potential), spikes


def sd_step(state: NeuronLayerState, input_activation: Tensor, p: SdParams):
    """One sigma-delta update. Returns (new state, graded spikes)."""
    if state.potential.shape != input_activation.shape:
        raise DimensionError("state buffers must match the input shape")
    err = dc.sub(input_activation, state.reconstruction)
    u = dc.add(state.potential, err)
    emitted = dc.graded_spike(u, p.v_th, p.surrogate)
    potential = dc.sub(u, emitted)
    reconstruction = dc.add(state.reconstruction, emitted)
    return NeuronLayerState(potential=potential, reconstruction=reconstruction), emitted


@dataclass
class SpikeRaster:
    """Per-layer spike record over the step axis: values is (T, n) or a
    batched (T, B, n) stand-in is not supported here -- batched paths keep
    per-step tensors instead. ``kind`` is 'binary' (CUBA) or 'graded' (SD);
    binary rasters are checked on construction."""

    values: Tensor
    kind: str
    layer_sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "binary":
            v = self.values.data
            if not np.all((v == 0.0) | (v == 1.0)):
                raise ContractError("binary raster contains non-binary values")
        if not self.layer_sizes:
            self.layer_sizes = [self.values.shape[-1]]

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def step_fn(params):
    return cuba_step if neuron_kind(params) == "cuba" else sd_step


def spiking_dense_steps(weights: Tensor, bias: Tensor, inputs, neuron, state=None,
                        integrate_input: bool = False, input_trace: Tensor | None = None):
    """Drive a dense spiking layer with a list of per-step inputs.

    ``inputs`` is a list of (B, n_in) tensors; the synaptic drive at step t
    is ``inputs[t] @ weights.T + bias``. With ``integrate_input`` the
    dendrite accumulates incoming events first, so the drive tracks the
    running sum of the input stream (the receiving-side reconstruction of
    an event-coded signal); the accumulation is kept in the weighted
    domain, so per-step work stays proportional to the events that arrive.
    Returns (per-step spike tensors, final state, final input trace).
    """
    kind = neuron_kind(neuron)
    step = step_fn(neuron)
    w_t = dc.transpose(weights)
    if state is None:
        state = zero_state(kind, (inputs[0].shape[0], weights.shape[0]))
    outputs = []
    trace = input_trace
    for x in inputs:
        contribution = dc.matmul(x, w_t)
        if integrate_input:
            trace = contribution if trace is None else dc.add(trace, contribution)
            drive = dc.add(trace, bias)
        else:
            drive = dc.add(contribution, bias)
        state, spikes = step(state, drive, neuron)
        outputs.append(spikes)
    return outputs, state, trace


def spiking_dense_forward(weights: Tensor, bias: Tensor, input_seq: Tensor, neuron, state=None,
                          integrate_input: bool = False, input_trace: Tensor | None = None):
    """Run a (T, n_in) sequence through a dense spiking layer.

    Returns (SpikeRaster over the T axis, final NeuronLayerState, final
    dendritic input trace). Passing the returned state (and trace, when
    the dendrite integrates events) back in continues the dynamics exactly
    where they stopped, bit-for-bit.
    """
    if input_seq.ndim != 2:
        raise DimensionError("input_seq must be (T, n_in)")
    if weights.shape[1] != input_seq.shape[1]:
        raise DimensionError(
            f"weights expect {weights.shape[1]} inputs, sequence has {input_seq.shape[1]}"
        )
    T = input_seq.shape[0]
    inputs = [dc.take_row(input_seq, t) for t in range(T)]
    outputs, state, trace = spiking_dense_steps(
        weights, bias, inputs, neuron, state=state,
        integrate_input=integrate_input, input_trace=input_trace,
    )
    kind = "binary" if neuron_kind(neuron) == "cuba" else "graded"
    raster = SpikeRaster(dc.stack_rows(outputs), kind)
    return raster, state, trace


def encode_current(obs_matrix: Tensor) -> Tensor:
    """Current-injection encoding: transpose (H, T) -> (T, H), values as-is."""
    if obs_matrix.ndim != 2:
        raise DimensionError("observation matrix must be 2-D")
    return dc.transpose(obs_matrix)


def decode_rate(raster: SpikeRaster) -> Tensor:
    """Per-neuron mean firing over the step axis, (T, n) -> (n,)."""
    if raster.steps < 1:
        raise ContractError("decode_rate needs at least one step")
    return dc.tmean(raster.values, axis=0)


def decode_membrane(potentials: Tensor) -> Tensor:
    """Per-neuron mean of recorded pre-reset potentials, (T, n) -> (n,)."""
    if potentials.ndim != 2 or potentials.shape[0] < 1:
        raise ContractError("decode_membrane needs a (T, n) record with T >= 1")
    return dc.tmean(potentials, axis=0)
