"""Per-inference energy estimates from spike activity and connectivity.

The cost model charges one synaptic operation per delivered weight-event
and one neuron update per neuron per step:

    E = n_synops * e_synop + n_neuron_updates * e_neuron

Event-driven hardware only pays for synapses whose source neuron emitted
something that step (graded emissions count as single events); clocked
hardware pays for every synapse every step. Neuron updates are charged on
every step for both families.

``DEVICE_TABLE`` carries the assumed per-operation joules for three
conventional devices (x86 CPU, ARM CPU, GPU) and three neuromorphic ones
(SpiNNaker, SpiNNaker 2, Loihi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, DimensionError
from .snncore import SpikeRaster


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    e_synop: float  # joules per synaptic operation
    e_neuron: float  # joules per neuron update
    event_driven: bool

    def __post_init__(self):
        if not (self.e_synop > 0 and self.e_neuron > 0):
            raise ContractError("per-operation energies must be positive")


DEVICE_TABLE = (
    DeviceProfile("cpu_x86", 8.60e-09, 8.60e-09, event_driven=False),
    DeviceProfile("cpu_arm", 9.00e-10, 9.00e-10, event_driven=False),
    DeviceProfile("gpu", 3.00e-10, 3.00e-10, event_driven=False),
    DeviceProfile("spinnaker", 1.33e-08, 2.60e-08, event_driven=True),
    DeviceProfile("spinnaker2", 4.50e-10, 2.19e-09, event_driven=True),
    DeviceProfile("loihi", 2.71e-11, 8.10e-11, event_driven=True),
)

DEVICE_BY_NAME = {d.name: d for d in DEVICE_TABLE}


@dataclass(frozen=True)
class ConnectivityMap:
    """Per source layer, the count of non-zero outgoing synapses of each
    neuron. Layer l's fan-outs are bounded by the width of layer l+1."""

    fan_out: tuple[np.ndarray, ...]

    @classmethod
    def from_weights(cls, weight_matrices) -> "ConnectivityMap":
        """Fan-outs from dense (n_out, n_in) weight matrices: source neuron
        n of matrix W feeds the non-zero entries of column n."""
        return cls(tuple(np.count_nonzero(np.asarray(w), axis=0) for w in weight_matrices))

    @property
    def n_layers(self) -> int:
        return len(self.fan_out)

    def layer_widths(self) -> list[int]:
        return [len(f) for f in self.fan_out]

    def total_fan_out(self) -> int:
        return int(sum(int(f.sum()) for f in self.fan_out))

    def drop_first(self) -> "ConnectivityMap":
        return ConnectivityMap(self.fan_out[1:])


@dataclass(frozen=True)
class EnergyReport:
    """Counts plus the per-device joules they imply.

    Event-driven and dense synop counts are both kept so that every
    device's joules decompose exactly as counts times its table constants.
    ``sparsity`` is the fraction of (step, layer, neuron) slots that
    carried an emission.
    """

    n_synops_event: int
    n_synops_dense: int
    n_neuron_updates: int
    joules: dict[str, float]
    sparsity: float

    def synops_for(self, device: DeviceProfile) -> int:
        return self.n_synops_event if device.event_driven else self.n_synops_dense


def count_synops_event_driven(rasters, conn: ConnectivityMap) -> int:
    """Sum over steps and source neurons of 1[emitted] * fan_out."""
    if len(rasters) != conn.n_layers:
        raise DimensionError("one raster per connectivity layer required")
    total = 0
    for raster, fan in zip(rasters, conn.fan_out):
        values = raster.values.data if isinstance(raster, SpikeRaster) else np.asarray(raster)
        if values.shape[1] != len(fan):
            raise DimensionError(
                f"raster width {values.shape[1]} != connectivity width {len(fan)}"
            )
        events = values != 0.0
        total += int(events.sum(axis=0) @ fan)
    return total


def count_synops_dense(T: int, conn: ConnectivityMap) -> int:
    """Every synapse fires every step: T * total fan-out."""
    if T < 0:
        raise ContractError("T must be nonnegative")
    return T * conn.total_fan_out()


def count_neuron_updates(T: int, layer_widths) -> int:
    """Every neuron updates every step, including on event-driven parts."""
    return T * int(sum(layer_widths))


def _activity(rasters) -> tuple[int, int]:
    active = 0
    slots = 0
    for raster in rasters:
        values = raster.values.data if isinstance(raster, SpikeRaster) else np.asarray(raster)
        active += int(np.count_nonzero(values))
        slots += values.size
    return active, slots


def report_from_counts(
    n_synops_event: int,
    n_synops_dense: int,
    n_neuron_updates: int,
    active_slots: int,
    total_slots: int,
    devices=DEVICE_TABLE,
) -> EnergyReport:
    joules = {}
    for device in devices:
        synops = n_synops_event if device.event_driven else n_synops_dense
        joules[device.name] = synops * device.e_synop + n_neuron_updates * device.e_neuron
    sparsity = active_slots / total_slots if total_slots else 0.0
    return EnergyReport(n_synops_event, n_synops_dense, n_neuron_updates, joules, sparsity)


def estimate(rasters, conn: ConnectivityMap, T: int, layer_widths, devices=DEVICE_TABLE,
             include_input: bool = True) -> EnergyReport:
    """Full per-inference report.

    ``rasters``, ``conn`` and ``layer_widths`` list the layers from the
    injection layer onward; ``layer_widths`` additionally includes the
    final (readout) layer, which has no outgoing synapses. Passing
    ``include_input=False`` drops the injection layer from both the synop
    and update counts.
    """
    if not include_input:
        rasters = rasters[1:]
        conn = conn.drop_first()
        layer_widths = layer_widths[1:]
    event = count_synops_event_driven(rasters, conn)
    dense = count_synops_dense(T, conn)
    updates = count_neuron_updates(T, layer_widths)
    active, slots = _activity(rasters)
    return report_from_counts(event, dense, updates, active, slots, devices=devices)


def combine_reports(reports, devices=DEVICE_TABLE) -> EnergyReport:
    """Sum per-step reports into one episode report (counts add; joules are
    recomputed from the summed counts so the decomposition stays exact)."""
    reports = list(reports)
    if not reports:
        return report_from_counts(0, 0, 0, 0, 0, devices=devices)
    event = sum(r.n_synops_event for r in reports)
    dense = sum(r.n_synops_dense for r in reports)
    updates = sum(r.n_neuron_updates for r in reports)
    # sparsity recombines as an activity-weighted mean over equal-width slots;
    # per-step slot counts are recovered from each report's own fraction only
    # when tracked externally, so carry the mean of fractions here
    sparsity = float(np.mean([r.sparsity for r in reports]))
    joules = {}
    for device in devices:
        synops = event if device.event_driven else dense
        joules[device.name] = synops * device.e_synop + updates * device.e_neuron
    return EnergyReport(event, dense, updates, joules, sparsity)


def raster_dump_records(rasters) -> list[dict]:
    """Line-delimited raster export: active-neuron indices per step/layer."""
    records = []
    for layer, raster in enumerate(rasters):
        values = raster.values.data if isinstance(raster, SpikeRaster) else np.asarray(raster)
        for t in range(values.shape[0]):
            active = np.flatnonzero(values[t] != 0.0)
            records.append({"t": t, "layer": layer, "active": active.tolist()})
    return records
