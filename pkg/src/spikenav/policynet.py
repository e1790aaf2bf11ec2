"""Spiking feature extractor, spiking actor, conventional critic.

The variable-width crowd observation becomes a fixed-height matrix whose
columns pair the (repeated) robot block with one human block each, closest
human first. Columns are injected as per-step input currents, so the crowd
axis rides on the spiking network's own step axis: a single dense spiking
layer extracts features, a second spiking layer plus a per-step affine
readout forms the actor, and the critic decodes the shared feature raster
to firing rates before two tanh layers. Everything between the current
injection and the actor readout stays in the spike domain.

Actions are a squashed diagonal Gaussian: the readout's mean passes
through tanh and is rescaled to [0, v_max] x [-d_max, d_max]; log-probs
carry the change-of-variables correction. Neuron state is zeroed before
every forward pass, so inference is stateless across environment steps.

Checkpoints use a small self-describing binary container, documented at
``CHECKPOINT_FORMAT`` and in the README.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import snncore as sn
from .diffcore import ContractError, Tensor
from .snncore import CubaParams, SdParams, SpikeRaster

HIDDEN_WIDTH = 64
ACTION_DIM = 2
LOG_STD_INIT = (-0.5, -0.5)
SPEED_BIAS_INIT = 1.0  # start as a driver: tanh(1) maps to ~0.88 of max speed
LOG_2PI = math.log(2.0 * math.pi)

# Per-network neuron constants, keyed by network role.
SD_FEATURE_NEURON = SdParams.create(v_th=0.14, tau_grad=0.82, s_grad=0.16)
SD_ACTOR_NEURON = SdParams.create(v_th=0.26, tau_grad=0.44, s_grad=0.58)
CUBA_FEATURE_NEURON = CubaParams.create(v_th=0.31, alpha_i=0.77, alpha_v=0.49, tau_grad=0.55, s_grad=2.34)
CUBA_ACTOR_NEURON = CubaParams.create(v_th=0.93, alpha_i=0.16, alpha_v=0.78, tau_grad=0.21, s_grad=3.47)

NEURON_SETS = {
    "sd": (SD_FEATURE_NEURON, SD_ACTOR_NEURON),
    "cuba": (CUBA_FEATURE_NEURON, CUBA_ACTOR_NEURON),
}

CHECKPOINT_MAGIC = b"SPIKENAV"
CHECKPOINT_VERSION = 1

CHECKPOINT_FORMAT = """\
Byte layout (little endian):
  [0:8)    magic "SPIKENAV"
  [8:12)   uint32 format version (currently 1)
  [12:16)  uint32 header length L
  [16:16+L) UTF-8 JSON header: neuron_kind ("sd"|"cuba"), obs_dim, hidden,
            history_k, log-std init metadata-free parameter list under
            "tensors" as [name, shape] pairs, and per-network neuron
            constants under "neurons" (v_th/tau_grad/s_grad, plus
            alpha_i/alpha_v for cuba)
  [16+L:)  the tensors' float64 little-endian buffers, row-major,
            concatenated in header order
"""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, malformed, or incompatible."""


@dataclass(frozen=True)
class ActionBounds:
    """Half-open action box: speed in [0, v_max], heading change in ±d_max."""

    v_max: float
    d_max: float

    def centers(self) -> np.ndarray:
        return np.array([self.v_max / 2.0, 0.0])

    def halves(self) -> np.ndarray:
        return np.array([self.v_max / 2.0, self.d_max])


@dataclass
class ObservationMatrix:
    """(H, T) crowd snapshot: every column repeats the robot block on top
    of the j-th closest human's block; one zeroed column when alone."""

    data: Tensor

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def build_observation_matrix(robot_obs, humans, human_dim: int | None = None) -> ObservationMatrix:
    """Columns of robot block over human block, one per human, closest
    first; an empty crowd yields a single column with a zeroed human block
    of ``human_dim`` entries (defaults to the standard layout)."""
    robot_vec = robot_obs.vector()
    if humans:
        distances = [h.distance for h in humans]
        if any(b < a for a, b in zip(distances, distances[1:])):
            raise ContractError("human observations must arrive sorted closest-first")
        columns = [np.concatenate([robot_vec, h.vector()]) for h in humans]
    else:
        if human_dim is None:
            from .crowdenv import ROBOT_OBS_DIM, observation_dim

            human_dim = observation_dim() - ROBOT_OBS_DIM
        columns = [np.concatenate([robot_vec, np.zeros(human_dim)])]
    matrix = np.stack(columns, axis=1)
    return ObservationMatrix(Tensor(matrix))


@dataclass
class PolicyParams:
    """All learnable tensors plus the neuron constants of both networks."""

    neuron_kind: str
    obs_dim: int
    hidden: int
    history_k: int
    sfe_w: Tensor
    sfe_b: Tensor
    san_w: Tensor
    san_b: Tensor
    readout_w: Tensor
    readout_b: Tensor
    critic_w1: Tensor
    critic_b1: Tensor
    critic_w2: Tensor
    critic_b2: Tensor
    critic_w3: Tensor
    critic_b3: Tensor
    log_std: Tensor
    feature_neuron: CubaParams | SdParams = None
    actor_neuron: CubaParams | SdParams = None

    TENSOR_FIELDS = (
        "sfe_w", "sfe_b", "san_w", "san_b", "readout_w", "readout_b",
        "critic_w1", "critic_b1", "critic_w2", "critic_b2", "critic_w3", "critic_b3",
        "log_std",
    )

    def __post_init__(self):
        if self.feature_neuron is None:
            self.feature_neuron, self.actor_neuron = NEURON_SETS[self.neuron_kind]
        if self.sfe_w.shape[0] != self.san_w.shape[1]:
            raise ContractError("feature width must match the actor input width")

    def parameters(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.TENSOR_FIELDS]

    @classmethod
    def init(cls, obs_dim: int, neuron_kind: str, rng: np.random.Generator,
             hidden: int = HIDDEN_WIDTH, history_k: int = 2,
             feature_gain: float = 0.15, actor_gain: float = 0.5) -> "PolicyParams":
        """Seeded initialization.

        The spiking layers start well below plain Xavier scale: observations
        are metric quantities of magnitude up to ~10, and oversized drive
        pushes accumulated potentials outside the surrogate-gradient windows
        (and the readout into tanh saturation), starving early training of
        gradient. ``feature_gain`` shrinks the input layer accordingly;
        ``actor_gain`` shrinks the spike-domain layers.

        The readout's speed bias starts positive: a newborn policy that
        keeps moving (headings are goal-aligned at reset) finishes episodes
        both ways and gives the critic something to contrast, where a
        wander-in-place start collapses into the timeout local optimum.
        """
        if neuron_kind not in NEURON_SETS:
            raise ContractError(f"neuron_kind must be 'sd' or 'cuba', got {neuron_kind!r}")

        def dense(n_out, n_in, gain=1.0):
            bound = gain * math.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True)

        def bias(n):
            return Tensor(np.zeros(n), requires_grad=True)

        readout_b = Tensor(np.array([SPEED_BIAS_INIT, 0.0]), requires_grad=True)
        return cls(
            neuron_kind=neuron_kind,
            obs_dim=obs_dim,
            hidden=hidden,
            history_k=history_k,
            sfe_w=dense(hidden, obs_dim, feature_gain), sfe_b=bias(hidden),
            san_w=dense(hidden, hidden, actor_gain), san_b=bias(hidden),
            readout_w=dense(ACTION_DIM, hidden, actor_gain), readout_b=readout_b,
            critic_w1=dense(hidden, hidden), critic_b1=bias(hidden),
            critic_w2=dense(hidden, hidden), critic_b2=bias(hidden),
            critic_w3=dense(1, hidden), critic_b3=bias(1),
            log_std=Tensor(np.asarray(LOG_STD_INIT, dtype=float), requires_grad=True),
        )


@dataclass
class ActorOutput:
    mean_pre_squash: Tensor  # (1, 2)
    log_std: Tensor  # (2,)
    rasters: dict[str, SpikeRaster]
    value: Tensor | None = None

    def action_mean(self, bounds: ActionBounds) -> np.ndarray:
        return squash(self.mean_pre_squash.data[0], bounds)


def policy_value_forward(obs: ObservationMatrix, params: PolicyParams, want_value: bool = True) -> ActorOutput:
    """Single-sample forward pass with fresh neuron state.

    Input currents -> feature spikes -> actor spikes -> per-step readout
    decoded by mean membrane; the critic (optional) decodes the shared
    feature raster to rates and applies two tanh layers.
    """
    if obs.height != params.obs_dim:
        raise ContractError(f"observation height {obs.height} != policy obs_dim {params.obs_dim}")
    graded = params.neuron_kind == "sd"
    injected = sn.encode_current(obs.data)  # (T, H)
    sfe_raster, _, _ = sn.spiking_dense_forward(params.sfe_w, params.sfe_b, injected, params.feature_neuron)
    # graded emissions are deltas of the represented signal, so downstream
    # dendrites integrate them; binary spikes are integrated by the
    # receiver's own leaky synaptic current instead
    san_raster, _, _ = sn.spiking_dense_forward(
        params.san_w, params.san_b, sfe_raster.values, params.actor_neuron, integrate_input=graded
    )

    T = san_raster.steps
    w_r = dc.transpose(params.readout_w)
    readout_rows = []
    trace = None
    for t in range(T):
        contribution = dc.matmul(dc.take_row(san_raster.values, t), w_r)
        if graded:
            trace = contribution if trace is None else dc.add(trace, contribution)
            readout_rows.append(dc.add(trace, params.readout_b))
        else:
            readout_rows.append(dc.add(contribution, params.readout_b))
    mean_pre = sn.decode_membrane(dc.stack_rows(readout_rows))  # (2,)
    mean_pre = dc.reshape(mean_pre, (1, ACTION_DIM))

    value = None
    if want_value:
        rate = dc.reshape(sn.decode_rate(sfe_raster), (1, params.hidden))
        h1 = dc.tanh(dc.add(dc.matmul(rate, dc.transpose(params.critic_w1)), params.critic_b1))
        h2 = dc.tanh(dc.add(dc.matmul(h1, dc.transpose(params.critic_w2)), params.critic_b2))
        value = dc.add(dc.matmul(h2, dc.transpose(params.critic_w3)), params.critic_b3)

    rasters = {
        "input": SpikeRaster(injected, kind="graded"),
        "sfe": sfe_raster,
        "san": san_raster,
    }
    return ActorOutput(mean_pre_squash=mean_pre, log_std=params.log_std, rasters=rasters, value=value)


def actor_forward(obs: ObservationMatrix, params: PolicyParams) -> ActorOutput:
    return policy_value_forward(obs, params, want_value=False)


def critic_forward(obs: ObservationMatrix, params: PolicyParams) -> Tensor:
    return policy_value_forward(obs, params, want_value=True).value


def forward_batch(matrices: list[np.ndarray], params: PolicyParams):
    """Batched forward for same-width observation matrices.

    Returns (mean_pre (B, 2), value (B, 1)) tensors sharing one feature
    pass; used by the optimizer where rasters are not needed.
    """
    T = matrices[0].shape[1]
    if any(m.shape != matrices[0].shape for m in matrices):
        raise ContractError("forward_batch needs matrices of identical shape")
    graded = params.neuron_kind == "sd"
    bins = [Tensor(np.stack([m[:, t] for m in matrices])) for t in range(T)]  # T x (B, H)

    sfe_spikes, _, _ = sn.spiking_dense_steps(params.sfe_w, params.sfe_b, bins, params.feature_neuron)
    san_spikes, _, _ = sn.spiking_dense_steps(
        params.san_w, params.san_b, sfe_spikes, params.actor_neuron, integrate_input=graded
    )

    w_r = dc.transpose(params.readout_w)
    readout_sum = None
    trace = None
    for s in san_spikes:
        contribution = dc.matmul(s, w_r)
        if graded:
            trace = contribution if trace is None else dc.add(trace, contribution)
            z = dc.add(trace, params.readout_b)
        else:
            z = dc.add(contribution, params.readout_b)
        readout_sum = z if readout_sum is None else dc.add(readout_sum, z)
    mean_pre = dc.mul(readout_sum, 1.0 / T)

    rate_sum = None
    for s in sfe_spikes:
        rate_sum = s if rate_sum is None else dc.add(rate_sum, s)
    rate = dc.mul(rate_sum, 1.0 / T)
    h1 = dc.tanh(dc.add(dc.matmul(rate, dc.transpose(params.critic_w1)), params.critic_b1))
    h2 = dc.tanh(dc.add(dc.matmul(h1, dc.transpose(params.critic_w2)), params.critic_b2))
    value = dc.add(dc.matmul(h2, dc.transpose(params.critic_w3)), params.critic_b3)
    return mean_pre, value


# -- squashed-Gaussian action head ------------------------------------------------


def squash(u: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    return bounds.centers() + bounds.halves() * np.tanh(u)


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), overflow-safe
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def log_prob_np(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray, bounds: ActionBounds) -> float:
    """Density of the squashed sample whose pre-image is ``u``."""
    sigma = np.exp(log_std)
    z = (u - mean) / sigma
    gauss = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    correction = np.log(bounds.halves()) + _log1m_tanh_sq(u)
    return float(np.sum(gauss - correction))


def sample_action(mean: np.ndarray, log_std: np.ndarray, bounds: ActionBounds, rng: np.random.Generator):
    """Draw a squashed-Gaussian action. Returns (action array, log_prob, u)."""
    u = mean + np.exp(log_std) * rng.standard_normal(ACTION_DIM)
    action = squash(u, bounds)
    return action, log_prob_np(u, mean, log_std, bounds), u


def log_prob_graph(u: np.ndarray, mean_pre: Tensor, log_std: Tensor, halves: np.ndarray) -> Tensor:
    """Differentiable (B,) log-probabilities for stored pre-squash samples.

    ``u`` and ``halves`` are per-sample constants; gradients flow through
    the policy mean and the shared log-std.
    """
    u_const = Tensor(u)
    inv_sigma = dc.exp(dc.neg(log_std))  # (2,)
    z = dc.mul(dc.sub(u_const, mean_pre), inv_sigma)
    gauss = dc.sub(dc.mul(dc.mul(z, z), -0.5), log_std)
    per_dim = dc.add(gauss, -0.5 * LOG_2PI)
    correction = np.log(halves) + _log1m_tanh_sq(u)  # constant (B, 2)
    return dc.tsum(dc.sub(per_dim, Tensor(correction)), axis=1)


def entropy_graph(log_std: Tensor) -> Tensor:
    """Entropy of the underlying diagonal Gaussian (pre-squash)."""
    return dc.add(dc.tsum(log_std), 0.5 * ACTION_DIM * (1.0 + LOG_2PI))


# -- checkpoint container -----------------------------------------------------------


def _neuron_dict(p) -> dict:
    d = {"v_th": p.v_th, "tau_grad": p.surrogate.tau_grad, "s_grad": p.surrogate.s_grad}
    if isinstance(p, CubaParams):
        d["alpha_i"] = p.alpha_i
        d["alpha_v"] = p.alpha_v
    return d


def _neuron_from_dict(kind: str, d: dict):
    if kind == "cuba":
        return CubaParams.create(d["v_th"], d["alpha_i"], d["alpha_v"], d["tau_grad"], d["s_grad"])
    return SdParams.create(d["v_th"], d["tau_grad"], d["s_grad"])


def save_checkpoint(path, params: PolicyParams) -> None:
    tensors = [(name, getattr(params, name)) for name in PolicyParams.TENSOR_FIELDS]
    header = {
        "neuron_kind": params.neuron_kind,
        "obs_dim": params.obs_dim,
        "hidden": params.hidden,
        "history_k": params.history_k,
        "neurons": {
            "feature": _neuron_dict(params.feature_neuron),
            "actor": _neuron_dict(params.actor_neuron),
        },
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> PolicyParams:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic string; not a policy checkpoint")
    version, header_len = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc

    offset = 16 + header_len
    fields = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        fields[name] = Tensor(data.copy(), requires_grad=True)
    missing = set(PolicyParams.TENSOR_FIELDS) - set(fields)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")

    kind = header["neuron_kind"]
    return PolicyParams(
        neuron_kind=kind,
        obs_dim=header["obs_dim"],
        hidden=header["hidden"],
        history_k=header.get("history_k", 2),
        feature_neuron=_neuron_from_dict(kind, header["neurons"]["feature"]),
        actor_neuron=_neuron_from_dict(kind, header["neurons"]["actor"]),
        **fields,
    )
