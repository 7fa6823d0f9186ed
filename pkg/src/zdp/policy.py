"""The learned lean-command policy and the Raibert baseline.

psi_theta is a two-hidden-layer ReLU network mapping the unactuated
pre-impact state z (4,) to a commanded lean (2,).  The raw output is squashed
into the input box with a scaled tanh, so the command is feasible for every
parameter value and the input Jacobian stays defined everywhere.  Forward and
reverse passes are written out by hand; no autodiff framework is involved.

Weight files are versioned structured text; round trips are bit exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .hopper import HopperParams, InputBox


class SchemaMismatch(ValueError):
    """Weight file disagrees with the expected schema or shapes."""


class CorruptFile(ValueError):
    """Weight file cannot be parsed."""


class NoProgress(RuntimeError):
    """Pretraining loss failed to decrease for too many steps."""


_FORMAT_NAME = "zdp-weights"
_FORMAT_VERSION = 1


@dataclass
class PolicyParams:
    """Weights of psi_theta plus the output box it squashes into."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    @property
    def z_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(getattr(self, f.name).copy() for f in fields(self)))


@dataclass
class PolicyGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


_WEIGHT_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


def init_policy(z_dim: int = 4, out_dim: int = 2, hidden: int = 256,
                box: Optional[InputBox] = None, seed: int = 0) -> PolicyParams:
    """He-style uniform initialization with a fixed seed."""
    box = box or InputBox()
    rng = np.random.default_rng(seed)

    def he(rows, cols):
        limit = np.sqrt(6.0 / cols)
        return rng.uniform(-limit, limit, size=(rows, cols))

    return PolicyParams(
        w1=he(hidden, z_dim), b1=np.zeros(hidden),
        w2=he(hidden, hidden), b2=np.zeros(hidden),
        w3=he(out_dim, hidden), b3=np.zeros(out_dim),
        box_lo=box.lower.copy(), box_hi=box.upper.copy(),
    )


def _forward_batch(p: PolicyParams, Z: np.ndarray):
    """Batched forward pass; returns outputs and the cache for backprop."""
    a1 = Z @ p.w1.T + p.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p.w2.T + p.b2
    h2 = np.maximum(a2, 0.0)
    raw = h2 @ p.w3.T + p.b3
    half = 0.5 * (p.box_hi - p.box_lo)
    center = 0.5 * (p.box_hi + p.box_lo)
    t = np.tanh(raw / half)
    out = center + half * t
    return out, (Z, a1, h1, a2, h2, t)


def _backward_batch(p: PolicyParams, cache, upstream: np.ndarray):
    Z, a1, h1, a2, h2, t = cache
    d_raw = upstream * (1.0 - t * t)
    g = PolicyGrads(
        w3=d_raw.T @ h2, b3=d_raw.sum(axis=0),
        w2=None, b2=None, w1=None, b1=None,
    )
    d_a2 = (d_raw @ p.w3) * (a2 > 0.0)
    g.w2 = d_a2.T @ h1
    g.b2 = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ p.w2) * (a1 > 0.0)
    g.w1 = d_a1.T @ Z
    g.b1 = d_a1.sum(axis=0)
    input_grad = d_a1 @ p.w1
    return g, input_grad


def policy_forward(params: PolicyParams, z) -> np.ndarray:
    """Evaluate psi_theta(z); output lies strictly inside the box."""
    z = np.asarray(z, dtype=float)
    out, _ = _forward_batch(params, z[None, :])
    return out[0]


def policy_backward(params: PolicyParams, z, upstream):
    """Gradients of upstream . psi_theta(z) w.r.t. parameters and z."""
    z = np.asarray(z, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _, cache = _forward_batch(params, z[None, :])
    grads, input_grad = _backward_batch(params, cache, upstream[None, :])
    return grads, input_grad[0]


def flatten_params(p: PolicyParams) -> np.ndarray:
    return np.concatenate([getattr(p, f).ravel() for f in _WEIGHT_FIELDS])


def unflatten_params(p: PolicyParams, flat: np.ndarray) -> PolicyParams:
    out = p.copy()
    i = 0
    for f in _WEIGHT_FIELDS:
        arr = getattr(out, f)
        setattr(out, f, flat[i:i + arr.size].reshape(arr.shape).copy())
        i += arr.size
    return out


def flatten_grads(g: PolicyGrads) -> np.ndarray:
    return np.concatenate([getattr(g, f).ravel() for f in _WEIGHT_FIELDS])


# --- Raibert heuristic --------------------------------------------------------


@dataclass
class RaibertParams:
    """Conservative foot-placement gains; paper-style heuristic baseline."""

    velocity_gain: float = 0.02       # s, on the velocity error
    feedback_gain: float = 0.05       # on the position error
    reference_velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.reference_velocity = np.atleast_1d(np.asarray(self.reference_velocity, dtype=float))
        if self.velocity_gain < 0.0 or self.feedback_gain < 0.0:
            raise ValueError("gains must be non-negative")


def raibert(z, params: RaibertParams, hopper: HopperParams,
            box: Optional[InputBox] = None) -> np.ndarray:
    """Foot-placement heuristic mapped to lean angles; batches over rows.

    The desired foot offset is the flight-travel neutral term plus velocity
    and position feedback; a foot offset d in world x corresponds to a
    negative lean about y (and d in y to a positive lean about x).
    """
    z = np.asarray(z, dtype=float)
    pos, vel = z[..., :2], z[..., 2:]
    tf = hopper.nominal_flight_time
    d = vel * (0.5 * tf) + params.velocity_gain * (vel - params.reference_velocity) \
        + params.feedback_gain * pos
    ratio = np.clip(d / hopper.leg_length, -1.0, 1.0)
    lean = np.stack([np.arcsin(ratio[..., 1]), -np.arcsin(ratio[..., 0])], axis=-1)
    if box is not None:
        lean = box.clip(lean)
    return lean


# --- policy objects consumed by training / evaluation -------------------------


class NetPolicy:
    """psi_theta with trainable parameters."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def forward(self, z) -> np.ndarray:
        return policy_forward(self.params, z)

    def backward(self, z, upstream):
        grads, input_grad = policy_backward(self.params, z, upstream)
        return flatten_grads(grads), input_grad

    def get_flat(self) -> np.ndarray:
        return flatten_params(self.params)

    def set_flat(self, flat: np.ndarray) -> None:
        self.params = unflatten_params(self.params, flat)


class LinearPolicy:
    """psi(z) = M z; used for analytic fixtures."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def forward(self, z) -> np.ndarray:
        return self.matrix @ np.asarray(z, dtype=float)

    def backward(self, z, upstream):
        z = np.asarray(z, dtype=float)
        upstream = np.asarray(upstream, dtype=float)
        return np.outer(upstream, z).ravel(), self.matrix.T @ upstream

    def get_flat(self) -> np.ndarray:
        return self.matrix.ravel().copy()

    def set_flat(self, flat: np.ndarray) -> None:
        self.matrix = flat.reshape(self.matrix.shape).copy()


class RaibertPolicy:
    """Heuristic baseline wrapped in the policy interface (forward only)."""

    def __init__(self, raibert_params: RaibertParams, hopper: HopperParams,
                 box: Optional[InputBox] = None):
        self.raibert_params = raibert_params
        self.hopper = hopper
        self.box = box

    def forward(self, z) -> np.ndarray:
        return raibert(z, self.raibert_params, self.hopper, self.box)

    def backward(self, z, upstream):
        raise NotImplementedError("the Raibert baseline is not trainable")


# --- pretraining ---------------------------------------------------------------


def pretrain(params0: PolicyParams, raibert_params: RaibertParams, hopper: HopperParams,
             sample_lo, sample_hi, steps: int = 12000, rate: float = 2e-3,
             batch: int = 256, seed: int = 0, target_mse: float = 3e-5,
             patience: int = 1000) -> PolicyParams:
    """Regress psi_theta onto the Raibert heuristic over a uniform z box.

    Progress is tracked on a fixed validation batch (training batches are too
    noisy near convergence): the loop stops once the validation mean squared
    error drops below ``target_mse``, so re-pretraining an already-converged
    net is a no-op.  Raises :class:`NoProgress` if the validation loss stops
    decreasing for ``patience`` consecutive steps before reaching the target.
    """
    sample_lo = np.asarray(sample_lo, dtype=float)
    sample_hi = np.asarray(sample_hi, dtype=float)
    box = InputBox(params0.box_lo, params0.box_hi)
    rng = np.random.default_rng(seed)
    val_z = rng.uniform(sample_lo, sample_hi, size=(1024, sample_lo.shape[0]))
    val_target = raibert(val_z, raibert_params, hopper, box)

    def val_loss(params):
        out, _ = _forward_batch(params, val_z)
        return float(np.mean(np.sum((out - val_target) ** 2, axis=1)))

    p = params0.copy()
    flat = flatten_params(p)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best = np.inf
    stale = 0
    check_every = 25
    for step in range(1, steps + 1):
        if step % check_every == 1:
            loss = val_loss(p)
            if loss < target_mse:
                break
            if loss < best - 1e-12:
                best = loss
                stale = 0
            else:
                stale += check_every
                if stale >= patience:
                    raise NoProgress(f"pretraining stalled at mse {best:.3e} after {step} steps")
        Z = rng.uniform(sample_lo, sample_hi, size=(batch, sample_lo.shape[0]))
        target = raibert(Z, raibert_params, hopper, box)
        out, cache = _forward_batch(p, Z)
        grads, _ = _backward_batch(p, cache, 2.0 * (out - target) / Z.shape[0])
        g = flatten_grads(grads)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mh = m / (1.0 - beta1 ** step)
        vh = v / (1.0 - beta2 ** step)
        flat = flat - rate * mh / (np.sqrt(vh) + eps)
        p = unflatten_params(p, flat)
    return p


# --- weight file I/O -----------------------------------------------------------


def save_weights(params: PolicyParams, path) -> None:
    """Versioned structured-text weight file; values round-trip bit exact."""
    lines = [f"{_FORMAT_NAME} {_FORMAT_VERSION}",
             f"z_dim {params.z_dim}",
             f"out_dim {params.out_dim}",
             f"hidden {params.hidden}",
             "box_lo " + " ".join(repr(float(x)) for x in params.box_lo),
             "box_hi " + " ".join(repr(float(x)) for x in params.box_hi)]
    for name in _WEIGHT_FIELDS:
        arr = np.atleast_2d(getattr(params, name))
        lines.append(f"array {name} {' '.join(str(s) for s in getattr(params, name).shape)}")
        for row in arr:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path, z_dim: Optional[int] = None, out_dim: Optional[int] = None) -> PolicyParams:
    """Load a weight file, checking the schema and (optionally) the I/O dims."""
    try:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as exc:
        raise CorruptFile(str(exc)) from exc
    if not lines:
        raise CorruptFile("empty weight file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _FORMAT_NAME:
        raise SchemaMismatch(f"not a {_FORMAT_NAME} file: {lines[0]!r}")
    if int(head[1]) != _FORMAT_VERSION:
        raise SchemaMismatch(f"unsupported format version {head[1]}")
    try:
        meta = {}
        i = 1
        while i < len(lines) and not lines[i].startswith("array "):
            key, *vals = lines[i].split()
            meta[key] = vals
            i += 1
        arrays = {}
        while i < len(lines):
            _, name, *shape = lines[i].split()
            shape = tuple(int(s) for s in shape)
            rows = shape[0] if len(shape) > 1 else 1
            data = [[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)]
            arrays[name] = np.array(data).reshape(shape)
            i += 1 + rows
        params = PolicyParams(
            **{name: arrays[name] for name in _WEIGHT_FIELDS},
            box_lo=np.array([float(x) for x in meta["box_lo"]]),
            box_hi=np.array([float(x) for x in meta["box_hi"]]),
        )
        declared = (int(meta["z_dim"][0]), int(meta["out_dim"][0]), int(meta["hidden"][0]))
    except (KeyError, ValueError, IndexError) as exc:
        raise CorruptFile(f"malformed weight file: {exc}") from exc
    if declared != (params.z_dim, params.out_dim, params.hidden):
        raise SchemaMismatch(f"declared dims {declared} disagree with array shapes")
    if z_dim is not None and params.z_dim != z_dim:
        raise SchemaMismatch(f"expected z_dim {z_dim}, file has {params.z_dim}")
    if out_dim is not None and params.out_dim != out_dim:
        raise SchemaMismatch(f"expected out_dim {out_dim}, file has {params.out_dim}")
    return params
