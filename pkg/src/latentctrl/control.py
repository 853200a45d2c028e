"""Gradient-field latent editing with saliency-based channel exclusion.

The edit direction for a target attribute is a row of its classifier's input
Jacobian at the current latent. To keep other attributes fixed, channels that
are among the most salient (largest ``|gradient|``) for each entangled
attribute are zeroed out of the target direction before stepping. Directions
and exclusion sets are recomputed at every step, so the path follows a
nonlinear vector field rather than a fixed line.
"""

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import classifier as clfmod
from .errors import DimensionError, VanishingGradientError
from .numeric import l2_norm

VANISHING_NORM = 1e-12
DEFAULT_STEP = 0.6
DEFAULT_EXCLUDE = 100


@dataclass(frozen=True)
class DisentangleSpec:
    target_attr: str
    target_class: int = 0
    entangled: tuple = ()  # ((attr_id, exclusion_count), ...)

    def __post_init__(self):
        object.__setattr__(self, "entangled", tuple((str(m), int(c)) for m, c in self.entangled))
        for m, c in self.entangled:
            if m == self.target_attr:
                raise ValueError(f"target {m!r} cannot also be an entangled attribute")
            if c < 0:
                raise ValueError(f"exclusion count for {m!r} must be >= 0")

    def with_counts(self, counts):
        """Copy with exclusion counts replaced from ``counts`` (attr -> c)."""
        return replace(self, entangled=tuple((m, counts.get(m, c)) for m, c in self.entangled))


@dataclass(frozen=True)
class StepPolicy:
    alpha: float = DEFAULT_STEP
    max_steps: int = 100
    normalize: bool = True
    stop_on_boundary: bool = True
    dim_mask: frozenset = None
    refresh_mask: bool = True  # False: exclusion set computed once at the start

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.alpha == 0 or not math.isfinite(self.alpha):
            raise ValueError("alpha must be a finite non-zero step size")
        if self.dim_mask is not None:
            object.__setattr__(self, "dim_mask", frozenset(int(i) for i in self.dim_mask))


class StopReason(str, Enum):
    BOUNDARY_CROSSED = "boundary_crossed"
    MAX_STEPS = "max_steps"
    VANISHING_GRADIENT = "vanishing_gradient"


@dataclass
class Trajectory:
    zs: list = field(default_factory=list)
    logits: list = field(default_factory=list)  # per step: {attr_id: ndarray}
    stop_reason: StopReason = None
    target: str = None
    target_class: int = 0

    def __len__(self):
        return len(self.zs)

    @property
    def steps(self):
        return list(zip(self.zs, self.logits))

    def to_jsonl(self):
        lines = []
        for i, (z, lg) in enumerate(self.steps):
            lines.append(json.dumps({"step": i, "z": [float(x) for x in z],
                                     "logits": {k: [float(x) for x in v] for k, v in lg.items()}}))
        lines.append(json.dumps({"stop_reason": StopReason(self.stop_reason).value,
                                 "target": self.target, "target_class": self.target_class}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        traj = cls()
        for n, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "stop_reason" in rec:
                traj.stop_reason = StopReason(rec["stop_reason"])
                traj.target = rec.get("target")
                traj.target_class = int(rec.get("target_class", 0))
                break
            if rec["step"] != len(traj.zs):
                raise ValueError(f"line {n + 1}: step {rec['step']} out of order")
            traj.zs.append(np.asarray(rec["z"], dtype=np.float64))
            traj.logits.append({k: np.asarray(v, dtype=np.float64)
                                for k, v in rec["logits"].items()})
        if traj.stop_reason is None or not traj.zs:
            raise ValueError("trajectory is missing steps or the stop_reason line")
        return traj


def saliency(n):
    return np.abs(np.asarray(n, dtype=np.float64))


def top_c_dims(L, c):
    """Indices whose saliency is >= the c-th largest value (ties included)."""
    L = np.asarray(L, dtype=np.float64)
    if not 0 <= c <= L.size:
        raise IndexError(f"exclusion count {c} outside [0, {L.size}]")
    if c == 0:
        return set()
    t = np.partition(L, L.size - c)[L.size - c]
    return set(np.flatnonzero(L >= t).tolist())


def _entangled_lookup(entangled_clfs):
    if isinstance(entangled_clfs, dict):
        return entangled_clfs
    return {c.attr.id: c for c in entangled_clfs}


def excluded_dims(z, entangled_clfs, spec):
    """Union over entangled attributes of their top-c salient channels at ``z``."""
    lookup = _entangled_lookup(entangled_clfs)
    E = set()
    for m, c in spec.entangled:
        if c == 0:
            continue
        if m not in lookup:
            raise KeyError(f"no classifier supplied for entangled attribute {m!r}")
        # Jacobian rows of a multi-class attribute are pooled by max |.|
        Lm = np.abs(clfmod.input_jacobian(lookup[m], z)).max(axis=0)
        E |= top_c_dims(Lm, c)
    return E


def mask_direction(n, E):
    out = np.array(n, dtype=np.float64, copy=True)
    if E:
        out[sorted(E)] = 0.0
    return out


def disentangled_direction(z, target_clf, target_class, entangled_clfs, spec, E=None):
    """Target gradient row with the exclusion set zeroed.

    ``E`` may be supplied to reuse a precomputed exclusion set.
    """
    z = np.asarray(z, dtype=np.float64)
    for c in _entangled_lookup(entangled_clfs).values():
        if c.input_dim != target_clf.input_dim:
            raise DimensionError("classifiers disagree on latent dimension")
    n = clfmod.gradient_row(target_clf, z, target_class)
    if E is None:
        E = excluded_dims(z, entangled_clfs, spec)
    return mask_direction(n, E)


def _restrict(n, dim_mask):
    if dim_mask is None:
        return np.asarray(n, dtype=np.float64)
    if any(i < 0 or i >= len(n) for i in dim_mask):
        raise DimensionError("dim_mask references channels outside the latent")
    keep = np.zeros(len(n), dtype=bool)
    keep[sorted(dim_mask)] = True
    return np.where(keep, n, 0.0)


def step(z, n, policy):
    """``z + alpha * n`` with ``n`` restricted to the editable dims (and unit-normalised)."""
    z = np.asarray(z, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if z.shape != n.shape:
        raise DimensionError(f"step: latent {z.shape} vs direction {n.shape}")
    d = _restrict(n, policy.dim_mask)
    if policy.normalize:
        norm = l2_norm(d)
        if norm < VANISHING_NORM:
            raise VanishingGradientError(f"direction norm {norm:.3g} too small to normalise")
        d = d / norm
    return z + policy.alpha * d


def reached_target(logits, target_class, alpha):
    """Binary: logit on the side ``alpha`` pushes toward. Multi-class: argmax."""
    logits = np.asarray(logits)
    if logits.size == 1:
        return bool(logits[0] > 0) if alpha > 0 else bool(logits[0] < 0)
    return int(np.argmax(logits)) == target_class


def _observe(observers, z):
    return {k: clfmod.forward(c, z) for k, c in observers.items()}


def manipulate(z0, target_clf, target_class=0, entangled_clfs=(), spec=None,
               policy=StepPolicy(), observers=None, boundary_scorer=None):
    """Walk from ``z0`` along the (masked) target gradient, re-evaluated each step.

    The boundary test uses the target classifier's logits unless
    ``boundary_scorer`` (a callable ``z -> logits``) is given, e.g. an
    external evaluation scorer.
    """
    target_id = target_clf.attr.id
    if spec is None:
        spec = DisentangleSpec(target_id, target_class)
    obs = dict(_entangled_lookup(observers or {}))
    obs.setdefault(target_id, target_clf)
    obs = {target_id: obs.pop(target_id), **obs}
    z = np.array(z0, dtype=np.float64, copy=True)
    if z.shape != (target_clf.input_dim,):
        raise DimensionError(f"z0 has shape {z.shape}, classifier expects "
                             f"({target_clf.input_dim},)")
    traj = Trajectory(target=target_id, target_class=target_class)
    traj.zs.append(z)
    traj.logits.append(_observe(obs, z))

    def done():
        if not policy.stop_on_boundary:
            return False
        lg = traj.logits[-1][target_id] if boundary_scorer is None else boundary_scorer(traj.zs[-1])
        return reached_target(lg, target_class, policy.alpha)

    if done():
        traj.stop_reason = StopReason.BOUNDARY_CROSSED
        return traj
    frozen = None if policy.refresh_mask else excluded_dims(z, entangled_clfs, spec)
    for _ in range(policy.max_steps):
        n = disentangled_direction(z, target_clf, target_class, entangled_clfs, spec, E=frozen)
        if l2_norm(_restrict(n, policy.dim_mask)) < VANISHING_NORM:
            traj.stop_reason = StopReason.VANISHING_GRADIENT
            return traj
        z = step(z, n, policy)
        traj.zs.append(z)
        traj.logits.append(_observe(obs, z))
        if done():
            traj.stop_reason = StopReason.BOUNDARY_CROSSED
            return traj
    traj.stop_reason = StopReason.MAX_STEPS
    return traj


def sweep_exclusion_counts(z0, target_clf, target_class, entangled_clfs, entangled_attrs,
                           counts_grid, policy=StepPolicy(), observers=None,
                           boundary_scorer=None):
    """One :func:`manipulate` run per grid point, keyed in grid order.

    Grid points are either an int (same count for every entangled attribute)
    or a mapping attr -> count. Keys are tuples of ``(attr, count)`` pairs.
    """
    if not counts_grid:
        raise ValueError("counts_grid must be non-empty")
    out = {}
    for point in counts_grid:
        if isinstance(point, dict):
            pairs = tuple((m, int(point.get(m, 0))) for m in entangled_attrs)
        else:
            pairs = tuple((m, int(point)) for m in entangled_attrs)
        spec = DisentangleSpec(target_clf.attr.id, target_class, pairs)
        out[pairs] = manipulate(z0, target_clf, target_class, entangled_clfs, spec, policy,
                                observers, boundary_scorer)
    return out
