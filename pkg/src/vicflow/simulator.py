"""Synthetic crowd sequences with exact ground truth.

The generator embodies the two priors the matching model exploits: people
enter in small cohesive groups that share a velocity (plus bounded per-member
jitter), and per-frame displacement of any persisting identity never exceeds
``max_step`` in normalized coordinates. Descriptors combine a per-identity
latent with a shared per-group component, so group context carries signal
even when an individual's appearance is occluded away.

Everything is driven by one seeded generator; identical seeds produce
bit-identical sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DescriptorSet, FramePoints

__all__ = ["SimConfig", "SimSequence", "generate", "oracle_probabilities", "point_in_any_rect"]


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    frames: int = 10
    groups_per_frame_rate: float = 0.5  # Poisson intensity of arriving groups
    group_size_range: tuple[int, int] = (2, 4)
    max_step: float = 0.2  # per-pair displacement bound, normalized units
    group_jitter: float = 0.02  # intra-group velocity noise radius
    descriptor_dim: int = 16
    patch_shape: tuple[int, int] = (2, 2)
    descriptor_noise: float = 0.05
    occlusion_rate: float = 0.0  # chance a descriptor is replaced by noise
    mask_regions: tuple = ()  # rectangles (x0, y0, x1, y1)

    def check(self) -> None:
        if not 0.0 < self.max_step < 1.0:
            raise ValueError("invalid-config: max_step must lie in (0, 1)")
        if self.frames < 1:
            raise ValueError("invalid-config: need at least one frame")
        if self.group_size_range[0] < 1 or self.group_size_range[1] < self.group_size_range[0]:
            raise ValueError("invalid-config: bad group_size_range")
        if self.groups_per_frame_rate < 0 or self.group_jitter < 0 or self.descriptor_noise < 0:
            raise ValueError("invalid-config: rates must be non-negative")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("invalid-config: occlusion_rate must lie in [0, 1]")
        h, w = self.patch_shape
        if self.descriptor_dim % (h * w) != 0 or self.descriptor_dim % 4 != 0:
            raise ValueError("invalid-config: descriptor_dim must be divisible by h*w and by 4")


@dataclass
class SimSequence:
    """Generated frames with identities, descriptors and true flows."""

    frames: list[FramePoints]
    descriptors: list[DescriptorSet]
    truth_flows: list[tuple[int, int]]  # per pair: (inflow, outflow)
    config: SimConfig = field(repr=False, default=None)

    def visible_ids(self, t: int) -> set[int]:
        f = self.frames[t]
        return set(int(i) for i in f.identity[~f.masked])

    def distinct_identities(self) -> int:
        ids: set[int] = set()
        for t in range(len(self.frames)):
            ids |= self.visible_ids(t)
        return len(ids)


def point_in_any_rect(point, rects) -> bool:
    x, y = float(point[0]), float(point[1])
    for x0, y0, x1, y1 in rects:
        if x0 <= x <= x1 and y0 <= y <= y1:
            return True
    return False


class _Ped:
    __slots__ = ("ident", "group", "pos", "latent")

    def __init__(self, ident, group, pos, latent):
        self.ident = ident
        self.group = group
        self.pos = pos
        self.latent = latent


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _disc_sample(rng: np.random.Generator, radius: float) -> np.ndarray:
    # uniform in a disc; bounded norm keeps the cohesion growth bound exact
    ang = rng.uniform(0.0, 2.0 * np.pi)
    r = radius * np.sqrt(rng.uniform())
    return np.array([r * np.cos(ang), r * np.sin(ang)])


def _spawn_group(rng, config: SimConfig, next_id: int, group_id: int, interior: bool):
    """Place a cohesive group; boundary groups get an inward velocity."""
    size = int(rng.integers(config.group_size_range[0], config.group_size_range[1] + 1))
    if interior:
        base = rng.uniform(0.15, 0.85, size=2)
        direction = _unit(rng.normal(size=2))
    else:
        edge = int(rng.integers(4))
        along = rng.uniform(0.05, 0.95)
        depth = rng.uniform(0.01, 0.06)
        if edge == 0:  # left
            base, inward = np.array([depth, along]), np.array([1.0, 0.0])
        elif edge == 1:  # right
            base, inward = np.array([1.0 - depth, along]), np.array([-1.0, 0.0])
        elif edge == 2:  # bottom
            base, inward = np.array([along, depth]), np.array([0.0, 1.0])
        else:  # top
            base, inward = np.array([along, 1.0 - depth]), np.array([0.0, -1.0])
        ang = rng.uniform(-1.0, 1.0)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        direction = rot @ inward
    # leaving speed room for jitter means member steps never need clipping
    speed = rng.uniform(0.3, 0.9) * max(config.max_step - config.group_jitter, 0.0)
    velocity = speed * direction
    group_latent = _unit(rng.normal(size=config.descriptor_dim))

    members = []
    for _ in range(size):
        pos = np.clip(base + _disc_sample(rng, 0.04), 0.0, 1.0)
        latent = _unit(rng.normal(size=config.descriptor_dim)) + 0.3 * group_latent
        members.append(_Ped(next_id, group_id, pos, latent))
        next_id += 1
    return members, velocity, next_id


def generate(config: SimConfig) -> SimSequence:
    """Simulate a sequence; see the module docstring for the dynamics."""
    config.check()
    rng = np.random.default_rng(config.seed)

    peds: list[_Ped] = []
    group_vel: dict[int, np.ndarray] = {}
    next_id = 0
    next_group = 0

    snapshots = []  # per frame: (ids, positions, masked, features)
    for t in range(config.frames):
        arriving = int(rng.poisson(config.groups_per_frame_rate))
        if t == 0:
            interior = 2 + int(rng.poisson(2.0 * config.groups_per_frame_rate))
            for _ in range(interior):
                members, vel, next_id = _spawn_group(rng, config, next_id, next_group, interior=True)
                group_vel[next_group] = vel
                next_group += 1
                peds.extend(members)
        for _ in range(arriving):
            members, vel, next_id = _spawn_group(rng, config, next_id, next_group, interior=False)
            group_vel[next_group] = vel
            next_group += 1
            peds.extend(members)

        peds.sort(key=lambda p: p.ident)
        ids = np.array([p.ident for p in peds], dtype=np.int64)
        positions = np.array([p.pos for p in peds]).reshape(-1, 2)
        masked = np.array([point_in_any_rect(p.pos, config.mask_regions) for p in peds], dtype=bool)
        features = np.zeros((len(peds), config.descriptor_dim))
        for k, p in enumerate(peds):
            if rng.random() < config.occlusion_rate:
                features[k] = _unit(rng.normal(size=config.descriptor_dim))
            else:
                features[k] = p.latent + config.descriptor_noise * rng.normal(size=config.descriptor_dim)
        snapshots.append((ids, positions, masked, features))

        # advance; identities leaving the unit square retire permanently
        survivors = []
        for p in peds:
            step = group_vel[p.group] + _disc_sample(rng, config.group_jitter)
            norm = np.linalg.norm(step)
            if norm > config.max_step:
                step *= (config.max_step / norm) * (1.0 - 1e-12)
            p.pos = p.pos + step
            if 0.0 <= p.pos[0] <= 1.0 and 0.0 <= p.pos[1] <= 1.0:
                survivors.append(p)
        peds = survivors

    # visibility sets exclude masked points; labels and flows both derive from them
    vis_sets = [set(int(i) for i in ids[~masked]) for ids, _, masked, _ in snapshots]

    frames: list[FramePoints] = []
    descriptors: list[DescriptorSet] = []
    for t, (ids, positions, masked, features) in enumerate(snapshots):
        prev_vis = vis_sets[t - 1] if t > 0 else set()
        next_vis = vis_sets[t + 1] if t + 1 < len(snapshots) else set()
        labels = []
        for ident in ids:
            in_prev = int(ident) in prev_vis
            in_next = int(ident) in next_vis
            if in_prev and in_next:
                labels.append("pedestrian")
            elif in_prev:
                labels.append("outflow")
            elif in_next:
                labels.append("inflow")
            else:
                labels.append("both")
        frames.append(FramePoints(frame_id=t, points=positions, labels=tuple(labels), masked=masked, identity=ids))
        descriptors.append(DescriptorSet(features=features, positions=positions, patch_shape=config.patch_shape))

    truth_flows = []
    for t in range(1, len(snapshots)):
        inflow = len(vis_sets[t] - vis_sets[t - 1])
        outflow = len(vis_sets[t - 1] - vis_sets[t])
        truth_flows.append((inflow, outflow))

    return SimSequence(frames=frames, descriptors=descriptors, truth_flows=truth_flows, config=config)


def oracle_probabilities(seq: SimSequence, pair_index: int) -> np.ndarray:
    """Ground-truth match matrix for pair ``(pair_index, pair_index + 1)``.

    Entries are 1 where the identities of visible (unmasked) points agree,
    0 elsewhere; rows are current-frame points, columns previous-frame, in
    visible order.
    """
    if not 0 <= pair_index < len(seq.frames) - 1:
        raise IndexError("index-out-of-range: no such frame pair")
    prev = seq.frames[pair_index]
    curr = seq.frames[pair_index + 1]
    prev_ids = prev.identity[prev.visible_index()]
    curr_ids = curr.identity[curr.visible_index()]
    return (curr_ids[:, None] == prev_ids[None, :]).astype(np.float64)
