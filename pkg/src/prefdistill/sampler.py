"""Preference-aligned candidate sampling.

Each persona's current student scores are split into four contiguous
intervals between the lowest score ``a`` and highest score ``b``.  A group
mixes one draw from each of the three lower intervals with two from the
narrow top interval, so every teacher query contains likely positives next
to distractors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import CatalogStore, PersonaRecord, ScoreVector, score_all
from .errors import CatalogTooSmall

DEGENERATE_WIDTH = 1e-9


@dataclass
class SamplerConfig:
    cuts: tuple = (0.7, 0.9, 0.95)
    mode: str = "mirrored"  # or "literal-sorted"
    plan: tuple = (1, 1, 1, 2)
    group_size: int = 5
    groups_per_step: int = 1000
    groups_per_persona: int | None = None
    policy: str = "preference-aligned"  # or "uniform"

    def __post_init__(self):
        self.cuts = tuple(float(c) for c in self.cuts)
        self.plan = tuple(int(c) for c in self.plan)
        if self.mode not in ("mirrored", "literal-sorted"):
            raise ValueError(f"unknown bins mode {self.mode!r}")
        if self.policy not in ("preference-aligned", "uniform"):
            raise ValueError(f"unknown sampling policy {self.policy!r}")
        if len(self.plan) != len(self.cuts) + 1:
            raise ValueError("plan needs one count per bin (len(cuts) + 1)")
        if sum(self.plan) != self.group_size or min(self.plan) < 0:
            raise ValueError(f"plan {self.plan} must be non-negative and sum to group_size={self.group_size}")
        if not all(0.0 < c < 1.0 for c in self.cuts):
            raise ValueError("cut fractions must lie in (0, 1)")
        if self.group_size < 2 or self.groups_per_step < 1:
            raise ValueError("group_size >= 2 and groups_per_step >= 1 required")
        if self.groups_per_persona is not None and self.groups_per_persona < 1:
            raise ValueError("groups_per_persona must be >= 1")

    @property
    def fractions(self) -> tuple:
        """Cut points as fractions of the way from a to b, ascending."""
        if self.mode == "mirrored":
            fr = self.cuts
        else:
            # literal coefficients give cut a + (1 - c)(b - a); sort them
            fr = tuple(sorted(1.0 - c for c in self.cuts))
        if any(x >= y for x, y in zip(fr, fr[1:])):
            raise ValueError(f"cut fractions {fr} are not strictly increasing")
        return fr


@dataclass
class BinPartition:
    persona_id: str
    low: float
    high: float
    cut_points: tuple
    bins: list  # list of catalog row-index arrays, lowest interval first
    degenerate: bool = False

    @property
    def sizes(self) -> tuple:
        return tuple(len(b) for b in self.bins)

    def bounds(self) -> list:
        edges = (self.low, *self.cut_points, self.high)
        return list(zip(edges[:-1], edges[1:]))


def compute_bins(scores, config: SamplerConfig | None = None, persona_id: str = "") -> BinPartition:
    """Partition catalog rows by score into half-open intervals (top one closed).

    An all-equal score vector (``b - a < 1e-9``) takes the degenerate path:
    every row lands in the top bin.
    """
    config = config or SamplerConfig()
    if isinstance(scores, ScoreVector):
        persona_id, scores = scores.persona_id, scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    n_bins = len(config.cuts) + 1
    a, b = float(scores.min()), float(scores.max())
    rows = np.arange(scores.size)
    if b - a < DEGENERATE_WIDTH:
        bins = [rows[:0] for _ in range(n_bins - 1)] + [rows]
        return BinPartition(persona_id, a, b, tuple([b] * (n_bins - 1)), bins, degenerate=True)
    cuts = tuple(a + f * (b - a) for f in config.fractions)
    k = np.searchsorted(np.asarray(cuts), scores, side="right")
    bins = [rows[k == i] for i in range(n_bins)]
    return BinPartition(persona_id, a, b, cuts, bins)


def allocate_draws(sizes: Sequence[int], plan: Sequence[int]) -> list:
    """Per-bin draw counts honoring ``plan`` where possible.

    A bin's deficit spills to the nearest bin with spare items, trying the
    higher-relevance neighbour before the lower one at each distance.
    """
    sizes = list(sizes)
    draws = [min(p, s) for p, s in zip(plan, sizes)]
    if sum(plan) > sum(sizes):
        raise CatalogTooSmall(f"need {sum(plan)} candidates, catalog has {sum(sizes)}")
    n = len(sizes)
    for k in range(n):
        deficit = plan[k] - draws[k]
        dist = 1
        while deficit > 0 and dist < n:
            for j in (k + dist, k - dist):
                if 0 <= j < n and deficit > 0:
                    take = min(deficit, sizes[j] - draws[j])
                    if take > 0:
                        draws[j] += take
                        deficit -= take
            dist += 1
    return draws


def sample_group(partition: BinPartition, config: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``group_size`` distinct catalog rows per the plan."""
    draws = allocate_draws(partition.sizes, config.plan)
    picked = [
        rng.choice(members, size=count, replace=False)
        for members, count in zip(partition.bins, draws)
        if count
    ]
    return np.concatenate(picked)


def sample_uniform(n: int, config: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    if n < config.group_size:
        raise CatalogTooSmall(f"need {config.group_size} candidates, catalog has {n}")
    return rng.choice(n, size=config.group_size, replace=False)


@dataclass
class StepSample:
    groups: list  # (PersonaRecord, tuple of image ids)
    partitions: dict = field(default_factory=dict)  # persona id -> BinPartition


def sample_step(
    personas: Sequence[PersonaRecord],
    store: CatalogStore,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> StepSample:
    """Draw one step's worth of (persona, candidate ids) groups.

    Personas are drawn uniformly with replacement.  Each distinct persona gets
    one partition from the current student scores, shared by all its groups.
    """
    if store.size < config.group_size:
        raise CatalogTooSmall(f"need {config.group_size} candidates, catalog has {store.size}")
    G = config.groups_per_step
    if config.groups_per_persona:
        n_personas = -(-G // config.groups_per_persona)
        chosen = rng.integers(len(personas), size=n_personas)
        picks = np.repeat(chosen, config.groups_per_persona)[:G]
    else:
        picks = rng.integers(len(personas), size=G)

    out = StepSample([])
    for p_idx in picks:
        persona = personas[int(p_idx)]
        if config.policy == "uniform":
            rows = sample_uniform(store.size, config, rng)
        else:
            part = out.partitions.get(persona.id)
            if part is None:
                part = compute_bins(score_all(persona, store), config)
                out.partitions[persona.id] = part
            rows = sample_group(part, config, rng)
        out.groups.append((persona, tuple(store.ids[r] for r in rows)))
    return out
