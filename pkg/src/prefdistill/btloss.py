"""Pairwise Bradley-Terry distillation loss and its exact gradient.

A teacher ranking over ``N`` candidates expands to ``N*(N-1)/2`` binary
preferences.  Each pair contributes a cross-entropy term on
``sigmoid(s_i - s_j)``; the gradient is pushed back through the row
normalization onto the raw image vectors.  The persona side is frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import CatalogStore, PersonaRecord, dot_rows
from .errors import InvalidPermutation, UnknownId

PROB_EPS = 1e-12


@dataclass(frozen=True)
class RankedGroup:
    """One teacher judgment. ``ranking[i]`` is the 1-based rank of ``candidate_ids[i]``."""

    persona_id: str
    candidate_ids: tuple
    ranking: tuple
    teacher: str = ""
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "candidate_ids", tuple(str(c) for c in self.candidate_ids))
        object.__setattr__(self, "ranking", tuple(int(r) for r in self.ranking))
        validate_ranking(self.ranking, len(self.candidate_ids))
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise InvalidPermutation(f"duplicate candidates in group for {self.persona_id!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "persona_id": self.persona_id,
                "candidates": list(self.candidate_ids),
                "ranking": list(self.ranking),
                "teacher": self.teacher,
                "step": self.step,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "RankedGroup":
        obj = json.loads(line)
        return cls(
            str(obj["persona_id"]),
            tuple(obj["candidates"]),
            tuple(obj["ranking"]),
            str(obj.get("teacher", "")),
            int(obj.get("step", 0)),
        )


@dataclass(frozen=True)
class PairPreference:
    i: int
    j: int
    y: int


@dataclass
class GroupGradient:
    loss: float
    candidate_ids: tuple
    grads: np.ndarray  # (N_g, D), w.r.t. raw image vectors


@dataclass
class BatchGradient:
    loss: float = 0.0
    grads: dict = field(default_factory=dict)  # image id -> (D,) float64


def validate_ranking(ranking: Sequence[int], n: int | None = None):
    n = len(ranking) if n is None else n
    if len(ranking) != n:
        raise InvalidPermutation(f"ranking has {len(ranking)} entries for {n} candidates")
    if n < 2:
        raise InvalidPermutation("a ranked group needs at least two candidates")
    if sorted(int(r) for r in ranking) != list(range(1, n + 1)):
        raise InvalidPermutation(f"{list(ranking)} is not a permutation of 1..{n}")


def pairs_from_ranking(group: RankedGroup | Sequence[int]) -> list[PairPreference]:
    ranking = group.ranking if isinstance(group, RankedGroup) else tuple(group)
    validate_ranking(ranking)
    n = len(ranking)
    return [
        PairPreference(i, j, int(ranking[i] < ranking[j]))
        for i in range(n)
        for j in range(i + 1, n)
    ]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # two branches so neither exp overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def bt_probability(s_i, s_j):
    """P(i preferred over j) = exp(s_i) / (exp(s_i) + exp(s_j))."""
    return sigmoid(np.subtract(s_i, s_j, dtype=np.float64))


def pairwise_loss(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    out = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def _pair_index(n):
    ii, jj = np.triu_indices(n, k=1)
    return ii, jj


def loss_grad_raw(persona, raw, ranking):
    """Loss of one group and its gradient w.r.t. the candidates' raw vectors.

    ``persona`` is a unit (D,) vector, ``raw`` the (N_g, D) raw candidate rows.
    Chain: dL/ds_i = sum_j (P_ij - y_ij) - sum_j (P_ji - y_ji);
    dn/dv = (I - n n^T) / ||v||.
    """
    raw = np.asarray(raw, dtype=np.float64)
    persona = np.asarray(persona, dtype=np.float64)
    norms = np.sqrt(np.sum(raw * raw, axis=1))
    unit = raw / norms[:, None]
    s = dot_rows(unit, persona)

    ranking = np.asarray(ranking)
    ii, jj = _pair_index(len(ranking))
    y = (ranking[ii] < ranking[jj]).astype(np.float64)
    p = bt_probability(s[ii], s[jj])
    loss = float(np.sum(pairwise_loss(p, y)))

    coef = p - y
    ds = np.zeros(len(ranking))
    # deterministic: pairs in lexicographic order
    np.add.at(ds, ii, coef)
    np.add.at(ds, jj, -coef)

    tangent = persona[None, :] - s[:, None] * unit
    grads = ds[:, None] * tangent / norms[:, None]
    return loss, grads


def group_loss_grad(group: RankedGroup, personas, store: CatalogStore) -> GroupGradient:
    """Loss and raw-vector gradient for one ranked group.

    ``personas`` maps persona id to a PersonaRecord (or a bare unit vector).
    """
    try:
        persona = personas[group.persona_id]
    except KeyError:
        raise UnknownId(f"unknown persona id {group.persona_id!r}") from None
    if isinstance(persona, PersonaRecord):
        persona = persona.embedding
    rows = store.rows_for(group.candidate_ids)
    loss, grads = loss_grad_raw(persona, store.raw[rows], group.ranking)
    return GroupGradient(loss, group.candidate_ids, grads)


def batch_loss_grad(groups: Sequence[RankedGroup], personas, store: CatalogStore) -> BatchGradient:
    """Sum of group losses; gradients summed per image id in group, then candidate order."""
    out = BatchGradient()
    for group in groups:
        gg = group_loss_grad(group, personas, store)
        out.loss += gg.loss
        for image_id, g in zip(gg.candidate_ids, gg.grads):
            if image_id in out.grads:
                out.grads[image_id] = out.grads[image_id] + g
            else:
                out.grads[image_id] = g.copy()
    return out


def consistent_loss_bound(n: int, margin: float) -> float:
    """Upper bound on a group's loss when scores agree with the ranking by >= ``margin``."""
    return math.comb(n, 2) * math.log1p(math.exp(-margin))
