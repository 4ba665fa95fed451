"""Top-k retrieval and the mean percentile rank of teacher-preferred images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import CatalogStore, ScoreVector, score_all
from .errors import KOutOfRange, UnknownId, UnknownWinner


@dataclass
class RetrievalResult:
    persona_id: str
    ids: list
    scores: list

    def to_json(self) -> str:
        return json.dumps({"persona_id": self.persona_id, "ids": self.ids, "scores": self.scores})


def top_k(scores: ScoreVector, ids: Sequence[str], k: int) -> RetrievalResult:
    """The ``k`` highest-scored ids, descending; ties broken by ascending id."""
    values = np.asarray(scores.scores, dtype=np.float64)
    n = values.size
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    id_rank = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    id_order = np.empty(n, dtype=np.intp)
    id_order[id_rank] = np.arange(n)
    order = np.lexsort((id_order, -values))[:k]
    return RetrievalResult(scores.persona_id, [ids[i] for i in order], [float(values[i]) for i in order])


def percentile_rank(scores, winner_index: int) -> float:
    """Share of other items scored below the winner (ties count half), in [0, 100]."""
    values = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    n = values.size
    if n < 2:
        raise ValueError("percentile rank needs at least two catalog items")
    w = values[winner_index]
    below = int(np.sum(values < w))
    ties = int(np.sum(values == w)) - 1
    return 100.0 * (below + 0.5 * ties) / (n - 1)


def winner_percentile(scores: ScoreVector, store: CatalogStore, winner_id: str) -> float:
    try:
        idx = store.index_of(winner_id)
    except UnknownId:
        raise UnknownWinner(f"winner {winner_id!r} is not in the catalog") from None
    return percentile_rank(scores, idx)


@dataclass
class MetricReport:
    mean: float
    n_personas: int
    catalog_size: int
    per_persona: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "n_personas": self.n_personas,
            "catalog_size": self.catalog_size,
            "per_persona": dict(self.per_persona),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(float(obj["mean"]), int(obj["n_personas"]), int(obj["catalog_size"]),
                   {str(k): float(v) for k, v in obj["per_persona"].items()})


def mean_percentile(labels, store: CatalogStore, personas) -> MetricReport:
    """Mean percentile of each label's winner under fresh student scores.

    ``personas`` maps persona id to PersonaRecord.
    """
    per = {}
    for label in labels:
        try:
            persona = personas[label.persona_id]
        except KeyError:
            raise UnknownId(f"label for unknown persona {label.persona_id!r}") from None
        per[label.persona_id] = winner_percentile(score_all(persona, store), store, label.winner_id)
    values = list(per.values())
    mean = float(np.mean(values)) if values else float("nan")
    return MetricReport(mean, len(values), store.size, per)
