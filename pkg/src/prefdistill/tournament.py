"""Single-elimination tournaments that turn pairwise teacher comparisons into a
top-1 evaluation label per persona."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import TeacherError, TournamentInterrupted
from .rng import substream

log = logging.getLogger(__name__)

NO_SHUFFLE = -1


@dataclass
class Match:
    round: int
    u: str
    v: str | None  # None for a bye
    winner: str

    def to_list(self):
        return [self.round, self.u, self.v, self.winner]


@dataclass
class TournamentLabel:
    persona_id: str
    winner_id: str
    n: int
    comparisons: int
    rounds: int
    bracket_seed: int = NO_SHUFFLE
    teacher: str = ""
    bracket: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "persona_id": self.persona_id,
                "winner_id": self.winner_id,
                "n": self.n,
                "comparisons": self.comparisons,
                "bracket_seed": self.bracket_seed,
                "teacher": self.teacher,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "TournamentLabel":
        obj = json.loads(line)
        n = int(obj["n"])
        return cls(
            str(obj["persona_id"]),
            str(obj["winner_id"]),
            n,
            int(obj["comparisons"]),
            (n - 1).bit_length(),
            int(obj.get("bracket_seed", NO_SHUFFLE)),
            str(obj.get("teacher", "")),
        )


def seed_bracket(entrants: Sequence[str]) -> list[tuple]:
    """First-round pairs for ``len(entrants)`` players.

    With ``M = 2**ceil(log2 N)`` slots, the ``M - N`` highest-indexed entrants
    get byes (``(u, None)``); the rest pair up in order.  Every later round
    then has a power-of-two field.
    """
    n = len(entrants)
    if n < 2:
        raise ValueError("a tournament needs at least two entrants")
    slots = 1 << (n - 1).bit_length()
    playing = 2 * n - slots
    pairs = [(entrants[i], entrants[i + 1]) for i in range(0, playing, 2)]
    pairs += [(e, None) for e in entrants[playing:]]
    return pairs


def run_tournament(
    persona_id: str,
    entrants: Sequence[str],
    teacher,
    persona_text: str = "",
    parallelism: int = 1,
    bracket_seed: int = NO_SHUFFLE,
) -> TournamentLabel:
    """Play the bracket to a single winner using ``teacher.compare``.

    Each round is a barrier; matches inside a round may run concurrently.
    """
    entrants = [str(e) for e in entrants]
    bracket: list[Match] = []
    comparisons = 0
    pairs = seed_bracket(entrants)
    rnd = 0

    def play(pair):
        u, v = pair
        if v is None:
            return u
        return teacher.compare(persona_id, u, v, persona_text=persona_text)

    pool = ThreadPoolExecutor(parallelism) if parallelism > 1 else None
    try:
        while True:
            try:
                winners = list(pool.map(play, pairs)) if pool else [play(p) for p in pairs]
            except TeacherError as exc:
                raise TournamentInterrupted(
                    f"teacher failed in round {rnd} for persona {persona_id!r}: {exc}", bracket, exc
                ) from exc
            for (u, v), w in zip(pairs, winners):
                bracket.append(Match(rnd, u, v, w))
                comparisons += v is not None
            if len(winners) == 1:
                break
            pairs = [(winners[i], winners[i + 1]) for i in range(0, len(winners), 2)]
            rnd += 1
    finally:
        if pool:
            pool.shutdown()
    return TournamentLabel(
        persona_id,
        winners[0],
        len(entrants),
        comparisons,
        rnd + 1,
        bracket_seed,
        getattr(teacher, "teacher_id", ""),
        bracket,
    )


def read_labels(path) -> list[TournamentLabel]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as f:
        return [TournamentLabel.from_json(line) for line in f if line.strip()]


def write_labels(path, labels: Sequence[TournamentLabel]):
    with open(path, "w") as f:
        for label in labels:
            f.write(label.to_json() + "\n")


def label_set(
    personas,
    entrants: Sequence[str],
    teacher,
    path=None,
    parallelism: int = 1,
    shuffle_seed: int | None = None,
    bracket_path=None,
) -> list[TournamentLabel]:
    """One tournament label per persona, appended to ``path`` as each finishes.

    Personas already present in ``path`` are skipped, so an interrupted run
    resumes where it stopped.  With ``shuffle_seed`` the entrant order is
    shuffled per persona from a recorded seed.
    """
    done = {lab.persona_id: lab for lab in read_labels(path)} if path else {}
    todo = [p for p in personas if p.id not in done]
    if done:
        log.info("label_set: %d personas already labelled, %d to go", len(done), len(todo))

    def one(persona):
        order = list(entrants)
        seed = NO_SHUFFLE
        if shuffle_seed is not None:
            seed = int(substream(shuffle_seed, f"bracket:{persona.id}").integers(2**31))
            substream(seed, "bracket").shuffle(order)
        return run_tournament(persona.id, order, teacher, persona_text=persona.text, bracket_seed=seed)

    new = {}
    pool = ThreadPoolExecutor(parallelism) if parallelism > 1 else None
    try:
        results = pool.map(one, todo) if pool else map(one, todo)
        for persona, label in zip(todo, results):
            new[persona.id] = label
            if path:
                with open(path, "a") as f:
                    f.write(label.to_json() + "\n")
            if bracket_path:
                with open(bracket_path, "a") as f:
                    f.write(json.dumps({"persona_id": label.persona_id,
                                        "bracket": [m.to_list() for m in label.bracket]}) + "\n")
    finally:
        if pool:
            pool.shutdown(wait=True, cancel_futures=True)
    return [done.get(p.id) or new[p.id] for p in personas]
