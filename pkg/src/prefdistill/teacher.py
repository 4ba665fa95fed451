"""Teacher oracles that rank candidate images for a persona.

Three implementations share one contract (``rank`` / ``compare``):

* :class:`SyntheticTeacher` ranks by a hidden utility ``h_x . w_u`` with optional
  Plackett-Luce noise at temperature ``tau``.
* :class:`CachedTeacher` memoizes any teacher to an append-only JSON Lines log;
  with no inner teacher it is a pure replay oracle.
* :class:`HTTPTeacher` prompts a remote vision-language endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .btloss import RankedGroup, validate_ranking
from .embeddings import read_matrix
from .errors import (
    CacheCorrupt,
    InvalidPermutation,
    MalformedResponse,
    TeacherUnavailable,
    UnknownId,
)
from .rng import substream

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass
class TeacherRequest:
    persona_id: str
    persona_text: str
    candidates: tuple
    image_refs: tuple | None = None
    step: int = 0

    def __post_init__(self):
        self.candidates = tuple(str(c) for c in self.candidates)
        if len(self.candidates) < 2:
            raise ValueError("a teacher request needs at least two candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate ids must be distinct")
        if self.image_refs is not None and len(self.image_refs) != len(self.candidates):
            raise ValueError("one image reference per candidate")


@dataclass
class TeacherRanking:
    ranking: tuple
    teacher_id: str
    raw_response: str | None = None

    def best_index(self) -> int:
        return self.ranking.index(1)


def order_to_ranking(order: Sequence[int]) -> tuple:
    """Best-first candidate indices -> 1-based rank per candidate."""
    ranking = [0] * len(order)
    for pos, idx in enumerate(order):
        ranking[idx] = pos + 1
    return tuple(ranking)


def checked(ranking: TeacherRanking, n: int) -> TeacherRanking:
    """Central permutation check applied to every teacher's output."""
    try:
        validate_ranking(ranking.ranking, n)
    except InvalidPermutation as exc:
        raise MalformedResponse(str(exc), ranking.raw_response) from None
    return ranking


class Teacher:
    """Base contract. Subclasses implement ``_rank``."""

    teacher_id = "teacher"
    max_parallel = 1

    def rank(self, request: TeacherRequest) -> TeacherRanking:
        return checked(self._rank(request), len(request.candidates))

    def _rank(self, request: TeacherRequest) -> TeacherRanking:
        raise NotImplementedError

    def compare(self, persona_id: str, u: str, v: str, persona_text: str = "", step: int = 0) -> str:
        """Winner of a two-candidate ranking."""
        result = self.rank(TeacherRequest(persona_id, persona_text, (u, v), step=step))
        return (u, v)[result.best_index()]


class SyntheticTeacher(Teacher):
    """Hidden-utility teacher.

    ``tau == 0`` sorts by utility (ties within 1e-12 broken by image id).
    ``tau > 0`` samples a Plackett-Luce ranking with logits ``utility / tau``
    via Gumbel perturbation; its pairwise marginals are Bradley-Terry
    ``sigmoid((u_i - u_j) / tau)``.  Noise is keyed on (persona, candidate set,
    occurrence count) and drawn per candidate id, so shuffling candidates
    permutes the output consistently.
    """

    def __init__(self, persona_vectors: dict, image_vectors: dict, tau=0.0, seed=0, teacher_id=None):
        if tau < 0:
            raise ValueError("tau must be >= 0")
        self.persona_vectors = {k: np.asarray(v, np.float64) for k, v in persona_vectors.items()}
        self.image_vectors = {k: np.asarray(v, np.float64) for k, v in image_vectors.items()}
        self.tau = float(tau)
        self.seed = int(seed)
        self.teacher_id = teacher_id or f"synthetic(tau={self.tau:g},seed={self.seed})"
        self._occurrences = {}
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_files(cls, persona_path, image_path, tau=0.0, seed=0):
        pids, pmat, _ = read_matrix(persona_path)
        iids, imat, _ = read_matrix(image_path)
        return cls(dict(zip(pids, pmat)), dict(zip(iids, imat)), tau=tau, seed=seed)

    def utility(self, persona_id: str, image_id: str) -> float:
        try:
            h = self.persona_vectors[persona_id]
        except KeyError:
            raise UnknownId(f"teacher has no hidden vector for persona {persona_id!r}") from None
        try:
            w = self.image_vectors[image_id]
        except KeyError:
            raise UnknownId(f"teacher has no hidden vector for image {image_id!r}") from None
        return float(h @ w)

    def utilities(self, persona_id: str, image_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.utility(persona_id, i) for i in image_ids])

    def _rank(self, request):
        with self._lock:
            self.calls += 1
        ids = request.candidates
        util = self.utilities(request.persona_id, ids)
        if self.tau > 0:
            key = (request.persona_id, tuple(sorted(ids)))
            with self._lock:
                occurrence = self._occurrences.get(key, 0)
                self._occurrences[key] = occurrence + 1
            tag = hashlib.sha256(json.dumps([*key[:1], list(key[1]), occurrence]).encode()).hexdigest()
            rng = substream(self.seed, f"teacher-noise:{tag}")
            noise = dict(zip(key[1], rng.gumbel(size=len(ids))))
            keys = util / self.tau + np.array([noise[i] for i in ids])
        else:
            keys = util
        # sort by key descending; ties (within tolerance) by id ascending
        order = sorted(range(len(ids)), key=lambda k: (-keys[k], ids[k]))
        order = _break_near_ties(order, keys, ids)
        return TeacherRanking(order_to_ranking(order), self.teacher_id)

    def argmax(self, persona_id: str, image_ids: Sequence[str]) -> str:
        util = self.utilities(persona_id, image_ids)
        order = sorted(range(len(image_ids)), key=lambda k: (-util[k], image_ids[k]))
        order = _break_near_ties(order, util, image_ids)
        return image_ids[order[0]]


def _break_near_ties(order, keys, ids):
    """Reorder runs of keys equal within TIE_TOL by id so ties never depend on rounding."""
    out = []
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and keys[order[i]] - keys[order[j]] <= TIE_TOL:
            j += 1
        out.extend(sorted(order[i:j], key=lambda k: ids[k]))
        i = j
    return out


# ---------------------------------------------------------------------------
# cache / replay
# ---------------------------------------------------------------------------


def cache_key(teacher_id: str, persona_id: str, candidates: Sequence[str]) -> str:
    payload = json.dumps([teacher_id, persona_id, sorted(candidates)])
    return hashlib.sha256(payload.encode()).hexdigest()


class CachedTeacher(Teacher):
    """Memoizing wrapper with an append-only JSON Lines store.

    Entries are keyed on (teacher id, persona id, sorted candidate ids); hits
    are re-indexed to the request's candidate order.  ``inner=None`` gives a
    replay-only teacher that raises UnknownId on a miss.
    """

    def __init__(self, inner: Teacher | None, path=None, teacher_id=None):
        self.inner = inner
        self.teacher_id = teacher_id or (inner.teacher_id if inner else "replay")
        self.max_parallel = inner.max_parallel if inner else 1
        self.path = Path(path) if path else None
        self._entries = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.skipped_lines = 0
        if self.path and self.path.exists():
            self._load()
        if inner is None and teacher_id is None:
            recorded = {g.teacher for g in self._entries.values()}
            if len(recorded) == 1:
                self.teacher_id = recorded.pop()

    def _load(self):
        with open(self.path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    group = RankedGroup.from_json(line)
                except (ValueError, KeyError, TypeError) as exc:
                    self.skipped_lines += 1
                    log.warning("%s", CacheCorrupt(f"{self.path}:{lineno}: skipped ({exc})"))
                    continue
                key = cache_key(group.teacher or self.teacher_id, group.persona_id, group.candidate_ids)
                self._entries.setdefault(key, group)

    def __len__(self):
        return len(self._entries)

    def groups(self) -> list[RankedGroup]:
        return list(self._entries.values())

    def lookup(self, request: TeacherRequest):
        group = self._entries.get(cache_key(self.teacher_id, request.persona_id, request.candidates))
        if group is None:
            return None
        rank_of = dict(zip(group.candidate_ids, group.ranking))
        return TeacherRanking(tuple(rank_of[c] for c in request.candidates), self.teacher_id)

    def _rank(self, request):
        with self._lock:
            hit = self.lookup(request)
            if hit is not None:
                self.hits += 1
                return hit
        if self.inner is None:
            raise UnknownId(
                f"replay cache has no ranking for persona {request.persona_id!r}"
                f" over {list(request.candidates)}"
            )
        result = self.inner.rank(request)
        group = RankedGroup(
            request.persona_id, request.candidates, result.ranking, self.teacher_id, request.step
        )
        key = cache_key(self.teacher_id, request.persona_id, request.candidates)
        with self._lock:
            self.misses += 1
            if key not in self._entries:
                self._entries[key] = group
                if self.path:
                    with open(self.path, "a") as f:
                        f.write(group.to_json() + "\n")
        return result


def write_groups(path, groups: Sequence[RankedGroup]):
    with open(path, "w") as f:
        for g in groups:
            f.write(g.to_json() + "\n")


def read_groups(path) -> list[RankedGroup]:
    with open(path) as f:
        return [RankedGroup.from_json(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# HTTP
# ---------------------------------------------------------------------------

DEFAULT_PROMPT = (
    "You are ranking product images for a shopper.\n"
    "Persona: {persona}\n"
    "Candidates:\n{candidates}\n"
    "Rank every candidate from most to least suitable for this persona. "
    "Answer only with the labels, best first, separated by '>' (e.g. B > A > C)."
)


@dataclass
class EndpointConfig:
    url: str
    model: str = ""
    auth_env: str | None = None
    max_parallel: int = 8
    max_retries: int = 3
    timeout_ms: int = 30000
    prompt_template: str = DEFAULT_PROMPT
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.max_parallel < 1 or self.max_retries < 0 or self.timeout_ms <= 0:
            raise ValueError("max_parallel >= 1, max_retries >= 0, timeout_ms > 0 required")


def candidate_labels(n: int) -> list[str]:
    if n <= 26:
        return list(string.ascii_uppercase[:n])
    return [f"C{i + 1}" for i in range(n)]


def render_prompt(template: str, persona_text: str, labels, refs) -> str:
    lines = "\n".join(f"{lab}: {ref}" for lab, ref in zip(labels, refs))
    return template.format(persona=persona_text, candidates=lines)


_SPLIT = re.compile(r"\s*>\s*")


def parse_ranking(text: str, labels: Sequence[str]) -> tuple:
    """Parse ``"C > A > B"`` or a JSON array of labels into a ranking tuple."""
    body = (text or "").strip()
    parsed = None
    if body.startswith("["):
        try:
            parsed = [str(x).strip() for x in json.loads(body)]
        except ValueError:
            parsed = None
    if parsed is None:
        line = next((ln for ln in body.splitlines() if ">" in ln), body)
        parsed = [tok.strip().strip("`'\".") for tok in _SPLIT.split(line.strip())]
    index = {lab: k for k, lab in enumerate(labels)}
    if sorted(parsed) != sorted(labels) or len(parsed) != len(labels):
        raise MalformedResponse(f"response {body!r} is not a permutation of {list(labels)}", text)
    return order_to_ranking([index[lab] for lab in parsed])


def _response_text(resp) -> str:
    try:
        obj = resp.json()
    except ValueError:
        return resp.text
    if isinstance(obj, dict):
        for key in ("text", "output", "response", "ranking"):
            if isinstance(obj.get(key), str):
                return obj[key]
            if isinstance(obj.get(key), list):
                return json.dumps(obj[key])
        try:
            return obj["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            pass
    if isinstance(obj, list):
        return json.dumps(obj)
    return resp.text


class HTTPTeacher(Teacher):
    """Generic JSON-over-HTTP teacher with bounded retries and an admission cap."""

    def __init__(self, config: EndpointConfig, session=None):
        import requests

        self.config = config
        self.teacher_id = f"http:{config.model or config.url}"
        self.max_parallel = config.max_parallel
        self._requests = requests
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(config.max_parallel)
        self.calls = 0
        self._count_lock = threading.Lock()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _rank(self, request):
        labels = candidate_labels(len(request.candidates))
        refs = request.image_refs or request.candidates
        prompt = render_prompt(self.config.prompt_template, request.persona_text, labels, refs)
        payload = {
            "model": self.config.model,
            "prompt": prompt,
            "persona_id": request.persona_id,
            "images": [{"label": lab, "ref": str(ref)} for lab, ref in zip(labels, refs)],
        }
        last_error = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_s * 2 ** (attempt - 1))
            with self._slots:
                with self._count_lock:
                    self.calls += 1
                try:
                    resp = self._session.post(
                        self.config.url,
                        json=payload,
                        headers=self._headers(),
                        timeout=self.config.timeout_ms / 1000.0,
                    )
                    resp.raise_for_status()
                    text = _response_text(resp)
                except self._requests.RequestException as exc:
                    last_error = TeacherUnavailable(f"{self.config.url}: {exc}")
                    log.warning("teacher attempt %d failed: %s", attempt + 1, exc)
                    continue
            try:
                ranking = parse_ranking(text, labels)
            except MalformedResponse as exc:
                last_error = exc
                log.warning("teacher attempt %d unparseable: %r", attempt + 1, text)
                continue
            return TeacherRanking(ranking, self.teacher_id, text)
        raise last_error
