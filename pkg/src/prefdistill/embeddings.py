"""Persona/catalog embeddings, the bilinear relevance score and the PDE1 file format.

The student is a table of raw per-image vectors.  Scores are always computed
against the row-normalized view, so normalization is part of the forward pass
and scaling a raw row never changes any score.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateId,
    EmptyCatalog,
    TruncatedFile,
    UnknownId,
    ZeroVector,
)
from .rng import substream

MIN_NORM = 1e-8
MAGIC = b"PDE1"
_HEADER = struct.Struct("<4sII")


def _row_norms(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||`` as float64; raises ZeroVector below ``MIN_NORM``."""
    v = np.asarray(v, dtype=np.float64)
    norm = _row_norms(v)
    if not np.isfinite(norm) or norm < MIN_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def score(persona, image) -> float:
    """Dot product of two unit vectors, summed left to right over dimensions."""
    a = np.asarray(persona, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape}")
    total = 0.0
    for d in range(a.shape[0]):
        total += float(a[d]) * float(b[d])
    return total


def dot_rows(matrix, vector) -> np.ndarray:
    """``matrix @ vector`` with the same sequential summation order as `score`.

    Vectorized across rows, sequential across dimensions, so every entry is
    bit-identical to the scalar loop.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    if matrix.ndim != 2 or vector.shape != (matrix.shape[1],):
        raise DimensionMismatch(f"matrix {matrix.shape} vs vector {vector.shape}")
    acc = np.zeros(matrix.shape[0], dtype=np.float64)
    for d in range(matrix.shape[1]):
        acc += matrix[:, d] * vector[d]
    return acc


@dataclass
class PersonaRecord:
    id: str
    text: str
    embedding: np.ndarray  # unit norm, frozen

    def __post_init__(self):
        emb = normalize(self.embedding)
        emb.setflags(write=False)
        self.embedding = emb


@dataclass
class ScoreVector:
    persona_id: str
    scores: np.ndarray  # aligned with CatalogStore.ids


class CatalogStore:
    """Trainable raw image vectors plus a cached row-normalized view.

    Writers mutate ``raw`` rows and call :meth:`mark_dirty`; readers use
    :attr:`normalized`, which refreshes stale rows on access.
    """

    def __init__(self, ids: Sequence[str], raw, dtype=np.float32):
        ids = [str(i) for i in ids]
        raw = np.array(raw, dtype=dtype, copy=True)
        if raw.ndim != 2:
            raise DimensionMismatch(f"raw matrix must be 2-D, got shape {raw.shape}")
        if raw.shape[0] != len(ids):
            raise DimensionMismatch(f"{len(ids)} ids for {raw.shape[0]} rows")
        if raw.shape[0] and raw.shape[1] < 2:
            raise DimensionMismatch("embedding dimension must be >= 2")
        index = {}
        for row, image_id in enumerate(ids):
            if image_id in index:
                raise DuplicateId(image_id)
            index[image_id] = row
        norms = _row_norms(raw.astype(np.float64))
        bad = np.flatnonzero(~(norms >= MIN_NORM))
        if bad.size:
            raise ZeroVector(f"row {ids[bad[0]]!r} has norm {norms[bad[0]]:.3g}")
        self.ids = ids
        self.raw = raw
        self._index = index
        self._normalized = raw.astype(np.float64) / norms[:, None]
        self._dirty = np.zeros(len(ids), dtype=bool)
        self._lock = threading.RLock()

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.raw.shape[1]

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise UnknownId(f"unknown image id {image_id!r}") from None

    def rows_for(self, image_ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index_of(i) for i in image_ids], dtype=np.intp)

    def mark_dirty(self, rows=None):
        with self._lock:
            if rows is None:
                self._dirty[:] = True
            else:
                self._dirty[np.asarray(rows, dtype=np.intp)] = True

    @property
    def dirty(self) -> np.ndarray:
        return self._dirty.copy()

    def refresh(self):
        with self._lock:
            rows = np.flatnonzero(self._dirty)
            if rows.size:
                block = self.raw[rows].astype(np.float64)
                norms = _row_norms(block)
                if np.any(~(norms >= MIN_NORM)):
                    raise ZeroVector("raw row collapsed below the minimum norm")
                self._normalized[rows] = block / norms[:, None]
                self._dirty[rows] = False

    @property
    def normalized(self) -> np.ndarray:
        if self._dirty.any():
            self.refresh()
        return self._normalized

    def copy(self) -> "CatalogStore":
        return CatalogStore(self.ids, self.raw, dtype=self.raw.dtype)


def score_all(persona, store: CatalogStore) -> ScoreVector:
    """Score one persona against every catalog image (catalog order)."""
    if store.size == 0:
        raise EmptyCatalog("catalog has no images")
    if isinstance(persona, PersonaRecord):
        pid, emb = persona.id, persona.embedding
    else:
        pid, emb = "", np.asarray(persona, dtype=np.float64)
    if emb.shape != (store.dim,):
        raise DimensionMismatch(f"persona dim {emb.shape} vs catalog dim {store.dim}")
    return ScoreVector(pid, dot_rows(store.normalized, emb))


def random_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / _row_norms(x)[:, None]


# ---------------------------------------------------------------------------
# PDE1 binary format + JSON manifest sidecar
# ---------------------------------------------------------------------------


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json") if path.suffix else path.with_name(path.name + ".manifest.json")


def write_matrix(path, ids: Sequence[str], matrix, normalized: bool = False, magic=MAGIC):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionMismatch(f"{len(ids)} ids for matrix of shape {matrix.shape}")
    if len(set(ids)) != len(ids):
        raise DuplicateId("ids must be unique")
    count, dim = matrix.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, count, dim))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    manifest = {"ids": list(ids), "dim": dim, "count": count, "normalized": bool(normalized)}
    manifest_path(path).write_text(json.dumps(manifest) + "\n")


def read_matrix(path, magic=MAGIC):
    """Read a PDE1 file; returns ``(ids, float32 matrix, normalized_flag)``."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, got {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header is {len(data)} bytes")
    _, count, dim = _HEADER.unpack_from(data)
    expected = _HEADER.size + 4 * count * dim
    if len(data) < expected:
        raise TruncatedFile(f"{path}: need {expected} bytes, have {len(data)}")
    if len(data) > expected:
        raise DimensionMismatch(f"{path}: {len(data) - expected} trailing bytes")
    matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size)
    matrix = matrix.reshape(count, dim).astype(np.float32)

    side = manifest_path(path)
    normalized = False
    if side.exists():
        manifest = json.loads(side.read_text())
        ids = [str(i) for i in manifest["ids"]]
        if manifest.get("dim") != dim or manifest.get("count") != count or len(ids) != count:
            raise DimensionMismatch(
                f"{side}: manifest says count={manifest.get('count')} dim={manifest.get('dim')}"
                f" ({len(ids)} ids), binary says count={count} dim={dim}"
            )
        normalized = bool(manifest.get("normalized", False))
    else:
        ids = [str(i) for i in range(count)]
    if len(set(ids)) != len(ids):
        raise DuplicateId(f"{side}: duplicate ids")
    return ids, matrix, normalized


def load_embeddings(path) -> CatalogStore:
    ids, matrix, _ = read_matrix(path)
    return CatalogStore(ids, matrix)


def save_embeddings(store: CatalogStore, path, normalized: bool = False):
    write_matrix(path, store.ids, store.raw, normalized=normalized)


# ---------------------------------------------------------------------------
# Persona JSON Lines
# ---------------------------------------------------------------------------


def load_personas(path, dim=None, seed=None) -> list[PersonaRecord]:
    """Read personas; missing embeddings are drawn as seeded random unit vectors."""
    records = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            pid = str(obj["id"])
            if pid in seen:
                raise DuplicateId(f"{path}:{lineno}: persona {pid!r}")
            seen.add(pid)
            emb = obj.get("embedding")
            if emb is None:
                if dim is None or seed is None:
                    raise DimensionMismatch(f"{path}:{lineno}: persona {pid!r} has no embedding")
                emb = random_unit(substream(seed, f"persona:{pid}"), 1, dim)[0]
            emb = np.asarray(emb, dtype=np.float32)
            if dim is not None and emb.shape != (dim,):
                raise DimensionMismatch(f"{path}:{lineno}: persona {pid!r} has dim {emb.shape}, expected {dim}")
            records.append(PersonaRecord(pid, obj.get("text", ""), emb))
    return records


def save_personas(path, personas: Iterable[PersonaRecord]):
    with open(path, "w") as f:
        for p in personas:
            emb = [float(x) for x in np.asarray(p.embedding, dtype=np.float32)]
            f.write(json.dumps({"id": p.id, "text": p.text, "embedding": emb}) + "\n")
