"""Synthetic persona/catalog worlds with a known hidden-utility teacher.

The teacher scores ``h_x . w_u`` with hidden unit vectors.  The student sees
persona embeddings ``normalize(A h_x)`` for a fixed random linear map ``A``
(orthogonal when the two dimensions agree), so an ideal image table
``normalize(A w_u)`` reproduces the teacher's ordering exactly.  The student's
initial image table is drawn independently of the hidden vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import CatalogStore, PersonaRecord, random_unit, save_personas, write_matrix
from .rng import substream
from .teacher import SyntheticTeacher


@dataclass
class World:
    image_ids: list
    hidden_images: np.ndarray  # (N, D_h)
    personas: dict  # split -> list[PersonaRecord]
    hidden_personas: dict  # persona id -> (D_h,)
    student_map: np.ndarray  # (D, D_h)
    init_images: np.ndarray  # (N, D) student starting point

    def teacher(self, tau=0.0, seed=0) -> SyntheticTeacher:
        return SyntheticTeacher(self.hidden_personas, dict(zip(self.image_ids, self.hidden_images)), tau, seed)

    def ideal_store(self) -> CatalogStore:
        """Image table whose scores equal the teacher's utilities up to a positive scale."""
        return CatalogStore(self.image_ids, self.hidden_images @ self.student_map.T, dtype=np.float64)

    def init_store(self) -> CatalogStore:
        return CatalogStore(self.image_ids, self.init_images)

    def persona_map(self) -> dict:
        return {p.id: p for split in self.personas.values() for p in split}


def make_world(n_images=512, n_train=200, n_val=20, n_test=20, dim=16, hidden_dim=None, seed=0) -> World:
    hidden_dim = hidden_dim or dim
    rng = substream(seed, "world")
    hidden_images = random_unit(rng, n_images, hidden_dim)
    if hidden_dim == dim:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        student_map = q * np.sign(np.diag(r))
    else:
        student_map = rng.standard_normal((dim, hidden_dim)) / np.sqrt(hidden_dim)
    image_ids = [f"img-{i:05d}" for i in range(n_images)]

    personas, hidden_personas = {}, {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        h = random_unit(rng, count, hidden_dim)
        recs = []
        for k in range(count):
            pid = f"{split}-{k:04d}"
            hidden_personas[pid] = h[k]
            recs.append(PersonaRecord(pid, f"synthetic persona {pid}", student_map @ h[k]))
        personas[split] = recs
    init = random_unit(substream(seed, "world-init"), n_images, dim).astype(np.float32)
    return World(image_ids, hidden_images, personas, hidden_personas, student_map, init)


def write_world(world: World, out_dir, tau=0.0, teacher_seed=0, extra_config=None) -> Path:
    """Write every input file of a run plus a ready-to-use ``config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "catalog.pde", world.image_ids, world.init_images, normalized=True)
    write_matrix(out / "hidden_images.pde", world.image_ids, world.hidden_images, normalized=True)
    pids = list(world.hidden_personas)
    write_matrix(out / "hidden_personas.pde", pids, np.stack([world.hidden_personas[p] for p in pids]),
                 normalized=True)
    for split, recs in world.personas.items():
        save_personas(out / f"personas_{split}.jsonl", recs)
    config = {
        "student": {"init": "import", "dim": int(world.init_images.shape[1])},
        "teacher": {
            "kind": "synthetic",
            "synthetic": {"persona_hidden": "hidden_personas.pde", "image_hidden": "hidden_images.pde",
                          "tau": tau, "seed": teacher_seed},
        },
    }
    for key, value in (extra_config or {}).items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path
