"""Distil a teacher's pairwise/listwise image preferences into a trainable
embedding table for persona-to-image retrieval."""

from .btloss import (
    RankedGroup,
    batch_loss_grad,
    bt_probability,
    group_loss_grad,
    pairs_from_ranking,
    pairwise_loss,
)
from .embeddings import CatalogStore, PersonaRecord, load_embeddings, normalize, save_embeddings, score, score_all
from .metrics import MetricReport, mean_percentile, percentile_rank, top_k
from .optim import AdamWConfig, AdamWState, EarlyStopper, apply_step, lr_at
from .sampler import SamplerConfig, compute_bins, sample_group, sample_step
from .teacher import CachedTeacher, HTTPTeacher, SyntheticTeacher, TeacherRequest
from .tournament import label_set, run_tournament, seed_bracket

__version__ = "0.1.0"
