"""Federated adaptation by routing over rank-wise experts of reused LoRA modules."""

from .eeqa import QuotaAllocation, allocate_quotas, initial_uniform_allocation, normalize_scores
from .experts import (
    ExpertPool,
    GateState,
    RankExpert,
    SiteRouter,
    build_pool,
    cumulative_site_score,
    decompose,
    importance_score,
    more_forward,
    route,
)
from .fedsim import TrainConfig, run
from .lora import InterferenceReport, Kind, LoraModule, SiteId, interference_decompose, lora_forward, merge_linear, mole_forward
from .network import BaseModel
from .numcore import cosine, derive_stream, matvec, softmax, top_k_indices
from .synthtask import CompositeTask, PlantedSkill, TaskSpec, make_base, make_composite, partition, plant_skill

__version__ = "0.1.0"
