"""Medication recommendation with graph-reasoned multi-level abstraction."""

from .cohort import (
    CohortFormatError,
    EventVocab,
    IndexedPatient,
    IndexedVisit,
    PatientRecord,
    SyntheticSpec,
    Visit,
    build_vocabs,
    encode_multi_hot,
    filter_cohort,
    generate_synthetic_cohort,
    index_cohort,
    load_cohort,
    save_cohort,
    split_cohort,
)
from .encoder import HistoryEncoder, PatientEncoding, embed_visit_events, encode_patient
from .graph import EhrGraph, SubGraph, build_cooccurrence_graph, subgraph, unvisited_neighbors
from .metrics import Report, VisitEval, evaluate, f1, jaccard, prauc
from .model import (
    VARIANTS,
    MemoryStore,
    ModelConfig,
    Prediction,
    Recommender,
    VisitAbstraction,
    candidate_read,
    candidate_scores,
    encode_day,
    memory_read,
    predict,
    select_candidates,
    select_start,
    update_global_embeddings,
    update_local_embeddings,
)
from .reasoning import GraphAttentionLayer, Traversal, TraversalStep, chained_traverse, traverse, vote_next
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    loss_attention,
    loss_bce,
    restore_model,
    run_variant,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
