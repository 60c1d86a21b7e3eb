"""Face-attack knowledge graph toolkit: graph store, rationale grounding,
KG-consistency rewards, protocol metrics, QA synthesis and a toy policy sandbox."""

from .evaluation import EvalReport, PredictionRecord, binary_hter, category_metrics, evaluate
from .graph import (
    FaceAttackGraph,
    GraphError,
    GraphIntegrityError,
    GraphParseError,
    Relation,
    Subgraph,
    SupportSets,
    attack_node_for_label,
    dump_graph,
    ego_subgraph,
    load_graph,
    read_graph,
    reference_graph,
    shortest_distance,
    support_sets,
    validate_graph,
)
from .grounding import (
    GroundingMode,
    GroundingReport,
    StubVerifier,
    TagConfig,
    VerifierError,
    ground,
    parse_response,
    pattern_match,
)
from .labels import FineLabel, Protocol, coarsen
from .rewards import (
    GroupScore,
    LabelNormalizer,
    RewardBreakdown,
    RewardWeights,
    group_advantages,
    kg_reward,
    score_group,
)
from .sandbox import TrainConfig, ToyPolicy, policy_gradient, surrogate_loss, train
from .synthesis import PipelineConfig, QARecord, run_pipeline, stub_clients, structural_filter, to_agit_record

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
