from .heatmap import Heatmap, combine_levels, similarity_heatmap, upsample_level
from .metrics import (
    LevelMetrics,
    LocalizationRecord,
    MetricsReport,
    ModelEmbedder,
    eval_sga_riga,
    is_localized,
    localize_image,
    random_cell,
    tally,
)
from .retrieval import RetrievalResult, retrieve_topk

__all__ = [
    "Heatmap", "combine_levels", "similarity_heatmap", "upsample_level",
    "LevelMetrics", "LocalizationRecord", "MetricsReport", "ModelEmbedder", "eval_sga_riga",
    "is_localized", "localize_image", "random_cell", "tally",
    "RetrievalResult", "retrieve_topk",
]
