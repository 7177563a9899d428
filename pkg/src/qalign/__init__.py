"""Query-query alignment and rearranged cross-image attention.

The package splits into: tensor primitives and the QALN file format
(:mod:`qalign.tensor`), alignment and aggregation (:mod:`qalign.aggregation`),
attention kernels (:mod:`qalign.attention`), leakage diagnostics
(:mod:`qalign.diagnostics`), the synthetic simulation harness
(:mod:`qalign.simulate`), legacy metrics (:mod:`qalign.metrics`), and the
CLI (:mod:`qalign.cli`).
"""

from . import errors
from .aggregation import (
    AggregationMatrix,
    AlignmentMatrix,
    apply_fallback,
    build_aggregation,
    compute_alignment,
    qq_align_pipeline,
    reweight_softmax,
)
from .attention import (
    AttentionOutput,
    RearrangedKV,
    apply_contrast,
    cross_image_attention,
    rearrange_kv,
    rearranged_attention,
)
from .diagnostics import (
    DiffMap,
    PatchSelection,
    attention_diff_map,
    full_attention_map,
    leakage_mass,
    patch_attention_map,
    write_heatmap,
)
from .metrics import BinaryMask, gram_loss, gram_matrix, load_mask, mask_iou
from .tensor import (
    FeatureMatrix,
    load_csv,
    load_tensor,
    matmul,
    row_softmax,
    row_topk,
    save_tensor,
)

__version__ = "0.1.0"

# The simulation harness pulls in scipy; load it lazily so file-level
# commands (align, attend, ...) start fast.
_SIMULATE_NAMES = {
    "ProjectionPair", "SceneSpec", "SimReport", "alignment_accuracy",
    "generate_scene", "make_projections", "project_features",
    "region_purity", "run_simulation", "simulate",
}


def __getattr__(name):
    if name in _SIMULATE_NAMES:
        import importlib

        mod = importlib.import_module(".simulate", __name__)
        if name == "simulate":
            return mod
        return getattr(mod, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "errors",
    "AggregationMatrix",
    "AlignmentMatrix",
    "apply_fallback",
    "build_aggregation",
    "compute_alignment",
    "qq_align_pipeline",
    "reweight_softmax",
    "AttentionOutput",
    "RearrangedKV",
    "apply_contrast",
    "cross_image_attention",
    "rearrange_kv",
    "rearranged_attention",
    "DiffMap",
    "PatchSelection",
    "attention_diff_map",
    "full_attention_map",
    "leakage_mass",
    "patch_attention_map",
    "write_heatmap",
    "BinaryMask",
    "gram_loss",
    "gram_matrix",
    "load_mask",
    "mask_iou",
    "ProjectionPair",
    "SceneSpec",
    "SimReport",
    "alignment_accuracy",
    "generate_scene",
    "make_projections",
    "project_features",
    "region_purity",
    "run_simulation",
    "FeatureMatrix",
    "load_csv",
    "load_tensor",
    "matmul",
    "row_softmax",
    "row_topk",
    "save_tensor",
]
