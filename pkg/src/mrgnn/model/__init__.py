from mrgnn.model.layers import (
    inter_modal_difference_conv,
    inter_modal_similarity_conv,
    intra_modal_conv,
    temporal_gated_conv,
)
from mrgnn.model.network import (
    ModelConfig,
    ModelState,
    backward,
    forward,
    init_model,
    load_checkpoint,
    mrgnn_layer,
    predict,
    save_checkpoint,
    st_mr_block,
)

__all__ = [
    "ModelConfig",
    "ModelState",
    "backward",
    "forward",
    "init_model",
    "inter_modal_difference_conv",
    "inter_modal_similarity_conv",
    "intra_modal_conv",
    "load_checkpoint",
    "mrgnn_layer",
    "predict",
    "save_checkpoint",
    "st_mr_block",
    "temporal_gated_conv",
]
