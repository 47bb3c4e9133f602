from .encoders import STRIDES, BasicConv2d, Res2NetEncoder, ToyEncoder, build_encoder
from .infnet import (
    COMPONENTS,
    ABLATION_ROWS,
    EdgeAttention,
    InfNet,
    ModelConfig,
    ParallelPartialDecoder,
    PredictionBundle,
    ReverseAttentionStage,
    load_checkpoint,
    load_infnet,
    parse_ablation,
    resample,
    reverse_attention_weight,
    save_checkpoint,
    weights_digest,
)
