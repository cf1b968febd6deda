from .config import ModelConfig
from .network import (
    AttentionMask,
    ConvOperator,
    DivergenceError,
    SpectralElementTransformer,
    build_attention_mask,
    init_params,
)
from .api import forward, les_layer, rope_rotate, sem_attn, sem_conv, sgs_layer
