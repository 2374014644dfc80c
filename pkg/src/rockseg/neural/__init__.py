"""Foundation-model backbone, adapters, quantization, heads and training."""

from .backbone import (
    BackboneError,
    BackboneSpec,
    VisionTransformer,
    build_backbone,
    build_stub_backbone,
    extract_cls_embedding,
    extract_features,
)
from .baselines import BASELINE_KINDS, UNet, build_baseline
from .heads import ConvHead, HeadSpec, LinearHead, build_head, head_forward
from .lora import (
    LoraConfig,
    LoraConv1x1,
    LoraLinear,
    apply_lora,
    lora_added_parameters,
    merge_lora,
)
from .model import (
    SegModel,
    count_parameters,
    count_trainable_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .quant import (
    QuantConfig,
    QuantizedConv2d,
    QuantizedLinear,
    dequantize_blockwise,
    quantization_error_report,
    quantize,
    quantize_blockwise,
    stored_bits_per_weight,
)
from .train import (
    TrainConfig,
    TrainingDiverged,
    evaluate_segmenter,
    predict_mask,
    train_segmenter,
)

__all__ = [
    "BackboneError", "BackboneSpec", "VisionTransformer", "build_backbone",
    "build_stub_backbone", "extract_cls_embedding", "extract_features",
    "BASELINE_KINDS", "UNet", "build_baseline",
    "ConvHead", "HeadSpec", "LinearHead", "build_head", "head_forward",
    "LoraConfig", "LoraConv1x1", "LoraLinear", "apply_lora",
    "lora_added_parameters", "merge_lora",
    "SegModel", "count_parameters", "count_trainable_parameters",
    "load_checkpoint", "save_checkpoint",
    "QuantConfig", "QuantizedConv2d", "QuantizedLinear", "dequantize_blockwise",
    "quantization_error_report", "quantize", "quantize_blockwise",
    "stored_bits_per_weight",
    "TrainConfig", "TrainingDiverged", "evaluate_segmenter", "predict_mask",
    "train_segmenter",
]
