from .config import VARIANTS, DecoderConfig, LossWeights, SetLossWeights, TrainConfig, desk_decoder
from .decoder import LayerOutput, Mono3DV, decode_boxes, prediction_set, to_detections
from .losses import detection_loss, distillation_loss, overall_loss, reconstruction_loss, set_loss
from .train import (
    FixedTargets, SceneForward, TrainingDiverged, TrainResult, VariantFlags, fix_targets, forward_scene, predict,
    scene_loss, train,
)

__all__ = [
    "VARIANTS", "DecoderConfig", "FixedTargets", "LayerOutput", "LossWeights", "Mono3DV", "SceneForward",
    "SetLossWeights", "TrainConfig", "TrainResult", "TrainingDiverged", "VariantFlags", "decode_boxes",
    "desk_decoder", "detection_loss", "distillation_loss", "fix_targets", "forward_scene", "overall_loss",
    "predict", "prediction_set", "reconstruction_loss", "scene_loss", "set_loss", "to_detections", "train",
]
