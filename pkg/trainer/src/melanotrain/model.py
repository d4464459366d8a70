"""VGG16 backbone with a custom three-layer fully-connected head."""

from __future__ import annotations

import logging
from pathlib import Path

import torch
from torch import nn
from torchvision.models import vgg16

logger = logging.getLogger(__name__)

ARITY_WIDTH = {"binary": 2, "multiclass": 3}
FEATURE_DIM = 512 * 7 * 7
HEAD_HIDDEN = (4096, 512)
DROPOUT = 0.5


class ModelError(Exception):
    pass


def build_head(arity: str) -> nn.Sequential:
    width = ARITY_WIDTH[arity]
    return nn.Sequential(
        nn.Linear(FEATURE_DIM, HEAD_HIDDEN[0]),
        nn.ReLU(inplace=True),
        nn.Dropout(DROPOUT),
        nn.Linear(HEAD_HIDDEN[0], HEAD_HIDDEN[1]),
        nn.ReLU(inplace=True),
        nn.Dropout(DROPOUT),
        nn.Linear(HEAD_HIDDEN[1], width),
    )


class PatchClassifier(nn.Module):
    """VGG16 features + custom classifier replacing the stock FC stack."""

    def __init__(self, arity: str, freeze_backbone: bool = False):
        super().__init__()
        if arity not in ARITY_WIDTH:
            raise ModelError(f"unknown arity {arity!r}")
        backbone = vgg16(weights=None)
        self.arity = arity
        self.freeze_backbone = freeze_backbone
        self.features = backbone.features
        self.avgpool = backbone.avgpool
        self.head = build_head(arity)
        if freeze_backbone:
            for param in self.features.parameters():
                param.requires_grad = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extract_features(x))

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.avgpool(self.features(x))
        return torch.flatten(feats, 1)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def load_backbone_weights(model: PatchClassifier, weights_path: str | Path | None) -> None:
    """Initialize the feature extractor from a VGG16 state-dict file.

    Pretrained ImageNet weights are the intended initialization; when no
    file is available the backbone stays randomly initialized (seeded),
    which is reported loudly since it changes what the model can learn on
    real tissue.
    """
    if weights_path is None:
        logger.warning(
            "no backbone weights file given; feature extractor is randomly initialized"
        )
        return
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    feature_state = {
        k.removeprefix("features."): v for k, v in state.items() if k.startswith("features.")
    }
    if not feature_state:
        raise ModelError(f"{weights_path} holds no VGG16 feature weights")
    model.features.load_state_dict(feature_state)
