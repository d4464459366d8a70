"""Class vocabulary shared across the pipeline.

The class order (benign, malignant, normal) is fixed: probability vectors,
confusion matrices, and mask codes all index classes in this order.
"""

from __future__ import annotations

import enum


class Label(str, enum.Enum):
    """Ground-truth tissue label from pathologist annotations."""

    BENIGN = "benign"
    MALIGNANT = "malignant"
    NORMAL = "normal"


class PatchClass(str, enum.Enum):
    """Final per-patch prediction; UNSEEN is the below-threshold class."""

    BENIGN = "benign"
    MALIGNANT = "malignant"
    NORMAL = "normal"
    UNSEEN = "unseen"


class Verdict(str, enum.Enum):
    MELANOMA = "melanoma"
    BENIGN_NEVUS = "benign_nevus"


CLASS_ORDER: tuple[Label, ...] = (Label.BENIGN, Label.MALIGNANT, Label.NORMAL)

# Raster codes used in label masks; 0 is reserved for "no annotation".
MASK_NONE = 0
LABEL_TO_CODE = {label: i + 1 for i, label in enumerate(CLASS_ORDER)}
CODE_TO_LABEL = {code: label for label, code in LABEL_TO_CODE.items()}


def parse_label(text: str) -> Label:
    try:
        return Label(text.strip().lower())
    except ValueError:
        allowed = ", ".join(label.value for label in Label)
        raise ValueError(f"unknown label {text!r}; allowed labels: {allowed}") from None


def patch_class_for(label: Label) -> PatchClass:
    return PatchClass(label.value)
