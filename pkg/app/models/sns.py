from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from app.models.errors import DimensionError, DomainError
from app.services.numerics import Tensor


@dataclass
class SuperNode:
    """
    One box's top-K label candidates with their semantic features and the
    box's visual feature
    """
    box_index: int
    labels: Tuple[str, ...]
    features: Tensor  # [K x d_model]
    visual: Tensor  # [1 x d_model]
    ground_truth: Optional[int] = None

    def __post_init__(self):
        k = len(self.labels)
        if k < 1:
            raise DomainError(f"SuperNode {self.box_index} has no candidates")
        if self.features.shape[0] != k:
            raise DimensionError(f"SuperNode {self.box_index}: {k} labels but {self.features.shape[0]} features")
        if self.visual.shape != (1, self.features.shape[1]):
            raise DimensionError(f"SuperNode {self.box_index}: visual feature shape {self.visual.shape} "
                                 f"does not match d_model={self.features.shape[1]}")
        if self.ground_truth is not None and not 0 <= self.ground_truth < k:
            raise DomainError(f"SuperNode {self.box_index}: ground truth index {self.ground_truth} out of range")

    @property
    def k(self) -> int:
        return len(self.labels)


@dataclass
class SNSReport:
    """
    Outcome of SuperNode-selection training
    """
    accuracy: float
    boxes: int
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None
