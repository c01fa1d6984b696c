from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.errors import ConfigError, DimensionError, GraphValidationError
from app.models.run_config import RunConfig
from app.services.numerics import Tensor


class Stage(str, Enum):
    QUESTION_ONLY = 'QuestionOnly'
    CROSS_MODALITY = 'CrossModality'
    FULL = 'Full'


STAGE_ORDER = (Stage.QUESTION_ONLY, Stage.CROSS_MODALITY, Stage.FULL)


@dataclass(frozen=True)
class StageSchedule:
    """
    Per-layer stage; layers are split into three consecutive groups
    """
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        ranks = [STAGE_ORDER.index(s) for s in self.stages]
        if any(a > b for a, b in zip(ranks, ranks[1:])):
            raise ConfigError('Stages must appear in the order QuestionOnly -> CrossModality -> Full',
                              key='model.stage_split')

    @classmethod
    def from_split(cls, split: Sequence[int]) -> 'StageSchedule':
        if len(split) != 3 or any(n < 1 for n in split):
            raise ConfigError(f"Stage split must be three positive integers, got {list(split)}",
                              key='model.stage_split')
        stages = []
        for stage, count in zip(STAGE_ORDER, split):
            stages.extend([stage] * count)
        return cls(tuple(stages))

    @classmethod
    def all_full(cls, layers: int) -> 'StageSchedule':
        return cls((Stage.FULL,) * layers)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, layer: int) -> Stage:
        return self.stages[layer]


@dataclass(frozen=True)
class ConstraintGraph:
    """
    (V+Q) x (V+Q) binary mask; Region 1 is the top-left V x V block,
    Region 2 the bottom-right Q x Q block, Regions 3/4 the off-diagonal blocks
    """
    mask: np.ndarray
    v: int
    q: int

    def __post_init__(self):
        n = self.v + self.q
        if self.mask.shape != (n, n):
            raise DimensionError(f"Constraint mask shape {self.mask.shape} does not match V+Q={n}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise GraphValidationError('Constraint graph entries must be 0 or 1')

    @property
    def size(self) -> int:
        return self.v + self.q

    @property
    def region1(self) -> np.ndarray:
        return self.mask[:self.v, :self.v]

    @property
    def region2(self) -> np.ndarray:
        return self.mask[self.v:, self.v:]

    @property
    def region3(self) -> np.ndarray:
        """Image rows attending to question columns"""
        return self.mask[:self.v, self.v:]

    @property
    def region4(self) -> np.ndarray:
        """Question rows attending to image columns"""
        return self.mask[self.v:, :self.v]

    def allowed_pairs(self) -> set:
        rows, cols = np.nonzero(self.mask)
        return set(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class StreamConfig:
    d_model: int
    heads: int
    layers: int
    ff_width: int
    stage_split: Tuple[int, int, int]
    epsilon: float
    answers: int
    max_positions: int = 96

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}", key='model.heads')
        if self.layers < 3:
            raise ConfigError('At least three layers are needed (one per stage)', key='model.layers')
        if sum(self.stage_split) != self.layers:
            raise ConfigError(f"Stage split {self.stage_split} does not cover {self.layers} layers",
                              key='model.stage_split')

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def from_run_config(cls, config: RunConfig, answers: int) -> 'StreamConfig':
        return cls(config.d_model, config.heads, config.layers, config.ff_width,
                   tuple(config.stage_split), config.epsilon, answers, config.max_positions)


@dataclass
class AttentionRecord:
    """Attention weights of one head of one layer"""
    stream: str
    layer: int
    head: int
    stage: Stage
    weights: np.ndarray
    mask: np.ndarray
    v: int


@dataclass
class StreamResult:
    pooled: Tensor  # [1 x d_model]
    logits: Tensor  # [1 x |A|]
    attention: List[AttentionRecord] = field(default_factory=list)
    row_labels: List[str] = field(default_factory=list)
    hidden: Optional[Tensor] = None  # [(V+Q) x d_model] output of the last layer


@dataclass
class ModelOutputs:
    """
    Logits of the visual, semantic and fused heads plus recorded attention;
    single-stream variants leave the heads they do not have as None
    """
    f_v: Optional[Tensor] = None
    f_s: Optional[Tensor] = None
    f_f: Optional[Tensor] = None
    attention: Dict[str, List[AttentionRecord]] = field(default_factory=dict)
    row_labels: Dict[str, List[str]] = field(default_factory=dict)

    def heads(self) -> Dict[str, Tensor]:
        return {name: t for name, t in (('f_v', self.f_v), ('f_s', self.f_s), ('f_f', self.f_f))
                if t is not None}
