from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from app.models.errors import DataFormatError, DomainError
from app.models.graph import QuestionParse, SceneDescription

SHAPES = ('cube', 'ball', 'pyramid')
COLORS = ('red', 'green', 'blue', 'yellow')
# Labels the synthetic detector can emit; only SHAPES occur in scenes
OBJECT_VOCABULARY = SHAPES + ('cylinder', 'cone', 'ring', 'star', 'disk', 'torus', 'prism', 'wedge', 'capsule')
RELATIONS = ('left', 'right', 'above', 'below')
YES, NO = 'yes', 'no'


class Template(str, Enum):
    EXISTENCE = 'Existence'
    COUNT = 'Count'
    ATTRIBUTE_QUERY = 'AttributeQuery'
    RELATION_YES_NO = 'RelationYesNo'
    SPATIAL_LEFT_RIGHT = 'SpatialLeftRight'

    @property
    def is_binary(self) -> bool:
        return self in (Template.EXISTENCE, Template.RELATION_YES_NO)


@dataclass(frozen=True)
class ToyObject:
    shape: str
    color: str
    cell: Tuple[int, int]  # row, col


@dataclass(frozen=True)
class ToyScene:
    """
    Grid world: at most one object per cell
    """
    scene_id: str
    rows: int
    cols: int
    objects: Tuple[ToyObject, ...]

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise DomainError(f"Scene {self.scene_id} places two objects in one cell")
        for r, c in cells:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise DomainError(f"Scene {self.scene_id}: cell {(r, c)} outside the grid")

    def count(self, shape: str) -> int:
        return sum(1 for o in self.objects if o.shape == shape)

    def find(self, color: str, shape: str) -> Optional[ToyObject]:
        for o in self.objects:
            if o.color == color and o.shape == shape:
                return o
        return None


@dataclass(frozen=True)
class ToyQuestion:
    template: Template
    tokens: Tuple[str, ...]
    heads: Tuple[int, ...]
    answer: str


@dataclass(frozen=True)
class ToyInstance:
    """
    Scene + question + answer; ``scene`` is the detector-style description
    consumed by the model
    """
    instance_id: str
    scene: SceneDescription
    question: QuestionParse
    answer: str
    template: Template
    annotations: Tuple[str, ...] = ()

    @property
    def is_binary(self) -> bool:
        return self.template.is_binary

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'instance_id': self.instance_id,
            'template': self.template.value,
            'scene': self.scene.to_dict(),
            'question': self.question.to_dict(),
            'answer': self.answer,
        }
        if self.annotations:
            data['annotations'] = list(self.annotations)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], line: Optional[int] = None) -> 'ToyInstance':
        try:
            template = Template(data['template'])
            return cls(
                instance_id=str(data['instance_id']),
                scene=SceneDescription.from_dict(data['scene']),
                question=QuestionParse.from_dict(data['question']),
                answer=str(data['answer']),
                template=template,
                annotations=tuple(data.get('annotations', ())),
            )
        except KeyError as e:
            raise DataFormatError('Missing key in corpus record', line=line, field=str(e.args[0])) from e
        except ValueError as e:
            raise DataFormatError(f"Malformed corpus record: {e}", line=line) from e


@dataclass(frozen=True)
class CorruptionSpec:
    """Target label accuracy p for the quality sweep"""
    p: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"Corruption level must lie in [0, 1], got {self.p}")


@dataclass
class MetricsReport:
    """
    Overall, per-template and open/binary accuracies with their counts
    """
    overall: float = 0.0
    binary: float = 0.0
    open: float = 0.0
    per_template: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'overall': self.overall,
            'binary': self.binary,
            'open': self.open,
            'per_template': dict(sorted(self.per_template.items())),
            'counts': dict(sorted(self.counts.items())),
        }

    def subset_accuracy(self, templates: List[str]) -> float:
        """Count-weighted accuracy over the given templates"""
        total = sum(self.counts.get(t, 0) for t in templates)
        if total == 0:
            return 0.0
        return sum(self.per_template.get(t, 0.0) * self.counts.get(t, 0) for t in templates) / total


@dataclass
class CorruptionTally:
    """Realized outcome of corrupting labels"""
    kept: int = 0
    total: int = 0

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.total if self.total else 1.0
