from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Tuple, Union

import networkx as nx
import numpy as np

from app.models.errors import DataFormatError, GraphValidationError


class NodeKind(str, Enum):
    OBJECT = 'Object'
    ATTRIBUTE = 'Attribute'
    RELATION = 'Relation'
    COORDINATE_CORNER = 'CoordinateCorner'
    QUESTION_TOKEN = 'QuestionToken'
    SEPARATOR = 'Separator'


class Modality(str, Enum):
    SEMANTIC = 'Semantic'
    VISUAL = 'Visual'
    QUESTION = 'Question'


Payload = Union[str, Tuple[float, float]]


@dataclass(frozen=True)
class GraphNode:
    """
    One node of a modality graph
    """
    id: int
    kind: NodeKind
    payload: Payload
    source_box: Optional[int] = None
    candidates: Tuple[str, ...] = ()  # SuperNode labels of an Object node, at most k

    def __post_init__(self):
        if self.kind == NodeKind.COORDINATE_CORNER:
            x, y = self.payload
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise GraphValidationError(f"Coordinate node {self.id} outside [0,1]^2: {self.payload}", self.id)
        if self.kind == NodeKind.OBJECT and self.source_box is None:
            raise GraphValidationError(f"Object node {self.id} has no source box", self.id)

    @property
    def label(self) -> str:
        """Printable payload (used for attention dump row labels)"""
        if self.kind == NodeKind.COORDINATE_CORNER:
            return f"({self.payload[0]:.3f},{self.payload[1]:.3f})"
        return str(self.payload)

    def to_dict(self) -> Dict[str, Any]:
        payload = list(self.payload) if self.kind == NodeKind.COORDINATE_CORNER else self.payload
        data = {'id': self.id, 'kind': self.kind.value, 'payload': payload, 'source_box': self.source_box}
        if self.candidates:
            data['candidates'] = list(self.candidates)
        return data


@dataclass(frozen=True, order=True)
class DirectedEdge:
    source: int
    target: int


@dataclass(frozen=True)
class ModalityGraph:
    """
    Nodes plus directed edges: the carrier of semantic, visual and question graphs
    """
    nodes: Tuple[GraphNode, ...]
    edges: FrozenSet[DirectedEdge]
    modality: Modality

    def __post_init__(self):
        for position, node in enumerate(self.nodes):
            if node.id != position:
                raise GraphValidationError(f"Node ids must be 0..N-1 in order; found {node.id} at {position}", position)
            if node.kind == NodeKind.SEPARATOR:
                raise GraphValidationError('Separator nodes cannot live inside a modality graph', position)
        n = len(self.nodes)
        for edge in self.edges:
            if not (0 <= edge.source < n and 0 <= edge.target < n):
                raise GraphValidationError(f"Edge {edge.source}->{edge.target} has a missing endpoint")
            if edge.source == edge.target:
                raise GraphValidationError(f"Self-edge on node {edge.source}", edge.source)

    def __len__(self):
        return len(self.nodes)

    def sorted_edges(self) -> List[DirectedEdge]:
        return sorted(self.edges)

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        for node in self.nodes:
            g.add_node(node.id, kind=node.kind.value, label=node.label)
        g.add_edges_from((e.source, e.target) for e in self.edges)
        return g

    def validate(self) -> 'ModalityGraph':
        """Check the modality-specific invariants"""
        n = len(self.nodes)
        if self.modality == Modality.VISUAL:
            if len(self.edges) != n * (n - 1):
                raise GraphValidationError(f"Visual graph over {n} nodes must have {n * (n - 1)} edges")
        elif self.modality == Modality.QUESTION:
            if n and not nx.is_arborescence(self.to_networkx()):
                raise GraphValidationError('Question graph is not a tree')
        else:
            g = self.to_networkx()
            for node in self.nodes:
                preds = [self.nodes[p].kind for p in g.predecessors(node.id)]
                succs = [self.nodes[s].kind for s in g.successors(node.id)]
                if node.kind == NodeKind.RELATION:
                    if NodeKind.OBJECT not in preds or NodeKind.OBJECT not in succs:
                        raise GraphValidationError(f"Relation node {node.id} lacks an object endpoint", node.id)
                elif node.kind == NodeKind.ATTRIBUTE and not preds:
                    raise GraphValidationError(f"Attribute node {node.id} has no owner", node.id)
        return self


@dataclass(frozen=True)
class AdjacencyMatrix:
    """
    N x N binary matrix; entry (i, j) = 1 iff edge i -> j
    """
    entries: np.ndarray

    def __post_init__(self):
        m = self.entries
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GraphValidationError(f"Adjacency matrix must be square, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise GraphValidationError('Adjacency entries must be 0 or 1')

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_edges(cls, size: int, edges) -> 'AdjacencyMatrix':
        m = np.zeros((size, size), dtype=np.int8)
        for e in edges:
            m[e.source, e.target] = 1
        return cls(m)

    def edge_set(self) -> FrozenSet[DirectedEdge]:
        rows, cols = np.nonzero(self.entries)
        return frozenset(DirectedEdge(int(i), int(j)) for i, j in zip(rows, cols))

    def as_float(self) -> np.ndarray:
        return self.entries.astype(np.float64)

    def to_list(self) -> List[List[int]]:
        return self.entries.astype(int).tolist()

    def __eq__(self, other):
        return isinstance(other, AdjacencyMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())


# ---------------------------------------------------------------------------
# Input schemas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelCandidate:
    label: str
    score: float


@dataclass(frozen=True)
class SceneObject:
    box_id: int
    bbox: Tuple[float, float, float, float]  # x, y, w, h in pixels
    candidates: Tuple[LabelCandidate, ...]
    ground_truth: Optional[str] = None
    attributes: Tuple[str, ...] = ()
    feature: Optional[Tuple[float, ...]] = None

    @property
    def top_label(self) -> str:
        return self.candidates[0].label

    def candidate_labels(self, k: Optional[int] = None) -> List[str]:
        labels = [c.label for c in self.candidates]
        return labels if k is None else labels[:k]

    def ground_truth_index(self, k: Optional[int] = None) -> Optional[int]:
        labels = self.candidate_labels(k)
        if self.ground_truth is None or self.ground_truth not in labels:
            return None
        return labels.index(self.ground_truth)


@dataclass(frozen=True)
class SceneRelation:
    subject: int
    predicate: str
    object: int


@dataclass(frozen=True)
class SceneDescription:
    """
    A detected scene: boxes with top-K label candidates, attributes and relations
    """
    image_id: str
    width: float
    height: float
    objects: Tuple[SceneObject, ...]
    relations: Tuple[SceneRelation, ...] = ()

    def __post_init__(self):
        seen = set()
        for obj in self.objects:
            if obj.box_id in seen:
                raise DataFormatError(f"Duplicate box id {obj.box_id}", field='objects')
            seen.add(obj.box_id)
            x, y, w, h = obj.bbox
            if w < 0 or h < 0 or x < 0 or y < 0 or x + w > self.width or y + h > self.height:
                raise DataFormatError(f"Box {obj.box_id} lies outside the {self.width}x{self.height} image",
                                      field='bbox')
            scores = [c.score for c in obj.candidates]
            if not scores:
                raise DataFormatError(f"Box {obj.box_id} has no label candidates", field='candidates')
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise DataFormatError(f"Box {obj.box_id} candidate scores are not descending", field='candidates')

    def box(self, box_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.box_id == box_id:
                return obj
        raise KeyError(box_id)

    def with_objects(self, objects) -> 'SceneDescription':
        return SceneDescription(self.image_id, self.width, self.height, tuple(objects), self.relations)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SceneDescription':
        try:
            objects = []
            for raw in data['objects']:
                candidates = tuple(LabelCandidate(str(c['label']), float(c['score'])) for c in raw['candidates'])
                feature = raw.get('feature')
                objects.append(SceneObject(
                    box_id=int(raw['box_id']),
                    bbox=tuple(float(v) for v in raw['bbox']),
                    candidates=candidates,
                    ground_truth=raw.get('ground_truth'),
                    attributes=tuple(raw.get('attributes', ())),
                    feature=tuple(float(v) for v in feature) if feature is not None else None,
                ))
            relations = tuple(
                SceneRelation(int(r['subject']), str(r['predicate']), int(r['object']))
                for r in data.get('relations', ())
            )
            objects.sort(key=lambda o: o.box_id)
            return cls(str(data['image_id']), float(data['width']), float(data['height']),
                       tuple(objects), relations)
        except KeyError as e:
            raise DataFormatError('Missing key in scene description', field=str(e.args[0])) from e
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed scene description: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        objects = []
        for obj in self.objects:
            raw = {
                'box_id': obj.box_id,
                'bbox': list(obj.bbox),
                'candidates': [{'label': c.label, 'score': c.score} for c in obj.candidates],
                'ground_truth': obj.ground_truth,
                'attributes': list(obj.attributes),
            }
            if obj.feature is not None:
                raw['feature'] = list(obj.feature)
            objects.append(raw)
        return {
            'image_id': self.image_id,
            'width': self.width,
            'height': self.height,
            'objects': objects,
            'relations': [{'subject': r.subject, 'predicate': r.predicate, 'object': r.object}
                          for r in self.relations],
        }


@dataclass(frozen=True)
class QuestionParse:
    """
    Tokenized question with dependency heads (-1 marks the root)
    """
    question_id: str
    tokens: Tuple[str, ...]
    heads: Tuple[int, ...]
    answer: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QuestionParse':
        try:
            tokens = tuple(str(t) for t in data['tokens'])
            heads = tuple(int(h) for h in data['heads'])
        except KeyError as e:
            raise DataFormatError('Missing key in question parse', field=str(e.args[0])) from e
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed question parse: {e}", field='heads') from e
        if len(tokens) != len(heads):
            raise DataFormatError(f"{len(tokens)} tokens but {len(heads)} heads", field='heads')
        return cls(str(data.get('question_id', '')), tokens, heads, data.get('answer'))

    def to_dict(self) -> Dict[str, Any]:
        return {'question_id': self.question_id, 'tokens': list(self.tokens),
                'heads': list(self.heads), 'answer': self.answer}
