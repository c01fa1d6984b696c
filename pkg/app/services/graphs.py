import json
import logging
from typing import Dict, List, Tuple

import numpy as np

from app.models.errors import EmptyGraphError, GraphValidationError
from app.models.graph import (
    AdjacencyMatrix,
    DirectedEdge,
    GraphNode,
    Modality,
    ModalityGraph,
    NodeKind,
    QuestionParse,
    SceneDescription,
)

logger = logging.getLogger(__name__)


def build_semantic_graph(scene: SceneDescription, k: int) -> ModalityGraph:
    """
    Build the semantic graph of a scene.

    Node order: objects (by box id), two coordinate corners per box, merged
    attributes (lexicographic), merged relations (lexicographic). Object nodes
    are never merged; each carries the box's top-k candidate labels, the
    labels its SuperNode fuses.
    """
    if k < 1:
        raise GraphValidationError(f"k must be >= 1, got {k}")
    if not scene.objects:
        logger.error(f"Scene {scene.image_id} has no objects")
        raise EmptyGraphError(f"Scene {scene.image_id} has no objects")

    box_ids = {obj.box_id for obj in scene.objects}
    for rel in scene.relations:
        for endpoint in (rel.subject, rel.object):
            if endpoint not in box_ids:
                logger.error(f"Relation {rel} references missing box {endpoint}")
                raise GraphValidationError(
                    f"Relation '{rel.predicate}' references missing box {endpoint}", endpoint
                )

    nodes: List[GraphNode] = []
    edges = set()
    object_node: Dict[int, int] = {}

    for obj in scene.objects:
        object_node[obj.box_id] = len(nodes)
        nodes.append(GraphNode(len(nodes), NodeKind.OBJECT, obj.top_label, obj.box_id,
                               tuple(obj.candidate_labels(k))))

    for obj in scene.objects:
        x, y, w, h = obj.bbox
        corners = ((x / scene.width, y / scene.height),
                   ((x + w) / scene.width, (y + h) / scene.height))
        for corner in corners:
            idx = len(nodes)
            nodes.append(GraphNode(idx, NodeKind.COORDINATE_CORNER, corner, obj.box_id))
            edges.add(DirectedEdge(object_node[obj.box_id], idx))

    attribute_node: Dict[str, int] = {}
    for label in sorted({a for obj in scene.objects for a in obj.attributes}):
        attribute_node[label] = len(nodes)
        nodes.append(GraphNode(len(nodes), NodeKind.ATTRIBUTE, label))
    for obj in scene.objects:
        for label in obj.attributes:
            edges.add(DirectedEdge(object_node[obj.box_id], attribute_node[label]))

    relation_node: Dict[str, int] = {}
    for label in sorted({r.predicate for r in scene.relations}):
        relation_node[label] = len(nodes)
        nodes.append(GraphNode(len(nodes), NodeKind.RELATION, label))
    for rel in scene.relations:
        p = relation_node[rel.predicate]
        edges.add(DirectedEdge(object_node[rel.subject], p))
        edges.add(DirectedEdge(p, object_node[rel.object]))

    graph = ModalityGraph(tuple(nodes), frozenset(edges), Modality.SEMANTIC)
    logger.debug(f"Semantic graph for {scene.image_id}: {len(nodes)} nodes, {len(edges)} edges")
    return graph.validate()


def build_visual_graph(scene: SceneDescription) -> ModalityGraph:
    """Fully connected graph over the detected boxes"""
    if not scene.objects:
        logger.error(f"Scene {scene.image_id} has no objects")
        raise EmptyGraphError(f"Scene {scene.image_id} has no objects")
    nodes = tuple(GraphNode(i, NodeKind.OBJECT, obj.top_label, obj.box_id)
                  for i, obj in enumerate(scene.objects))
    n = len(nodes)
    edges = frozenset(DirectedEdge(i, j) for i in range(n) for j in range(n) if i != j)
    return ModalityGraph(nodes, edges, Modality.VISUAL)


def validate_heads(heads) -> None:
    """
    Check that ``heads`` describes a tree: one root, indices in range and no
    cycle. The offending token index is attached to the error.
    """
    n = len(heads)
    if n == 0:
        raise EmptyGraphError('Question has no tokens')
    roots = [i for i, h in enumerate(heads) if h == -1]
    if len(roots) != 1:
        index = roots[1] if len(roots) > 1 else None
        raise GraphValidationError(f"Dependency heads must have exactly one root, found {len(roots)}", index)
    for i, h in enumerate(heads):
        if h != -1 and not 0 <= h < n:
            raise GraphValidationError(f"Head of token {i} is out of range: {h}", i)
        if h == i:
            raise GraphValidationError(f"Token {i} is its own head", i)

    # union-find over the child->parent edges; a repeated union is a cycle
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for child, head in enumerate(heads):
        if head == -1:
            continue
        a, b = find(child), find(head)
        if a == b:
            raise GraphValidationError(f"Dependency heads contain a cycle through token {child}", child)
        parent[a] = b


def build_question_graph(parse: QuestionParse) -> ModalityGraph:
    """One node per token, edge parent -> child for every non-root token"""
    try:
        validate_heads(parse.heads)
    except GraphValidationError as e:
        logger.error(f"Question {parse.question_id}: {e}")
        raise
    nodes = tuple(GraphNode(i, NodeKind.QUESTION_TOKEN, token) for i, token in enumerate(parse.tokens))
    edges = frozenset(DirectedEdge(head, child) for child, head in enumerate(parse.heads) if head != -1)
    return ModalityGraph(nodes, edges, Modality.QUESTION)


def graph_to_sequence(g: ModalityGraph) -> Tuple[List[GraphNode], AdjacencyMatrix]:
    return list(g.nodes), AdjacencyMatrix.from_edges(len(g.nodes), g.edges)


def symmetrize_with_self_loops(a: AdjacencyMatrix) -> AdjacencyMatrix:
    m = a.entries
    out = np.maximum(np.maximum(m, m.T), np.eye(a.size, dtype=m.dtype))
    return AdjacencyMatrix(out.astype(np.int8))


def sequence_to_json(nodes: List[GraphNode], adjacency: AdjacencyMatrix) -> str:
    """Serialized form written by the convert command"""
    return json.dumps({'nodes': [node.to_dict() for node in nodes],
                       'adjacency': adjacency.to_list()}, sort_keys=True)


def sequence_from_json(text: str) -> Tuple[List[dict], AdjacencyMatrix]:
    data = json.loads(text)
    return data['nodes'], AdjacencyMatrix(np.asarray(data['adjacency'], dtype=np.int8))


def triplet_paths_preserved(scene: SceneDescription, graph: ModalityGraph) -> bool:
    """
    True when every relation (s, p, o) of the scene survives merging as a
    path s -> p-node -> o in the semantic graph
    """
    nx_graph = graph.to_networkx()
    object_node = {node.source_box: node.id for node in graph.nodes if node.kind == NodeKind.OBJECT}
    relation_node = {node.payload: node.id for node in graph.nodes if node.kind == NodeKind.RELATION}
    for rel in scene.relations:
        s, p, o = object_node[rel.subject], relation_node[rel.predicate], object_node[rel.object]
        if not (nx_graph.has_edge(s, p) and nx_graph.has_edge(p, o)):
            return False
    return True
