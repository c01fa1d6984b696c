"""
Synthetic grid-world VQA corpus: scenes, detector-style descriptions,
templated questions with canned dependency parses, and label corruption.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.models.errors import DataFormatError, DomainError
from app.models.graph import LabelCandidate, QuestionParse, SceneDescription, SceneObject, SceneRelation
from app.models.toy import (
    COLORS,
    NO,
    OBJECT_VOCABULARY,
    RELATIONS,
    SHAPES,
    YES,
    CorruptionSpec,
    CorruptionTally,
    Template,
    ToyInstance,
    ToyObject,
    ToyQuestion,
    ToyScene,
)
from app.services.embeddings import EmbeddingProvider, raw_visual_feature

logger = logging.getLogger(__name__)

CELL_PX = 32
BOX_MARGIN = 4
TEMPLATES = tuple(Template)
MAX_SCENE_ATTEMPTS = 1000


def _stable_seed(*parts) -> int:
    digest = hashlib.blake2b(':'.join(str(p) for p in parts).encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def _scene_is_usable(objects: List[ToyObject]) -> bool:
    shapes = [o.shape for o in objects]
    has_unique_shape = any(shapes.count(s) == 1 for s in SHAPES)
    has_two_columns = len({o.cell[1] for o in objects}) >= 2
    return has_unique_shape and has_two_columns


def generate_scene(scene_id: str, rows: int, cols: int, min_objects: int, max_objects: int,
                   rng: np.random.Generator) -> ToyScene:
    """
    Random scene with distinct (color, shape) pairs, at least one shape that
    occurs once and objects in at least two columns
    """
    combos = [(s, c) for s in SHAPES for c in COLORS]
    for _ in range(MAX_SCENE_ATTEMPTS):
        n = int(rng.integers(min_objects, max_objects + 1))
        cells = rng.choice(rows * cols, size=n, replace=False)
        picks = rng.choice(len(combos), size=n, replace=False)
        objects = [ToyObject(combos[p][0], combos[p][1], (int(cell) // cols, int(cell) % cols))
                   for cell, p in zip(cells, picks)]
        if _scene_is_usable(objects):
            return ToyScene(scene_id, rows, cols, tuple(objects))
    raise DomainError(f"Could not generate a usable scene on a {rows}x{cols} grid")


def scene_relations(scene: ToyScene) -> List[Tuple[int, str, int]]:
    """Relations between objects in adjacent columns of a row or adjacent rows of a column"""
    relations = []
    for i, a in enumerate(scene.objects):
        for j, b in enumerate(scene.objects):
            if i == j:
                continue
            (ra, ca), (rb, cb) = a.cell, b.cell
            if ra == rb and cb == ca + 1:
                relations.append((i, 'left', j))
            elif ra == rb and cb == ca - 1:
                relations.append((i, 'right', j))
            elif ca == cb and rb == ra + 1:
                relations.append((i, 'above', j))
            elif ca == cb and rb == ra - 1:
                relations.append((i, 'below', j))
    return relations


def describe_scene(scene: ToyScene, k: int, detector_top1: float, rng: np.random.Generator) -> SceneDescription:
    """
    Detector-style description: one box per object with K candidate labels.
    The ground truth sits at rank 1 with probability ``detector_top1``,
    otherwise at a uniformly random lower rank; scores halve with each rank.
    """
    if k > len(OBJECT_VOCABULARY):
        raise DomainError(f"k={k} exceeds the {len(OBJECT_VOCABULARY)}-label object vocabulary")
    objects = []
    for box_id, obj in enumerate(scene.objects):
        distractor_pool = [label for label in OBJECT_VOCABULARY if label != obj.shape]
        distractors = [distractor_pool[i] for i in rng.choice(len(distractor_pool), size=k - 1, replace=False)]
        rank = 0 if k == 1 or rng.random() < detector_top1 else int(rng.integers(1, k))
        labels = distractors[:rank] + [obj.shape] + distractors[rank:]
        r, c = obj.cell
        objects.append(SceneObject(
            box_id=box_id,
            bbox=(float(c * CELL_PX + BOX_MARGIN), float(r * CELL_PX + BOX_MARGIN),
                  float(CELL_PX - 2 * BOX_MARGIN), float(CELL_PX - 2 * BOX_MARGIN)),
            candidates=tuple(LabelCandidate(label, 0.5 ** i) for i, label in enumerate(labels)),
            ground_truth=obj.shape,
            attributes=(obj.color,),
        ))
    relations = tuple(SceneRelation(s, p, o) for s, p, o in scene_relations(scene))
    return SceneDescription(scene.scene_id, float(scene.cols * CELL_PX), float(scene.rows * CELL_PX),
                            tuple(objects), relations)


# ---------------------------------------------------------------------------
# Questions
# ---------------------------------------------------------------------------

def _existence(scene: ToyScene, rng) -> ToyQuestion:
    if rng.random() < 0.5:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        color, shape = obj.color, obj.shape
    else:
        absent = [(c, s) for s in SHAPES for c in COLORS if scene.find(c, s) is None]
        color, shape = absent[int(rng.integers(len(absent)))]
    answer = YES if scene.find(color, shape) is not None else NO
    return ToyQuestion(Template.EXISTENCE, ('is', 'there', 'a', color, shape), (-1, 0, 4, 4, 0), answer)


def _count(scene: ToyScene, rng) -> ToyQuestion:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    return ToyQuestion(Template.COUNT, ('how', 'many', shape, 'are', 'there'), (1, 2, 3, -1, 3),
                       str(scene.count(shape)))


def _attribute_query(scene: ToyScene, rng) -> ToyQuestion:
    unique = [s for s in SHAPES if scene.count(s) == 1]
    shape = unique[int(rng.integers(len(unique)))]
    obj = next(o for o in scene.objects if o.shape == shape)
    return ToyQuestion(Template.ATTRIBUTE_QUERY, ('what', 'color', 'is', 'the', shape), (1, 2, -1, 4, 2), obj.color)


def _relation_yes_no(scene: ToyScene, rng) -> ToyQuestion:
    present = {(s, p, o) for s, p, o in scene_relations(scene)}
    n = len(scene.objects)
    absent = [(s, p, o) for s in range(n) for o in range(n) if s != o for p in RELATIONS
              if (s, p, o) not in present]
    if present and (rng.random() < 0.5 or not absent):
        options = sorted(present)
    else:
        options = absent
    s, p, o = options[int(rng.integers(len(options)))]
    a, b = scene.objects[s], scene.objects[o]
    answer = YES if (s, p, o) in present else NO
    return ToyQuestion(Template.RELATION_YES_NO,
                       ('is', 'the', a.color, a.shape, p, 'the', b.color, b.shape),
                       (-1, 3, 3, 0, 3, 7, 7, 4), answer)


def _spatial_left_right(scene: ToyScene, rng) -> ToyQuestion:
    pairs = [(i, j) for i, a in enumerate(scene.objects) for j, b in enumerate(scene.objects)
             if i != j and a.cell[1] != b.cell[1]]
    i, j = pairs[int(rng.integers(len(pairs)))]
    a, b = scene.objects[i], scene.objects[j]
    answer = 'left' if a.cell[1] < b.cell[1] else 'right'
    return ToyQuestion(Template.SPATIAL_LEFT_RIGHT,
                       ('is', 'the', a.color, a.shape, 'left', 'or', 'right', 'of', 'the', b.color, b.shape),
                       (-1, 3, 3, 0, 0, 6, 4, 10, 10, 10, 4), answer)


QUESTION_BUILDERS = {
    Template.EXISTENCE: _existence,
    Template.COUNT: _count,
    Template.ATTRIBUTE_QUERY: _attribute_query,
    Template.RELATION_YES_NO: _relation_yes_no,
    Template.SPATIAL_LEFT_RIGHT: _spatial_left_right,
}


def ask(scene: ToyScene, template: Template, rng: np.random.Generator) -> ToyQuestion:
    return QUESTION_BUILDERS[template](scene, rng)


def recompute_answer(scene: ToyScene, question: ToyQuestion) -> str:
    """Answer a question again from the scene alone"""
    t = question.tokens
    if question.template == Template.EXISTENCE:
        return YES if scene.find(t[3], t[4]) is not None else NO
    if question.template == Template.COUNT:
        return str(scene.count(t[2]))
    if question.template == Template.ATTRIBUTE_QUERY:
        return next(o.color for o in scene.objects if o.shape == t[4])
    a, b = scene.find(t[2], t[3]), scene.find(t[-2], t[-1])
    if question.template == Template.RELATION_YES_NO:
        i, j = scene.objects.index(a), scene.objects.index(b)
        return YES if (i, t[4], j) in set(scene_relations(scene)) else NO
    return 'left' if a.cell[1] < b.cell[1] else 'right'


def generate_toy(n_scenes: int, questions_per_scene: int, grid: Tuple[int, int], seed: int,
                 min_objects: int = 2, max_objects: int = 5) -> List[Tuple[ToyScene, ToyQuestion]]:
    """
    Scenes and questions before detector description; templates rotate so
    the mix is balanced
    """
    rows, cols = grid
    if n_scenes < 1 or questions_per_scene < 1:
        raise DomainError('Corpus sizes must be positive')
    if rows * cols < max_objects or cols < 2 or max_objects < 2:
        logger.error(f"Grid {rows}x{cols} too small for {max_objects} objects")
        raise DomainError(f"Grid {rows}x{cols} is too small for up to {max_objects} objects in two columns")
    rng = np.random.default_rng(seed)
    pairs = []
    counter = 0
    for idx in range(n_scenes):
        scene = generate_scene(f"s{seed}-{idx}", rows, cols, max(2, min_objects), max_objects, rng)
        for _ in range(questions_per_scene):
            template = TEMPLATES[counter % len(TEMPLATES)]
            counter += 1
            pairs.append((scene, ask(scene, template, rng)))
    return pairs


def generate_corpus(n_scenes: int, questions_per_scene: int, grid: Tuple[int, int], seed: int,
                    k: int = 5, detector_top1: float = 0.6, min_objects: int = 2,
                    max_objects: int = 5) -> List[ToyInstance]:
    """Deterministic per seed"""
    pairs = generate_toy(n_scenes, questions_per_scene, grid, seed, min_objects, max_objects)
    detector_rng = np.random.default_rng(seed + 7919)
    described: Dict[str, SceneDescription] = {}
    instances = []
    for n, (scene, question) in enumerate(pairs):
        if scene.scene_id not in described:
            described[scene.scene_id] = describe_scene(scene, k, detector_top1, detector_rng)
        qid = f"{scene.scene_id}-q{n}"
        parse = QuestionParse(qid, question.tokens, question.heads, question.answer)
        instances.append(ToyInstance(qid, described[scene.scene_id], parse, question.answer, question.template))
    logger.info(f"Generated {len(instances)} instances over {len(described)} scenes (seed {seed})")
    return instances


def split_corpus(instances: Sequence[ToyInstance], seed: int,
                 fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
                 ) -> Tuple[List[ToyInstance], List[ToyInstance], List[ToyInstance]]:
    """80/10/10 by scene, so no scene straddles two splits"""
    scene_ids = sorted({inst.scene.image_id for inst in instances})
    order = np.random.default_rng(seed).permutation(len(scene_ids))
    n_train = int(round(fractions[0] * len(scene_ids)))
    n_val = int(round(fractions[1] * len(scene_ids)))
    assignment = {}
    for rank, i in enumerate(order):
        assignment[scene_ids[i]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    splits = ([], [], [])
    for inst in instances:
        splits[assignment[inst.scene.image_id]].append(inst)
    return splits


def halve(instances: Sequence[ToyInstance], seed: int) -> Tuple[List[ToyInstance], List[ToyInstance]]:
    """Random halves by scene"""
    scene_ids = sorted({inst.scene.image_id for inst in instances})
    order = np.random.default_rng(seed).permutation(len(scene_ids))
    first = {scene_ids[i] for i in order[:len(scene_ids) // 2]}
    return ([i for i in instances if i.scene.image_id in first],
            [i for i in instances if i.scene.image_id not in first])


def answer_vocabulary(instances: Iterable[ToyInstance]) -> List[str]:
    return sorted({inst.answer for inst in instances})


def unique_scenes(instances: Iterable[ToyInstance]) -> List[SceneDescription]:
    seen = {}
    for inst in instances:
        seen.setdefault(inst.scene.image_id, inst.scene)
    return list(seen.values())


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def corrupt_scene(scene: SceneDescription, spec: CorruptionSpec, tally: Optional[CorruptionTally] = None,
                  vocabulary: Sequence[str] = OBJECT_VOCABULARY) -> SceneDescription:
    """
    Keep each box's effective (ground-truth) label with probability p, else
    replace it by a uniformly drawn incorrect label
    """
    rng = np.random.default_rng(_stable_seed(spec.seed, scene.image_id))
    objects = []
    for obj in scene.objects:
        if obj.ground_truth is None:
            raise DomainError(f"Box {obj.box_id} of {scene.image_id} has no ground-truth label to corrupt")
        keep = spec.p >= 1.0 or rng.random() < spec.p
        if tally is not None:
            tally.total += 1
            tally.kept += int(keep)
        if keep:
            objects.append(obj)
            continue
        wrong = [label for label in vocabulary if label != obj.ground_truth]
        label = wrong[int(rng.integers(len(wrong)))]
        objects.append(SceneObject(obj.box_id, obj.bbox, obj.candidates, label, obj.attributes, obj.feature))
    return scene.with_objects(objects)


def attach_visual_features(scene: SceneDescription, provider: EmbeddingProvider, sigma: float,
                           seed: int) -> SceneDescription:
    """
    Materialize synthetic visual features into the description so later
    label edits leave the visual path untouched
    """
    objects = []
    for obj in scene.objects:
        feature = raw_visual_feature(obj, provider.dim, provider, sigma, seed, scene.image_id)
        objects.append(SceneObject(obj.box_id, obj.bbox, obj.candidates, obj.ground_truth, obj.attributes,
                                   tuple(float(v) for v in feature)))
    return scene.with_objects(objects)


def corrupt_corpus(instances: Sequence[ToyInstance], spec: CorruptionSpec, provider: EmbeddingProvider,
                   sigma: float, seed: int) -> Tuple[List[ToyInstance], float]:
    """Corrupt every scene once; returns instances and the realized kept fraction"""
    tally = CorruptionTally()
    corrupted: Dict[str, SceneDescription] = {}
    out = []
    for inst in instances:
        image_id = inst.scene.image_id
        if image_id not in corrupted:
            with_features = attach_visual_features(inst.scene, provider, sigma, seed)
            corrupted[image_id] = corrupt_scene(with_features, spec, tally)
        out.append(ToyInstance(inst.instance_id, corrupted[image_id], inst.question, inst.answer,
                               inst.template, inst.annotations))
    logger.info(f"Corruption p={spec.p}: kept {tally.kept}/{tally.total} labels ({tally.kept_fraction:.3f})")
    return out, tally.kept_fraction


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_corpus(instances: Iterable[ToyInstance], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        for inst in instances:
            handle.write(json.dumps(inst.to_dict(), sort_keys=True) + '\n')


def read_corpus(path) -> List[ToyInstance]:
    instances = []
    with open(path, 'r', encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"Invalid JSON: {e.msg}", line=line_no) from e
            instances.append(ToyInstance.from_dict(data, line=line_no))
    return instances


SPLIT_FILES = ('train.jsonl', 'val.jsonl', 'test.jsonl')


def write_splits(instances: Sequence[ToyInstance], data_dir, seed: int) -> Dict[str, int]:
    counts = {}
    for name, split in zip(SPLIT_FILES, split_corpus(instances, seed)):
        write_corpus(split, Path(data_dir) / name)
        counts[name] = len(split)
    logger.info(f"Wrote corpus splits to {data_dir}: {counts}")
    return counts


def read_split(data_dir, name: str) -> List[ToyInstance]:
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"Corpus split not found: {path}")
    return read_corpus(path)
