"""
Graph-guided attention and the dual-stream encoder built on it.

Att_g(Q, K, V, G) = h(softmax(QK^T / sqrt(d_k)) * G) V, where h divides every
row by its sum. G changes per layer following the stage schedule.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.models.errors import DimensionError, DomainError
from app.models.graph import AdjacencyMatrix
from app.models.transformer import (
    AttentionRecord,
    ConstraintGraph,
    ModelOutputs,
    Stage,
    StageSchedule,
    StreamConfig,
    StreamResult,
)
from app.services.numerics import (
    ParameterRegistry,
    Tensor,
    add,
    add_bias,
    add_scalars,
    concat_cols,
    concat_rows,
    cross_entropy,
    elementwise_mul,
    gelu,
    layer_norm_rows,
    matmul,
    row_normalize,
    scale,
    slice_cols,
    softmax_rows,
    take_rows,
    tensor,
    transpose,
)

logger = logging.getLogger(__name__)

MaskLike = Union[ConstraintGraph, np.ndarray]

IMAGE_TYPE, QUESTION_TYPE, SPECIAL_TYPE = 0, 1, 2


def _mask_array(g: MaskLike) -> np.ndarray:
    return g.mask if isinstance(g, ConstraintGraph) else np.asarray(g, dtype=np.float64)


def _adjacency_array(a: Union[AdjacencyMatrix, np.ndarray]) -> np.ndarray:
    return a.as_float() if isinstance(a, AdjacencyMatrix) else np.asarray(a, dtype=np.float64)


def scaled_dot_product_attention(q_mat: Tensor, k_mat: Tensor, v_mat: Tensor) -> Tuple[Tensor, Tensor]:
    """Unguided attention: softmax(QK^T / sqrt(d_k)) V"""
    if q_mat.shape[1] != k_mat.shape[1]:
        raise DimensionError(f"Query width {q_mat.shape[1]} differs from key width {k_mat.shape[1]}")
    scores = scale(matmul(q_mat, transpose(k_mat)), 1.0 / math.sqrt(q_mat.shape[1]))
    weights = softmax_rows(scores)
    return matmul(weights, v_mat), weights


def guided_attention(q_mat: Tensor, k_mat: Tensor, v_mat: Tensor, g: MaskLike,
                     epsilon: float = 1e-9) -> Tuple[Tensor, Tensor]:
    """
    Returns (output, weights). weights(i, j) is zero wherever g(i, j) is zero
    and every row sums to 1 unless its masked mass fell below epsilon.
    """
    mask = _mask_array(g)
    n = q_mat.shape[0]
    if k_mat.shape[0] != v_mat.shape[0] or mask.shape != (n, k_mat.shape[0]):
        logger.error(f"guided_attention: q {q_mat.shape}, k {k_mat.shape}, v {v_mat.shape}, g {mask.shape}")
        raise DimensionError(f"guided_attention: mask {list(mask.shape)} does not fit "
                             f"q {list(q_mat.shape)} / k {list(k_mat.shape)} / v {list(v_mat.shape)}")
    if q_mat.shape[1] != k_mat.shape[1]:
        raise DimensionError(f"Query width {q_mat.shape[1]} differs from key width {k_mat.shape[1]}")
    scores = scale(matmul(q_mat, transpose(k_mat)), 1.0 / math.sqrt(q_mat.shape[1]))
    weights = row_normalize(elementwise_mul(softmax_rows(scores), tensor(mask)), epsilon)
    return matmul(weights, v_mat), weights


def compose_constraint(stage: Stage, a_modality, a_q, special_positions: Sequence[int] = ()) -> ConstraintGraph:
    """
    Assemble G from its four regions for one stage. The diagonal is always
    enabled; rows and columns of ``special_positions`` are all ones.
    """
    a_img = _adjacency_array(a_modality)
    a_qst = _adjacency_array(a_q)
    if a_img.ndim != 2 or a_img.shape[0] != a_img.shape[1] or a_qst.ndim != 2 or a_qst.shape[0] != a_qst.shape[1]:
        raise DimensionError(f"compose_constraint: adjacency blocks must be square, got "
                             f"{list(a_img.shape)} and {list(a_qst.shape)}")
    v, q = a_img.shape[0], a_qst.shape[0]
    n = v + q
    mask = np.zeros((n, n))
    if stage == Stage.QUESTION_ONLY:
        mask[v:, v:] = a_qst
    elif stage == Stage.CROSS_MODALITY:
        mask[:v, v:] = 1.0
        mask[v:, :v] = 1.0
    elif stage == Stage.FULL:
        mask[:v, :v] = a_img
        mask[v:, v:] = a_qst
        mask[:v, v:] = 1.0
        mask[v:, :v] = 1.0
    else:
        raise DomainError(f"Unknown stage {stage}")
    np.fill_diagonal(mask, 1.0)
    for pos in special_positions:
        if not 0 <= pos < n:
            raise DimensionError(f"Special position {pos} outside a {n}-long sequence")
        mask[pos, :] = 1.0
        mask[:, pos] = 1.0
    return ConstraintGraph(mask, v, q)


def all_ones_constraint(v: int, q: int) -> ConstraintGraph:
    return ConstraintGraph(np.ones((v + q, v + q)), v, q)


def lift_adjacency(a) -> np.ndarray:
    """
    Prepend one special position (CLS on the image side, SEP on the question
    side) whose row and column are all ones
    """
    inner = _adjacency_array(a)
    n = inner.shape[0] + 1
    lifted = np.ones((n, n))
    lifted[1:, 1:] = inner
    return lifted


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class EncoderLayer:
    """
    H guided-attention heads sharing one G, output projection, residual +
    layer norm, then a GELU feed-forward block with residual + layer norm
    """
    def __init__(self, registry: ParameterRegistry, prefix: str, d_model: int, heads: int, ff_width: int):
        self.heads = heads
        self.d_k = d_model // heads
        self.wq = registry.glorot(f"{prefix}.wq", d_model, d_model)
        self.bq = registry.zeros(f"{prefix}.bq", (1, d_model))
        self.wk = registry.glorot(f"{prefix}.wk", d_model, d_model)
        self.bk = registry.zeros(f"{prefix}.bk", (1, d_model))
        self.wv = registry.glorot(f"{prefix}.wv", d_model, d_model)
        self.bv = registry.zeros(f"{prefix}.bv", (1, d_model))
        self.wo = registry.glorot(f"{prefix}.wo", d_model, d_model)
        self.bo = registry.zeros(f"{prefix}.bo", (1, d_model))
        self.ln1_g = registry.ones(f"{prefix}.ln1_g", (1, d_model))
        self.ln1_b = registry.zeros(f"{prefix}.ln1_b", (1, d_model))
        self.ff_w1 = registry.glorot(f"{prefix}.ff_w1", d_model, ff_width)
        self.ff_b1 = registry.zeros(f"{prefix}.ff_b1", (1, ff_width))
        self.ff_w2 = registry.glorot(f"{prefix}.ff_w2", ff_width, d_model)
        self.ff_b2 = registry.zeros(f"{prefix}.ff_b2", (1, d_model))
        self.ln2_g = registry.ones(f"{prefix}.ln2_g", (1, d_model))
        self.ln2_b = registry.zeros(f"{prefix}.ln2_b", (1, d_model))

    def __call__(self, x: Tensor, g: MaskLike, epsilon: float = 1e-9) -> Tuple[Tensor, List[Tensor]]:
        return encoder_layer(x, g, self, epsilon)


def encoder_layer(x: Tensor, g: MaskLike, params: EncoderLayer, epsilon: float = 1e-9
                  ) -> Tuple[Tensor, List[Tensor]]:
    q_all = add_bias(matmul(x, params.wq), params.bq)
    k_all = add_bias(matmul(x, params.wk), params.bk)
    v_all = add_bias(matmul(x, params.wv), params.bv)
    outputs, weights = [], []
    for h in range(params.heads):
        lo, hi = h * params.d_k, (h + 1) * params.d_k
        out, w = guided_attention(slice_cols(q_all, lo, hi), slice_cols(k_all, lo, hi),
                                  slice_cols(v_all, lo, hi), g, epsilon)
        outputs.append(out)
        weights.append(w)
    merged = outputs[0] if len(outputs) == 1 else concat_cols(outputs)
    attended = add_bias(matmul(merged, params.wo), params.bo)
    hidden = layer_norm_rows(add(x, attended), params.ln1_g, params.ln1_b)
    ff = add_bias(matmul(gelu(add_bias(matmul(hidden, params.ff_w1), params.ff_b1)), params.ff_w2), params.ff_b2)
    return layer_norm_rows(add(hidden, ff), params.ln2_g, params.ln2_b), weights


@dataclass(frozen=True)
class StreamLayout:
    """Where things sit in an assembled [CLS] image [SEP] question sequence"""
    v: int  # image side length, CLS included
    q: int  # question side length, SEP included
    cls_position: int
    sep_position: int

    @property
    def special_positions(self) -> Tuple[int, int]:
        return (self.cls_position, self.sep_position)

    @property
    def size(self) -> int:
        return self.v + self.q

    def image_positions(self) -> range:
        return range(1, self.v)

    def question_positions(self) -> range:
        return range(self.v + 1, self.v + self.q)


class StreamEmbeddings:
    """CLS/SEP vectors and the learned position and type tables of one stream"""

    def __init__(self, registry: ParameterRegistry, prefix: str, d_model: int, max_positions: int):
        self.max_positions = max_positions
        self.cls = registry.normal(f"{prefix}.cls", (1, d_model))
        self.sep = registry.normal(f"{prefix}.sep", (1, d_model))
        self.position = registry.normal(f"{prefix}.position", (max_positions, d_model))
        self.type = registry.normal(f"{prefix}.type", (3, d_model))


def assemble_stream_input(image_features: Tensor, question_features: Tensor, embeddings: StreamEmbeddings,
                          image_positions: Optional[Sequence[int]] = None) -> Tuple[Tensor, StreamLayout]:
    """
    [CLS] + image + [SEP] + question with learned position and type embeddings.
    ``image_positions`` optionally reassigns the position ids of the image nodes.
    """
    n_img, n_q = image_features.shape[0], question_features.shape[0]
    if n_img == 0 or n_q == 0:
        raise DimensionError(f"Both sides need at least one node (image {n_img}, question {n_q})")
    total = n_img + n_q + 2
    if total > embeddings.max_positions:
        logger.error(f"Sequence of {total} exceeds {embeddings.max_positions} positions")
        raise DimensionError(f"Sequence length {total} exceeds max_positions={embeddings.max_positions}")
    layout = StreamLayout(v=n_img + 1, q=n_q + 1, cls_position=0, sep_position=n_img + 1)

    if image_positions is None:
        image_positions = list(range(1, n_img + 1))
    elif sorted(image_positions) != list(range(1, n_img + 1)):
        raise DimensionError('image_positions must be a permutation of 1..V\'')
    position_ids = [0] + list(image_positions) + list(range(n_img + 1, total))
    type_ids = [SPECIAL_TYPE] + [IMAGE_TYPE] * n_img + [SPECIAL_TYPE] + [QUESTION_TYPE] * n_q

    x = concat_rows([embeddings.cls, image_features, embeddings.sep, question_features])
    x = add(x, take_rows(embeddings.position, position_ids))
    x = add(x, take_rows(embeddings.type, type_ids))
    return x, layout


class StreamEncoder:
    """
    One transformer stream: embeddings, L guided encoder layers and the
    answer head applied to the CLS output
    """
    def __init__(self, registry: ParameterRegistry, prefix: str, config: StreamConfig):
        self.name = prefix
        self.config = config
        self.embeddings = StreamEmbeddings(registry, prefix, config.d_model, config.max_positions)
        self.layers = [EncoderLayer(registry, f"{prefix}.layer{i}", config.d_model, config.heads, config.ff_width)
                       for i in range(config.layers)]
        self.head_w = registry.glorot(f"{prefix}.head.w", config.d_model, config.answers)
        self.head_b = registry.zeros(f"{prefix}.head.b", (1, config.answers))


def stream_constraints(schedule: StageSchedule, a_image, a_q, layout: StreamLayout,
                       guided: bool = True) -> List[ConstraintGraph]:
    """G for every layer; unguided streams get all-ones masks"""
    if not guided:
        return [all_ones_constraint(layout.v, layout.q)] * len(schedule)
    lifted_img, lifted_q = lift_adjacency(a_image), lift_adjacency(a_q)
    if lifted_img.shape[0] != layout.v or lifted_q.shape[0] != layout.q:
        raise DimensionError(f"Adjacency sizes {lifted_img.shape[0] - 1}/{lifted_q.shape[0] - 1} do not match "
                             f"the {layout.v - 1} image and {layout.q - 1} question nodes")
    cache = {}
    graphs = []
    for stage in schedule.stages:
        if stage not in cache:
            cache[stage] = compose_constraint(stage, lifted_img, lifted_q, layout.special_positions)
        graphs.append(cache[stage])
    return graphs


def run_stream(stream: str, encoder: StreamEncoder, image_features: Tensor, question_features: Tensor,
               a_image, a_q, schedule: StageSchedule, guided: bool = True,
               image_positions: Optional[Sequence[int]] = None, record: bool = True) -> StreamResult:
    """
    Run L encoder layers with per-layer G; pool at the CLS position and apply
    the stream's answer head
    """
    x, layout = assemble_stream_input(image_features, question_features, encoder.embeddings, image_positions)
    graphs = stream_constraints(schedule, a_image, a_q, layout, guided)
    records = []
    for i, (layer, g) in enumerate(zip(encoder.layers, graphs)):
        x, weights = layer(x, g, encoder.config.epsilon)
        if record:
            for h, w in enumerate(weights):
                records.append(AttentionRecord(stream, i, h, schedule[i], w.data, g.mask, layout.v))
    pooled = take_rows(x, [layout.cls_position])
    logits = add_bias(matmul(pooled, encoder.head_w), encoder.head_b)
    return StreamResult(pooled=pooled, logits=logits, attention=records, hidden=x)


class FusionHead:
    """Early fusion: affine head on [pooled_v ; pooled_s]"""

    def __init__(self, registry: ParameterRegistry, prefix: str, d_model: int, answers: int):
        self.w = registry.glorot(f"{prefix}.w", 2 * d_model, answers)
        self.b = registry.zeros(f"{prefix}.b", (1, answers))


def fuse_and_classify(result_v: StreamResult, result_s: StreamResult, head: FusionHead,
                      names: Tuple[str, str] = ('visual', 'semantic')) -> ModelOutputs:
    fused = concat_cols([result_v.pooled, result_s.pooled])
    f_f = add_bias(matmul(fused, head.w), head.b)
    return ModelOutputs(
        f_v=result_v.logits,
        f_s=result_s.logits,
        f_f=f_f,
        attention={names[0]: result_v.attention, names[1]: result_s.attention},
        row_labels={names[0]: result_v.row_labels, names[1]: result_s.row_labels},
    )


def answer_distribution(outputs: ModelOutputs, fusion: str = 'late') -> np.ndarray:
    """
    Late fusion averages the softmax of every available head; early fusion
    uses the fused head alone when present
    """
    heads = outputs.heads()
    if not heads:
        raise DomainError('ModelOutputs carry no logits')
    if fusion == 'early' and 'f_f' in heads:
        chosen = [heads['f_f']]
    else:
        chosen = list(heads.values())
    probs = []
    for logits in chosen:
        z = logits.data[0] - logits.data[0].max()
        e = np.exp(z)
        probs.append(e / e.sum())
    return np.mean(probs, axis=0)


def predict(outputs: ModelOutputs, fusion: str = 'late') -> int:
    return int(np.argmax(answer_distribution(outputs, fusion)))


def total_loss(outputs: ModelOutputs, answer_index: int, single_loss: bool = False) -> Tensor:
    """
    CE(f_v) + CE(f_s) + CE(f_f); ``single_loss`` keeps only the fused term
    """
    heads = outputs.heads()
    if single_loss:
        if 'f_f' not in heads:
            raise DomainError('single-loss training needs the fused head f_f')
        return cross_entropy(heads['f_f'], answer_index)
    return add_scalars([cross_entropy(logits, answer_index) for logits in heads.values()])


def loss_terms(outputs: ModelOutputs, answer_index: int) -> dict:
    """Per-head cross-entropy values (no graph), for logging"""
    return {name: cross_entropy(logits.detach(), answer_index).item() for name, logits in outputs.heads().items()}
