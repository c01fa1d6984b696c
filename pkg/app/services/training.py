"""
SA-VQA model assembly per ablation variant, the training loop, evaluation,
the label-quality sweep and attention dumps.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.models.checkpoint import Checkpoint
from app.models.errors import ConfigError, DomainError, VocabularyError
from app.models.graph import GraphNode, NodeKind, SceneDescription, SceneObject
from app.models.run_config import RunConfig, normalize_variant
from app.models.toy import CorruptionSpec, MetricsReport, Template, ToyInstance
from app.models.transformer import ModelOutputs, StageSchedule, StreamConfig, StreamResult
from app.services.corpus import answer_vocabulary, corrupt_corpus, generate_corpus, halve, split_corpus
from app.services.embeddings import (
    AffineProjection,
    EmbeddingProvider,
    LabelMLP,
    create_provider,
    embed_label_nodes,
    raw_visual_feature,
)
from app.services.graphs import (
    build_question_graph,
    build_semantic_graph,
    build_visual_graph,
    graph_to_sequence,
    symmetrize_with_self_loops,
)
from app.services.guided_transformer import (
    FusionHead,
    StreamEncoder,
    fuse_and_classify,
    loss_terms,
    predict,
    run_stream,
    total_loss,
)
from app.services.metrics import exact_match_accuracy, vqa_v2_report
from app.services.numerics import (
    Adam,
    ParameterRegistry,
    Tensor,
    backward,
    concat_rows,
    matmul,
    scale,
    take_rows,
    tensor,
)
from app.services.sns import SNSModel

logger = logging.getLogger(__name__)

# Streams each variant runs; a trailing '2' marks a second, independently
# initialised stream of the same modality
VARIANT_STREAMS: Dict[str, Tuple[str, ...]] = {
    'full': ('visual', 'semantic'),
    'no_guidance': ('visual', 'semantic'),
    'single_loss': ('visual', 'semantic'),
    'top1': ('visual', 'semantic'),
    'even_topk': ('visual', 'semantic'),
    'semantic_only': ('semantic',),
    'visual_only': ('visual',),
    'two_semantic': ('semantic', 'semantic2'),
    'two_visual': ('visual', 'visual2'),
    'one_transformer': ('joint',),
}

LOG_COLUMNS = ('epoch', 'loss_v', 'loss_s', 'loss_f', 'total', 'val_acc')
SPECIAL_ROW_LABELS = ('[CLS]', '[SEP]')


@dataclass
class PreparedInstance:
    """
    Everything about one instance that does not depend on parameters
    """
    instance_id: str
    template: Template
    answer: str
    answer_index: Optional[int]
    tokens: List[str]
    a_q: np.ndarray
    visual_raw: np.ndarray  # [n_boxes x d_v]
    visual_labels: List[str]
    a_v: np.ndarray
    semantic_nodes: List[GraphNode]
    a_s: np.ndarray
    object_labels: List[List[str]] = field(default_factory=list)
    object_weights: List[np.ndarray] = field(default_factory=list)


def block_diagonal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[:a.shape[0], :a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def _modality(stream: str) -> str:
    return stream.rstrip('2')


class SAVQAModel:
    """
    Label embedding MLPs, visual and coordinate projections, one guided
    transformer per stream and the early-fusion head
    """
    def __init__(self, config: RunConfig, variant: str, answers: Sequence[str],
                 provider: Optional[EmbeddingProvider] = None, sns: Optional[SNSModel] = None,
                 effective_labels: bool = False):
        self.config = config
        self.variant = normalize_variant(variant)
        self.answers = list(answers)
        if not self.answers:
            raise VocabularyError('Answer vocabulary is empty')
        self.provider = provider or create_provider(config.provider, config.d_emb, config.seed, config.vectors_path)
        self.sns = sns
        self.effective_labels = effective_labels
        self.streams = VARIANT_STREAMS[self.variant]
        self.guided = self.variant != 'no_guidance'
        if self.guided:
            self.schedule = StageSchedule.from_split(config.stage_split)
        else:
            self.schedule = StageSchedule.all_full(config.layers)
        self._sns_cache: Dict[str, Dict[int, np.ndarray]] = {}
        self._warned_uniform = False

        d_emb, hidden, d_model = self.provider.dim, config.mlp_hidden, config.d_model
        self.registry = ParameterRegistry(config.seed)
        self.question_mlp = LabelMLP(self.registry, 'question.label_mlp', d_emb, hidden, d_model)
        self.semantic_mlp = LabelMLP(self.registry, 'semantic.label_mlp', d_emb, hidden, d_model)
        self.coordinate_proj = AffineProjection(self.registry, 'semantic.coordinate', 2, d_model)
        self.visual_proj = AffineProjection(self.registry, 'visual.projection', d_emb, d_model)
        stream_config = StreamConfig.from_run_config(config, len(self.answers))
        self.encoders = {name: StreamEncoder(self.registry, f"stream.{name}", stream_config)
                         for name in self.streams}
        self.fusion_head = None
        if len(self.streams) == 2:
            self.fusion_head = FusionHead(self.registry, 'fusion', d_model, len(self.answers))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, provider: Optional[EmbeddingProvider] = None) -> 'SAVQAModel':
        sns = SNSModel.from_state(checkpoint.sns, provider) if checkpoint.sns is not None else None
        model = cls(checkpoint.config, checkpoint.variant, checkpoint.answers, provider, sns,
                    checkpoint.effective_labels)
        model.registry.load_state_dict(checkpoint.parameters)
        return model

    @property
    def single_loss(self) -> bool:
        return self.variant == 'single_loss'

    @property
    def loss_heads(self) -> Tuple[str, ...]:
        """Heads whose cross-entropy enters the training loss"""
        if self.single_loss:
            return ('f_f',)
        if len(self.streams) == 2:
            return ('f_v', 'f_s', 'f_f')
        return ({'visual': 'f_v', 'semantic': 'f_s', 'joint': 'f_f'}[self.streams[0]],)

    # -- SuperNode weights -------------------------------------------------

    def _sns_weights(self, scene: SceneDescription) -> Dict[int, np.ndarray]:
        cached = self._sns_cache.get(scene.image_id)
        if cached is None:
            cached = self.sns.selection_weights(scene)
            self._sns_cache[scene.image_id] = cached
        return cached

    def supernode_candidates(self, scene: SceneDescription, obj: SceneObject,
                             node: GraphNode) -> Tuple[List[str], np.ndarray]:
        """Labels and weights fused into one object node"""
        if self.effective_labels:
            return [obj.ground_truth or obj.top_label], np.ones(1)
        if self.variant == 'top1':
            return [obj.top_label], np.ones(1)
        if self.variant != 'even_topk' and self.sns is not None:
            return obj.candidate_labels(self.sns.k), self._sns_weights(scene)[obj.box_id]
        if self.variant == 'full':
            raise ConfigError('The full variant requires a pretrained SNS model', key='sns')
        if self.variant != 'even_topk' and not self._warned_uniform:
            logger.warning(f"No SNS model for variant {self.variant}; using even SuperNode weights")
            self._warned_uniform = True
        labels = list(node.candidates)
        return labels, np.full(len(labels), 1.0 / len(labels))

    # -- Preparation -------------------------------------------------------

    def prepare(self, instance: ToyInstance) -> PreparedInstance:
        scene = instance.scene
        parse = instance.question
        _, a_q = graph_to_sequence(build_question_graph(parse))
        visual_graph = build_visual_graph(scene)
        _, a_v = graph_to_sequence(visual_graph)
        semantic_graph = build_semantic_graph(scene, self.config.k)
        semantic_nodes, a_s = graph_to_sequence(semantic_graph)
        visual_raw = np.stack([raw_visual_feature(obj, self.provider.dim, self.provider, self.config.noise_sigma,
                                                  self.config.seed, scene.image_id) for obj in scene.objects])
        prepared = PreparedInstance(
            instance_id=instance.instance_id,
            template=instance.template,
            answer=instance.answer,
            answer_index=self.answers.index(instance.answer) if instance.answer in self.answers else None,
            tokens=list(parse.tokens),
            a_q=symmetrize_with_self_loops(a_q).as_float(),
            visual_raw=visual_raw,
            visual_labels=[node.label for node in visual_graph.nodes],
            a_v=symmetrize_with_self_loops(a_v).as_float(),
            semantic_nodes=semantic_nodes,
            a_s=symmetrize_with_self_loops(a_s).as_float(),
        )
        objects = {obj.box_id: obj for obj in scene.objects}
        for node in semantic_nodes:
            if node.kind == NodeKind.OBJECT:
                labels, weights = self.supernode_candidates(scene, objects[node.source_box], node)
                prepared.object_labels.append(labels)
                prepared.object_weights.append(np.asarray(weights, dtype=np.float64))
        return prepared

    # -- Features ----------------------------------------------------------

    def question_features(self, prep: PreparedInstance) -> Tensor:
        return embed_label_nodes(prep.tokens, self.provider, self.question_mlp)

    def visual_features(self, prep: PreparedInstance) -> Tensor:
        return self.visual_proj(tensor(prep.visual_raw))

    def fused_object_features(self, prep: PreparedInstance) -> Tuple[Tensor, List[str], Tensor]:
        """
        f_SNS = sum_j w_j f_{n_j} per object; also returns the embedded label
        vocabulary of the instance
        """
        words: Dict[str, int] = {}
        for labels in prep.object_labels:
            for label in labels:
                words.setdefault(label, len(words))
        for node in prep.semantic_nodes:
            if node.kind in (NodeKind.ATTRIBUTE, NodeKind.RELATION):
                words.setdefault(node.payload, len(words))
        vocab = list(words)
        embedded = embed_label_nodes(vocab, self.provider, self.semantic_mlp)
        rows = [matmul(tensor(w[None, :]), take_rows(embedded, [words[l] for l in labels]))
                for labels, w in zip(prep.object_labels, prep.object_weights)]
        return concat_rows(rows), vocab, embedded

    def semantic_features(self, prep: PreparedInstance) -> Tensor:
        objects, vocab, embedded = self.fused_object_features(prep)
        index = {w: i for i, w in enumerate(vocab)}
        blocks = [objects]
        corners = [node.payload for node in prep.semantic_nodes if node.kind == NodeKind.COORDINATE_CORNER]
        if corners:
            blocks.append(self.coordinate_proj(tensor(np.asarray(corners, dtype=np.float64))))
        labelled = [index[node.payload] for node in prep.semantic_nodes
                    if node.kind in (NodeKind.ATTRIBUTE, NodeKind.RELATION)]
        if labelled:
            blocks.append(take_rows(embedded, labelled))
        return concat_rows(blocks)

    # -- Forward -----------------------------------------------------------

    def _stream_inputs(self, stream: str, prep: PreparedInstance, cache: Dict[str, Tensor]):
        modality = _modality(stream)
        if modality in ('visual', 'joint') and 'visual' not in cache:
            cache['visual'] = self.visual_features(prep)
        if modality in ('semantic', 'joint') and 'semantic' not in cache:
            cache['semantic'] = self.semantic_features(prep)
        semantic_labels = [node.label for node in prep.semantic_nodes]
        if modality == 'visual':
            return cache['visual'], prep.a_v, prep.visual_labels
        if modality == 'semantic':
            return cache['semantic'], prep.a_s, semantic_labels
        return (concat_rows([cache['visual'], cache['semantic']]), block_diagonal(prep.a_v, prep.a_s),
                prep.visual_labels + semantic_labels)

    def forward(self, prep: PreparedInstance, record: bool = False) -> ModelOutputs:
        question = self.question_features(prep)
        cache: Dict[str, Tensor] = {}
        results: List[StreamResult] = []
        for name in self.streams:
            features, adjacency, labels = self._stream_inputs(name, prep, cache)
            result = run_stream(name, self.encoders[name], features, question, adjacency, prep.a_q,
                                self.schedule, guided=self.guided, record=record)
            result.row_labels = [SPECIAL_ROW_LABELS[0]] + labels + [SPECIAL_ROW_LABELS[1]] + prep.tokens
            results.append(result)
        if self.fusion_head is not None:
            return fuse_and_classify(results[0], results[1], self.fusion_head, self.streams)
        return ModelOutputs(attention={self.streams[0]: results[0].attention},
                            row_labels={self.streams[0]: results[0].row_labels},
                            **{self.loss_heads[0]: results[0].logits})

    def loss(self, outputs: ModelOutputs, answer_index: int) -> Tensor:
        return total_loss(outputs, answer_index, single_loss=self.single_loss)

    def predict(self, prep: PreparedInstance) -> str:
        return self.answers[predict(self.forward(prep), self.config.fusion)]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.with_overrides(variant=self.variant),
            variant=self.variant,
            answers=list(self.answers),
            parameters=self.registry.state_dict(),
            sns=self.sns.to_state() if self.sns is not None and not self.effective_labels else None,
            effective_labels=self.effective_labels,
        )


def _accuracy(model: SAVQAModel, prepared: Sequence[PreparedInstance]) -> float:
    if not prepared:
        return float('nan')
    hits = sum(int(model.predict(p) == p.answer) for p in prepared)
    return hits / len(prepared)


def train_savqa(corpus: Sequence[ToyInstance], config: RunConfig, variant: Optional[str] = None,
                sns: Optional[SNSModel] = None, validation: Sequence[ToyInstance] = (),
                provider: Optional[EmbeddingProvider] = None,
                effective_labels: bool = False) -> Tuple[Checkpoint, pd.DataFrame]:
    """
    Minibatch Adam on the three-term loss (fused term only for single_loss).
    Returns the checkpoint and a per-epoch log with columns
    epoch, loss_v, loss_s, loss_f, total, val_acc.
    """
    if not corpus:
        logger.error('train_savqa called with an empty corpus')
        raise DomainError('Training corpus is empty')
    variant = normalize_variant(variant or config.variant)
    if variant == 'full' and sns is None and not effective_labels:
        logger.error('Variant full requested without a pretrained SNS model')
        raise ConfigError('The full variant requires a pretrained SNS model (--sns)', key='sns')

    model = SAVQAModel(config, variant, answer_vocabulary(corpus), provider, sns, effective_labels)
    prepared = [model.prepare(inst) for inst in corpus]
    held_out = [model.prepare(inst) for inst in validation]
    optimizer = Adam(list(model.registry), lr=config.lr)
    model.registry.zero_grad()
    order_rng = np.random.default_rng(config.seed + 3)
    logger.info(f"Training {variant} on {len(prepared)} instances, {len(model.answers)} answers, "
                f"{sum(p.data.size for p in model.registry)} parameters")

    rows = []
    for epoch in range(1, config.epochs + 1):
        sums = {'f_v': 0.0, 'f_s': 0.0, 'f_f': 0.0, 'total': 0.0}
        seen = {'f_v': 0, 'f_s': 0, 'f_f': 0}
        order = order_rng.permutation(len(prepared))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for i in batch:
                prep = prepared[i]
                outputs = model.forward(prep)
                loss = model.loss(outputs, prep.answer_index)
                for head, value in loss_terms(outputs, prep.answer_index).items():
                    sums[head] += value
                    seen[head] += 1
                sums['total'] += loss.item()
                backward(scale(loss, 1.0 / len(batch)))
            optimizer.step()
        row = {
            'epoch': epoch,
            'loss_v': sums['f_v'] / seen['f_v'] if seen['f_v'] else float('nan'),
            'loss_s': sums['f_s'] / seen['f_s'] if seen['f_s'] else float('nan'),
            'loss_f': sums['f_f'] / seen['f_f'] if seen['f_f'] else float('nan'),
            'total': sums['total'] / len(prepared),
            'val_acc': _accuracy(model, held_out),
        }
        rows.append(row)
        logger.info(f"Epoch {epoch}: loss {row['total']:.4f}, validation accuracy {row['val_acc']:.4f}")

    return model.checkpoint(), pd.DataFrame(rows, columns=list(LOG_COLUMNS))


def write_log(log: pd.DataFrame, path) -> None:
    log.to_csv(path, index=False, float_format='%.10g')


def _check_vocabulary(checkpoint: Checkpoint, corpus: Sequence[ToyInstance]) -> None:
    known = set(checkpoint.answers)
    needed = set(answer_vocabulary(corpus))
    overlap = known & needed
    if not overlap:
        logger.error(f"No overlap between checkpoint answers and corpus answers {sorted(needed)}")
        raise VocabularyError('Checkpoint answer vocabulary does not intersect the corpus answers')
    if overlap != needed:
        logger.warning(f"Answers unknown to the checkpoint: {sorted(needed - known)}")


def evaluate(checkpoint: Checkpoint, corpus: Sequence[ToyInstance], metric: str = 'exact',
             provider: Optional[EmbeddingProvider] = None) -> MetricsReport:
    """Exact-match (or VQA-v2) report of the checkpoint's late/early-fused predictions"""
    if not corpus:
        raise DomainError('Evaluation corpus is empty')
    if metric not in ('exact', 'vqa2'):
        raise ConfigError(f"Unknown metric '{metric}'; use exact or vqa2", key='metric')
    _check_vocabulary(checkpoint, corpus)
    model = SAVQAModel.from_checkpoint(checkpoint, provider)
    predictions = [model.predict(model.prepare(inst)) for inst in corpus]
    if metric == 'vqa2':
        return vqa_v2_report(predictions, corpus)
    return exact_match_accuracy(predictions, [inst.answer for inst in corpus],
                                [inst.template for inst in corpus])


SweepLevel = Union[float, str]
GROUND_TRUTH_LEVEL = 'gt'


def parse_levels(text: str) -> List[SweepLevel]:
    levels: List[SweepLevel] = []
    for item in text.split(','):
        item = item.strip().lower()
        if not item:
            continue
        if item == GROUND_TRUTH_LEVEL:
            levels.append(GROUND_TRUTH_LEVEL)
            continue
        try:
            levels.append(float(item))
        except ValueError as e:
            raise ConfigError(f"Sweep level '{item}' is neither a number nor 'gt'", key='levels') from e
    return levels


def quality_sweep(config: RunConfig, levels: Sequence[SweepLevel],
                  corpus: Optional[Sequence[ToyInstance]] = None,
                  provider: Optional[EmbeddingProvider] = None) -> pd.DataFrame:
    """
    One model per label-accuracy level. Every split is corrupted at that
    level; models train on train, validate on one half of val and are
    scored on the other half. The ground-truth level is p = 1.
    """
    for level in levels:
        if level != GROUND_TRUTH_LEVEL and not 0.0 <= float(level) <= 1.0:
            raise DomainError(f"Sweep level {level} outside [0, 1]")
    provider = provider or create_provider(config.provider, config.d_emb, config.seed, config.vectors_path)
    if corpus is None:
        corpus = generate_corpus(config.n_scenes, config.questions_per_scene, (config.grid_rows, config.grid_cols),
                                 config.seed, config.k, config.detector_top1, config.min_objects,
                                 config.max_objects)
    train, val, _ = split_corpus(corpus, config.seed)
    val_first, val_second = halve(val, config.seed)
    if not train or not val_second:
        raise DomainError('Corpus too small to split for the sweep')

    rows = []
    for level in levels:
        p = 1.0 if level == GROUND_TRUTH_LEVEL else float(level)
        spec = CorruptionSpec(p, config.seed)
        corrupted_train, kept = corrupt_corpus(train, spec, provider, config.noise_sigma, config.seed)
        corrupted_val, _ = corrupt_corpus(val_first, spec, provider, config.noise_sigma, config.seed)
        corrupted_test, _ = corrupt_corpus(val_second, spec, provider, config.noise_sigma, config.seed)
        checkpoint, log = train_savqa(corrupted_train, config, config.variant, validation=corrupted_val,
                                      provider=provider, effective_labels=True)
        report = evaluate(checkpoint, corrupted_test, provider=provider)
        rows.append({'level': level if level == GROUND_TRUTH_LEVEL else p, 'kept_fraction': kept,
                     'accuracy': report.overall, 'binary': report.binary, 'open': report.open,
                     'final_loss': float(log['total'].iloc[-1])})
        logger.info(f"Sweep level {level}: accuracy {report.overall:.4f}")
    return pd.DataFrame(rows, columns=['level', 'kept_fraction', 'accuracy', 'binary', 'open', 'final_loss'])


def dump_attention(checkpoint: Checkpoint, instance: ToyInstance,
                   provider: Optional[EmbeddingProvider] = None) -> Dict:
    """
    Last-layer cross-modality attention of every stream and head: Region 3
    (graph-node rows x question-token columns) and Region 4 (the reverse),
    special positions excluded
    """
    model = SAVQAModel.from_checkpoint(checkpoint, provider)
    outputs = model.forward(model.prepare(instance), record=True)
    last = checkpoint.config.layers - 1
    entries = []
    for stream, records in outputs.attention.items():
        labels = outputs.row_labels[stream]
        for rec in records:
            if rec.layer != last:
                continue
            v, n = rec.v, rec.weights.shape[0]
            nodes, tokens = list(range(1, v)), list(range(v + 1, n))
            for region, rows, cols in (('region3', nodes, tokens), ('region4', tokens, nodes)):
                entries.append({
                    'stream': stream,
                    'layer': rec.layer,
                    'head': rec.head,
                    'region': region,
                    'row_labels': [labels[i] for i in rows],
                    'col_labels': [labels[j] for j in cols],
                    'weights': rec.weights[np.ix_(rows, cols)].tolist(),
                })
    return {'instance_id': instance.instance_id, 'variant': checkpoint.variant, 'entries': entries}

