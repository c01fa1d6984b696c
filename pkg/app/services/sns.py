"""
SuperNode selection: learn softmax weights over each box's top-K label
candidates and fuse the candidates' semantic features with them.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.checkpoint import SNSState
from app.models.errors import DataFormatError, DomainError
from app.models.graph import SceneDescription, SceneObject
from app.models.run_config import RunConfig
from app.models.sns import SNSReport, SuperNode
from app.services.embeddings import (
    AffineProjection,
    EmbeddingProvider,
    FileEmbeddingProvider,
    LabelMLP,
    create_provider,
    embed_label_nodes,
    raw_visual_feature,
)
from app.services.numerics import (
    Adam,
    ParameterRegistry,
    Tensor,
    add_scalars,
    backward,
    concat_cols,
    cross_entropy,
    l2_norm,
    logsumexp,
    matmul,
    scale,
    softmax_rows,
    take_rows,
    tensor,
    transpose,
)

logger = logging.getLogger(__name__)


def supernode_weights(sn: SuperNode) -> Tensor:
    """w_j = softmax_j(f_{n_j} . v_i), as a [1 x K] row"""
    return softmax_rows(matmul(sn.visual, transpose(sn.features)))


def supernode_feature(sn: SuperNode, weights: Optional[Tensor] = None) -> Tensor:
    """f_SNS = sum_j w_j f_{n_j}"""
    if weights is None:
        weights = supernode_weights(sn)
    return matmul(weights, sn.features)


def _require_ground_truth(sn: SuperNode) -> int:
    if sn.ground_truth is None:
        logger.error(f"SuperNode {sn.box_index} has no ground truth")
        raise DomainError(f"SuperNode {sn.box_index} has no ground-truth candidate")
    return sn.ground_truth


def mil_nce_loss(supernodes: Sequence[SuperNode], negatives: Sequence[Tensor]) -> Tensor:
    """
    -sum_i log( sum_P exp(f.v_i) / (sum_P exp(f.v_i) + sum_N exp(f.v_i)) )
    with the top-K candidates as positives and ``negatives[i]`` ([N_i x d]) as negatives
    """
    if len(supernodes) != len(negatives):
        raise DomainError(f"{len(supernodes)} SuperNodes but {len(negatives)} negative sets")
    terms = []
    for sn, neg in zip(supernodes, negatives):
        if neg.shape[0] == 0:
            raise DomainError(f"SuperNode {sn.box_index} has an empty negative set")
        pos_scores = matmul(sn.visual, transpose(sn.features))
        neg_scores = matmul(sn.visual, transpose(neg))
        terms.append(logsumexp(concat_cols([pos_scores, neg_scores])) - logsumexp(pos_scores))
    return add_scalars(terms)


def contrastive_loss(supernodes: Sequence[SuperNode]) -> Tensor:
    """InfoNCE over the top-K set with the ground truth as the positive"""
    terms = []
    for sn in supernodes:
        gt = _require_ground_truth(sn)
        terms.append(cross_entropy(matmul(sn.visual, transpose(sn.features)), gt))
    return add_scalars(terms)


def fused_distance_term(supernodes: Sequence[SuperNode]) -> Tensor:
    """sum_i || f_SNS_i - f_GT_i ||_2"""
    terms = []
    for sn in supernodes:
        gt = _require_ground_truth(sn)
        terms.append(l2_norm(supernode_feature(sn) - take_rows(sn.features, [gt])))
    return add_scalars(terms)


def sns_total_loss(supernodes: Sequence[SuperNode], negatives: Sequence[Tensor]) -> Tensor:
    return add_scalars([
        mil_nce_loss(supernodes, negatives),
        contrastive_loss(supernodes),
        fused_distance_term(supernodes),
    ])


class NegativePool:
    """
    Samples negative labels from the object vocabulary, never returning one
    of the box's own candidates
    """
    def __init__(self, vocabulary: Sequence[str], seed: int = 0):
        self.vocabulary = sorted(set(vocabulary))
        self.rng = np.random.default_rng(seed)

    def sample(self, exclude: Sequence[str], n: int) -> List[str]:
        excluded = set(exclude)
        pool = [w for w in self.vocabulary if w not in excluded]
        if not pool:
            logger.error(f"No negatives left once {sorted(excluded)} are excluded")
            raise DomainError('Negative set is empty: every vocabulary label is a candidate')
        picks = self.rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[i] for i in picks]


@dataclass(frozen=True)
class BoxRef:
    image_id: str
    obj: SceneObject


class SNSModel:
    """
    Learnable pieces of SuperNode selection: the label MLP producing f_n and
    the projection producing v_i
    """
    def __init__(self, provider: EmbeddingProvider, d_model: int, mlp_hidden: int, k: int,
                 seed: int = 0, noise_sigma: float = 0.0, feature_seed: int = 0, d_v: Optional[int] = None):
        self.provider = provider
        self.d_model = d_model
        self.mlp_hidden = mlp_hidden
        self.k = k
        self.noise_sigma = noise_sigma
        self.feature_seed = feature_seed
        self.d_v = d_v or provider.dim
        self.registry = ParameterRegistry(seed)
        self.label_mlp = LabelMLP(self.registry, 'sns.label_mlp', provider.dim, mlp_hidden, d_model)
        self.visual_proj = AffineProjection(self.registry, 'sns.visual', self.d_v, d_model)

    @classmethod
    def from_config(cls, config: RunConfig, provider: Optional[EmbeddingProvider] = None) -> 'SNSModel':
        provider = provider or create_provider(config.provider, config.d_emb, config.seed, config.vectors_path)
        return cls(provider, config.d_model, config.mlp_hidden, config.k, seed=config.seed,
                   noise_sigma=config.noise_sigma, feature_seed=config.seed)

    def to_state(self) -> SNSState:
        header = {
            'd_model': self.d_model, 'mlp_hidden': self.mlp_hidden, 'k': self.k, 'd_v': self.d_v,
            'noise_sigma': self.noise_sigma, 'feature_seed': self.feature_seed, 'd_emb': self.provider.dim,
            'provider': 'file' if isinstance(self.provider, FileEmbeddingProvider) else 'hash',
            'vectors_path': getattr(self.provider, 'path', ''),
            'provider_seed': getattr(self.provider, 'seed', 0),
        }
        return SNSState(header, self.registry.state_dict())

    @classmethod
    def from_state(cls, state: SNSState, provider: Optional[EmbeddingProvider] = None) -> 'SNSModel':
        h = state.header
        try:
            provider = provider or create_provider(h['provider'], h['d_emb'], h['provider_seed'], h['vectors_path'])
            model = cls(provider, h['d_model'], h['mlp_hidden'], h['k'], noise_sigma=h['noise_sigma'],
                        feature_seed=h['feature_seed'], d_v=h['d_v'])
        except KeyError as e:
            raise DataFormatError('SNS header is incomplete', field=str(e.args[0])) from e
        model.registry.load_state_dict(state.parameters)
        return model

    def trainable(self, freeze_visual: bool = False):
        if freeze_visual:
            return self.registry.parameters('sns.label_mlp')
        return list(self.registry)

    def raw_visual(self, box: BoxRef) -> np.ndarray:
        return raw_visual_feature(box.obj, self.d_v, self.provider, self.noise_sigma,
                                  self.feature_seed, box.image_id)

    def build_supernodes(self, boxes: Sequence[BoxRef],
                         negative_labels: Optional[Sequence[Sequence[str]]] = None
                         ) -> Tuple[List[SuperNode], List[Tensor]]:
        """
        Embed every label once for the whole batch, then slice per box
        """
        vocab: Dict[str, int] = {}
        for i, box in enumerate(boxes):
            for label in box.obj.candidate_labels(self.k):
                vocab.setdefault(label, len(vocab))
            if negative_labels is not None:
                for label in negative_labels[i]:
                    vocab.setdefault(label, len(vocab))
        label_features = embed_label_nodes(list(vocab), self.provider, self.label_mlp)
        visual = self.visual_proj(tensor(np.stack([self.raw_visual(b) for b in boxes])))

        supernodes, negatives = [], []
        for i, box in enumerate(boxes):
            labels = tuple(box.obj.candidate_labels(self.k))
            supernodes.append(SuperNode(
                box_index=box.obj.box_id,
                labels=labels,
                features=take_rows(label_features, [vocab[l] for l in labels]),
                visual=take_rows(visual, [i]),
                ground_truth=box.obj.ground_truth_index(self.k),
            ))
            if negative_labels is not None:
                negatives.append(take_rows(label_features, [vocab[l] for l in negative_labels[i]]))
        return supernodes, negatives

    def selection_weights(self, scene: SceneDescription) -> Dict[int, np.ndarray]:
        """Frozen SuperNode weights per box id, for use inside SA-VQA"""
        boxes = [BoxRef(scene.image_id, obj) for obj in scene.objects]
        supernodes, _ = self.build_supernodes(boxes)
        return {sn.box_index: supernode_weights(sn).data[0].copy() for sn in supernodes}

    def accuracy(self, boxes: Sequence[BoxRef]) -> float:
        """Fraction of boxes whose largest weight sits on the ground-truth candidate"""
        if not boxes:
            return 0.0
        supernodes, _ = self.build_supernodes(boxes)
        hits = sum(int(np.argmax(supernode_weights(sn).data[0]) == sn.ground_truth) for sn in supernodes)
        return hits / len(supernodes)


def collect_boxes(scenes: Sequence[SceneDescription], k: int) -> List[BoxRef]:
    boxes = []
    skipped = 0
    for scene in scenes:
        for obj in scene.objects:
            if obj.ground_truth is None:
                logger.error(f"Box {obj.box_id} of {scene.image_id} has no ground truth")
                raise DomainError(f"SNS training needs ground truth for every box ({scene.image_id}/{obj.box_id})")
            if obj.ground_truth_index(k) is None:
                skipped += 1
                continue
            boxes.append(BoxRef(scene.image_id, obj))
    if skipped:
        logger.warning(f"Skipped {skipped} boxes whose ground truth is outside the top-{k} candidates")
    return boxes


def train_sns(scenes: Sequence[SceneDescription], config: RunConfig, vocabulary: Sequence[str],
              provider: Optional[EmbeddingProvider] = None) -> Tuple[SNSModel, SNSReport]:
    """
    Optimize L_SNS = L_MIL + L_CL + sum D over the corpus boxes and report
    argmax-weight accuracy
    """
    if not scenes:
        logger.error('train_sns called with an empty corpus')
        raise DomainError('SNS training corpus is empty')
    model = SNSModel.from_config(config, provider)
    boxes = collect_boxes(scenes, config.k)
    if not boxes:
        raise DomainError('No trainable boxes: ground truth never appears among the candidates')

    pool = NegativePool(vocabulary, seed=config.seed + 1)
    order_rng = np.random.default_rng(config.seed + 2)
    optimizer = Adam(model.trainable(config.freeze_visual), lr=config.sns_lr)
    model.registry.zero_grad()
    report = SNSReport(accuracy=0.0, boxes=len(boxes))

    for epoch in range(1, config.sns_epochs + 1):
        negative_labels = [pool.sample(b.obj.candidate_labels(config.k), config.negatives) for b in boxes]
        order = order_rng.permutation(len(boxes))
        epoch_loss = 0.0
        for start in range(0, len(boxes), config.sns_batch_size):
            batch = order[start:start + config.sns_batch_size]
            supernodes, negatives = model.build_supernodes([boxes[i] for i in batch],
                                                           [negative_labels[i] for i in batch])
            loss = sns_total_loss(supernodes, negatives)
            epoch_loss += loss.item()
            backward(scale(loss, 1.0 / len(batch)))
            optimizer.step()
        report.losses.append(epoch_loss / len(boxes))
        report.accuracies.append(model.accuracy(boxes))
        logger.info(f"SNS epoch {epoch}: loss {report.losses[-1]:.4f}, accuracy {report.accuracies[-1]:.4f}")

    report.accuracy = report.accuracies[-1]
    return model, report
