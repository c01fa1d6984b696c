import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Sequence

import pandas as pd

from app.models.errors import DomainError
from app.models.toy import MetricsReport, Template, ToyInstance

logger = logging.getLogger(__name__)

VQA_ANNOTATIONS = 10


def vqa_v2_accuracy(prediction: str, annotations: Sequence[str]) -> float:
    """
    min(#annotators that gave the prediction / 3, 1)
    """
    if len(annotations) != VQA_ANNOTATIONS:
        logger.error(f"Expected {VQA_ANNOTATIONS} annotations, got {len(annotations)}")
        raise DomainError(f"VQA accuracy needs exactly {VQA_ANNOTATIONS} annotations, got {len(annotations)}")
    matches = sum(1 for a in annotations if a == prediction)
    return min(matches / 3.0, 1.0)


def exact_match_accuracy(predictions: Sequence[str], answers: Sequence[str],
                         templates: Sequence[Template] = None) -> MetricsReport:
    """
    Exact string match, split into binary (yes/no templates) and open.
    Without templates the split falls back to whether the gold answer is yes/no.
    """
    if len(predictions) != len(answers):
        logger.error(f"{len(predictions)} predictions for {len(answers)} answers")
        raise DomainError(f"Length mismatch: {len(predictions)} predictions vs {len(answers)} answers")
    if templates is not None and len(templates) != len(answers):
        raise DomainError(f"Length mismatch: {len(templates)} templates vs {len(answers)} answers")

    hits: Dict[str, int] = defaultdict(int)
    counts: Dict[str, int] = defaultdict(int)
    split = {'binary': [0, 0], 'open': [0, 0]}
    correct = 0
    for i, (prediction, answer) in enumerate(zip(predictions, answers)):
        ok = int(prediction == answer)
        correct += ok
        if templates is not None:
            template = Template(templates[i])
            counts[template.value] += 1
            hits[template.value] += ok
            binary = template.is_binary
        else:
            binary = answer in ('yes', 'no')
        bucket = split['binary' if binary else 'open']
        bucket[0] += ok
        bucket[1] += 1

    def rate(h, n):
        return h / n if n else 0.0

    return MetricsReport(
        overall=rate(correct, len(answers)),
        binary=rate(*split['binary']),
        open=rate(*split['open']),
        per_template={t: rate(hits[t], counts[t]) for t in counts},
        counts=dict(counts),
    )


def instance_annotations(instance: ToyInstance) -> List[str]:
    """Ten annotations; instances without them replicate their answer"""
    if len(instance.annotations) == VQA_ANNOTATIONS:
        return list(instance.annotations)
    return [instance.answer] * VQA_ANNOTATIONS


def vqa_v2_report(predictions: Sequence[str], instances: Sequence[ToyInstance]) -> MetricsReport:
    """Same shape as the exact-match report, with VQA-v2 soft accuracy per question"""
    if len(predictions) != len(instances):
        raise DomainError(f"Length mismatch: {len(predictions)} predictions vs {len(instances)} instances")
    frame = pd.DataFrame({
        'template': [inst.template.value for inst in instances],
        'binary': [inst.is_binary for inst in instances],
        'score': [vqa_v2_accuracy(p, instance_annotations(inst)) for p, inst in zip(predictions, instances)],
    })
    if frame.empty:
        return MetricsReport()
    by_template = frame.groupby('template')['score']
    binary = frame.loc[frame['binary'], 'score']
    open_ = frame.loc[~frame['binary'], 'score']
    return MetricsReport(
        overall=float(frame['score'].mean()),
        binary=float(binary.mean()) if len(binary) else 0.0,
        open=float(open_.mean()) if len(open_) else 0.0,
        per_template={t: float(v) for t, v in by_template.mean().items()},
        counts={t: int(v) for t, v in by_template.size().items()},
    )


def report_table(rows: Iterable[Dict], columns: Sequence[str] = None) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    if columns is not None:
        frame = frame.reindex(columns=list(columns))
    return frame


def format_report(report: MetricsReport) -> str:
    """Aligned plain-text rendering of a report"""
    rows = [{'split': 'overall', 'accuracy': report.overall, 'count': str(sum(report.counts.values()))},
            {'split': 'binary', 'accuracy': report.binary, 'count': ''},
            {'split': 'open', 'accuracy': report.open, 'count': ''}]
    rows += [{'split': t, 'accuracy': report.per_template[t], 'count': str(report.counts.get(t, 0))}
             for t in sorted(report.per_template)]
    frame = report_table(rows, ('split', 'accuracy', 'count'))
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")
