import pytest

from app.models.errors import DomainError
from app.models.toy import Template
from app.services.metrics import (
    exact_match_accuracy,
    format_report,
    instance_annotations,
    vqa_v2_accuracy,
    vqa_v2_report,
)


@pytest.mark.parametrize('matches, expected', [(0, 0.0), (1, 1 / 3), (2, 2 / 3), (3, 1.0), (7, 1.0), (10, 1.0)])
def test_vqa_v2_accuracy(matches, expected):
    annotations = ['cube'] * matches + ['ball'] * (10 - matches)
    assert vqa_v2_accuracy('cube', annotations) == pytest.approx(expected)


def test_vqa_v2_needs_ten_annotations():
    with pytest.raises(DomainError):
        vqa_v2_accuracy('cube', ['cube'] * 9)


def test_exact_match_all_and_none():
    assert exact_match_accuracy(['a', 'yes'], ['a', 'yes']).overall == 1.0
    report = exact_match_accuracy(['b', 'no'], ['a', 'yes'])
    assert (report.overall, report.binary, report.open) == (0.0, 0.0, 0.0)


def test_exact_match_mixed_case():
    templates = [Template.EXISTENCE, Template.RELATION_YES_NO, Template.ATTRIBUTE_QUERY, Template.COUNT]
    report = exact_match_accuracy(['yes', 'no', 'red', '2'], ['yes', 'yes', 'red', '2'], templates)
    assert report.overall == pytest.approx(0.75)
    assert report.binary == pytest.approx(0.5)
    assert report.open == pytest.approx(1.0)
    assert report.per_template['RelationYesNo'] == 0.0
    assert report.counts == {'Existence': 1, 'RelationYesNo': 1, 'AttributeQuery': 1, 'Count': 1}
    assert report.subset_accuracy(['Existence', 'RelationYesNo']) == pytest.approx(0.5)


def test_exact_match_without_templates_uses_yes_no_answers():
    report = exact_match_accuracy(['yes', 'no', 'red', '2'], ['yes', 'yes', 'red', '2'])
    assert (report.binary, report.open) == (0.5, 1.0)
    assert report.per_template == {}


def test_exact_match_length_mismatch():
    with pytest.raises(DomainError):
        exact_match_accuracy(['yes'], ['yes', 'no'])


def test_vqa_report_with_replicated_annotations_matches_exact(tiny_corpus):
    predictions = [inst.answer if n % 2 else 'nothing' for n, inst in enumerate(tiny_corpus)]
    soft = vqa_v2_report(predictions, tiny_corpus)
    exact = exact_match_accuracy(predictions, [i.answer for i in tiny_corpus], [i.template for i in tiny_corpus])
    assert soft.overall == pytest.approx(exact.overall)
    assert soft.binary == pytest.approx(exact.binary)
    assert soft.per_template == pytest.approx(exact.per_template)
    assert soft.counts == exact.counts
    assert instance_annotations(tiny_corpus[0]) == [tiny_corpus[0].answer] * 10


def test_format_report_lists_every_template():
    templates = [Template.EXISTENCE, Template.COUNT]
    text = format_report(exact_match_accuracy(['yes', '3'], ['yes', '2'], templates))
    lines = text.splitlines()
    assert lines[0].split() == ['split', 'accuracy', 'count']
    assert any(line.split()[:3] == ['overall', '0.5000', '2'] for line in lines)
    assert any(line.split()[0] == 'Existence' for line in lines)
