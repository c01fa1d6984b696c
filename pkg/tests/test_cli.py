import json

import pytest

from app import load_run_config
from app.api.cli import EXIT_OK, EXIT_USAGE, main
from app.models.errors import ConfigError

MICRO = ['--profile', 'micro', '--set', 'data.n_scenes=10', '--set', 'data.questions_per_scene=3']


@pytest.fixture(scope='module')
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('corpus')
    assert main(['generate', *MICRO, '--out', str(out)]) == EXIT_OK
    return out


def write_json(path, data):
    path.write_text(json.dumps(data), encoding='utf-8')
    return str(path)


def test_convert_question_is_idempotent(tmp_path):
    question = write_json(tmp_path / 'q.json', {'question_id': 'q', 'tokens': ['is', 'there', 'a', 'cube'],
                                                'heads': [-1, 0, 3, 0]})
    assert main(['convert', '--question', question, '--out', str(tmp_path / 'a.json')]) == EXIT_OK
    assert main(['convert', '--question', question, '--out', str(tmp_path / 'b.json')]) == EXIT_OK
    assert (tmp_path / 'a.json').read_bytes() == (tmp_path / 'b.json').read_bytes()
    data = json.loads((tmp_path / 'a.json').read_text(encoding='utf-8'))
    assert [n['payload'] for n in data['nodes']] == ['is', 'there', 'a', 'cube']
    assert data['adjacency'][0][1] == 1 and data['adjacency'][3][2] == 1


def test_convert_reports_cycle(tmp_path, capsys):
    question = write_json(tmp_path / 'q.json', {'tokens': ['a', 'b', 'c'], 'heads': [-1, 2, 1]})
    assert main(['convert', '--question', question, '--out', str(tmp_path / 'out.json')]) == EXIT_USAGE
    assert 'token 2' in capsys.readouterr().err
    assert not (tmp_path / 'out.json').exists()


def test_convert_scene(tmp_path):
    scene = write_json(tmp_path / 's.json', {
        'image_id': 'img', 'width': 100, 'height': 100,
        'objects': [{'box_id': 0, 'bbox': [10, 20, 30, 40], 'candidates': [{'label': 'cube', 'score': 0.9}],
                     'attributes': ['red']}],
        'relations': [],
    })
    assert main(['convert', '--scene', scene, '--out', str(tmp_path / 'out.json')]) == EXIT_OK
    data = json.loads((tmp_path / 'out.json').read_text(encoding='utf-8'))
    assert [n['kind'] for n in data['nodes']].count('CoordinateCorner') == 2


def test_malformed_json(tmp_path):
    path = tmp_path / 'q.json'
    path.write_text('{"tokens": [', encoding='utf-8')
    assert main(['convert', '--question', str(path), '--out', str(tmp_path / 'out.json')]) == EXIT_USAGE


def test_missing_input_file(tmp_path):
    assert main(['convert', '--question', str(tmp_path / 'nope.json'), '--out', str(tmp_path / 'o.json')]) \
        == EXIT_USAGE


def test_unknown_override_key(tmp_path, corpus_dir):
    argv = ['train', *MICRO, '--set', 'model.width=3', '--variant', 'top1', '--data', str(corpus_dir),
            '--out', str(tmp_path / 'm.json')]
    assert main(argv) == EXIT_USAGE


def test_unknown_variant(tmp_path, corpus_dir):
    argv = ['train', *MICRO, '--variant', 'bogus', '--data', str(corpus_dir), '--out', str(tmp_path / 'm.json')]
    assert main(argv) == EXIT_USAGE


def test_full_variant_without_sns(tmp_path, corpus_dir, capsys):
    argv = ['train', *MICRO, '--variant', 'full', '--data', str(corpus_dir), '--out', str(tmp_path / 'm.json')]
    assert main(argv) == EXIT_USAGE
    assert '--sns' in capsys.readouterr().err


def test_missing_split(tmp_path):
    argv = ['train', *MICRO, '--variant', 'top1', '--data', str(tmp_path), '--out', str(tmp_path / 'm.json')]
    assert main(argv) == EXIT_USAGE


def test_generate_writes_three_splits(corpus_dir):
    lines = sum(len((corpus_dir / name).read_text(encoding='utf-8').splitlines())
                for name in ('train.jsonl', 'val.jsonl', 'test.jsonl'))
    assert lines == 30


def train_args(corpus_dir, out, *extra):
    return ['train', *MICRO, '--set', 'optim.epochs=1', '--data', str(corpus_dir), '--out', str(out), *extra]


def test_training_twice_is_byte_identical(tmp_path, corpus_dir):
    assert main(train_args(corpus_dir, tmp_path / 'a.json', '--variant', 'even-topk')) == EXIT_OK
    assert main(train_args(corpus_dir, tmp_path / 'b.json', '--variant', 'even-topk')) == EXIT_OK
    assert (tmp_path / 'a.json').read_bytes() == (tmp_path / 'b.json').read_bytes()
    assert (tmp_path / 'a.csv').read_bytes() == (tmp_path / 'b.csv').read_bytes()


def test_full_pipeline(tmp_path, corpus_dir, capsys):
    sns = tmp_path / 'sns.json'
    ckpt = tmp_path / 'full.json'
    assert main(['sns-train', *MICRO, '--set', 'optim.sns_epochs=2', '--data', str(corpus_dir),
                 '--out', str(sns)]) == EXIT_OK
    assert main(train_args(corpus_dir, ckpt, '--variant', 'full', '--sns', str(sns))) == EXIT_OK

    report = tmp_path / 'report.json'
    assert main(['eval', *MICRO, '--ckpt', str(ckpt), '--data', str(corpus_dir), '--out', str(report)]) == EXIT_OK
    assert 'overall' in capsys.readouterr().out
    assert 0.0 <= json.loads(report.read_text(encoding='utf-8'))['overall'] <= 1.0

    instance = json.loads((corpus_dir / 'test.jsonl').read_text(encoding='utf-8').splitlines()[0])['instance_id']
    dump = tmp_path / 'attn.json'
    assert main(['attn-dump', *MICRO, '--ckpt', str(ckpt), '--instance', instance, '--data', str(corpus_dir),
                 '--out', str(dump)]) == EXIT_OK
    assert json.loads(dump.read_text(encoding='utf-8'))['instance_id'] == instance


def test_attention_dump_unknown_instance(tmp_path, corpus_dir):
    ckpt = tmp_path / 'm.json'
    assert main(train_args(corpus_dir, ckpt, '--variant', 'top1')) == EXIT_OK
    argv = ['attn-dump', *MICRO, '--ckpt', str(ckpt), '--instance', 'nope', '--data', str(corpus_dir),
            '--out', str(tmp_path / 'attn.json')]
    assert main(argv) == EXIT_USAGE


def test_load_run_config_layers_overrides_then_fields():
    run_config = load_run_config('micro', overrides=['run.k=2', 'run.seed=4'], seed=9)
    assert run_config.k == 2
    assert run_config.seed == 9


def test_load_run_config_rejects_unknown_profile():
    with pytest.raises(ConfigError):
        load_run_config('nonexistent')
