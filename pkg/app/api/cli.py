"""
Command-line surface: conversion, corpus generation, SNS pre-training,
training, evaluation, the label-quality sweep and attention dumps.

Exit codes: 0 success, 2 usage or validation failure, 3 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app import load_run_config
from app.models.errors import (
    ConfigError,
    DataFormatError,
    GraphValidationError,
    SAVQAError,
    UnknownVariantError,
    VocabularyError,
)
from app.models.graph import QuestionParse, SceneDescription
from app.models.run_config import VARIANTS, RunConfig
from app.models.toy import OBJECT_VOCABULARY
from app.services.checkpoint import load_checkpoint, load_sns, save_checkpoint, save_sns
from app.services.corpus import generate_corpus, read_split, unique_scenes, write_splits
from app.services.graphs import build_question_graph, build_semantic_graph, graph_to_sequence, sequence_to_json
from app.services.metrics import format_report
from app.services.sns import SNSModel, train_sns
from app.services.training import dump_attention, evaluate, parse_levels, quality_sweep, train_savqa, write_log

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
USAGE_ERRORS = (ConfigError, DataFormatError, GraphValidationError, UnknownVariantError, VocabularyError,
                FileNotFoundError)


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Input file not found: {path}")
    text = path.read_text(encoding='utf-8')
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e.msg})", line=e.lineno) from e


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')


def _data_dir(args, run_config: RunConfig) -> str:
    return args.data or run_config.data_dir


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_convert(args, run_config: RunConfig) -> int:
    if args.scene:
        data = _read_json(args.scene)
        if not isinstance(data, dict):
            raise DataFormatError(f"{args.scene}: expected a JSON object")
        graph = build_semantic_graph(SceneDescription.from_dict(data), run_config.k)
    else:
        data = _read_json(args.question)
        if not isinstance(data, dict):
            raise DataFormatError(f"{args.question}: expected a JSON object")
        graph = build_question_graph(QuestionParse.from_dict(data))
    nodes, adjacency = graph_to_sequence(graph)
    _write_text(args.out, sequence_to_json(nodes, adjacency) + '\n')
    logger.info(f"Wrote {graph.modality.value} graph with {len(nodes)} nodes to {args.out}")
    return EXIT_OK


def cmd_generate(args, run_config: RunConfig) -> int:
    instances = generate_corpus(run_config.n_scenes, run_config.questions_per_scene,
                                (run_config.grid_rows, run_config.grid_cols), run_config.seed, run_config.k,
                                run_config.detector_top1, run_config.min_objects, run_config.max_objects)
    counts = write_splits(instances, args.out or run_config.data_dir, run_config.seed)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_sns_train(args, run_config: RunConfig) -> int:
    scenes = unique_scenes(read_split(_data_dir(args, run_config), 'train'))
    model, report = train_sns(scenes, run_config, OBJECT_VOCABULARY)
    save_sns(model.to_state(), args.out)
    print(f"SNS argmax accuracy: {report.accuracy:.4f} over {report.boxes} boxes")
    return EXIT_OK


def cmd_train(args, run_config: RunConfig) -> int:
    data_dir = _data_dir(args, run_config)
    train = read_split(data_dir, 'train')
    validation = read_split(data_dir, 'val') if (Path(data_dir) / 'val.jsonl').is_file() else []
    if run_config.variant == 'full' and not args.sns:
        raise ConfigError('Variant full requires a pretrained SNS model: pass --sns MODEL', key='sns')
    sns = SNSModel.from_state(load_sns(args.sns)) if args.sns else None
    checkpoint, log = train_savqa(train, run_config, run_config.variant, sns=sns, validation=validation)
    save_checkpoint(checkpoint, args.out)
    log_path = args.log or str(Path(args.out).with_suffix('.csv'))
    write_log(log, log_path)
    print(log.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_eval(args, run_config: RunConfig) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    corpus = read_split(_data_dir(args, run_config), args.split)
    report = evaluate(checkpoint, corpus, args.metric)
    if args.out:
        _write_text(args.out, json.dumps(report.to_dict(), sort_keys=True) + '\n')
    print(format_report(report))
    return EXIT_OK


def cmd_sweep(args, run_config: RunConfig) -> int:
    levels = parse_levels(args.levels)
    corpus = None
    if args.data:
        corpus = []
        for name in ('train', 'val', 'test'):
            corpus.extend(read_split(args.data, name))
    table = quality_sweep(run_config, levels, corpus)
    if args.out:
        _write_text(args.out, table.to_json(orient='records') + '\n')
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_attn_dump(args, run_config: RunConfig) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    corpus = read_split(_data_dir(args, run_config), args.split)
    matches = [inst for inst in corpus if inst.instance_id == args.instance]
    if not matches:
        raise DataFormatError(f"Instance '{args.instance}' not found in the {args.split} split", field='instance')
    dump = dump_attention(checkpoint, matches[0])
    _write_text(args.out, json.dumps(dump, sort_keys=True) + '\n')
    logger.info(f"Wrote {len(dump['entries'])} attention blocks to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI run configuration (default: $SAVQA_CONFIG)')
    common.add_argument('--profile', default='default', help='Built-in defaults: default, smoke or micro')
    common.add_argument('--seed', type=int, help='Seed for every random generator (default: $SAVQA_SEED or 0)')
    common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override one configuration key; may be repeated')

    parser = argparse.ArgumentParser(prog='savqa', description='Structured-alignment VQA at desk scale')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('convert', parents=[common], help='Convert a scene or question into a graph sequence')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--scene', help='SceneDescription JSON file')
    source.add_argument('--question', help='QuestionParse JSON file')
    p.add_argument('--out', required=True, help='Output JSON (nodes + adjacency)')
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser('generate', parents=[common], help='Generate the synthetic grid-world corpus')
    p.add_argument('--out', help='Output directory (default: data.data_dir)')
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('sns-train', parents=[common], help='Pre-train SuperNode selection')
    p.add_argument('--data', help='Corpus directory (default: data.data_dir)')
    p.add_argument('--out', required=True, help='Output SNS model file')
    p.set_defaults(handler=cmd_sns_train)

    p = sub.add_parser('train', parents=[common], help='Train an SA-VQA variant')
    p.add_argument('--data', help='Corpus directory (default: data.data_dir)')
    p.add_argument('--sns', help='Pretrained SNS model (required by the full variant)')
    p.add_argument('--variant', help=f"One of: {', '.join(v.replace('_', '-') for v in VARIANTS)}")
    p.add_argument('--out', required=True, help='Output checkpoint')
    p.add_argument('--log', help='Training log CSV (default: checkpoint path with .csv)')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    p.add_argument('--ckpt', required=True, help='Checkpoint file')
    p.add_argument('--data', help='Corpus directory (default: data.data_dir)')
    p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    p.add_argument('--metric', default='exact', choices=('exact', 'vqa2'))
    p.add_argument('--out', help='Write the report as JSON')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('sweep', parents=[common], help='Accuracy across semantic-label quality levels')
    p.add_argument('--levels', default='0.6,0.7,0.8,0.9,1.0,gt', help="Comma-separated p values and/or 'gt'")
    p.add_argument('--data', help='Corpus directory; generated from the configuration when omitted')
    p.add_argument('--out', help='Write the table as JSON records')
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('attn-dump', parents=[common], help='Dump last-layer cross-modality attention')
    p.add_argument('--ckpt', required=True, help='Checkpoint file')
    p.add_argument('--instance', required=True, help='Instance id')
    p.add_argument('--data', help='Corpus directory (default: data.data_dir)')
    p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    p.add_argument('--out', required=True, help='Output JSON')
    p.set_defaults(handler=cmd_attn_dump)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_config = load_run_config(args.profile, args.config, args.set, seed=args.seed,
                                     variant=getattr(args, 'variant', None))
        return args.handler(args, run_config)
    except USAGE_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SAVQAError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
