from dataclasses import dataclass, fields, asdict, replace
from typing import Dict, Tuple, Any

from app.models.errors import ConfigError, UnknownVariantError

VARIANTS = (
    'full',
    'no_guidance',
    'semantic_only',
    'visual_only',
    'two_semantic',
    'two_visual',
    'one_transformer',
    'single_loss',
    'top1',
    'even_topk',
)


def normalize_variant(name: str) -> str:
    """Accept both 'no-guidance' and 'no_guidance'"""
    variant = name.strip().lower().replace('-', '_')
    if variant not in VARIANTS:
        raise UnknownVariantError(
            f"Unknown variant '{name}'; valid names: {', '.join(v.replace('_', '-') for v in VARIANTS)}"
        )
    return variant


# INI section of every RunConfig field
SECTIONS: Dict[str, Tuple[str, ...]] = {
    'model': ('d_model', 'heads', 'layers', 'stage_split', 'ff_width', 'mlp_hidden', 'epsilon', 'max_positions'),
    'optim': ('lr', 'epochs', 'batch_size', 'sns_lr', 'sns_epochs', 'sns_batch_size', 'freeze_visual'),
    'data': ('data_dir', 'grid_rows', 'grid_cols', 'n_scenes', 'questions_per_scene',
             'min_objects', 'max_objects', 'detector_top1', 'noise_sigma', 'negatives'),
    'embedding': ('provider', 'vectors_path', 'd_emb'),
    'run': ('seed', 'k', 'variant', 'fusion'),
}


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a run: model, optimizer, data, embeddings and the run itself
    """
    d_model: int = 64
    heads: int = 4
    layers: int = 6
    stage_split: Tuple[int, int, int] = (2, 2, 2)
    ff_width: int = 128
    mlp_hidden: int = 64
    epsilon: float = 1e-9
    max_positions: int = 96

    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    sns_lr: float = 1e-2
    sns_epochs: int = 50
    sns_batch_size: int = 16
    freeze_visual: bool = False

    data_dir: str = 'data'
    grid_rows: int = 4
    grid_cols: int = 4
    n_scenes: int = 500
    questions_per_scene: int = 5
    min_objects: int = 2
    max_objects: int = 5
    detector_top1: float = 0.6
    noise_sigma: float = 0.1
    negatives: int = 5

    provider: str = 'hash'
    vectors_path: str = ''
    d_emb: int = 50

    seed: int = 0
    k: int = 5
    variant: str = 'full'
    fusion: str = 'late'

    @classmethod
    def from_config_class(cls, config_cls) -> 'RunConfig':
        """Build from a config.py class (upper-case attributes)"""
        values = {}
        for f in fields(cls):
            attr = f.name.upper()
            if hasattr(config_cls, attr):
                values[f.name] = getattr(config_cls, attr)
        values['stage_split'] = tuple(values.get('stage_split', (2, 2, 2)))
        return cls(**values)

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def with_overrides(self, **changes) -> 'RunConfig':
        return replace(self, **changes)

    def validate(self) -> 'RunConfig':
        """Raise ConfigError naming the offending key on any violation"""
        def check(condition, key, message):
            if not condition:
                raise ConfigError(f"{key}: {message}", key=key)

        check(self.d_model > 0, 'model.d_model', 'must be positive')
        check(self.heads > 0, 'model.heads', 'must be positive')
        check(self.d_model % self.heads == 0, 'model.heads',
              f"d_model={self.d_model} is not divisible by heads={self.heads}")
        check(self.layers >= 3, 'model.layers', 'at least one layer per stage (>= 3) is required')
        check(len(self.stage_split) == 3 and all(n >= 1 for n in self.stage_split),
              'model.stage_split', 'must be three positive integers')
        check(sum(self.stage_split) == self.layers, 'model.stage_split',
              f"{self.stage_split} does not sum to layers={self.layers}")
        check(self.ff_width > 0, 'model.ff_width', 'must be positive')
        check(self.mlp_hidden > 0, 'model.mlp_hidden', 'must be positive')
        check(self.epsilon > 0, 'model.epsilon', 'must be positive')
        check(self.max_positions > 2, 'model.max_positions', 'must exceed 2')
        check(self.lr > 0, 'optim.lr', 'must be positive')
        check(self.sns_lr > 0, 'optim.sns_lr', 'must be positive')
        check(self.epochs >= 1, 'optim.epochs', 'must be >= 1')
        check(self.sns_epochs >= 1, 'optim.sns_epochs', 'must be >= 1')
        check(self.batch_size >= 1, 'optim.batch_size', 'must be >= 1')
        check(self.sns_batch_size >= 1, 'optim.sns_batch_size', 'must be >= 1')
        check(self.grid_rows >= 1 and self.grid_cols >= 1, 'data.grid_rows', 'grid must be non-empty')
        check(1 <= self.min_objects <= self.max_objects, 'data.min_objects',
              'must satisfy 1 <= min_objects <= max_objects')
        check(self.grid_rows * self.grid_cols >= self.max_objects, 'data.max_objects',
              f"grid {self.grid_rows}x{self.grid_cols} cannot hold {self.max_objects} objects")
        check(self.n_scenes >= 1, 'data.n_scenes', 'must be >= 1')
        check(self.questions_per_scene >= 1, 'data.questions_per_scene', 'must be >= 1')
        check(0 < self.detector_top1 <= 1, 'data.detector_top1', 'must lie in (0, 1]')
        check(self.noise_sigma >= 0, 'data.noise_sigma', 'must be >= 0')
        check(self.negatives >= 1, 'data.negatives', 'must be >= 1')
        check(self.provider in ('hash', 'file'), 'embedding.provider', "must be 'hash' or 'file'")
        check(self.provider != 'file' or bool(self.vectors_path), 'embedding.vectors_path',
              'required when provider = file')
        check(self.d_emb > 0, 'embedding.d_emb', 'must be positive')
        check(self.k >= 1, 'run.k', 'must be >= 1')
        check(self.fusion in ('late', 'early'), 'run.fusion', "must be 'late' or 'early'")
        try:
            variant = normalize_variant(self.variant)
        except UnknownVariantError as e:
            raise ConfigError(str(e), key='run.variant') from e
        if variant != self.variant:
            return replace(self, variant=variant)
        return self

    def to_sections(self) -> Dict[str, Dict[str, Any]]:
        values = asdict(self)
        values['stage_split'] = list(self.stage_split)
        return {section: {key: values[key] for key in keys} for section, keys in SECTIONS.items()}

    @classmethod
    def field_section(cls, name: str) -> str:
        for section, keys in SECTIONS.items():
            if name in keys:
                return section
        raise ConfigError(f"Unknown configuration key '{name}'", key=name)

    def with_sections(self, sections: Dict[str, Dict[str, Any]]) -> 'RunConfig':
        """
        Apply ``{section: {key: value}}``; string values are parsed against the
        field's type. Unknown sections or keys raise ConfigError naming them.
        """
        changes = {}
        for section, values in sections.items():
            if section not in SECTIONS:
                raise ConfigError(f"Unknown configuration section '[{section}]'", key=section)
            for key, raw in values.items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"Unknown configuration key '{section}.{key}'", key=f"{section}.{key}")
                changes[key] = _coerce(self, f"{section}.{key}", key, raw)
        return replace(self, **changes)


_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def _coerce(config: RunConfig, dotted: str, key: str, raw: Any) -> Any:
    current = getattr(config, key)
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(current, tuple):
            items = raw if isinstance(raw, (list, tuple)) else str(raw).replace('/', ',').split(',')
            return tuple(int(str(v).strip()) for v in items)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{dotted}: cannot parse {raw!r} as {type(current).__name__}", key=dotted) from e
