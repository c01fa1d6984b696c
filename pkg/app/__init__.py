import configparser
import logging
from pathlib import Path
from typing import Dict, Optional

from config import config
from app.models.errors import ConfigError
from app.models.run_config import RunConfig

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level: Optional[str] = None) -> None:
    level = (level or 'INFO').upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"Unknown log level '{level}'", key='SAVQA_LOG_LEVEL')
    logging.basicConfig(level=level, format=LOG_FORMAT)


def read_config_file(path) -> Dict[str, Dict[str, str]]:
    """INI file as {section: {key: raw string}}"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Configuration file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return {section: dict(parser.items(section)) for section in parser.sections()}


def parse_overrides(items) -> Dict[str, Dict[str, str]]:
    """``section.key=value`` strings as nested sections"""
    sections: Dict[str, Dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition('=')
        section, dot, name = key.strip().partition('.')
        if not sep or not dot or not name:
            raise ConfigError(f"Override '{item}' is not of the form section.key=value", key=key.strip())
        sections.setdefault(section, {})[name] = value
    return sections


def load_run_config(config_name='default', config_path=None, overrides=None, **fields) -> RunConfig:
    """
    Resolve a validated RunConfig: class defaults, then the INI file, then
    ``section.key=value`` overrides, then explicit field values
    """
    if config_name not in config:
        raise ConfigError(f"Unknown configuration profile '{config_name}'; known: {', '.join(sorted(config))}",
                          key='profile')
    config_cls = config[config_name]
    configure_logging(config_cls.LOG_LEVEL)

    run_config = RunConfig.from_config_class(config_cls)
    path = config_path or config_cls.CONFIG_PATH
    if path:
        run_config = run_config.with_sections(read_config_file(path))
    if overrides:
        run_config = run_config.with_sections(parse_overrides(overrides))
    changes = {k: v for k, v in fields.items() if v is not None}
    if changes:
        run_config = run_config.with_overrides(**changes)
    return run_config.validate()
