import json
import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Any, Mapping, Optional

from flask import Flask

from config import config

from .constants import ENV_PREFIX
from .util import ComfyFlowError

POSITIVE_SETTINGS = (
    "LLM_TOP_P",
    "LLM_MAX_TOKENS",
    "LLM_TIMEOUT",
    "EMBEDDING_DIMENSION",
    "EMBEDDING_TIMEOUT",
    "SERVER_TIMEOUT",
    "CLEAN_PARALLELISM",
    "BENCH_PARALLELISM",
    "SUBMIT_PARALLELISM",
    "REFINE_K",
    "MAX_ATTEMPTS",
)
NON_NEGATIVE_SETTINGS = ("LLM_TEMPERATURE", "LLM_RETRIES", "REFINE_RETRIES")
OPTIONAL_POSITIVE_SETTINGS = ("REFINE_MAX_PROMPT_CHARS",)


class InvalidConfig(ComfyFlowError):
    pass


def _number(settings: Mapping[str, Any], key: str) -> float:
    value = settings.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfig(f"{key} must be a number, got {value!r}")
    return value


def check_config(settings: Mapping[str, Any]) -> None:
    for key in POSITIVE_SETTINGS:
        if _number(settings, key) <= 0:
            raise InvalidConfig(f"{key} must be positive")
    for key in NON_NEGATIVE_SETTINGS:
        if _number(settings, key) < 0:
            raise InvalidConfig(f"{key} must not be negative")
    for key in OPTIONAL_POSITIVE_SETTINGS:
        if settings.get(key) is not None and _number(settings, key) <= 0:
            raise InvalidConfig(f"{key} must be positive when set")
    if settings.get("EMBEDDING_PROVIDER") not in ("trigram", "remote"):
        raise InvalidConfig("EMBEDDING_PROVIDER must be 'trigram' or 'remote'")


def load_config_file(app: Flask, config_file: str) -> None:
    """Apply a JSON config file, then re-apply environment overrides so they keep precedence."""
    try:
        app.config.from_file(os.path.abspath(config_file), load=json.load)
    except (OSError, ValueError) as e:
        raise InvalidConfig(f"cannot load config file {config_file}: {e}") from e
    app.config.from_prefixed_env(ENV_PREFIX)
    check_config(app.config)


def _setup_logging(app: Flask) -> None:
    os.makedirs(app.instance_path, exist_ok=True)
    logfile = os.path.join(app.instance_path, app.config["LOG_FILENAME"])
    formatter = logging.Formatter(
        "%(asctime)s %(levelname)-8s %(name)s.%(module)s: %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
    )

    rotate_handler = RotatingFileHandler(logfile, maxBytes=100 * 1024 * 1024, backupCount=5)
    rotate_handler.setFormatter(formatter)
    rotate_handler.setLevel(app.config.get("LOG_LEVEL", logging.INFO))

    logger = logging.getLogger(app.name)
    for handler in list(logger.handlers):
        if isinstance(handler, RotatingFileHandler):
            logger.removeHandler(handler)
            handler.close()
    logger.addHandler(rotate_handler)
    logger.setLevel(app.config.get("LOG_LEVEL", logging.INFO))


def create_app(
    config_name: str = "default",
    instance_path: Optional[str] = None,
    config_file: Optional[str] = None,
) -> Flask:
    app = Flask(__name__, instance_path=instance_path)

    # Load config: defaults, file, then COMFYFLOW_* environment
    app.config.from_object(config[config_name])
    app.config.from_prefixed_env(ENV_PREFIX)
    if config_file:
        load_config_file(app, config_file)
    check_config(app.config)

    _setup_logging(app)

    from driver import cli  # pylint: disable=import-outside-toplevel

    app.cli.add_command(cli)
    return app
