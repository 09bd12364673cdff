import logging
import os

import dotenv

dotenv.load_dotenv()


class Config:  # pylint: disable=too-few-public-methods
    APP_VERSION = 0.4

    NODEBASE_PATH = None
    FEWSHOT_PATH = None

    LLM_ENDPOINT = os.environ.get("COMFYFLOW_LLM_ENDPOINT", "")
    LLM_MODEL = "Qwen2.5-14B-Instruct"
    LLM_API_KEY = os.environ.get("COMFYFLOW_LLM_API_KEY", "")
    LLM_TEMPERATURE = 0.95
    LLM_TOP_P = 0.7
    LLM_MAX_TOKENS = 8192
    LLM_TIMEOUT = 120  # secs
    LLM_RETRIES = 1

    EMBEDDING_PROVIDER = "trigram"  # or "remote"
    EMBEDDING_ENDPOINT = ""
    EMBEDDING_MODEL = "text-embedding"
    EMBEDDING_DIMENSION = 256
    EMBEDDING_TIMEOUT = 30  # secs

    SERVER_URL = "http://127.0.0.1:8188"
    SERVER_TIMEOUT = 30  # secs

    CLEAN_PARALLELISM = os.cpu_count() or 1
    BENCH_PARALLELISM = 8
    SUBMIT_PARALLELISM = 4

    REFINE_K = 5
    REFINE_RETRIES = 2
    REFINE_MAX_PROMPT_CHARS = None
    MAX_ATTEMPTS = 3

    BROADCASTER_TYPES = ["Anything Everywhere", "Anything Everywhere?", "Anything Everywhere3"]
    PROMPT_DIR = None

    LOG_FILENAME = "comfyflow.log"


class DevelopmentConfig(Config):  # pylint: disable=too-few-public-methods
    DEBUG_LEVEL = 1
    LOG_LEVEL = logging.DEBUG


class TestingConfig(Config):  # pylint: disable=too-few-public-methods
    TESTING = True
    DEBUG_LEVEL = 0
    LOG_LEVEL = logging.DEBUG

    LLM_ENDPOINT = "http://llm.invalid/v1/completions"
    LLM_RETRIES = 0
    SERVER_URL = "http://comfyui.invalid:8188"
    CLEAN_PARALLELISM = 2
    BENCH_PARALLELISM = 2


class ProductionConfig(Config):  # pylint: disable=too-few-public-methods
    DEBUG_LEVEL = 0
    LOG_LEVEL = logging.INFO


# Config dictionary for easy access
config = {
    "development": DevelopmentConfig,
    "testing": TestingConfig,
    "production": ProductionConfig,
    "default": DevelopmentConfig,
}
