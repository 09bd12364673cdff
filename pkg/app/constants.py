LOG_DIRNAME = "logs"
TEMPLATE_DIRNAME = "prompt_templates"

APP_NAME = "comfyflow"
ENV_PREFIX = "COMFYFLOW"

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_TRANSPORT = 3

WILDCARD_TYPE = "*"
