import datetime
import functools
import json
import os
import pprint
import tempfile
import traceback
from typing import Any, Callable, NotRequired, TypedDict, TypeVar, Unpack

from flask import current_app, has_app_context

from .constants import LOG_DIRNAME

T = TypeVar("T")


class ComfyFlowError(Exception):
    """Root of every domain error raised by the toolkit."""


class LogParams(TypedDict):
    prettify: NotRequired[bool]
    filename: NotRequired[str]


def log(*args: Any, **kwargs: Unpack[LogParams]) -> None:
    """Append a free-form trace line to instance/logs when DEBUG_LEVEL > 0."""
    if not has_app_context() or current_app.config.get("DEBUG_LEVEL", 0) <= 0:
        return

    path = os.path.join(current_app.instance_path, LOG_DIRNAME)
    os.makedirs(path, exist_ok=True)

    strings = [str(datetime.datetime.now())]
    for s in args:
        if kwargs.get("prettify"):
            s = prettyp(s)
        strings.append(str(s))

    filename = kwargs.get("filename", "log.txt")
    with open(os.path.join(path, filename), "a", encoding="utf-8") as logfile:
        logfile.write(" ".join(strings) + "\n")


def log_error(*args: Any) -> None:
    """Log error messages with traceback if available."""
    if not args:
        return

    message = " ".join(str(arg) for arg in args)

    trace = traceback.format_exc()
    if trace and trace != "NoneType: None\n":
        message = f"{message}\n{trace}"

    if has_app_context():
        current_app.logger.error(message)


def prettyp(data: Any) -> str:
    return pprint.pformat(data, width=160)


def dump_json(data: Any) -> bytes:
    return json.dumps(data, ensure_ascii=False, indent=2).encode("utf-8")


def write_atomic(path: str, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as tmp:
            tmp.write(data)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def with_app_context(fn: Callable[..., T]) -> Callable[..., T]:
    """Wrap fn so worker threads run inside the caller's app context, if there is one."""
    if not has_app_context():
        return fn
    app = current_app._get_current_object()  # type: ignore[attr-defined]

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> T:
        with app.app_context():
            return fn(*args, **kwargs)

    return wrapper
