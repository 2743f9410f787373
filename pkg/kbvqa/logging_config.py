import json
import logging
import os
import re
import sys
from datetime import datetime, timezone

SECRET_RE = re.compile(r"(authorization|api[_-]?key|password|token)[\"':= ]+([^,\s]+)", re.I)

ENGINE_FIELDS = ("stage", "query_id", "step", "loss", "latency_ms", "request_id", "status", "attempt")


def redact_secrets(msg):
    return SECRET_RE.sub(r"\1=***", msg)


class JsonLogFormatter(logging.Formatter):
    def format(self, record):
        log = {
            "ts": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "msg": redact_secrets(str(record.getMessage())),
        }
        for field in ENGINE_FIELDS:
            if hasattr(record, field):
                log[field] = getattr(record, field)
        if record.exc_info:
            log["exc"] = redact_secrets(self.formatException(record.exc_info))
        return json.dumps(log, default=str)


def setup_logging(level=None):
    level = level or os.getenv("KBVQA_LOG_LEVEL", "INFO")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level.upper() if isinstance(level, str) else level)


def get_logger(name="kbvqa"):
    if name != "kbvqa" and not name.startswith("kbvqa."):
        name = f"kbvqa.{name}"
    return logging.getLogger(name)
