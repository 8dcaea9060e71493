import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

from apps.common.exceptions import StoreIOError

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


def generated_at() -> str:
    """SOURCE_DATE_EPOCH pins the timestamp for reproducible files."""
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    if epoch:
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(tz=timezone.utc)
    return moment.replace(microsecond=0).isoformat()


def build_report(command: str, body: dict, config: Optional[dict] = None) -> dict:
    """The timestamp lives only in header.generated_at."""
    report = dict(body)
    report["header"] = {
        "command": command,
        "format_version": REPORT_FORMAT_VERSION,
        "generated_at": generated_at(),
    }
    if config is not None:
        report["config"] = config
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(report), encoding="utf-8")
    except OSError as e:
        raise StoreIOError(f"cannot write report {path}: {e}")
    logger.info(f"report written to {path}")
    return path
