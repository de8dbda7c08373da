# src/utils/reports.py
"""Report emission: a JSON document and an aligned plain-text twin, both headed by the run echo."""
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel
from rich.console import Console

from src.config.settings import settings
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)

_stdout = Console(color_system=None, soft_wrap=True, highlight=False)


def configure_run(
    command: str,
    seed: Optional[int] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Echo block of a run: enough to reproduce it exactly."""
    return {
        "command": command,
        "seed": seed,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": metadata or {},
    }


def render_echo(echo: Dict[str, Any]) -> str:
    lines = [f"# command: {echo['command']}", f"# seed: {echo['seed']}", f"# created: {echo['created']}"]
    for key, value in sorted(echo.get("config", {}).items()):
        lines.append(f"# {key}: {json.dumps(value, default=str)}")
    return "\n".join(lines) + "\n"


def report_json(result: BaseModel, echo: Dict[str, Any]) -> str:
    """JSON document {"echo": ..., "result": ...}; infinite bounds serialize as Infinity."""
    body = result.model_dump_json(indent=2)
    head = json.dumps(echo, indent=2, default=str)
    return '{\n"echo": ' + head + ',\n"result": ' + body + "\n}\n"


def output_dir(path: Optional[str] = None) -> Path:
    out = Path(path or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def emit(
    name: str,
    result: BaseModel,
    text: str,
    echo: Dict[str, Any],
    out_dir: Optional[str] = None,
    to_stdout: bool = True,
) -> Tuple[Path, Path]:
    """Write <name>.json and <name>.txt under out_dir; the text also goes to stdout."""
    out = output_dir(out_dir)
    header = render_echo(echo)
    json_path = out / f"{name}.json"
    txt_path = out / f"{name}.txt"
    json_path.write_text(report_json(result, echo), encoding="utf-8")
    txt_path.write_text(header + text, encoding="utf-8")
    if to_stdout:
        _stdout.out(header + text, end="")
    logger.info(kv(report=name, json=json_path, text=txt_path))
    return json_path, txt_path


def load_report(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
