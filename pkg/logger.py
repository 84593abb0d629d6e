"""
Run logging and report dumping module
"""

import json
import os
from datetime import datetime
from typing import Dict, List, Optional

from config import LOG_DIR


class RunLogger:
    """Logs pipeline activity and writes JSON reports for one session"""

    def __init__(self, log_dir: str = LOG_DIR, echo: bool = True, to_file: bool = True):
        self.log_dir = log_dir
        self.echo = echo
        self.to_file = to_file
        self.session_id = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.warnings: List[str] = []

        self.general_log = None
        if to_file:
            os.makedirs(log_dir, exist_ok=True)
            self.general_log = os.path.join(log_dir, f"evq_{self.session_id}.log")

    def log(self, message: str, level: str = "INFO"):
        """Write message to the session log and echo it"""
        if self.general_log:
            timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
            with open(self.general_log, 'a', encoding='utf-8') as f:
                f.write(f"[{timestamp}] {level}: {message}\n")
        if self.echo:
            print(message)

    def warn(self, message: str):
        self.warnings.append(message)
        self.log(f"⚠️  {message}", level="WARN")

    def error(self, message: str):
        self.log(f"❌ {message}", level="ERROR")

    def dump_json(self, path: str, payload: Dict) -> str:
        """Write a report as sorted, indented JSON and return its path"""
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        self.log(f"✅ Wrote {path}")
        return path

    def print_summary(self, title: str, rows: Dict[str, object]):
        """Print a framed key/value summary block"""
        width = max([len(k) for k in rows] + [10]) + 2
        summary = f"\n{'='*60}\n{title}\n{'='*60}\n"
        for key, value in rows.items():
            if isinstance(value, float):
                value = f"{value:,.4f}"
            summary += f"{key + ':':<{width}}{value}\n"
        summary += f"{'='*60}\n"
        self.log(summary)


_logger: Optional[RunLogger] = None


def get_logger() -> RunLogger:
    """Process-wide logger; console only until the CLI binds a log directory"""
    global _logger
    if _logger is None:
        _logger = RunLogger(echo=True, to_file=False)
    return _logger


def bind_logger(log_dir: str, echo: bool = True) -> RunLogger:
    global _logger
    _logger = RunLogger(log_dir=log_dir, echo=echo, to_file=True)
    return _logger
