"""
ConfProbe Activity Logger
Logs user-facing run events to the activity log file
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Optional, Dict

LOG_DIR = Path(__file__).parent.parent / "logs"
ACTIVITY_LOG = LOG_DIR / "activity.log"
HISTORY_FILE = LOG_DIR / "run_history.json"

# Ensure log directory exists
LOG_DIR.mkdir(parents=True, exist_ok=True)


def log(message: str, level: str = "INFO"):
    """Log an activity event"""
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    level = level.upper()

    line = f"{timestamp} | {level} | {message}\n"

    try:
        ACTIVITY_LOG.parent.mkdir(parents=True, exist_ok=True)
        with open(ACTIVITY_LOG, "a") as f:
            f.write(line)
    except Exception:
        pass  # Logging never breaks a run


def log_info(message: str):
    """Log an info event"""
    log(message, "INFO")


def log_success(message: str):
    """Log a success event"""
    log(message, "SUCCESS")


def log_error(message: str):
    """Log an error event"""
    log(message, "ERROR")


def log_warning(message: str):
    """Log a warning event"""
    log(message, "WARN")


# Convenience functions for specific events
def run_started(command: str, run_seed: int):
    log(f"CLI: {command} started (seed {run_seed})", "START")


def run_completed(command: str, output_dir: str):
    log_success(f"CLI: {command} completed -> {output_dir}")


def run_failed(command: str, error: str):
    log_error(f"CLI: {command} failed: {error}")


def budget_refused(planned: int, budget: int):
    log_error(f"BUDGET: {planned} planned queries exceed cap {budget}, nothing queried")


def query_retry(attempt: int, max_retries: int, error: str):
    log_warning(f"ORACLE: Attempt {attempt}/{max_retries} failed ({error}), retrying...")


def cache_loaded(path: str, entries: int):
    log_info(f"CACHE: Loaded {entries} entries from {path}")


def estimates_done(count: int, s: int, spec: str):
    log_info(f"ESTIMATE: {count} samples at S={s} with {spec}")


def fit_completed(model_kind: str, a: float, spec: str, objective: float):
    log_success(f"FIT: {model_kind} a={a:g} spec={spec} ECE={objective:.4f}")


def metric_warning(metric: str, reason: str):
    log_warning(f"METRICS: {metric} - {reason}")


def server_started(host: str, port: int):
    log_info(f"SERVER: Prediction stub listening on http://{host}:{port}")


# Run History Tracking
def save_run_to_history(command: str, output_dir: str, summary: Optional[Dict] = None):
    """Append a finished run to the history file"""
    history = load_run_history()

    entry = {
        "command": command,
        "output_dir": str(output_dir),
        "summary": summary or {},
        "completed_at": datetime.now().isoformat()
    }
    history.append(entry)

    try:
        HISTORY_FILE.parent.mkdir(parents=True, exist_ok=True)
        with open(HISTORY_FILE, 'w') as f:
            json.dump(history, f, indent=2)
    except Exception as e:
        log_error(f"Error saving run history: {e}")


def load_run_history() -> list:
    """Load run history from file"""
    if HISTORY_FILE.exists():
        try:
            with open(HISTORY_FILE) as f:
                return json.load(f)
        except Exception as e:
            log_warning(f"Error loading run history: {e}")
    return []


def get_recent_activity(limit: int = 50) -> list:
    """Return the last `limit` activity lines, newest last"""
    if not ACTIVITY_LOG.exists():
        return []
    with open(ACTIVITY_LOG) as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    return lines[-limit:]


def clear_activity_log():
    """Clear the activity log file"""
    if ACTIVITY_LOG.exists():
        ACTIVITY_LOG.unlink()
    log_info("Activity log cleared")
