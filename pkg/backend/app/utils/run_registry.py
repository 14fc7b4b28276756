import threading
from collections import deque
from typing import Any, Dict, List, Optional

# Thread-safe record of recent experiment runs, oldest first
recent_runs = deque(maxlen=50)
lock = threading.Lock()


def record_run(entry: Dict[str, Any]) -> None:
    """ Add a finished run (experiment name, report paths, summary) to the registry """
    with lock:
        recent_runs.append(dict(entry))


def list_runs() -> List[Dict[str, Any]]:
    """ Snapshot of the registry, oldest first """
    with lock:
        return list(recent_runs)


def last_csv(experiment: str) -> Optional[str]:
    """ CSV path of the most recent run of an experiment, if any """
    with lock:
        for entry in reversed(recent_runs):
            if entry["experiment"] == experiment:
                return entry["csv"]
    return None


def clear_runs() -> None:
    with lock:
        recent_runs.clear()
