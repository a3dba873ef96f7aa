import json
from collections.abc import Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import IO, Any


@dataclass
class StepLog:
    """Loss components of one optimizer step"""

    step: int
    epoch: int
    ce: float
    kd: float
    crd: float
    total: float
    reg: float = 0.0
    lr: float = 0.0
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def to_dict(self) -> dict[str, Any]:
        record = asdict(self)
        record["timestamp"] = self.timestamp.isoformat()
        return record


class TrainingTracker:
    """Collects step logs and optionally streams them as JSON lines"""

    def __init__(self, sink: Path | str | None = None):
        self.steps: list[StepLog] = []
        self._enabled: bool = False
        self._sink_path = Path(sink) if sink is not None else None
        self._sink: IO[str] | None = None

    def enable(self):
        """Enable step tracking"""
        self._enabled = True

    def disable(self):
        """Disable step tracking"""
        self._enabled = False

    def is_enabled(self) -> bool:
        """Check if step tracking is enabled"""
        return self._enabled

    def log_step(self, entry: StepLog):
        """Record a step; appended to the sink file when one is configured"""
        if not self._enabled:
            return
        self.steps.append(entry)
        if self._sink_path is not None:
            if self._sink is None:
                self._sink_path.parent.mkdir(parents=True, exist_ok=True)
                self._sink = self._sink_path.open("a", encoding="utf-8")
            self._sink.write(json.dumps(entry.to_dict()) + "\n")
            self._sink.flush()

    def get_steps(self) -> list[StepLog]:
        """Get all logged steps"""
        return self.steps.copy()

    def clear(self):
        """Clear all logged steps"""
        self.steps.clear()

    def count(self) -> int:
        """Get the number of logged steps"""
        return len(self.steps)

    def close(self):
        if self._sink is not None:
            self._sink.close()
            self._sink = None

    def to_dict(self) -> list[dict[str, Any]]:
        """Convert logged steps to a list of dictionaries"""
        return [entry.to_dict() for entry in self.steps]


_step_tracker: ContextVar[TrainingTracker | None] = ContextVar(
    "step_tracker", default=None
)


class TrainingMonitor:
    """Routes step logs to the tracker active in the current context"""

    @classmethod
    def get_tracker(cls) -> TrainingTracker | None:
        """Get the current step tracker from context"""
        return _step_tracker.get()

    @classmethod
    def log_step(cls, entry: StepLog):
        """Log a step to the current tracker if one is active"""
        tracker = _step_tracker.get()
        if tracker:
            tracker.log_step(entry)

    @classmethod
    @contextmanager
    def track_steps(cls, sink: Path | str | None = None) -> Iterator[TrainingTracker]:
        """Context manager enabling step tracking.

        Nested use reuses the outer tracker:

            with TrainingMonitor.track_steps("runs/x/steps.jsonl") as tracker:
                train(config, split)
                print(tracker.count())
        """
        current = _step_tracker.get()
        if current:
            was_enabled = current.is_enabled()
            current.enable()
            try:
                yield current
            finally:
                if not was_enabled:
                    current.disable()
            return

        tracker = TrainingTracker(sink)
        tracker.enable()
        token = _step_tracker.set(tracker)
        try:
            yield tracker
        finally:
            tracker.close()
            _step_tracker.reset(token)


def tracked(sink: Path | str | None = None):
    """Decorator running a function inside ``TrainingMonitor.track_steps``"""

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            with TrainingMonitor.track_steps(sink):
                return func(*args, **kwargs)

        return wrapper

    return decorator
