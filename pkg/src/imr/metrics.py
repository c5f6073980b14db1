import csv
import json
import threading
import time
from collections import Counter
from contextlib import contextmanager


class Metrics:
    """Collects counters and event rows; optionally mirrors rows to JSON lines."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        self.counters = Counter()
        self._lock = threading.Lock()
        if path:
            open(path, "w").close()

    def incr(self, name, n=1):
        with self._lock:
            self.counters[name] += n

    def emit(self, event, **fields):
        row = {"event": event, **fields}
        with self._lock:
            self.rows.append(row)
            if self.path:
                with open(self.path, "a") as f:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
        return row

    @contextmanager
    def stage(self, name, **fields):
        t0 = time.perf_counter()
        extra = {}
        try:
            yield extra
        finally:
            self.emit("stage", stage=name, seconds=time.perf_counter() - t0, **fields, **extra)

    def events(self, event):
        return [r for r in self.rows if r["event"] == event]

    def to_csv(self, path, event="iteration"):
        rows = self.events(event)
        if not rows:
            return 0
        fields = sorted({k for r in rows for k in r})
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        return len(rows)
