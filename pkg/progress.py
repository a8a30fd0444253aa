"""
Pipeline Progress Tracking and Display

Subscribes to the progress topics published by the long-running stages
(`epoch_completed` from network training, `sample_optimized` from DF-GT
construction), renders a terminal progress bar with ETA and keeps
per-stage statistics for the final summary.

Author: DiFF Desk Toolkit
"""

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO

from pubsub import pub

from utils import format_time


@dataclass
class StageStats:
    """Running statistics of one pipeline stage."""
    stage: str
    total: int = 0
    completed: int = 0
    failed: int = 0
    started: float = field(default_factory=time.time)
    first_loss: Optional[float] = None
    last_loss: Optional[float] = None
    improvements: List[float] = field(default_factory=list)

    @property
    def elapsed(self) -> float:
        return time.time() - self.started

    @property
    def eta(self) -> float:
        if self.completed == 0:
            return 0.0
        return self.elapsed / self.completed * max(self.total - self.completed, 0)

    @property
    def percentage(self) -> float:
        return 100.0 * self.completed / self.total if self.total > 0 else 0.0


class ProgressTracker:
    """
    Tracks and displays pipeline progress.

    Call start() before running a stage and stop() afterwards; the tracker
    only listens while started.
    """

    BAR_WIDTH = 30

    def __init__(self, stream: Optional[TextIO] = None, enabled: bool = True):
        self.stream = stream or sys.stdout
        self.enabled = enabled
        self.stages: Dict[str, StageStats] = {}
        self.running = False
        self.last_line_length = 0
        self.logger = logging.getLogger("ProgressTracker")

    def start(self):
        """Subscribe to the progress topics."""
        if self.running:
            return
        pub.subscribe(self.on_epoch_completed, 'epoch_completed')
        pub.subscribe(self.on_sample_optimized, 'sample_optimized')
        self.running = True
        self.logger.debug("Progress tracking started")

    def stop(self):
        """Unsubscribe and clear the progress line."""
        if not self.running:
            return
        pub.unsubscribe(self.on_epoch_completed, 'epoch_completed')
        pub.unsubscribe(self.on_sample_optimized, 'sample_optimized')
        self.running = False
        if self.enabled and self.last_line_length > 0:
            self.stream.write('\r' + ' ' * self.last_line_length + '\r')
            self.stream.flush()
            self.last_line_length = 0
        self.logger.debug("Progress tracking stopped")

    def __enter__(self) -> 'ProgressTracker':
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def _stats(self, stage: str, total: int) -> StageStats:
        stats = self.stages.get(stage)
        if stats is None:
            stats = self.stages[stage] = StageStats(stage, total)
        stats.total = total
        return stats

    def on_epoch_completed(self, stage: str, epoch: int, total: int, loss: float):
        stats = self._stats(stage, total)
        stats.completed = epoch
        if stats.first_loss is None:
            stats.first_loss = loss
        stats.last_loss = loss
        self._display(stats, f"epoch {epoch}/{total} loss {loss:.4f}")

    def on_sample_optimized(self, stage: str, sample_id: str, index: int, total: int,
                            initial_loss: float, final_loss: float, failed: bool):
        stats = self._stats(stage, total)
        stats.completed = index
        if failed:
            stats.failed += 1
        elif math.isfinite(initial_loss) and math.isfinite(final_loss):
            stats.improvements.append(initial_loss - final_loss)
            stats.last_loss = final_loss
        self._display(stats, f"{sample_id} {initial_loss:.4f} -> {final_loss:.4f}")

    def _display(self, stats: StageStats, detail: str):
        if not self.enabled:
            return
        filled = int(self.BAR_WIDTH * stats.percentage / 100)
        bar = '█' * filled + '░' * (self.BAR_WIDTH - filled)
        eta = format_time(stats.eta) if stats.completed < stats.total else 'done'
        line = f"{stats.stage:>8}: |{bar}| {stats.percentage:5.1f}% {detail} | ETA {eta}"
        padding = ' ' * max(self.last_line_length - len(line), 0)
        self.stream.write('\r' + line + padding)
        self.stream.flush()
        self.last_line_length = len(line)

    def summary(self) -> List[str]:
        """One line per stage seen."""
        lines = []
        for stats in self.stages.values():
            line = f"{stats.stage}: {stats.completed}/{stats.total} in {format_time(stats.elapsed)}"
            if stats.improvements:
                line += f", mean loss decrease {sum(stats.improvements) / len(stats.improvements):.4f}"
            elif stats.first_loss is not None:
                line += f", loss {stats.first_loss:.4f} -> {stats.last_loss:.4f}"
            if stats.failed:
                line += f", {stats.failed} failed"
            lines.append(line)
        return lines

    def print_summary(self):
        if not self.enabled or not self.stages:
            return
        print(f"\n{'=' * 60}", file=self.stream)
        for line in self.summary():
            print(line, file=self.stream)
        print(f"{'=' * 60}", file=self.stream)
