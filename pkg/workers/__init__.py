"""
Workers Package
"""

from workers.workers import JobResult, SweepJob, SweepWorker, collect

__all__ = ["JobResult", "SweepJob", "SweepWorker", "collect"]
