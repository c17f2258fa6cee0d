"""Retry policy and errors shared by the HTTP service clients."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Callable, TypeVar

T = TypeVar("T")

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class ServiceError(Exception):
    """A remote service failed for good."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class TransientServiceError(ServiceError):
    """A failure worth retrying (network error, 429, 5xx)."""


class ProtocolError(ServiceError):
    """The service answered with something that breaks the wire contract."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 30.0
    jitter: bool = True

    def delay(self, attempt: int, rng: random.Random | None = None) -> float:
        """Backoff before retry number ``attempt`` (1-based), full jitter."""
        cap = min(self.base_delay * 2 ** (attempt - 1), self.max_delay)
        if not self.jitter:
            return cap
        return (rng or random).uniform(0, cap)


def call_with_retry(fn: Callable[[], T], policy: RetryPolicy,
                    sleep: Callable[[float], None] = time.sleep) -> tuple[T, int]:
    """Run ``fn`` retrying transient failures; return (result, retries used)."""
    last: TransientServiceError | None = None
    for attempt in range(policy.max_attempts):
        if attempt:
            sleep(policy.delay(attempt))
        try:
            return fn(), attempt
        except TransientServiceError as exc:
            last = exc
    assert last is not None
    raise ServiceError(f"giving up after {policy.max_attempts} attempts: {last}",
                       status=last.status, attempts=policy.max_attempts) from last


def classify_status(status: int, body: str) -> ServiceError:
    cls = TransientServiceError if status in RETRYABLE_STATUS else ServiceError
    return cls(f"HTTP {status}: {body[:200]}", status=status)
