"""Tuple space: a multiset of (key, value) tuples with synchronizing access.

The store keeps insertion (FIFO) order per key and a global sequence number
per tuple, so pattern matches are resolved oldest-first across keys.  Values
are copied on the way in and on the way out; a tuple can never be mutated
through an alias held by a producer or consumer.

Two access styles are built on the same core:

* :class:`TupleStore` is the non-blocking core used by the simulator (which
  provides its own blocking semantics on the virtual clock).
* :class:`ThreadedTupleSpace` wraps the core with real locks and condition
  variables for use from OS threads, e.g. behind the TCP service.
"""

from __future__ import annotations

import copy
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np


class TupleSpaceError(Exception):
    """Base class for tuple space failures."""


class MalformedKeyError(TupleSpaceError):
    """Key is empty, contains whitespace, or contains a wildcard."""


class MalformedPatternError(TupleSpaceError):
    """Pattern is not a valid exact key or trailing-star prefix."""


class WaitAborted(TupleSpaceError):
    """A blocked operation was abandoned because the space shut down."""


def validate_key(key: str) -> str:
    if not isinstance(key, str) or not key:
        raise MalformedKeyError(f"invalid key: {key!r}")
    if "*" in key or any(ch.isspace() for ch in key):
        raise MalformedKeyError(f"invalid key: {key!r}")
    return key


@dataclass(frozen=True)
class Pattern:
    """An exact key or a prefix pattern written with a single trailing ``*``."""

    body: str
    prefix: bool

    @classmethod
    def parse(cls, text: str) -> "Pattern":
        if not isinstance(text, str) or not text:
            raise MalformedPatternError(f"invalid pattern: {text!r}")
        if any(ch.isspace() for ch in text):
            raise MalformedPatternError(f"invalid pattern: {text!r}")
        if text.endswith("*"):
            body = text[:-1]
            if "*" in body:
                raise MalformedPatternError(f"invalid pattern: {text!r}")
            return cls(body, True)
        if "*" in text:
            raise MalformedPatternError(f"invalid pattern: {text!r}")
        return cls(text, False)

    def matches(self, key: str) -> bool:
        if self.prefix:
            return key.startswith(self.body)
        return key == self.body


def _copy_value(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.copy()
    if isinstance(value, (str, int, float, bool, bytes)) or value is None:
        return value
    return copy.deepcopy(value)


def _first_segment(key: str) -> str:
    i = key.find(":")
    return key if i < 0 else key[:i]


class TupleStore:
    """Non-blocking multiset core.

    Tuples are bucketed by the first ``:``-separated segment of their key so
    that prefix scans touch only the relevant bucket.  Within a key, tuples
    form a FIFO queue; across keys, matches are resolved by the global
    insertion sequence number.
    """

    def __init__(self) -> None:
        self._seq = itertools.count()
        # bucket -> key -> deque of (seq, value)
        self._buckets: dict[str, dict[str, deque]] = {}
        self._size = 0
        self.puts = 0
        self.takes = 0
        self.cleared = 0

    def __len__(self) -> int:
        return self._size

    def put(self, key: str, value: Any) -> None:
        validate_key(key)
        bucket = self._buckets.setdefault(_first_segment(key), {})
        bucket.setdefault(key, deque()).append((next(self._seq), _copy_value(value)))
        self._size += 1
        self.puts += 1

    def _candidate_keys(self, pat: Pattern):
        if not pat.prefix:
            bucket = self._buckets.get(_first_segment(pat.body))
            if bucket is not None and pat.body in bucket:
                yield pat.body
            return
        if ":" in pat.body:
            # prefix pins the entire first segment, one bucket suffices
            buckets = [self._buckets.get(_first_segment(pat.body), {})]
        elif pat.body:
            buckets = [b for s, b in self._buckets.items() if s.startswith(pat.body)]
        else:
            buckets = list(self._buckets.values())
        for bucket in buckets:
            for key in bucket:
                if pat.matches(key):
                    yield key

    def _oldest_match(self, pat: Pattern) -> Optional[str]:
        best_key = None
        best_seq = None
        for key in self._candidate_keys(pat):
            bucket = self._buckets[_first_segment(key)]
            queue = bucket[key]
            seq = queue[0][0]
            if best_seq is None or seq < best_seq:
                best_seq = seq
                best_key = key
        return best_key

    def try_read(self, pattern: str) -> Optional[tuple[str, Any]]:
        return self.try_read_pat(Pattern.parse(pattern))

    def try_read_pat(self, pat: Pattern) -> Optional[tuple[str, Any]]:
        key = self._oldest_match(pat)
        if key is None:
            return None
        queue = self._buckets[_first_segment(key)][key]
        return key, _copy_value(queue[0][1])

    def try_get(self, pattern: str) -> Optional[tuple[str, Any]]:
        return self.try_get_pat(Pattern.parse(pattern))

    def try_get_pat(self, pat: Pattern) -> Optional[tuple[str, Any]]:
        key = self._oldest_match(pat)
        if key is None:
            return None
        seg = _first_segment(key)
        bucket = self._buckets[seg]
        queue = bucket[key]
        _, value = queue.popleft()
        if not queue:
            del bucket[key]
            if not bucket:
                del self._buckets[seg]
        self._size -= 1
        self.takes += 1
        return key, value

    def count(self, pattern: str) -> int:
        pat = Pattern.parse(pattern)
        total = 0
        for key in self._candidate_keys(pat):
            total += len(self._buckets[_first_segment(key)][key])
        return total

    def clear(self, pattern: str) -> int:
        pat = Pattern.parse(pattern)
        removed = 0
        for key in list(self._candidate_keys(pat)):
            seg = _first_segment(key)
            bucket = self._buckets[seg]
            removed += len(bucket.pop(key))
            if not bucket:
                del self._buckets[seg]
        self._size -= removed
        self.cleared += removed
        return removed

    def keys(self) -> list[str]:
        out: list[str] = []
        for bucket in self._buckets.values():
            out.extend(bucket.keys())
        return out


class _Ticket:
    __slots__ = ("pattern", "consume", "result", "done")

    def __init__(self, pattern: Pattern, consume: bool) -> None:
        self.pattern = pattern
        self.consume = consume
        self.result: Optional[tuple[str, Any]] = None
        self.done = False


class ThreadedTupleSpace:
    """Thread-safe tuple space with blocking ``get`` and ``read``.

    Blocked getters are served in FIFO arrival order: whenever the store
    changes, waiting tickets are re-examined oldest first, so a newcomer can
    never overtake an older getter whose pattern also matches.
    """

    def __init__(self) -> None:
        self._store = TupleStore()
        self._cond = threading.Condition()
        self._tickets: list[_Ticket] = []
        self._closed = False

    @property
    def stats(self) -> tuple[int, int, int]:
        with self._cond:
            s = self._store
            return (s.puts, s.takes, s.cleared)

    def __len__(self) -> int:
        with self._cond:
            return len(self._store)

    def _pump(self) -> None:
        # reads first: they do not consume, so every matching reader wakes
        fulfilled = False
        for ticket in self._tickets:
            if ticket.done or ticket.consume:
                continue
            hit = self._store.try_read_pat(ticket.pattern)
            if hit is not None:
                ticket.result = hit
                ticket.done = True
                fulfilled = True
        for ticket in self._tickets:
            if ticket.done or not ticket.consume:
                continue
            hit = self._store.try_get_pat(ticket.pattern)
            if hit is not None:
                ticket.result = hit
                ticket.done = True
                fulfilled = True
        if fulfilled:
            self._tickets = [t for t in self._tickets if not t.done]
            self._cond.notify_all()

    def put(self, key: str, value: Any) -> None:
        with self._cond:
            if self._closed:
                raise WaitAborted("tuple space is closed")
            self._store.put(key, value)
            self._pump()

    def _wait(self, pattern: str, consume: bool, timeout: Optional[float]) -> tuple[str, Any]:
        pat = Pattern.parse(pattern)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            if self._closed:
                raise WaitAborted("tuple space is closed")
            ticket = _Ticket(pat, consume)
            self._tickets.append(ticket)
            self._pump()
            while not ticket.done:
                if self._closed:
                    self._tickets = [t for t in self._tickets if t is not ticket]
                    raise WaitAborted("tuple space is closed")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    self._tickets = [t for t in self._tickets if t is not ticket]
                    raise TimeoutError(f"timed out waiting for {pattern!r}")
                self._cond.wait(remaining)
            assert ticket.result is not None
            return ticket.result

    def get(self, pattern: str, timeout: Optional[float] = None) -> tuple[str, Any]:
        return self._wait(pattern, consume=True, timeout=timeout)

    def read(self, pattern: str, timeout: Optional[float] = None) -> tuple[str, Any]:
        return self._wait(pattern, consume=False, timeout=timeout)

    def try_get(self, pattern: str) -> Optional[tuple[str, Any]]:
        with self._cond:
            return self._store.try_get(pattern)

    def try_read(self, pattern: str) -> Optional[tuple[str, Any]]:
        with self._cond:
            return self._store.try_read(pattern)

    def count(self, pattern: str) -> int:
        with self._cond:
            return self._store.count(pattern)

    def clear(self, pattern: str) -> int:
        with self._cond:
            return self._store.clear(pattern)

    def keys(self) -> list[str]:
        with self._cond:
            return self._store.keys()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
