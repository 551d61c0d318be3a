"""Dynamic batching: a bounded FIFO queue, a batch former, and an executor pool.

The decision logic lives in BatchFormer, which takes time as an argument so
tests can drive it with a virtual clock and compare dispatch sequences
against an independent simulation. BatchEngine wraps the former in an
asyncio scheduler with a pool of concurrent executors and guarantees that
every accepted request completes exactly once: with a result, a rejection,
a shutdown error, or an internal error.
"""

from __future__ import annotations

import asyncio
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable


class QueueFullError(Exception):
    """Admission rejected: the queue is at capacity."""


class ShutdownError(Exception):
    """The engine stopped before this request was dispatched."""


@dataclass(frozen=True)
class BatchPolicy:
    max_batch_size: int = 1
    max_queue_delay_ms: float = 0.0
    max_queue_len: int = 1024

    def __post_init__(self) -> None:
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if self.max_queue_delay_ms < 0:
            raise ValueError("max_queue_delay_ms must be >= 0")
        if self.max_queue_len < 1:
            raise ValueError("max_queue_len must be >= 1")


@dataclass
class PendingRequest:
    id: int
    enqueue_time: float
    payload: Any
    reply: asyncio.Future = field(repr=False, default=None)  # type: ignore[assignment]


@dataclass
class Batch:
    requests: list[PendingRequest]
    formed_at: float

    def __len__(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class ItemResult:
    """Per-item completion: the executor's output plus observed timings."""

    output: Any
    queue_wait_ms: float
    execution_ms: float


class BatchFormer:
    """FIFO queue plus the fire decision; knows nothing about real time."""

    def __init__(self, policy: BatchPolicy):
        self.policy = policy
        self._queue: deque[PendingRequest] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def enqueue(self, req: PendingRequest) -> bool:
        """Admit iff the queue is below capacity before insertion."""
        if len(self._queue) >= self.policy.max_queue_len:
            return False
        self._queue.append(req)
        return True

    def enqueue_all(self, reqs: list[PendingRequest]) -> bool:
        """All-or-nothing admission for multi-input requests."""
        if len(self._queue) + len(reqs) > self.policy.max_queue_len:
            return False
        self._queue.extend(reqs)
        return True

    def oldest_deadline(self) -> float | None:
        """Time at which the window trigger fires for the oldest request."""
        if not self._queue:
            return None
        return self._queue[0].enqueue_time + self.policy.max_queue_delay_ms / 1000.0

    def form(self, now: float) -> Batch | None:
        """Pop the next batch if a trigger holds at `now`.

        Fires when the queue has reached max_batch_size, or when the oldest
        request has waited max_queue_delay_ms; takes the min(queue, max) oldest.
        """
        q = self._queue
        if not q:
            return None
        size_trigger = len(q) >= self.policy.max_batch_size
        window_trigger = now >= q[0].enqueue_time + self.policy.max_queue_delay_ms / 1000.0
        if not (size_trigger or window_trigger):
            return None
        take = min(len(q), self.policy.max_batch_size)
        return Batch(requests=[q.popleft() for _ in range(take)], formed_at=now)

    def drain(self) -> list[PendingRequest]:
        out = list(self._queue)
        self._queue.clear()
        return out


# Executor signature: a list of payloads in, one output per payload out.
BatchExecutor = Callable[[list[Any]], Awaitable[list[Any]]]


class BatchEngine:
    """Asyncio scheduler: waits for a free executor, forms batches, dispatches.

    While every executor is busy the queue keeps growing and a waiting batch
    can fill all the way to max_batch_size, which is where the throughput
    gain under load comes from.
    """

    def __init__(
        self,
        policy: BatchPolicy,
        executor: BatchExecutor,
        executors: int = 2,
        *,
        clock: Callable[[], float] = time.perf_counter,
        on_batch: Callable[[int], None] | None = None,
    ):
        if executors < 1:
            raise ValueError("executors must be >= 1")
        self.policy = policy
        self._executor = executor
        self._free = executors
        self._clock = clock
        self._on_batch = on_batch
        self._former = BatchFormer(policy)
        self._wake = asyncio.Event()
        self._stopping = False
        self._task: asyncio.Task | None = None
        self._inflight: set[asyncio.Task] = set()
        self._ids = itertools.count(1)

    @property
    def queue_depth(self) -> int:
        return len(self._former)

    async def start(self) -> None:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(self._run_scheduler())

    def enqueue(self, payload: Any) -> asyncio.Future:
        """Admit one payload; the future resolves to an ItemResult."""
        return self.enqueue_many([payload])[0]

    def enqueue_many(self, payloads: list[Any]) -> list[asyncio.Future]:
        """Admit payloads all-or-nothing, preserving arrival order."""
        if self._stopping:
            raise ShutdownError("engine is stopping")
        loop = asyncio.get_running_loop()
        now = self._clock()
        reqs = [
            PendingRequest(next(self._ids), now, payload, loop.create_future())
            for payload in payloads
        ]
        if not self._former.enqueue_all(reqs):
            raise QueueFullError(
                f"queue at capacity ({self.policy.max_queue_len})"
            )
        self._wake.set()
        return [r.reply for r in reqs]

    async def stop(self) -> None:
        """Stop forming batches, fail queued requests, wait out in-flight ones."""
        self._stopping = True
        self._wake.set()
        if self._task is not None:
            await self._task
            self._task = None
        for req in self._former.drain():
            if not req.reply.done():
                req.reply.set_exception(ShutdownError("engine stopped"))
        if self._inflight:
            await asyncio.gather(*self._inflight, return_exceptions=True)

    async def _run_scheduler(self) -> None:
        while True:
            if self._stopping:
                return
            batch = None
            if self._free > 0:
                batch = self._former.form(self._clock())
            if batch is not None:
                self._free -= 1
                task = asyncio.get_running_loop().create_task(self._run_batch(batch))
                self._inflight.add(task)
                task.add_done_callback(self._inflight.discard)
                continue
            timeout = None
            if self._free > 0:
                deadline = self._former.oldest_deadline()
                if deadline is not None:
                    timeout = max(0.0, deadline - self._clock())
            self._wake.clear()
            try:
                await asyncio.wait_for(self._wake.wait(), timeout)
            except asyncio.TimeoutError:
                pass

    async def _run_batch(self, batch: Batch) -> None:
        dispatched = self._clock()
        if self._on_batch is not None:
            self._on_batch(len(batch))
        try:
            outputs = await self._executor([r.payload for r in batch.requests])
            if len(outputs) != len(batch.requests):
                raise RuntimeError(
                    f"executor returned {len(outputs)} outputs for {len(batch)} inputs"
                )
        except Exception as exc:
            for req in batch.requests:
                if not req.reply.done():
                    req.reply.set_exception(exc)
        else:
            done = self._clock()
            execution_ms = (done - dispatched) * 1000.0
            for req, output in zip(batch.requests, outputs):
                if not req.reply.done():
                    req.reply.set_result(
                        ItemResult(
                            output=output,
                            queue_wait_ms=(dispatched - req.enqueue_time) * 1000.0,
                            execution_ms=execution_ms,
                        )
                    )
        finally:
            self._free += 1
            self._wake.set()
