"""Bounded producer/consumer queue for training batches."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Tuple


logger = logging.getLogger(__name__)

BatchFactory = Callable[[int], Any]


@dataclass(order=True)
class QueueItem:
    """One assembled batch waiting for the optimizer."""

    step: int
    payload: Any = field(compare=False)


@dataclass
class _Failure:
    error: BaseException


_DONE = object()


class BatchPrefetcher:
    """Assemble batch ``k+1`` on a worker thread while step ``k`` runs.

    Batches come out in the order of ``steps``. Their content depends only on
    the step index handed to ``factory``, so prefetch depth never changes the
    result.
    """

    def __init__(self, factory: BatchFactory, steps: Iterable[int], max_size: int = 2) -> None:
        self._factory = factory
        self._steps = list(steps)
        self._max_size = max_size
        self._items: "queue.Queue[object]" = queue.Queue(maxsize=max(1, max_size))
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _produce(self) -> None:
        try:
            for step in self._steps:
                if self._stop_event.is_set():
                    return
                self._put(QueueItem(step=step, payload=self._factory(step)))
        except BaseException as exc:  # handed to the consumer thread
            self._put(_Failure(exc))
            return
        self._put(_DONE)

    def _put(self, item: object) -> None:
        while not self._stop_event.is_set():
            try:
                self._items.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Tuple[int, Any]]:
        if self._max_size <= 0:
            for step in self._steps:
                yield step, self._factory(step)
            return

        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._items.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                assert isinstance(item, QueueItem)
                yield item.step, item.payload
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            if self._thread.is_alive():
                logger.warning("Batch prefetch thread did not stop in time")
            self._thread = None
