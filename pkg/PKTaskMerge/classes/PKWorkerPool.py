"""
    The MIT License (MIT)

    Copyright (c) 2023 pkjmesra

    Permission is hereby granted, free of charge, to any person obtaining a copy
    of this software and associated documentation files (the "Software"), to deal
    in the Software without restriction, including without limitation the rights
    to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
    copies of the Software, and to permit persons to whom the Software is
    furnished to do so, subject to the following conditions:

    The above copyright notice and this permission notice shall be included in all
    copies or substantial portions of the Software.

    THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
    IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
    FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
    AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
    LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
    OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
    SOFTWARE.

"""
import queue
import threading
from collections import OrderedDict

from PKTaskMerge.classes.log import default_logger


class SharedCounter(object):
    """A lock-protected counter shared by the queue's producers and consumers"""

    def __init__(self, n=0):
        self._lock = threading.Lock()
        self._value = n

    def increment(self, n=1):
        with self._lock:
            self._value += n

    @property
    def value(self):
        with self._lock:
            return self._value


class PKTaskQueue(queue.Queue):
    """Task queue that also counts how many items were handed out, so the
    pool can report progress without peeking into the queue."""

    def __init__(self, maxsize=0):
        super().__init__(maxsize=maxsize)
        self.dispatched = SharedCounter(0)

    def get(self, *args, **kwargs):
        item = super().get(*args, **kwargs)
        if item is not None:
            self.dispatched.increment(1)
        return item

    def clear(self):
        try:
            while True:
                self.get_nowait()
                self.task_done()
        except queue.Empty:
            pass


class PKTaskWorker(threading.Thread):
    """Consumes (index, key, args) items until it sees the None poison pill
    or the shared abort event is set. Every result, including a raised
    exception, goes back on result_queue tagged with its index."""

    def __init__(self, processorMethod, task_queue, result_queue, abortEvent=None, name=None):
        super(PKTaskWorker, self).__init__(name=name, daemon=True)
        assert processorMethod is not None, "processorMethod argument must not be None."
        self.processorMethod = processorMethod
        self.task_queue = task_queue
        self.result_queue = result_queue
        self.abortEvent = abortEvent if abortEvent is not None else threading.Event()

    def processQueueItems(self):
        while not self.abortEvent.is_set():
            next_task = self.task_queue.get()
            if next_task is None:
                self.task_queue.task_done()
                break
            index, key, args = next_task
            try:
                answer, error = self.processorMethod(*args), None
            except BaseException as e:
                default_logger().debug(e, exc_info=True)
                answer, error = None, e
            self.task_queue.task_done()
            self.result_queue.put((index, key, answer, error))

    def run(self):
        try:
            self.processQueueItems()
        except Exception as e:
            default_logger().debug(e, exc_info=True)


def iterTasks(processorMethod, tasks, threads=1, window=None):
    """Runs processorMethod(*args) for every (key, args) in tasks and yields
    (key, result) strictly in task order, whatever order workers finish in.
    At most `window` tasks are in flight, bounding buffered results. The
    first failure in task order is re-raised after the pool is stopped."""
    tasks = list(tasks)
    if threads is None or threads <= 1 or len(tasks) <= 1:
        for key, args in tasks:
            yield key, processorMethod(*args)
        return

    threads = min(threads, len(tasks))
    window = max(window or 2 * threads, threads)
    task_queue = PKTaskQueue()
    result_queue = queue.Queue()
    abortEvent = threading.Event()
    workers = [
        PKTaskWorker(processorMethod, task_queue, result_queue, abortEvent, name=f"PKTaskWorker-{i}")
        for i in range(threads)
    ]
    for worker in workers:
        worker.start()

    submitted = 0
    nextIndex = 0
    finished = {}
    try:
        while submitted < len(tasks) and submitted < window:
            task_queue.put((submitted, *tasks[submitted]))
            submitted += 1
        while nextIndex < len(tasks):
            while nextIndex not in finished:
                index, key, answer, error = result_queue.get()
                finished[index] = (key, answer, error)
            key, answer, error = finished.pop(nextIndex)
            if error is not None:
                raise error
            nextIndex += 1
            if submitted < len(tasks):
                task_queue.put((submitted, *tasks[submitted]))
                submitted += 1
            yield key, answer
    finally:
        abortEvent.set()
        task_queue.clear()
        for _ in workers:
            task_queue.put(None)
        for worker in workers:
            worker.join()
        default_logger().debug(
            f"Worker pool stopped after {task_queue.dispatched.value} of {len(tasks)} tasks"
        )


def runTasks(processorMethod, tasks, threads=1):
    """Blocking form of iterTasks, returning an ordered key -> result map"""
    return OrderedDict(iterTasks(processorMethod, tasks, threads=threads))
