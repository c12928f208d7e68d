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

import threading
import time

import pytest

from PKTaskMerge.classes.PKWorkerPool import PKTaskQueue, SharedCounter, iterTasks, runTasks


def slow_square(x):
    # later tasks finish first
    time.sleep(0.002 * (10 - x))
    return x * x


def test_results_come_back_in_task_order():
    tasks = [(f"t{i}", (i,)) for i in range(10)]
    assert list(iterTasks(slow_square, tasks, threads=4)) == [(f"t{i}", i * i) for i in range(10)]


def test_parallel_matches_inline():
    tasks = [(i, (i,)) for i in range(10)]
    assert runTasks(slow_square, tasks, threads=1) == runTasks(slow_square, tasks, threads=3)


def test_inline_runs_on_calling_thread():
    seen = []
    list(iterTasks(lambda: seen.append(threading.get_ident()), [("a", ()), ("b", ())], threads=1))
    assert seen == [threading.get_ident()] * 2


def test_first_failure_in_task_order_is_raised():
    def work(x):
        if x in (3, 7):
            raise ValueError(f"bad {x}")
        return x

    collected = []
    with pytest.raises(ValueError, match="bad 3"):
        for key, value in iterTasks(work, [(i, (i,)) for i in range(10)], threads=4):
            collected.append(value)
    assert collected == [0, 1, 2]


def test_in_flight_tasks_stay_within_window():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def work(x):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.001)
        with lock:
            state["now"] -= 1
        return x

    for _ in iterTasks(work, [(i, (i,)) for i in range(40)], threads=4, window=4):
        pass
    assert state["peak"] <= 4


def test_queue_counts_dispatched_items():
    q = PKTaskQueue()
    for i in range(3):
        q.put(i)
    q.get()
    q.get()
    assert q.dispatched.value == 2
    q.clear()
    assert q.empty()


def test_shared_counter():
    counter = SharedCounter(5)
    counter.increment()
    counter.increment(4)
    assert counter.value == 10
