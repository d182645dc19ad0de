"""Randomized engine workloads with a sequential reference interpreter.

A program is a list of steps, each reading and writing subsets of a fixed
set of tags and mixing the values it read into the cells it writes. Any
conflicting pair of steps shares a tag, so the engine must order it by
push order; a correct scheduler therefore reproduces the sequential
interpreter's final state exactly, whatever the thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .dataiter import splitmix64
from .engine import Engine

_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Step:
    reads: Tuple[int, ...]
    writes: Tuple[int, ...]
    salt: int


def random_program(seed: int, num_tags: int = 16, num_steps: int = 32
                   ) -> List[Step]:
    rng = splitmix64(seed)
    steps = []
    for _ in range(num_steps):
        nr = next(rng) % 3
        nw = 1 + next(rng) % 2
        cells = list(range(num_tags))
        picks = []
        for _ in range(nr + nw):
            picks.append(cells.pop(next(rng) % len(cells)))
        steps.append(Step(tuple(sorted(picks[:nr])),
                          tuple(sorted(picks[nr:])), next(rng)))
    return steps


def _mix(acc: int, val: int) -> int:
    acc = (acc ^ val) & _MASK
    return (acc * 0x9E3779B97F4A7C15 + 1) & _MASK


def run_sequential(program: Sequence[Step], num_tags: int = 16) -> List[int]:
    state = [0] * num_tags
    for step in program:
        val = step.salt
        for t in step.reads:
            val = _mix(val, state[t])
        for t in step.writes:
            state[t] = _mix(state[t], val)
    return state


def run_on_engine(program: Sequence[Step], engine: Engine,
                  num_tags: int = 16) -> List[int]:
    state = [0] * num_tags
    tags = [engine.new_tag(f"fuzz-{i}") for i in range(num_tags)]

    def make(step: Step):
        def run():
            val = step.salt
            for t in step.reads:
                val = _mix(val, state[t])
            for t in step.writes:
                state[t] = _mix(state[t], val)
        return run

    for step in program:
        engine.push(make(step), reads=[tags[t] for t in step.reads],
                    writes=[tags[t] for t in step.writes], label="fuzz")
    engine.wait_all()
    return state


def rng_sequence(seed: int, count: int, engine: Engine) -> List[int]:
    """Draw ``count`` values from one seeded generator guarded by a write
    tag; the engine serializes the draws in push order, so the sequence is
    identical no matter how many threads execute it."""
    rng = np.random.RandomState(seed)
    tag = engine.new_tag("rng")
    out = [0] * count

    def draw(i):
        def run():
            out[i] = int(rng.randint(0, 1 << 30))
        return run

    for i in range(count):
        engine.push(draw(i), writes=[tag], label="rng-draw")
    engine.wait_all()
    return out


def bench(num_steps: int, threads: int, num_tags: int = 16,
          seed: int = 0) -> Tuple[float, bool]:
    """(steps per second, serializability check result) for one run."""
    program = random_program(seed, num_tags, num_steps)
    want = run_sequential(program, num_tags)
    with Engine(threads=threads) as engine:
        t0 = time.perf_counter()
        got = run_on_engine(program, engine, num_tags)
        dt = time.perf_counter() - t0
    return num_steps / dt, got == want
