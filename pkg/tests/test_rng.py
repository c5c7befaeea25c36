# tests/test_rng.py
import numpy as np
import pytest

from occupation_lab.rng import RngStream, as_generator, chunked, replica_map


def _draw(stream):
    return stream.generator().random(4).tolist()


def test_equal_keys_reproduce_the_stream():
    assert _draw(RngStream(7, 3, "walks")) == _draw(RngStream(7, 3, "walks"))


def test_distinct_keys_differ():
    base = _draw(RngStream(7, 3, "walks"))
    assert base != _draw(RngStream(7, 4, "walks"))
    assert base != _draw(RngStream(7, 3, "theta"))
    assert base != _draw(RngStream(8, 3, "walks"))


def test_spawn_and_child():
    parent = RngStream(1, 0, "root")
    kids = parent.spawn(3, "block")
    assert [k.replica for k in kids] == [0, 1, 2]
    assert len({tuple(_draw(k)) for k in kids}) == 3
    assert parent.child("x").purpose == "root/x"


def test_negative_seed_is_rejected():
    with pytest.raises(ValueError):
        RngStream(-1)


def test_as_generator_accepts_ints_and_streams():
    assert isinstance(as_generator(5), np.random.Generator)
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    with pytest.raises(ValueError):
        as_generator(None)


def test_chunked_covers_every_item_in_order():
    chunks = chunked(list(range(10)), 3)
    assert sum(chunks, []) == list(range(10))
    assert len(chunks) == 3


def _square(x):
    return x * x


def test_replica_map_keeps_task_order():
    assert replica_map(_square, [3, 1, 2], workers=1) == [9, 1, 4]


def test_replica_map_is_worker_count_independent():
    tasks = RngStream(11, 0, "blocks").spawn(4, "b")
    serial = replica_map(_draw, tasks, workers=1)
    parallel = replica_map(_draw, tasks, workers=2)
    assert serial == parallel
