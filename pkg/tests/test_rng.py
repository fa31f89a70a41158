import numpy as np

from hierrg.rng import get_threads, parallel_map, set_threads, stream, streams


def test_stream_matches_spawned_family():
    fam = streams(11, 4)
    for i, g in enumerate(fam):
        assert np.array_equal(g.random(5), stream(11, i).random(5))


def test_streams_are_distinct_and_reproducible():
    a, b = stream(1, 0).random(1000), stream(1, 1).random(1000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1
    assert np.array_equal(a, stream(1, 0).random(1000))


def test_parallel_map_order_and_threads():
    set_threads(3)
    assert get_threads() == 3
    assert parallel_map(lambda i: i * i, range(10)) == [i * i for i in range(10)]
    set_threads(None)
    assert get_threads() >= 1
