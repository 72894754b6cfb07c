import numpy as np

from reconbound.rng import Stream, substream


def test_same_seed_same_stream():
    a = substream(7, 1, Stream.NOISE, 3).standard_normal(100)
    b = substream(7, 1, Stream.NOISE, 3).standard_normal(100)
    assert a.tobytes() == b.tobytes()


def test_substreams_differ_by_key():
    draws = {substream(7, r, Stream.NOISE, t).standard_normal(4).tobytes() for r in range(3) for t in range(3)}
    assert len(draws) == 9


def test_different_seeds_differ():
    assert not np.array_equal(substream(1, Stream.BATCH).random(8), substream(2, Stream.BATCH).random(8))
