"""Counter-based, splittable random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``. Child
streams come from ``SeedSequence.spawn`` so that results never depend on how
work is scheduled across processes.
"""
import numpy as np


def make_generator(seed=None):
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def spawn(seed, n):
    """``n`` independent generators derived from ``seed`` (int or SeedSequence)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(n)]


def split(gen, n):
    """Split an existing generator into ``n`` children (advances ``gen``)."""
    keys = gen.integers(0, 2**63 - 1, size=(n, 2), dtype=np.int64)
    return [make_generator([int(k) for k in row]) for row in keys]


def generator_state(gen):
    """JSON-friendly snapshot of a generator's bit-generator state."""
    return _to_jsonable(gen.bit_generator.state)


def restore_generator(state):
    bg = np.random.Philox()
    bg.state = _from_jsonable(state)
    return np.random.Generator(bg)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
