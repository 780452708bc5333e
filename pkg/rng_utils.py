"""Named, counter-based random streams derived from one master seed.

Every consumer (coordinator, each worker, evaluator noise) draws from its own
Philox stream keyed by ``(master_seed, name)``, so a worker running in another
process draws exactly what the in-process worker would draw.
"""

import hashlib

import numpy as np


def derive_key(master_seed, name):
    """128-bit Philox key for the stream ``name`` under ``master_seed``."""
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def make_stream(master_seed, name):
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, name)))


def hashed_stream(*parts):
    """Stream keyed by a hash of ``parts``; a pure function of its inputs."""
    digest = hashlib.sha256(repr(tuple(parts)).encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "big")))


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {key: _to_jsonable(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {key: _from_jsonable(item) for key, item in value.items()}
    return value


def stream_state(generator):
    """JSON-compatible position of ``generator``."""
    return _to_jsonable(generator.bit_generator.state)


def restore_stream(state):
    """Rebuild a generator positioned exactly where ``stream_state`` saw it."""
    bit_generator = np.random.Philox()
    bit_generator.state = _from_jsonable(state)
    return np.random.Generator(bit_generator)
