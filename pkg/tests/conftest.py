import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def dyadic(rng, shape, lo=-8, hi=8, denom=8):
    """Random small multiples of 1/denom: float32 sums and products of a few of these are exact."""
    return (rng.integers(lo, hi + 1, size=shape) / denom).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Deterministic 40 kB byte corpus with some structure to learn."""
    words = [b"def ", b"return ", b"self", b"(x)", b": ", b"\n    ", b"import numpy", b" = ", b"for i in range"]
    r = np.random.default_rng(7)
    out = bytearray()
    while len(out) < 40_000:
        out += words[r.integers(len(words))]
    return bytes(out[:40_000])


@pytest.fixture
def corpus_file(tmp_path, tiny_corpus):
    path = tmp_path / "corpus.txt"
    path.write_bytes(tiny_corpus)
    return str(path)
