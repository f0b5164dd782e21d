import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitcodec import range_coder as rc


def random_table(rng, with_escape=None):
    n = int(rng.integers(1, 40))
    probs = rng.dirichlet(np.full(n, 0.3))
    lo = int(rng.integers(-20, 20))
    escape = rng.uniform(0, 1e-3) if (with_escape if with_escape is not None else rng.random() < 0.7) else None
    return rc.build_cdf_table(probs, lo=lo, escape_mass=escape, offset=int(rng.integers(-5, 5)))


def test_table_examples():
    assert rc.build_cdf_table([1, 1, 1, 1]).cdf == (0, 16384, 32768, 49152, 65536)
    assert rc.build_cdf_table([1, 0, 0], escape_mass=0).cdf == (0, 65533, 65534, 65535, 65536)


def test_quantize_pmf_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.dirichlet(np.full(int(rng.integers(1, 300)), 0.1))
        c = rc.quantize_pmf(p)
        assert c.sum() == rc.TOTAL and c.min() >= 1
    with pytest.raises(ValueError):
        rc.quantize_pmf(np.array([0.5, -0.1]))


def test_uniform_four_symbols_costs_two_bits_each():
    rng = np.random.default_rng(1)
    table = rc.build_cdf_table([1, 1, 1, 1])
    syms = rng.integers(0, 4, 1000).tolist()
    data = rc.encode(syms, [table] * 1000)
    assert len(data) * 8 == 2000
    assert rc.decode(data, [table] * 1000) == syms


def test_empty_stream():
    assert rc.encode([], []) == b""
    assert rc.decode(b"", []) == []


def test_long_run_of_most_probable_symbol():
    table = rc.build_cdf_table([0.999, 0.001])
    data = rc.encode([0] * 5000, [table] * 5000)
    assert rc.decode(data, [table] * 5000) == [0] * 5000
    assert len(data) <= 5000 * table.code_length(0) / 8 + 2


def test_randomized_roundtrip_with_escapes():
    rng = np.random.default_rng(2)
    for _ in range(50):
        tables = [random_table(rng) for _ in range(int(rng.integers(1, 300)))]
        syms = []
        for t in tables:
            if t.has_escape and rng.random() < 0.05:
                syms.append(t.offset + t.hi + int(rng.integers(1, 5000)))
            elif t.has_escape and rng.random() < 0.05:
                syms.append(t.offset + t.lo - int(rng.integers(1, 70000)))
            else:
                syms.append(t.offset + t.lo + int(rng.integers(0, t.n_symbols)))
        data = rc.encode(syms, tables)
        assert rc.decode(data, tables) == syms
        assert len(data) * 8 <= rc.ideal_bits(syms, tables) + 16


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(min_value=-3, max_value=3), min_size=0, max_size=200))
def test_roundtrip_property(symbols):
    table = rc.build_cdf_table([0.1, 0.2, 0.4, 0.2, 0.1], lo=-2, escape_mass=1e-4)
    data = rc.encode(symbols, [table] * len(symbols))
    assert rc.decode(data, [table] * len(symbols)) == symbols


def test_symbol_outside_alphabet_without_escape():
    with pytest.raises(ValueError):
        rc.encode([5], [rc.build_cdf_table([0.5, 0.5])])


def test_truncated_stream_detected():
    rng = np.random.default_rng(3)
    table = rc.build_cdf_table(rng.dirichlet(np.ones(50)))
    syms = rng.integers(0, 50, 400).tolist()
    data = rc.encode(syms, [table] * 400)
    with pytest.raises(rc.CorruptStreamError):
        rc.decode(data[: len(data) // 2], [table] * 400)


def test_trailing_garbage_detected():
    table = rc.build_cdf_table([0.5, 0.5])
    data = rc.encode([0, 1, 1, 0] * 50, [table] * 200)
    with pytest.raises(rc.CorruptStreamError):
        rc.decode(data + b"\x01" * 16, [table] * 200)


def test_invalid_table_rejected():
    with pytest.raises(ValueError):
        rc.CdfTable((0, 0, rc.TOTAL), 0, 1, 0, False).validate()
    with pytest.raises(ValueError):
        rc.CdfTable((0, 5, 10), 0, 1, 0, False).validate()


def test_varint_and_chunks():
    for n in [0, 1, 127, 128, 300, 2 ** 35]:
        data = rc.write_varint(n)
        assert rc.read_varint(data, 0) == (n, len(data))
    assert rc.write_varint(300) == b"\xac\x02"
    buf = rc.write_chunk(b"abc") + rc.write_chunk(b"")
    a, pos = rc.read_chunk(buf, 0)
    b, pos = rc.read_chunk(buf, pos)
    assert (a, b, pos) == (b"abc", b"", len(buf))
    with pytest.raises(rc.CorruptStreamError):
        rc.read_chunk(b"\x05ab", 0)
    with pytest.raises(ValueError):
        rc.write_varint(-1)
