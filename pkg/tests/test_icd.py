import numpy as np
import pytest
from hypothesis import given, strategies as st

from mortseq.errors import InvalidTable, MalformedCode, UnmappedCode
from mortseq.icd import (ONE_HOT_DIM, UNNATURAL_RECODES, IcdCode, RecodeTable, all_codes, canonical,
                         encode_chain, encode_one_hot, format_code, is_infectious, parse_code, recode)

codes = st.builds(
    IcdCode,
    st.sampled_from([chr(c) for c in range(ord("A"), ord("Z") + 1)]),
    st.integers(0, 99),
    st.one_of(st.none(), st.integers(0, 9)),
)


def test_parse_examples():
    assert parse_code("E11.2") == IcdCode("E", 11, 2)
    assert parse_code("I21") == IcdCode("I", 21, None)
    assert parse_code("E112") == IcdCode("E", 11, 2)
    assert parse_code(" e11.2 ") == IcdCode("E", 11, 2)


@pytest.mark.parametrize("bad", ["5A1", "", "E1", "E111.2", "E11.", "EE1", "E11.22", "Ä11", None, 11])
def test_parse_rejects(bad):
    with pytest.raises(MalformedCode):
        parse_code(bad)


def test_code_field_validation():
    with pytest.raises(MalformedCode):
        IcdCode("a", 1)
    with pytest.raises(MalformedCode):
        IcdCode("A", 100)
    with pytest.raises(MalformedCode):
        IcdCode("A", 1, 10)


def test_format_and_canonical():
    assert format_code(IcdCode("E", 11, 2)) == "E11.2"
    assert format_code(IcdCode("E", 11, 2), dot=False) == "E112"
    assert format_code(IcdCode("A", 1)) == "A01"
    assert canonical("e112") == "E11.2"


@pytest.mark.parametrize("code,bits", [
    (IcdCode("A", 0, 0), {0, 26, 126}),
    (IcdCode("Z", 99, None), {25, 125, 136}),
    (IcdCode("B", 20, 4), {1, 46, 130}),
])
def test_one_hot_examples(code, bits):
    v = encode_one_hot(code)
    assert v.shape == (ONE_HOT_DIM,)
    assert set(np.flatnonzero(v)) == bits


def _oracle_positions(c):
    # independent index arithmetic over the segment widths 26 / 100 / 11
    seg_etiology = 10 if c.etiology is None else c.etiology
    return {"ABCDEFGHIJKLMNOPQRSTUVWXYZ".index(c.letter), 26 + c.major, 26 + 100 + seg_etiology}


@given(codes)
def test_one_hot_matches_index_oracle(c):
    assert set(np.flatnonzero(encode_one_hot(c))) == _oracle_positions(c)


def test_exhaustive_injective_popcount_roundtrip():
    all_c = list(all_codes())
    assert len(all_c) == 26 * 100 * 11
    M = np.stack([encode_one_hot(c) for c in all_c])
    assert (M.sum(axis=1) == 3).all()
    assert len(np.unique(M, axis=0)) == len(all_c)
    for c in all_c:
        assert parse_code(format_code(c)) == c
        assert parse_code(format_code(c, dot=False)) == c


def test_encode_chain():
    X = encode_chain([IcdCode("A", 0, 0), IcdCode("Z", 99)], dtype=np.float32)
    assert X.shape == (2, ONE_HOT_DIM) and X.dtype == np.float32
    assert (X.sum(axis=1) == 3).all()
    assert encode_chain([]).shape == (0, ONE_HOT_DIM)


def test_infectious():
    assert is_infectious(parse_code("A41.9"))
    assert is_infectious(parse_code("B20"))
    assert not is_infectious(parse_code("C34.1"))


def test_recode_small_table():
    t = RecodeTable.parse("# comment\nA00,B99,1,infectious\n")
    assert recode(parse_code("B20.1"), t) == 1
    assert recode(parse_code("A00"), t) == 1
    assert recode(parse_code("B99.9"), t) == 1
    with pytest.raises(UnmappedCode):
        recode(parse_code("C50"), t)


def test_recode_range_edges():
    t = RecodeTable.parse("A00,A009,1,x\nA01,A01,2,y\nA020,A025,3,z\n")
    assert t.recode(parse_code("A00.9")) == 1
    assert t.recode(parse_code("A01.7")) == 2
    assert t.recode(parse_code("A02.5")) == 3
    # category code without etiology sorts before its subcodes
    with pytest.raises(UnmappedCode):
        t.recode(parse_code("A02"))
    with pytest.raises(UnmappedCode):
        t.recode(parse_code("A02.6"))


@pytest.mark.parametrize("text", [
    "A00,B99,1,x\nB50,C10,2,y\n",  # overlap
    "B00,A99,1,x\n",  # inverted
    "A00,B99,114,x\n",  # id out of range
    "A00,B99\n",  # too few fields
    "A00,Q,1,x\n",  # bad code
])
def test_invalid_tables(text):
    with pytest.raises(InvalidTable):
        RecodeTable.parse(text)


def test_demo_table():
    t = RecodeTable.demo()
    assert set(t.labels) == set(range(1, 114))
    assert t.recode(parse_code("X60")) in UNNATURAL_RECODES
    assert t.recode(parse_code("X85")) in UNNATURAL_RECODES
    assert t.recode(parse_code("Y10")) in UNNATURAL_RECODES
    assert t.recode(parse_code("A41.9")) not in UNNATURAL_RECODES
    # total over the code space
    for c in all_codes():
        t.recode(c)
    assert RecodeTable.parse(t.dumps()).entries == t.entries


def test_demo_first_codes_map_back():
    t = RecodeTable.demo()
    for rid in range(1, 114):
        assert t.recode(t.first_code(rid)) == rid
