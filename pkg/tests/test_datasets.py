import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abl import datasets as D
from abl import equation as eqn


def int_oracle(seq, semantics):
    """Label by integer arithmetic on the text form, independent of rule tables."""
    text = eqn.seq_to_str(seq)
    lhs, z = text.split("=")
    x, y = lhs.split("+")
    a, b, c = int(x, 2), int(y, 2), int(z, 2)
    return (a + b == c) if semantics == "binary_add" else (a ^ b == c)


@pytest.fixture(scope="module")
def small_add():
    return D.generate(D.DatasetSpec(lengths=(5, 6, 7, 8), per_length=40, seed=3))


def test_length5_is_single_digits():
    ds = D.generate(D.DatasetSpec(lengths=(5,), per_length=30, seed=1))
    for seq, lab in zip(ds.truth(), ds.labels):
        assert len(seq) == 5 and seq[1] == eqn.Sym.PLUS and seq[3] == eqn.Sym.EQ
        assert lab == int_oracle(seq, "binary_add")
    # [1,+,1,=,1] is a negative instance
    assert int_oracle(eqn.seq_from_str("1+1=1"), "binary_add") is False


@pytest.mark.parametrize("semantics,lengths", [("binary_add", (5, 6, 7, 8, 9)), ("xor", (5, 7, 9, 10))])
def test_truth_parses_and_labels_match_oracle(semantics, lengths):
    ds = D.generate(D.DatasetSpec(semantics, lengths=lengths, per_length=20, seed=2))
    table = D.SEMANTICS[semantics]
    for seq, lab, imgs in zip(ds.truth(), ds.labels, ds.images):
        assert eqn.parse_equation(seq).symbols() == seq
        assert len(imgs) == len(seq)
        assert eqn.entails(table, seq) is bool(lab)
        assert int_oracle(seq, semantics) == bool(lab)


def test_negatives_corrupt_z_only(small_add):
    for seq, lab in zip(small_add.truth(), small_add.labels):
        p = eqn.parse_equation(seq)
        true_z = eqn.bitwise_calc(eqn.ADDITION_TABLE, p.x, p.y)
        if not lab:
            assert p.z != true_z


def test_exact_label_quota(small_add):
    for L in (5, 6, 7, 8):
        sel = small_add.lengths == L
        assert sel.sum() == 40 and small_add.labels[sel].sum() == 20


def test_paper_scale_counts():
    spec = D.DatasetSpec(lengths=tuple(range(5, 27)), per_length=300)
    assert len(spec.lengths) * spec.per_length == 6600
    assert len(D.DatasetSpec().lengths) * D.DatasetSpec().per_length == 1200


def test_all_column_pairs_exercised(small_add):
    counts = {p: 0 for p in eqn.PAIRS}
    for s in small_add.truth():
        for p in D._column_pairs(s):
            counts[p] += 1
    assert all(c >= 0.01 * len(small_add) for c in counts.values())


def test_regeneration_deterministic():
    spec = D.DatasetSpec(lengths=(6, 7), per_length=8, seed=11)
    a, b = D.generate(spec), D.generate(spec)
    assert a.truth() == b.truth() and np.array_equal(a.labels, b.labels)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))


def test_hard_glyphs_render():
    ds = D.generate(D.DatasetSpec(glyphs="hard", lengths=(6,), per_length=4, seed=0), check_pairs=False)
    assert all(x.shape == (6, 16, 16) and x.min() >= 0 and x.max() <= 1 for x in ds.images)


@pytest.mark.parametrize("L", [6, 8])
def test_xor_impossible_lengths(monkeypatch, L):
    # equal-length XOR operands shrink z, unequal ones keep the longer length: 6 and 8 never fit
    monkeypatch.setattr(D, "MAX_ATTEMPTS", 2000)
    with pytest.raises(D.UnsatisfiableLength):
        D.generate(D.DatasetSpec("xor", lengths=(L,), per_length=1))


def test_spec_validation():
    with pytest.raises(D.UnsatisfiableLength):
        D.DatasetSpec(lengths=(4,))
    with pytest.raises(ValueError):
        D.DatasetSpec(per_length=0)
    with pytest.raises(ValueError):
        D.DatasetSpec(positive_fraction=1.0)
    with pytest.raises(ValueError):
        D.DatasetSpec(semantics="mult")


def test_training_view_hides_truth(small_add):
    view = small_add.training_view()
    assert not hasattr(view, "truth") and not hasattr(view, "_truth")
    assert len(view) == len(small_add) and view[0].length == len(small_add.images[0])
    sub = view.subset([0, 2])
    assert len(sub) == 2 and sub.labels[1] == small_add.labels[2]


# --- persistence --------------------------------------------------------------

def test_roundtrip(tmp_path, small_add):
    D.save(small_add, tmp_path / "d")
    back = D.load(tmp_path / "d")
    assert back.spec == small_add.spec and back.effective_seed == small_add.effective_seed
    assert np.array_equal(back.labels, small_add.labels)
    assert all(np.array_equal(x, y) for x, y in zip(back.images, small_add.images))
    with pytest.raises(LookupError):
        back.truth()
    assert D.load_truth(tmp_path / "d") == small_add.truth()
    # bytes identical on a second save
    D.save(D.load_with_truth(tmp_path / "d"), tmp_path / "e")
    for name in ("images.bin", "labels.bin", "truth.sidecar", "manifest.json"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_truncated_file_rejected(tmp_path, small_add):
    D.save(small_add, tmp_path / "d")
    p = tmp_path / "d" / "images.bin"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(D.FormatError):
        D.load(tmp_path / "d")


def test_stale_checksum_rejected(tmp_path, small_add):
    D.save(small_add, tmp_path / "d")
    p = tmp_path / "d" / "labels.bin"
    raw = bytearray(p.read_bytes())
    raw[0] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(D.FormatError):
        D.load(tmp_path / "d")


def test_version_checked(tmp_path, small_add):
    D.save(small_add, tmp_path / "d")
    m = tmp_path / "d" / "manifest.json"
    d = json.loads(m.read_text())
    d["version"] = 99
    m.write_text(json.dumps(d))
    with pytest.raises(D.VersionError):
        D.load(tmp_path / "d")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(5,), (6, 8), (7,)]))
def test_generation_invariants(seed, lengths):
    ds = D.generate(D.DatasetSpec(lengths=lengths, per_length=6, seed=seed), check_pairs=False)
    for seq, lab in zip(ds.truth(), ds.labels):
        assert eqn.entails(eqn.ADDITION_TABLE, seq) is bool(lab)
    for L in lengths:
        assert ds.labels[ds.lengths == L].sum() == 3
