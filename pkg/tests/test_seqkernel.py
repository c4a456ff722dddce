import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phylokern.bioio import SequenceRecord
from phylokern.seqkernel import (KmerConfig, SimilarityMatrix, Variant, brute_force_entry,
                                 build_similarity_matrix, feature_matrix, gappy_features,
                                 kernel_entry, mismatch_neighbourhoods, mismatch_trie,
                                 spectrum_features)

dna = st.text("ACGT", min_size=0, max_size=40)


def _records(seqs):
    return [SequenceRecord(f"z{i}", s) for i, s in enumerate(seqs)]


# ----------------------------------------------------------------- configs

def test_config_validation():
    with pytest.raises(ValueError):
        KmerConfig.spectrum(0)
    with pytest.raises(ValueError):
        KmerConfig.mismatch(3, 3)
    with pytest.raises(ValueError):
        KmerConfig.gappy(2, -1)
    with pytest.raises(ValueError):
        KmerConfig(Variant.SPECTRUM, 3, m=1)
    assert KmerConfig.mismatch(4, 0).label == "mismatch-k4-m0"
    assert KmerConfig.gappy(3, 2).label == "gappy-k3-g2"


# ------------------------------------------------------------ known values

@pytest.mark.parametrize("z, z2, cfg, expected", [
    ("ACGT", "ACGT", KmerConfig.spectrum(2), 3),
    ("ACGT", "ACGT", KmerConfig.spectrum(5), 0),
    ("AAAA", "AAAT", KmerConfig.mismatch(4, 1), 4),
    ("ACGT", "ACGT", KmerConfig.gappy(1, 1), 5),
    ("AAA", "AAA", KmerConfig.spectrum(1), 9),
    ("AAA", "AAA", KmerConfig.spectrum(2), 4),
])
def test_documented_values(z, z2, cfg, expected):
    assert kernel_entry(z, z2, cfg) == expected
    assert brute_force_entry(z, z2, cfg) == expected


def test_overlapping_occurrences_count():
    assert spectrum_features("AAAA", 2) == {"AA": 3}


def test_gappy_feature_keys():
    assert gappy_features("ACGT", 1, 1) == {"0:AC": 1, "0:CG": 1, "0:GT": 1, "1:AG": 1,
                                            "1:CT": 1}


def test_ambiguous_symbols_match_nothing():
    # every 2-mer touching N is dropped
    assert spectrum_features("ACNGT", 2) == {"AC": 1, "GT": 1}
    assert kernel_entry("ANA", "ANA", KmerConfig.spectrum(2)) == 0
    assert kernel_entry("ACNGT", "ACGT", KmerConfig.mismatch(2, 1)) == \
        brute_force_entry("ACNGT", "ACGT", KmerConfig.mismatch(2, 1))


def test_brute_force_guard():
    with pytest.raises(ValueError, match="guard"):
        brute_force_entry("A" * 20, "A" * 20, KmerConfig.spectrum(11))
    with pytest.raises(ValueError, match="guard"):
        brute_force_entry("A" * 20, "A" * 20, KmerConfig.gappy(6, 0))


# ------------------------------------------------------------ properties

@settings(max_examples=150)
@given(dna, dna, st.integers(1, 5), st.integers(0, 2))
def test_mismatch_matches_oracle(z, z2, k, m):
    m = min(m, k - 1)
    cfg = KmerConfig.mismatch(k, m)
    assert kernel_entry(z, z2, cfg) == brute_force_entry(z, z2, cfg)


@settings(max_examples=150)
@given(dna, dna, st.integers(1, 3), st.integers(0, 2))
def test_gappy_matches_oracle(z, z2, k, g):
    cfg = KmerConfig.gappy(k, g)
    assert kernel_entry(z, z2, cfg) == brute_force_entry(z, z2, cfg)


@given(dna, st.integers(1, 5))
def test_mismatch_zero_is_spectrum(z, k):
    z2 = z[::-1]
    assert kernel_entry(z, z2, KmerConfig.mismatch(k, 0)) == \
        kernel_entry(z, z2, KmerConfig.spectrum(k))


@given(dna, dna, st.integers(2, 6), st.data())
def test_mismatch_monotone_in_m(z, z2, k, data):
    m = data.draw(st.integers(0, k - 2))
    lo = kernel_entry(z, z2, KmerConfig.mismatch(k, m))
    hi = kernel_entry(z, z2, KmerConfig.mismatch(k, m + 1))
    assert hi >= lo


@given(dna, dna, st.sampled_from([KmerConfig.spectrum(3), KmerConfig.mismatch(3, 1),
                                  KmerConfig.gappy(2, 1)]))
def test_cauchy_schwarz(z, z2, cfg):
    q = kernel_entry(z, z2, cfg)
    assert q * q <= kernel_entry(z, z, cfg) * kernel_entry(z2, z2, cfg)


@settings(max_examples=40)
@given(st.lists(st.text("ACGT", min_size=1, max_size=30), min_size=1, max_size=12),
       st.integers(1, 5), st.integers(0, 2))
def test_trie_and_enumeration_agree(seqs, k, m):
    m = min(m, k - 1)
    a = feature_matrix(seqs, KmerConfig.mismatch(k, m), method="trie")
    b = feature_matrix(seqs, KmerConfig.mismatch(k, m), method="enumerate")
    np.testing.assert_array_equal((a @ a.T).toarray(), (b @ b.T).toarray())


def test_trie_prunes_unreachable_leaves():
    # one 6-mer with one mismatch reaches 1 + 6*3 leaves out of 4**6
    _, leaf, _, n_leaves = mismatch_trie(["ACGTAC"], 6, 1)
    assert n_leaves == 19 and len(np.unique(leaf)) == 19
    _, _, _, n_enum = mismatch_neighbourhoods(["ACGTAC"], 6, 1)
    assert n_enum == 19


def test_trie_handles_long_kmers():
    seqs = ["ACGT" * 10, "ACGA" * 10]
    cfg = KmerConfig.mismatch(33, 1)
    phi = feature_matrix(seqs, cfg)  # k > 31 falls back to the trie
    S = (phi @ phi.T).toarray()
    assert S[0, 0] > 0 and S[0, 1] >= 0


# ------------------------------------------------------- similarity matrix

def test_single_sequence_matrix():
    S = build_similarity_matrix(_records(["ACGT"]), KmerConfig.spectrum(2))
    np.testing.assert_array_equal(S.values, [[3.0]])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.text("ACGT", min_size=0, max_size=40), min_size=1, max_size=30),
       st.sampled_from([KmerConfig.spectrum(3), KmerConfig.mismatch(4, 1),
                        KmerConfig.gappy(2, 2), KmerConfig.spectrum(8)]))
def test_matrix_matches_entries_and_is_psd(seqs, cfg):
    S = build_similarity_matrix(_records(seqs), cfg, block=7)
    expected = np.array([[kernel_entry(a, b, cfg) for b in seqs] for a in seqs])
    np.testing.assert_array_equal(S.values, expected)
    np.testing.assert_array_equal(S.values, S.values.T)
    assert np.all(S.values == np.round(S.values)) and np.all(S.values >= 0)
    eig = np.linalg.eigvalsh(S.values)
    assert eig.min() >= -1e-8 * max(np.abs(eig).max(), 1.0)


def test_duplicate_sequences_give_equal_rows(rng):
    base = "".join(rng.choice(list("ACGT"), 60))
    seqs = [base, "".join(rng.choice(list("ACGT"), 60)), base]
    S = build_similarity_matrix(_records(seqs), KmerConfig.mismatch(5, 1))
    np.testing.assert_array_equal(S.values[0], S.values[2])


def test_thread_count_does_not_change_result(rng):
    seqs = ["".join(rng.choice(list("ACGT"), 80)) for _ in range(50)]
    cfg = KmerConfig.spectrum(6)
    one = build_similarity_matrix(_records(seqs), cfg, threads=1, block=8)
    four = build_similarity_matrix(_records(seqs), cfg, threads=4, block=8)
    assert one.values.tobytes() == four.values.tobytes()


def test_cosine_normalization():
    S = build_similarity_matrix(_records(["ACGTAC", "ACGTTT", "GGGG"]), KmerConfig.spectrum(2),
                                normalize=True)
    np.testing.assert_allclose(np.diag(S.values), 1.0)
    assert S.normalized
    assert np.all(S.values <= 1.0 + 1e-12)


def test_similarity_matrix_rejects_asymmetry():
    with pytest.raises(ValueError, match="symmetric"):
        SimilarityMatrix(("a", "b"), [[1.0, 2.0], [0.0, 1.0]])
