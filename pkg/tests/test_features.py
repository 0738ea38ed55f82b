import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convs2svc.errors import DataError, ShapeError
from convs2svc.features import (FeatureSequence, SpeakerProfile, base_dim, compute_speaker_stats,
                                denormalize, feature_weights, interpolate_logf0, normalize,
                                position_encoding, prepare, read_fseq, read_fseq_raw,
                                reduced_window, stack_reduce, unstack, write_fseq)

N_MCC = 4   # small channel count keeps property tests fast


def random_sequence(rng, n, n_mcc=N_MCC, voiced_frac=0.7):
    d = base_dim(n_mcc)
    data = rng.standard_normal((d, n))
    vuv = (rng.random(n) < voiced_frac).astype(float)
    vuv[rng.integers(n)] = 1.0
    data[n_mcc] = np.where(vuv > 0, 5.0 + 0.2 * rng.standard_normal(n), 0.0)
    data[n_mcc + 2] = vuv
    return FeatureSequence(data, 8.0, 1, n_mcc)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 40), r=st.integers(1, 5), seed=st.integers(0, 10 ** 6))
def test_stack_unstack_round_trip(n, r, seed):
    seq = random_sequence(np.random.default_rng(seed), n)
    stacked = stack_reduce(seq, r)
    assert stacked.length == -(-n // r)
    assert stacked.dim == r * base_dim(N_MCC)
    assert stacked.frame_period == 8.0 * r
    back = unstack(stacked)
    np.testing.assert_array_equal(back.data, seq.data)


def test_stack_layout_places_subframes_in_blocks():
    data = np.arange(base_dim(N_MCC) * 4, dtype=float).reshape(base_dim(N_MCC), 4)
    seq = FeatureSequence(data, n_mcc=N_MCC)
    stacked = stack_reduce(seq, 2).data
    d = base_dim(N_MCC)
    np.testing.assert_array_equal(stacked[:d, 1], data[:, 2])
    np.testing.assert_array_equal(stacked[d:, 1], data[:, 3])


def test_stack_pads_tail_with_zeros():
    seq = random_sequence(np.random.default_rng(0), 5)
    stacked = stack_reduce(seq, 3)
    d = base_dim(N_MCC)
    assert np.all(stacked.data[2 * d:, 1] == 0.0)
    assert stacked.orig_length == 5


def test_interpolate_logf0_fills_unvoiced_linearly():
    seq = random_sequence(np.random.default_rng(1), 6)
    seq.data[N_MCC] = [0, 5.0, 0, 0, 6.5, 0]
    seq.data[N_MCC + 2] = [0, 1, 0, 0, 1, 0]
    out = interpolate_logf0(seq).logf0
    np.testing.assert_allclose(out, [5.0, 5.0, 5.5, 6.0, 6.5, 6.5])


def test_interpolate_rejects_all_unvoiced():
    seq = random_sequence(np.random.default_rng(2), 5)
    seq.data[N_MCC + 2] = 0
    with pytest.raises(DataError):
        interpolate_logf0(seq)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_normalize_round_trip_and_statistics(seed):
    rng = np.random.default_rng(seed)
    seqs = [random_sequence(rng, int(rng.integers(5, 30))) for _ in range(3)]
    prof = compute_speaker_stats(seqs, 0, "a")
    for s in seqs:
        back = denormalize(normalize(s, prof), prof)
        np.testing.assert_allclose(back.data, s.data, atol=1e-10)
    pooled = np.concatenate([normalize(s, prof).data[:, s.voiced()] for s in seqs], axis=1)
    np.testing.assert_allclose(pooled[:N_MCC + 1].mean(axis=1), 0, atol=1e-10)
    np.testing.assert_allclose(pooled[:N_MCC + 1].std(axis=1), 1, atol=1e-10)
    # aperiodicity and V/UV pass through untouched
    np.testing.assert_array_equal(normalize(seqs[0], prof).data[N_MCC + 1:], seqs[0].data[N_MCC + 1:])


def test_speaker_stats_floor_constant_channels():
    seq = random_sequence(np.random.default_rng(3), 10)
    seq.data[0] = 2.0
    prof = compute_speaker_stats([seq])
    assert prof.std[0] > 0


def test_profile_dict_round_trip():
    prof = SpeakerProfile(1, "b", np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    again = SpeakerProfile.from_dict(prof.to_dict())
    np.testing.assert_array_equal(again.mean, prof.mean)
    assert again.name == "b" and again.speaker_id == 1
    with pytest.raises(DataError):
        SpeakerProfile(0, "x", np.zeros(2), np.array([1.0, 0.0]))


def test_position_encoding_values():
    pe = position_encoding(6, 4)
    assert pe.shape == (6, 4)
    np.testing.assert_allclose(pe[0], np.sin(np.arange(4)))
    np.testing.assert_allclose(pe[1], np.cos(np.arange(4)))
    np.testing.assert_allclose(pe[2], np.sin(np.arange(4) / 10000 ** (2 / 6)))
    np.testing.assert_allclose(position_encoding(6, 2, start=2), pe[:, 2:])


def test_feature_weights():
    w = feature_weights(1)
    assert w.shape == (31,)
    np.testing.assert_allclose(w[:28], 1 / 28)
    np.testing.assert_allclose(w[28:], [1 / 10, 1 / 50, 1 / 50])
    w3 = feature_weights(3)
    assert w3.shape == (93,)
    np.testing.assert_allclose(w3.sum(), w.sum())


def test_reduced_windows_at_24ms():
    assert reduced_window(160, 8.0, 3) == 7
    assert reduced_window(320, 8.0, 3) == 13
    assert reduced_window(36, 24.0, 1) == 2   # 1.5 rounds half up


def test_prepare_pipeline():
    seq = random_sequence(np.random.default_rng(4), 11)
    prof = compute_speaker_stats([seq])
    out = prepare(seq, prof, 3)
    assert out.r == 3 and out.length == 4
    assert np.all(np.isfinite(out.data))


def test_fseq_round_trip(tmp_path):
    seq = random_sequence(np.random.default_rng(5), 9)
    path = tmp_path / "a.fseq"
    write_fseq(path, seq)
    back = read_fseq(path, N_MCC)
    np.testing.assert_allclose(back.data, seq.data.astype(np.float32))
    assert back.frame_period == 8.0
    data, fp = read_fseq_raw(path)
    assert data.shape == seq.data.shape


@pytest.mark.parametrize("mutate", ["magic", "truncate", "dim"])
def test_malformed_fseq_is_rejected(tmp_path, mutate):
    seq = random_sequence(np.random.default_rng(6), 4)
    path = tmp_path / "bad.fseq"
    if mutate == "dim":
        write_fseq(path, np.zeros((base_dim(N_MCC) + 1, 4)), 8.0)
    else:
        write_fseq(path, seq)
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:] if mutate == "magic" else raw[:-3])
    with pytest.raises(DataError):
        read_fseq(path, N_MCC)


def test_sequence_shape_checks():
    with pytest.raises(ShapeError):
        FeatureSequence(np.zeros((5, 3)), n_mcc=N_MCC)
    stacked = stack_reduce(random_sequence(np.random.default_rng(7), 6), 2)
    with pytest.raises(ShapeError):
        stacked.logf0
