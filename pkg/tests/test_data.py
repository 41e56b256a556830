import math
import warnings

import numpy as np
import pytest

from erp_mtl.data import (
    DataError,
    DataWarning,
    DuplicateKeyError,
    NonPositiveValueError,
    ParseError,
    Token,
    apply_standardization,
    classify_content,
    fit_standardization,
    format_word_signals,
    load_word_signals,
    log_transform,
    make_split,
    modulus_transform,
    read_word_signals,
    standardize_and_average,
    transformed_values,
    write_word_signals,
)
from erp_mtl.signals import UnknownSignalError

HEADER = "# erp-mtl word-signals v1\nsentence_id\tword_index\tparticipant_id\tword\tpos\tN400\tREAD\n"


@pytest.mark.parametrize(
    "text,pos,expected",
    [("the", "DET", False), ("is", "AUX", True), ("is", "VERB", True), ("quickly", "ADV", True),
     ("she", "PRON", True), ("Paris", "PROPN", True), ("of", "ADP", False), ("red", "adjective", True)],
)
def test_classify_content(text, pos, expected):
    assert classify_content(Token(text, pos)) is expected


def test_classify_needs_tag():
    with pytest.raises(DataError):
        classify_content(Token("x", ""))


def test_log_transform_examples():
    assert log_transform([1.0])[0] == 0.0
    assert log_transform([math.e])[0] == pytest.approx(1.0)
    np.testing.assert_allclose(log_transform([100.0, 200.0]), [4.6052, 5.2983], atol=5e-5)


def test_log_transform_rejects_nonpositive_and_lists_records():
    with pytest.raises(NonPositiveValueError) as info:
        log_transform([[1.0, 0.0], [-3.0, 2.0]], labels=np.array([["a", "b"], ["c", "d"]]))
    assert info.value.records == ["b", "c"]


def test_log_transform_keeps_missing():
    assert np.isnan(log_transform([np.nan, 2.0])[0])


@pytest.mark.parametrize("x", [-3.5, -1.0, 0.0, 0.25, 7.0])
def test_modulus_identity_at_one(x):
    assert modulus_transform(x, 1.0) == pytest.approx(x, abs=1e-15)


def test_modulus_examples():
    assert modulus_transform(math.e - 1, 0.0) == pytest.approx(1.0)
    assert modulus_transform(3.0, 0.5) == pytest.approx(2.0)


def test_modulus_is_odd_and_continuous():
    xs = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(modulus_transform(-xs, 0.3), -modulus_transform(xs, 0.3))
    np.testing.assert_allclose(modulus_transform(xs, 1e-9), modulus_transform(xs, 0.0), atol=1e-7)


def test_two_participant_standardization_oracle():
    values = np.array([[[1.0], [3.0]], [[2.0], [6.0]]])  # (P=2, N=2, S=1)
    train = np.array([True, True])
    out, stats = standardize_and_average(values, train)
    z1 = (values - stats.participant_mean[:, None, :]) / stats.participant_std[:, None, :]
    np.testing.assert_allclose(z1[..., 0], [[-1, 1], [-1, 1]])
    np.testing.assert_allclose(out[:, 0], [-1.0, 1.0])


def test_single_participant_is_plain_zscore():
    rng = np.random.default_rng(0)
    x = rng.normal(5, 2, size=(1, 30, 2))
    out, _ = standardize_and_average(x, np.ones(30, bool))
    expect = (x[0] - x[0].mean(axis=0)) / x[0].std(axis=0)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_test_tokens_use_training_stats_only():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 40, 2))
    train = np.arange(40) < 30
    _, stats = standardize_and_average(x, train)
    y = x.copy()
    y[:, ~train] = rng.normal(100, 50, size=y[:, ~train].shape)
    _, stats2 = standardize_and_average(y, train)
    for k in stats.__dict__:
        np.testing.assert_array_equal(getattr(stats, k), getattr(stats2, k))


def test_missing_aware_participant_average():
    x = np.array([[[0.0], [2.0], [4.0]], [[10.0], [np.nan], [30.0]]])
    out, stats = standardize_and_average(x, np.ones(3, bool))
    assert not np.isnan(out).any()
    # token 1 is the average of participant 0 only
    z0 = (2.0 - stats.participant_mean[0, 0]) / stats.participant_std[0, 0]
    assert out[1, 0] == pytest.approx((z0 - stats.average_mean[0]) / stats.average_std[0])


def test_participant_with_one_observation_excluded():
    x = np.array([[[1.0], [2.0], [3.0]], [[5.0], [np.nan], [np.nan]]])
    with pytest.warns(DataWarning, match="excluded"):
        stats = fit_standardization(x, np.ones(3, bool), ["N400"])
    assert stats.included.tolist() == [[True], [False]]
    out = apply_standardization(x, stats)
    np.testing.assert_allclose(out[:, 0], [-math.sqrt(1.5), 0.0, math.sqrt(1.5)])


def test_split_sizes_and_determinism():
    ids = [f"s{i:03d}" for i in range(205)]
    a = make_split(7, 0, ids)
    assert len(a.test_ids) == 20 and len(a.train_ids) == 185
    assert not set(a.test_ids) & set(a.train_ids)
    assert make_split(7, 0, ids).hash == a.hash
    assert make_split(7, 0, list(reversed(ids))).hash == a.hash


def test_split_runs_differ():
    ids = [f"s{i}" for i in range(205)]
    tests = {make_split(3, i, ids).test_ids for i in range(100)}
    assert len(tests) == 100


def test_split_errors():
    with pytest.raises(DataError):
        make_split(0, 0, ["a", "a"] + [str(i) for i in range(10)])
    with pytest.raises(DataError):
        make_split(0, 0, [str(i) for i in range(9)])


def test_round_trip(small_synthetic, tmp_path):
    ds = small_synthetic.dataset
    path = tmp_path / "words.tsv"
    write_word_signals(ds, path)
    again = load_word_signals(path)
    assert list(again.frames()) == list(ds.frames())
    assert again.sentence_ids == ds.sentence_ids
    assert format_word_signals(again) == path.read_text()


def test_empty_file_warns(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    with pytest.warns(DataWarning):
        ds = load_word_signals(p)
    assert ds.n_tokens == 0 and not ds.sentences


def test_header_only_warns():
    with pytest.warns(DataWarning):
        ds = read_word_signals(HEADER)
    assert ds.signals == ("N400", "READ")


def test_duplicate_key_named():
    text = HEADER + "s1\t0\tp1\tcat\tNOUN\t0.5\t300\n" + "s1\t0\tp1\tcat\tNOUN\t0.7\t310\n"
    with pytest.raises(DuplicateKeyError) as info:
        read_word_signals(text)
    assert info.value.key[:3] == ("s1", 0, "p1")
    assert "s1" in str(info.value)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 3"):
        read_word_signals(HEADER + "s1\t0\tp1\tcat\tNOUN\tabc\t300\n")
    with pytest.raises(ParseError, match="line 3"):
        read_word_signals(HEADER + "s1\t0\tp1\tcat\tNOUN\t1\n")
    with pytest.raises(ParseError):
        read_word_signals(HEADER + "s1\t0\tp1\tcat\t\t1\t2\n")
    with pytest.raises(ParseError):
        read_word_signals("# erp-mtl word-signals v9\n" + HEADER.split("\n", 1)[1])


def test_unknown_signal_column():
    with pytest.raises(UnknownSignalError):
        read_word_signals("sentence_id\tword_index\tparticipant_id\tword\tpos\tN500\n")


def test_gap_in_word_indices():
    with pytest.raises(DataError, match="contiguous"):
        read_word_signals(HEADER + "s1\t0\tp1\ta\tDET\t1\t2\ns1\t2\tp1\tb\tNOUN\t1\t2\n")


def test_missing_cells_and_durations():
    ds = read_word_signals(HEADER + "s1\t0\tp1\tthe\tDET\t\t250\ns1\t1\tp1\tcat\tNOUN\t-1.5\tNA\n")
    assert np.isnan(ds.values[0, 0, 0]) and np.isnan(ds.values[0, 1, 1])
    tv = transformed_values(ds)
    assert tv[0, 0, 1] == pytest.approx(math.log(250))
    assert tv[0, 1, 0] == -1.5  # ERP values are not log-transformed


def test_nonpositive_duration_names_record():
    ds = read_word_signals(HEADER + "s1\t0\tp1\tthe\tDET\t0.1\t0\n")
    with pytest.raises(NonPositiveValueError, match="s1"):
        transformed_values(ds)


def test_no_spurious_warnings(small_synthetic, tmp_path):
    path = tmp_path / "w.tsv"
    write_word_signals(small_synthetic.dataset, path)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DataWarning)
        load_word_signals(path)
