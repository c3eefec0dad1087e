import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramtalk.synthdata import (
    GroundTruth,
    SynthSpec,
    blink_onsets,
    generate,
    generate_edit_pairs,
    moving_average,
    oracle_lip,
    regenerate,
)


def small(**kw):
    base = dict(n_dims=16, k_lip=4, k_eye=3, audio_dim=6, seq_len=150)
    base.update(kw)
    return SynthSpec(**base)


def test_zero_blink_rate_gives_constant_eye_columns():
    spec = small(blink_rate=0.0)
    corpus, _ = generate(spec, 3)
    eye = list(spec.planted_sets()[1])
    for s in corpus:
        cols = s.expression.values[:, eye]
        assert np.all(cols == cols[0])
        assert s.blink_onsets == []


def test_seeded_corpus_is_bitwise_identical():
    a, ta = generate(small(seed=4), 3)
    b, tb = generate(small(seed=4), 3)
    for x, y in zip(a, b):
        assert x.expression.values.tobytes() == y.expression.values.tobytes()
        assert x.audio.values.tobytes() == y.audio.values.tobytes()
    assert ta.to_dict() == tb.to_dict()
    c, _ = generate(small(seed=5), 1)
    assert not np.array_equal(a[0].audio.values, c[0].audio.values)


def test_blink_count_within_three_sigma_of_poisson():
    rate, seconds = 0.3, 1000.0
    spec = SynthSpec(blink_rate=rate, seq_len=int(seconds * 25))
    n = len(blink_onsets(spec, np.random.default_rng(11)))
    mu = rate * seconds
    assert abs(n - mu) <= 3 * np.sqrt(mu)


def test_blink_intervals_exceed_refractory():
    spec = SynthSpec(blink_rate=0.4, seq_len=25 * 300)
    on = np.array(blink_onsets(spec, np.random.default_rng(0)))
    assert np.all(np.diff(on) >= spec.blink_duration + 3)


def test_lip_columns_follow_planted_map():
    spec = small(seed=1)
    corpus, truth = generate(spec, 2)
    lip = list(spec.planted_sets()[0])
    for s in corpus:
        # explicit loop oracle: lag then 3-tap average of the mapped audio
        mapped = s.audio.values @ truth.lip_map.T
        S = len(mapped)
        ref = np.zeros_like(mapped)
        for t in range(S):
            acc = np.zeros(mapped.shape[1])
            for u in (t - 1, t, t + 1):
                if 0 <= u < S:
                    acc += mapped[u]
            ref[t] = acc / 3
        shifted = np.zeros_like(ref)
        shifted[spec.lip_lag:] = ref[:-spec.lip_lag]
        np.testing.assert_allclose(s.expression.values[:, lip], shifted, atol=1e-12)
        np.testing.assert_allclose(oracle_lip(s.audio.values, truth.lip_map, spec.lip_lag), shifted, atol=1e-12)


def test_moving_average_is_same_length_and_preserves_constants_inside():
    x = np.ones((10, 2))
    y = moving_average(x)
    assert y.shape == x.shape
    np.testing.assert_allclose(y[1:-1], 1.0)


def test_edit_pairs_touch_only_planted_columns():
    spec = small(seed=2)
    corpus, truth = generate(spec, 3)
    lip, eye = spec.planted_sets()
    others_lip = [i for i in range(spec.n_dims) if i not in lip]
    others_eye = [i for i in range(spec.n_dims) if i not in eye]
    for orig, lc, ec in generate_edit_pairs(spec, corpus):
        np.testing.assert_array_equal(lc.values[:, others_lip], orig.values[:, others_lip])
        np.testing.assert_array_equal(ec.values[:, others_eye], orig.values[:, others_eye])
        assert np.all(lc.values[:, list(lip)] == 0)
        np.testing.assert_array_equal(ec.values[:, list(eye)], np.broadcast_to(truth.eye_closed, (orig.frames, len(eye))))
        delta = np.abs(orig.values - lc.values).mean(axis=0)
        assert np.all(delta[others_lip] == 0)


def test_ground_truth_rebuilds_corpus_bit_exactly():
    spec = small(seed=8)
    corpus, truth = generate(spec, 3)
    record = GroundTruth.from_dict(json.loads(json.dumps(truth.to_dict())))
    again = regenerate(record, 3)
    for a, b in zip(corpus, again):
        assert a.expression.values.tobytes() == b.expression.values.tobytes()
        assert a.audio.values.tobytes() == b.audio.values.tobytes()
    assert record.blink_onsets == truth.blink_onsets


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_planted_sets_disjoint_for_any_seed(seed):
    lip, eye = SynthSpec(seed=seed).planted_sets()
    assert len(lip) == 13 and len(eye) == 8
    assert not set(lip) & set(eye)


@pytest.mark.parametrize("kw", [
    dict(blink_rate=-0.1),
    dict(blink_duration=0),
    dict(seq_len=0),
    dict(blink_rate=3.0),
    dict(planted_lip=(0, 1), planted_eye=(1, 2)),
    dict(k_lip=60, k_eye=10),
])
def test_invalid_spec_rejected(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_spec_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        SynthSpec.from_dict({"n_dim": 3})
    spec = small(seed=3)
    assert SynthSpec.from_dict(spec.to_dict()) == SynthSpec.from_dict(spec.to_dict())
    assert SynthSpec.from_dict(spec.to_dict()).planted_sets() == spec.planted_sets()
