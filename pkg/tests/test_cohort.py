import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dipro.cohort import (
    LOS_PRIORS,
    T_PROBS,
    CohortConfig,
    generate_cohort,
    generate_episode,
    inject_missing_ehr,
    oracle_path,
    read_cohort,
    read_oracle,
    attach_oracle,
    split_cohort,
    write_cohort,
)
from dipro.errors import ContractError, ParseError

SMALL = CohortConfig(n_patients=12, R=3, K=2, d_in=8, N=5, P=3, d_static=2, ehr_hours=10)


def test_published_snapshot_distribution():
    assert T_PROBS == pytest.approx((1975 / 2720, 661 / 2720, 82 / 2720, 2 / 2720))
    assert CohortConfig().t_probs == pytest.approx(T_PROBS)


def test_los_priors_renormalised():
    cfg = CohortConfig()
    assert sum(cfg.los_priors) == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(cfg.los_priors, np.array(LOS_PRIORS) / sum(LOS_PRIORS))


@pytest.mark.parametrize("bad", [
    {"R": 0}, {"t_probs": (0.5, 0.5, 0.5, 0.0)}, {"missing_ehr_rate": 1.5},
    {"los_priors": (0.5, 0.5, 0.5, 0.5)}, {"label_priors": "nope"}, {"mortality_regions": (7,)},
])
def test_invalid_config(bad):
    with pytest.raises(ContractError):
        CohortConfig(**bad)


def test_episode_shapes_and_invariants():
    for i in range(20):
        ep = generate_episode(SMALL, i)
        ep.validate()
        T = ep.T
        assert 2 <= T <= 5
        assert ep.region_features.shape == (T, 3, 8)
        assert ep.ehr_series.shape == (11, 5)
        assert np.all(np.diff(ep.ehr_times) == 1.0)  # hourly sampling
        assert ep.demographics.shape == (3,)
        assert ep.progression_labels.shape == (T - 1, 3, 2)
        assert ep.mortality_label in (0, 1)
        assert ep.los_class in (0, 1, 2, 3)
        assert ep.hidden_static.shape == (3, 2)
        assert ep.hidden_dynamic.shape == (T - 1, 3, 2)


def test_generation_is_pure():
    a, b = generate_episode(SMALL, 5), generate_episode(SMALL, 5)
    for f in ("region_features", "ehr_series", "demographics", "progression_labels"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


@given(st.integers(0, 10_000))
def test_label_sign_matches_drift(seed):
    ep = generate_episode(SMALL, seed)
    assert np.array_equal(np.sign(ep.hidden_dynamic), ep.progression_labels)


def test_pure_static_limit_features_constant_over_time():
    cfg = dataclasses.replace(SMALL, feature_noise=0.0, ehr_noise=0.0, dynamic_scale=0.0)
    ep = generate_episode(cfg, 3)
    assert np.allclose(ep.region_features, ep.region_features[:1], atol=0)


def test_swapping_a_pair_negates_dynamic_part():
    from dipro.cohort import _mixing

    cfg = dataclasses.replace(SMALL, feature_noise=0.0, ehr_noise=0.0)
    mix = _mixing(cfg)
    for seed in range(10):
        ep = generate_episode(cfg, seed)
        static_part = cfg.static_scale * ep.hidden_static @ mix.A.T
        f0, f1 = ep.region_features[0], ep.region_features[1]
        step = ep.hidden_dynamic[0] @ mix.B.T
        assert np.allclose(f0, static_part, atol=1e-12)
        assert np.allclose(f1 - f0, step, atol=1e-12)
        assert np.allclose(f0 - f1, -step, atol=1e-12)  # reversed order, same static part


def test_noise_free_static_factor_is_linearly_recoverable():
    cfg = dataclasses.replace(CohortConfig(n_patients=60), feature_noise=0.0, ehr_noise=0.0)
    X, Y = [], []
    for ep in generate_cohort(cfg):
        first = ep.region_features[0]  # no accumulated drift at the first snapshot
        X.append(first)
        Y.append(ep.hidden_static)
    X, Y = np.concatenate(X), np.concatenate(Y)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(Xa, Y, rcond=None)
    err = np.sum((Xa @ W - Y) ** 2) / np.sum((Y - Y.mean(0)) ** 2)
    assert err < 1e-6


def test_snapshot_count_frequencies():
    cfg = CohortConfig(n_patients=1000, R=2, K=2, d_in=4, N=3, P=2, ehr_hours=6)
    counts = np.bincount([generate_episode(cfg, i).T for i in range(1000)], minlength=6)[2:]
    assert np.all(np.abs(counts / 1000 - np.array(T_PROBS)) <= 0.03)


def test_table_label_priors_stress_imbalance():
    cfg = CohortConfig(n_patients=400, R=2, K=2, d_in=4, N=3, P=2, ehr_hours=6)
    labels = np.concatenate([generate_episode(cfg, i).progression_labels[..., 1].ravel() for i in range(400)])
    assert np.mean(labels == 0) == pytest.approx(0.875, abs=0.05)


def test_outcome_calibration():
    cfg = CohortConfig(n_patients=800, R=2, K=2, d_in=4, N=3, P=2, ehr_hours=12)
    eps = generate_cohort(cfg)
    assert np.mean([e.mortality_label for e in eps]) == pytest.approx(cfg.mortality_prevalence, abs=0.04)
    los = np.bincount([e.los_class for e in eps], minlength=4) / len(eps)
    assert np.all(np.abs(los - np.array(cfg.los_priors)) < 0.05)


# --- missing EHR ------------------------------------------------------------------
def test_missing_rate_zero_unchanged():
    ep = generate_episode(SMALL, 0)
    assert inject_missing_ehr(ep, 0.0, 1) is ep


def test_missing_rate_keeps_endpoints_and_order():
    ep = generate_episode(SMALL, 0)
    out = inject_missing_ehr(ep, 0.75, 3)
    assert out.ehr_times[0] == ep.ehr_times[0] and out.ehr_times[-1] == ep.ehr_times[-1]
    assert np.all(np.diff(out.ehr_times) > 0)
    assert out.ehr_series.shape == (len(out.ehr_times), ep.ehr_series.shape[1])


def test_missing_rate_binomial_fraction():
    ep = generate_episode(SMALL, 0)
    n = 10_000
    big = dataclasses.replace(ep, ehr_times=np.arange(n, dtype=float), ehr_series=np.zeros((n, 1)))
    kept = len(inject_missing_ehr(big, 0.5, 9).ehr_times) - 2
    # binomial(n - 2, 0.5) interior rows kept: mean 4999, sd 50
    assert abs(kept / (n - 2) - 0.5) <= 0.02


def test_missing_rate_determinism_and_errors():
    ep = generate_episode(SMALL, 0)
    a, b = inject_missing_ehr(ep, 0.5, 4), inject_missing_ehr(ep, 0.5, 4)
    assert np.array_equal(a.ehr_times, b.ehr_times)
    short = dataclasses.replace(ep, ehr_times=np.array([0.0]), ehr_series=np.zeros((1, 5)))
    with pytest.raises(ContractError):
        inject_missing_ehr(short, 0.5, 0)


def test_split_is_a_partition():
    eps = generate_cohort(SMALL)
    tr, va, te = split_cohort(eps, 0)
    ids = [e.patient_id for e in tr + va + te]
    assert sorted(ids) == sorted(e.patient_id for e in eps)
    assert len(set(ids)) == len(ids)


# --- serialization --------------------------------------------------------------------
def test_round_trip_is_bit_exact(tmp_path):
    eps = generate_cohort(dataclasses.replace(SMALL, annotation_rate=0.7))
    path = tmp_path / "cohort.jsonl"
    write_cohort(eps, path)
    back = read_cohort(path)
    assert len(back) == len(eps)
    for a, b in zip(eps, back):
        assert a.patient_id == b.patient_id
        for f in ("snapshot_times", "region_features", "ehr_times", "ehr_series", "demographics",
                  "progression_labels", "label_mask"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes(), f
        assert (a.mortality_label, a.los_class) == (b.mortality_label, b.los_class)
        assert b.hidden_static is None and b.hidden_dynamic is None


def test_hidden_factors_only_in_sidecar(tmp_path):
    eps = generate_cohort(SMALL)
    path = tmp_path / "c.jsonl"
    write_cohort(eps, path)
    assert "hidden" not in path.read_text()
    oracle = read_oracle(path)
    back = attach_oracle(read_cohort(path), oracle)
    assert oracle_path(path).exists()
    for a, b in zip(eps, back):
        assert a.hidden_static.tobytes() == b.hidden_static.tobytes()
        assert a.hidden_dynamic.tobytes() == b.hidden_dynamic.tobytes()


def test_line_count_equals_episode_count(tmp_path):
    cfg = CohortConfig(n_patients=100, R=2, K=2, d_in=4, N=3, P=2, ehr_hours=6)
    path = tmp_path / "c.jsonl"
    write_cohort(generate_cohort(cfg), path)
    assert len(path.read_text().splitlines()) == 100


def test_truncated_file_names_byte_offset(tmp_path):
    path = tmp_path / "c.jsonl"
    write_cohort(generate_cohort(SMALL)[:3], path)
    raw = path.read_bytes()
    lines = raw.splitlines(keepends=True)
    offset = len(lines[0]) + len(lines[1])
    path.write_bytes(raw[: offset + 40])
    with pytest.raises(ParseError, match=rf"line 3 \(byte offset {offset}\)"):
        read_cohort(path)


def test_malformed_record_names_line(tmp_path):
    path = tmp_path / "c.jsonl"
    write_cohort(generate_cohort(SMALL)[:2], path)
    with path.open("a") as fh:
        fh.write('{"patient_id": "x"}\n')
    with pytest.raises(ParseError, match="line 3"):
        read_cohort(path)
