import numpy as np
import pytest

from dipro import autodiff as ad
from dipro.cohort import CohortConfig, generate_cohort, generate_episode
from dipro.config import ABLATIONS, ExperimentConfig, micro_config, smoke_config
from dipro.errors import DimensionError
from dipro.model import Batch, DiPro, group_by_shape, make_batches


def test_group_by_shape_and_batches():
    cfg = smoke_config()
    eps = generate_cohort(cfg.cohort)
    groups = group_by_shape(eps)
    assert sum(g.size for g in groups) == len(eps)
    assert all(len({e.T for e in g.episodes}) == 1 for g in groups)
    batches = make_batches(eps, 5, np.random.default_rng(0))
    assert sum(g.size for b in batches for g in b) == len(eps)
    assert all(sum(g.size for g in b) <= 5 for b in batches)


def test_mixed_shapes_cannot_stack():
    cfg = smoke_config().cohort
    eps = generate_cohort(cfg)
    Ts = {}
    for e in eps:
        Ts.setdefault(e.T, e)
    if len(Ts) < 2:
        pytest.skip("cohort has one snapshot count")
    with pytest.raises(DimensionError):
        Batch.stack(list(Ts.values())[:2])


@pytest.mark.parametrize("T", [2, 3, 4, 5])
@pytest.mark.parametrize("hours", [2, 9, 72])
def test_fusion_state_shape_contract(T, hours):
    probs = [0.0] * 4
    probs[T - 2] = 1.0
    cohort = CohortConfig(n_patients=2, R=3, K=2, d_in=4, N=3, P=2, d_static=1, t_probs=tuple(probs),
                          ehr_hours=hours, min_snapshot_gap=0.1)
    cfg = ExperimentConfig(d=8, heads=2, cohort=cohort)
    model = DiPro(cfg).eval()
    batch = group_by_shape(generate_cohort(cohort))[0]
    out = model(batch)
    st, B, I, L, R, d = out.fusion, batch.size, T - 1, hours + 1, 3, 8
    assert st.E_global.shape == (B, L, d)
    assert st.E_local.shape == (B, I, L, d)
    assert st.D_fuse.shape == (B, I, R, d)
    assert st.D_global.shape == (B, I * R, d)
    assert st.H_global.shape == (B, L, d)
    assert st.H_static.shape == (B, I * R + 1, d)
    assert out.logits.shape == (B, I, R, 2, 3)
    for t in (st.E_global, st.E_local, st.D_fuse, st.H_global, st.H_static):
        assert np.isfinite(t.data).all()
    assert np.allclose(st.local_weights.sum(-1), 1.0, atol=1e-12)
    assert np.all(st.local_weights >= 0)
    assert np.allclose(st.static_weights.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("task,n", [("mortality", 2), ("los", 4)])
@pytest.mark.parametrize("variant", ABLATIONS)
def test_every_variant_runs(task, n, variant):
    cfg = micro_config(task).replace(ablation=variant)
    batch = group_by_shape(generate_cohort(cfg.cohort))[0]
    out = DiPro(cfg).eval()(batch)
    assert out.logits.shape == (batch.size, n)
    assert (out.S is None) == (variant == "A4")
    assert (out.D_rev is None) == (variant in ("A2", "A3", "A4"))
    assert (out.fusion is None) == (variant in ("A1", "A3", "A4"))


def test_ablation_containment():
    for task in ("progression", "mortality", "los"):
        counts = {v: DiPro(micro_config(task).replace(ablation=v)).num_parameters() for v in ABLATIONS}
        full = counts["full"]
        assert counts["A4"] < full
        assert all(counts[v] <= full for v in ABLATIONS)
        assert counts["A3"] <= counts["A1"] and counts["A4"] <= counts["A3"]
        assert counts["B1"] == counts["B2"] == counts["B3"] == full


def test_region_dimension_checked():
    cfg = micro_config()
    batch = group_by_shape(generate_cohort(cfg.cohort))[0]
    batch.region_features = batch.region_features[..., :3]
    with pytest.raises(DimensionError):
        DiPro(cfg)(batch)


def test_model_is_deterministic_in_seed():
    cfg = micro_config()
    a, b, c = DiPro(cfg, 3), DiPro(cfg, 3), DiPro(cfg, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert any(sa[k].tobytes() != sc[k].tobytes() for k in sa)


def test_padding_free_groups_agree_with_single_episodes():
    cfg = micro_config("mortality")
    eps = generate_cohort(cfg.cohort)
    model = DiPro(cfg).eval()
    with ad.no_grad():
        joint = model(Batch.stack(eps)).logits.data
        single = np.concatenate([model(Batch.stack([e])).logits.data for e in eps])
    assert np.allclose(joint, single, atol=1e-12)
