import copy
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from emuformer.config import ConfigError, ModelConfig
from emuformer.losses import predictive_entropy
from emuformer.model import MCDropout, build_model
from emuformer.uq import (SampleSet, UQPredictor, aggregate, aggregate_depth, aggregate_segmentation, de_forward,
                          dse_forward, mcd_sample, single_forward)

from oracles import entropy_ref, two_pass_pred_var

D = torch.float64
CFG = ModelConfig(widths=(4, 8, 8, 8), depths=(1, 1, 1, 1), embed_dim=8, num_classes=3)


def test_aggregate_segmentation_example():
    s = SampleSet("DE", seg_probs=torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D).view(2, 1, 2, 1, 1))
    mean, ent = aggregate_segmentation(s)
    assert mean.flatten().tolist() == [0.5, 0.5]
    assert ent.item() == pytest.approx(math.log(2), abs=1e-15)


def test_aggregate_depth_example():
    s = SampleSet("DE", depth_mu=torch.tensor([0.0, 2.0], dtype=D).view(2, 1, 1, 1),
                  depth_s2=torch.tensor([1.0, 3.0], dtype=D).view(2, 1, 1, 1))
    mean, var = aggregate_depth(s)
    assert mean.item() == 1.0 and var.item() == 3.0
    same = SampleSet("DE", depth_mu=torch.full((4, 1, 2, 2), 1.5, dtype=D), depth_s2=torch.full((4, 1, 2, 2), 0.7, dtype=D))
    assert torch.allclose(aggregate_depth(same)[1], torch.full((1, 2, 2), 0.7, dtype=D), atol=1e-15)


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SampleSet("XX", seg_probs=torch.ones(1, 1, 2, 1, 1))
    with pytest.raises(ValueError):
        SampleSet("DE")
    with pytest.raises(ValueError):
        SampleSet("DE", depth_mu=torch.ones(1, 1, 1, 1))


def pred_var_oracle_errors(n: int = 1000, seed: int = 0) -> list[float]:
    """Relative errors of aggregate_depth against a two-pass mean/variance oracle on n random instances."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        T = int(rng.integers(2, 21))
        h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        mu = rng.uniform(0, 10, (T, 1, h, w)) * rng.choice([1e-3, 1.0, 1e3])
        s2 = rng.uniform(1e-6, 5, (T, 1, h, w))
        _, got = aggregate_depth(SampleSet("DE", depth_mu=torch.from_numpy(mu), depth_s2=torch.from_numpy(s2)))
        for i in range(h):
            for j in range(w):
                ref, _ = two_pass_pred_var(mu[:, 0, i, j].tolist(), s2[:, 0, i, j].tolist())
                errs.append(abs(got[0, i, j].item() - ref) / abs(ref))
    return errs


def test_pred_var_matches_two_pass_oracle():
    assert max(pred_var_oracle_errors(300, seed=1)) <= 1e-10


def entropy_gaps(n: int = 1000, seed: int = 0) -> list[float]:
    """entropy(mean probs) - mean(entropy(probs_t)) over n random sample sets; concavity says >= 0."""
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n):
        T, C = int(rng.integers(1, 12)), int(rng.integers(2, 6))
        logits = rng.normal(size=(T, 1, C, 2, 2)) * rng.uniform(0.1, 8)
        probs = torch.softmax(torch.from_numpy(logits), dim=2)
        _, ent = aggregate_segmentation(SampleSet("MCD", seg_probs=probs))
        mean_ent = predictive_entropy(probs, dim=2).mean(0)
        gaps.append(float((ent - mean_ent).min()))
    return gaps


def test_entropy_of_mean_dominates():
    assert min(entropy_gaps(200, seed=3)) >= -1e-7


@given(st.integers(2, 8), st.randoms(use_true_random=False))
def test_aggregation_permutation_invariant(T, rnd):
    g = torch.Generator().manual_seed(rnd.randint(0, 2 ** 31))
    probs = torch.softmax(torch.randn(T, 2, 3, 2, 2, generator=g, dtype=D), 2)
    mu, s2 = torch.rand(T, 2, 2, 2, generator=g, dtype=D), torch.rand(T, 2, 2, 2, generator=g, dtype=D)
    perm = list(range(T))
    rnd.shuffle(perm)
    a = aggregate(SampleSet("DE", probs, mu, s2))
    b = aggregate(SampleSet("DE", probs[perm], mu[perm], s2[perm]))
    for x, y in ((a.seg_mean_probs, b.seg_mean_probs), (a.seg_entropy, b.seg_entropy),
                 (a.depth_mean, b.depth_mean), (a.depth_pred_var, b.depth_pred_var)):
        assert torch.allclose(x, y, rtol=1e-12, atol=1e-15)
    assert (a.depth_pred_var >= s2.mean(0) - 1e-15).all()
    assert ((a.seg_mean_probs.sum(1) - 1).abs() <= 1e-12).all()


def test_aggregate_matches_scalar_oracle():
    g = torch.Generator().manual_seed(7)
    probs = torch.softmax(torch.randn(5, 1, 4, 1, 1, generator=g, dtype=D), 2)
    ent = aggregate_segmentation(SampleSet("MCD", seg_probs=probs))[1].item()
    mean = probs[:, 0, :, 0, 0].mean(0).tolist()
    assert ent == pytest.approx(entropy_ref(mean), abs=1e-14)


# --------------------------------------------------------------------------
# sampling methods


def _model(dropout=0.0, heads=1, seed=0, dtype=torch.float32):
    return build_model(replace(CFG, dropout=dropout, num_heads=heads), seed=seed, dtype=dtype)


def test_mcd_seeded_and_errors():
    model = _model(dropout=0.3)
    x = torch.rand(2, 3, 16, 16)
    a, b = mcd_sample(model, x, T=10, seed=4), mcd_sample(model, x, T=10, seed=4)
    assert a.T == 10 and torch.equal(a.seg_probs, b.seg_probs) and torch.equal(a.depth_s2, b.depth_s2)
    assert not torch.equal(a.seg_probs, mcd_sample(model, x, T=10, seed=5).seg_probs)
    with pytest.raises(ConfigError):
        mcd_sample(_model(dropout=0.0), x)
    # the global RNG is left untouched
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    mcd_sample(model, x, T=3, seed=1)
    assert torch.equal(torch.rand(3), expected)


def test_mcd_single_sample_has_no_epistemic_term():
    model = _model(dropout=0.3)
    s = mcd_sample(model, torch.rand(1, 3, 16, 16), T=1, seed=0)
    mean, var = aggregate_depth(s)
    assert torch.equal(var, s.depth_s2[0]) and torch.equal(mean, s.depth_mu[0])


def mcd_variance(model, x, p, seed, T=10):
    for m in model.modules():
        if isinstance(m, MCDropout):
            m.p = p
    probs = mcd_sample(model, x, T=T, seed=seed).seg_probs
    return probs.var(0, unbiased=False).mean().item()


def test_mcd_variance_grows_with_dropout_rate():
    model = _model(dropout=0.2, seed=1)
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    low = [mcd_variance(model, x, 0.2, s) for s in range(20)]
    high = [mcd_variance(model, x, 0.5, s) for s in range(20)]
    assert np.mean(high) > np.mean(low)
    assert sum(h > lo for h, lo in zip(high, low)) >= 15


def test_dse_single_encoder_pass_and_shape():
    model = _model(heads=10)
    model.encoder.calls = 0
    s = dse_forward(model, torch.rand(1, 3, 16, 16))
    assert s.T == 10 and s.method == "DSE"
    assert model.encoder.calls == 1
    with pytest.raises(ConfigError):
        dse_forward(_model(heads=1), torch.rand(1, 3, 16, 16))


def _identical_heads(model):
    for heads in (model.seg_heads, model.depth_heads):
        for h in heads[1:]:
            h.load_state_dict(heads[0].state_dict())
    return model


def test_dse_identical_heads_zero_spread():
    model = _identical_heads(_model(heads=4, dtype=D))
    s = dse_forward(model, torch.rand(1, 3, 16, 16, dtype=D))
    assert s.seg_probs.var(0).max().item() == 0.0 and s.depth_mu.var(0).max().item() == 0.0


def test_de_errors_and_permutation():
    with pytest.raises(ConfigError):
        de_forward([_model()], torch.rand(1, 3, 16, 16))
    with pytest.raises(ConfigError):
        de_forward([_model(), build_model(replace(CFG, embed_dim=4))], torch.rand(1, 3, 16, 16))
    members = [_model(seed=s, dtype=D) for s in range(4)]
    x = torch.rand(1, 3, 16, 16, dtype=D)
    a = aggregate(de_forward(members, x))
    b = aggregate(de_forward(members[::-1], x))
    assert torch.allclose(a.depth_pred_var, b.depth_pred_var, rtol=1e-12)
    assert torch.allclose(a.seg_entropy, b.seg_entropy, rtol=1e-12)


def collapse_errors(members: int = 10) -> dict[str, float]:
    """Max abs deviation of DE / MCD / DSE of identical members from the single-model prediction (float64)."""
    x = torch.rand(2, 3, 16, 16, dtype=D, generator=torch.Generator().manual_seed(0))
    base = _model(seed=11, dtype=D).eval()
    with torch.no_grad():
        single = base(x, stochastic=False)
    ref = (single.seg.probs, predictive_entropy(single.seg.probs, 1), single.depth.mu, single.depth.s2)

    de = UQPredictor([copy.deepcopy(base) for _ in range(members)], "de").predict(x)
    mcd_model = _model(dropout=0.5, seed=11, dtype=D)
    for m in mcd_model.modules():
        if isinstance(m, MCDropout):
            m.p = 0.0  # every dropout mask keeps all units: identical samples through the MCD path
    mcd = UQPredictor([mcd_model], "mcd", samples=members).predict(x)
    dse_model = _model(heads=members, seed=0, dtype=D)
    for heads, src in ((dse_model.seg_heads, base.seg_heads[0]), (dse_model.depth_heads, base.depth_heads[0])):
        for h in heads:
            h.load_state_dict(src.state_dict())
    dse_model.encoder.load_state_dict(base.encoder.state_dict())
    dse = UQPredictor([dse_model], "dse").predict(x)

    out = {}
    for name, agg in (("de", de), ("mcd", mcd), ("dse", dse)):
        got = (agg.seg_mean_probs, agg.seg_entropy, agg.depth_mean, agg.depth_pred_var)
        out[name] = max(float((g - r).abs().max()) for g, r in zip(got, ref))
    return out


def test_collapse_identities():
    errs = collapse_errors(members=4)
    assert max(errs.values()) <= 1e-7, errs


def test_single_forward_and_predictor():
    model = _model()
    s = single_forward(model, torch.rand(1, 3, 16, 16))
    assert s.T == 1 and s.method == "SINGLE"
    pred = UQPredictor([model])
    pred.predict(torch.rand(1, 3, 16, 16))
    assert pred.forward_calls == 1 and pred.num_parameters() > 0
    with pytest.raises(ConfigError):
        UQPredictor([model, model], "none")
    with pytest.raises(ConfigError):
        UQPredictor([model], "ensemble")
