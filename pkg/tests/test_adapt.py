import json
import math

import numpy as np
import pytest
import torch

import ttt_histo.adapt as adapt
from ttt_histo.adapt import (
    AdaptConfig,
    adabn_adapt,
    entropy,
    episodes,
    evaluate_with_adaptation,
    memo_adapt,
    read_adapt_csv,
    tent_adapt,
    ttt_adapt,
    write_adapt_csv,
    write_audit_jsonl,
)
from ttt_histo.model import bn_layers, build_model, state_digest
from ttt_histo.shifts import ShiftSpec
from ttt_histo.tasks import AugmentationConfig
from ttt_histo.training import evaluate_primary, predict_logits


@pytest.fixture
def capture_mid_episode(monkeypatch):
    """Record role digests right before every restore inside the adapt module."""
    seen = []
    real = adapt.restore

    def spy(model, snap):
        seen.append({r: state_digest(model, {r}) for r in ("encoder", "primary", "secondary", "affine", "bn_stats")})
        real(model, snap)

    monkeypatch.setattr(adapt, "restore", spy)
    return seen


def _unit(splits, n=8, split="testA"):
    return splits[split].tensor(np.arange(n))


def test_entropy_values():
    assert abs(entropy([1 / 3, 1 / 3, 1 / 3]) - math.log(3)) < 1e-12
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(entropy([0.5, 0.25, 0.25]) - 1.5 * math.log(2)) < 1e-12
    assert abs(entropy([[1, 0, 0], [0.5, 0.25, 0.25]]) - 0.75 * math.log(2)) < 1e-12
    for bad in ([0.5, 0.6, 0.1], [1.2, -0.2, 0.0]):
        with pytest.raises(ValueError):
            entropy(bad)


@pytest.mark.parametrize("kw", [{"method": "magic"}, {"step_size": -1e-3}, {"memo_k": 0},
                                {"granularity": "patient"}, {"n_steps": -1}])
def test_bad_adapt_config(kw):
    with pytest.raises(ValueError):
        AdaptConfig(**kw)


def test_ttt_eta_zero_is_exact(simclr_model, small_splits):
    unit = _unit(small_splits)
    base = predict_logits(simclr_model, unit[:, 0])
    out = ttt_adapt(simclr_model, unit, AdaptConfig(step_size=0.0), np.random.default_rng(0))
    assert torch.equal(out.logits, base)
    assert out.pre_loss == out.post_loss


def test_ttt_scope_and_reset(rsp_model, small_splits, capture_mid_episode):
    before = {r: state_digest(rsp_model, {r}) for r in ("encoder", "primary", "secondary", "bn_stats")}
    full = state_digest(rsp_model)
    ttt_adapt(rsp_model, _unit(small_splits), AdaptConfig(step_size=1e-2), np.random.default_rng(1))
    mid = capture_mid_episode[0]
    assert mid["primary"] == before["primary"]
    assert mid["bn_stats"] == before["bn_stats"]
    assert mid["encoder"] != before["encoder"] and mid["secondary"] != before["secondary"]
    assert state_digest(rsp_model) == full


def test_ttt_updating_bn_stats_is_opt_in(simclr_model, small_splits, capture_mid_episode):
    before = state_digest(simclr_model, {"bn_stats"})
    ttt_adapt(simclr_model, _unit(small_splits), AdaptConfig(step_size=1e-3, update_bn_stats=True),
              np.random.default_rng(1))
    assert capture_mid_episode[0]["bn_stats"] != before
    assert state_digest(simclr_model, {"bn_stats"}) == before


def test_ttt_task_mismatch(simclr_model, small_splits):
    with pytest.raises(ValueError):
        ttt_adapt(simclr_model, _unit(small_splits), AdaptConfig(), np.random.default_rng(0), task="rsp")


def test_ttt_nonfinite_loss_is_flagged(simclr_model, small_splits, monkeypatch):
    unit = _unit(small_splits)
    base = predict_logits(simclr_model, unit[:, 0])
    digest = state_digest(simclr_model)
    monkeypatch.setattr(adapt, "nt_xent", lambda out, t: out.sum() * float("nan"))
    out = ttt_adapt(simclr_model, unit, AdaptConfig(step_size=1e-3), np.random.default_rng(0))
    assert out.flags == ["nonfinite_loss"]
    assert torch.equal(out.logits, base)
    assert state_digest(simclr_model) == digest


@pytest.mark.parametrize("fixture", ["simclr_model", "rsp_model"])
def test_ttt_descent_at_small_step(fixture, small_splits, request):
    model = request.getfixturevalue(fixture)
    test = small_splits["testA"]
    failures = 0
    for seed in range(10):
        idx = np.random.default_rng(seed).choice(len(test), 8, replace=False)
        out = ttt_adapt(model, test.tensor(idx), AdaptConfig(step_size=1e-4), np.random.default_rng(seed))
        failures += out.post_loss > out.pre_loss
    assert failures <= 1


def test_tent_scope_and_descent(simclr_model, small_splits):
    before = state_digest(simclr_model, {"primary"})
    enc_non_affine = [n for n, _ in simclr_model.named_parameters()
                      if n.startswith("encoder") and "affine" not in simclr_model.param_roles[n]]
    snap = {n: p.detach().clone() for n, p in simclr_model.named_parameters()}
    grabbed = {}
    real = adapt.restore

    def grab(model, s):
        grabbed.update({n: p.detach().clone() for n, p in model.named_parameters()})
        real(model, s)

    adapt.restore = grab
    try:
        out = tent_adapt(simclr_model, _unit(small_splits, 16), AdaptConfig(step_size=1e-2))
    finally:
        adapt.restore = real
    assert all(torch.equal(grabbed[n], snap[n]) for n in enc_non_affine)
    assert any(not torch.equal(grabbed[n], snap[n]) for n in simclr_model.param_roles
               if "affine" in simclr_model.param_roles[n])
    assert out.post_loss <= out.pre_loss
    assert state_digest(simclr_model, {"primary"}) == before


def test_tent_descent_statistics(simclr_model, small_splits):
    test = small_splits["testA"]
    failures = 0
    for seed in range(10):
        idx = np.random.default_rng(seed).choice(len(test), 8, replace=False)
        out = tent_adapt(simclr_model, test.tensor(idx), AdaptConfig(method="tent", step_size=1e-4))
        failures += out.post_loss > out.pre_loss
    assert failures <= 1


def test_tent_single_sample_rules(simclr_model, small_splits):
    one = _unit(small_splits, 1)
    with pytest.raises(ValueError):
        tent_adapt(simclr_model, one, AdaptConfig(method="tent"))
    with pytest.warns(UserWarning):
        tent_adapt(simclr_model, one, AdaptConfig(method="tent", tent_allow_single=True))


def test_tent_eta_zero(simclr_model, small_splits):
    unit = _unit(small_splits)
    base = predict_logits(simclr_model, unit[:, 0])
    assert torch.equal(tent_adapt(simclr_model, unit, AdaptConfig(method="tent", step_size=0.0)).logits, base)


def test_memo_identity_copies_marginal(simclr_model, small_splits):
    sample = _unit(small_splits, 1)[0]
    cfg = AdaptConfig(method="memo", memo_k=8, augment=AugmentationConfig.identity())
    copies = adapt.memo_copies(sample[0], cfg, np.random.default_rng(0))
    simclr_model.eval()
    with torch.no_grad():
        single = torch.softmax(simclr_model(sample[0][None]), 1)[0]
        marginal = adapt.marginal_probs(adapt.per_sample_logits(simclr_model, copies))
    assert torch.equal(marginal, single)
    cfg3 = AdaptConfig(method="memo", memo_k=3, augment=AugmentationConfig.identity())
    with torch.no_grad():
        m3 = adapt.marginal_probs(adapt.per_sample_logits(
            simclr_model, adapt.memo_copies(sample[0], cfg3, np.random.default_rng(0))))
    assert torch.allclose(m3, single, atol=1e-7)


def test_memo_eta_zero_and_descent(simclr_model, small_splits):
    test = small_splits["testA"]
    failures = 0
    for seed in range(10):
        sample = test.tensor([seed])[0]
        base = predict_logits(simclr_model, sample[0][None])
        zero = memo_adapt(simclr_model, sample, AdaptConfig(method="memo", step_size=0.0), np.random.default_rng(seed))
        assert torch.equal(zero.logits, base)
        out = memo_adapt(simclr_model, sample, AdaptConfig(method="memo", step_size=1e-4), np.random.default_rng(seed))
        failures += out.post_loss > out.pre_loss
    assert failures <= 1


def test_memo_rejects_batches(simclr_model, small_splits):
    with pytest.raises(ValueError):
        memo_adapt(simclr_model, _unit(small_splits, 2)[:, 0], AdaptConfig(method="memo"), np.random.default_rng(0))


def test_adabn_statistics_are_exact():
    model = build_model(image_size=16, latent_dim=8, seed=1).eval()
    x = torch.rand(10, 3, 16, 16)
    adapted = adabn_adapt(model, x)
    first = bn_layers(adapted)[0]
    with torch.no_grad():
        h = adapted.encoder.blocks[0][0](x).double()
    mean = h.mean(dim=(0, 2, 3))
    var = h.var(dim=(0, 2, 3), unbiased=False)
    assert torch.allclose(first.running_mean.double(), mean, atol=1e-6)
    assert torch.allclose(first.running_var.double(), var, rtol=1e-5)
    with torch.no_grad():
        out = first(h.float())
    assert torch.allclose(out.mean(dim=(0, 2, 3)), first.bias, atol=1e-5)
    # every layer normalises its own adapted input to zero mean / unit variance
    layers = bn_layers(adapted)
    with torch.no_grad():
        h = x
        for block in adapted.encoder.blocks:
            pre = block[0](h)
            norm = (pre - block[1].running_mean[None, :, None, None]) / torch.sqrt(
                block[1].running_var[None, :, None, None])
            assert torch.allclose(norm.mean(dim=(0, 2, 3)), torch.zeros(norm.shape[1]), atol=1e-5)
            assert torch.allclose(norm.var(dim=(0, 2, 3), unbiased=False), torch.ones(norm.shape[1]), atol=1e-3)
            h = block(h)
    assert len(layers) == 4


def test_adabn_single_layer_known_moments():
    layer = torch.nn.Sequential(torch.nn.BatchNorm2d(2))
    g = torch.Generator().manual_seed(0)
    x = 3.0 + 2.0 * torch.randn(64, 2, 8, 8, generator=g)
    adapt._set_bn_stats_from(layer, x)
    with torch.no_grad():
        y = layer(x)
    assert torch.allclose(y.mean(dim=(0, 2, 3)), torch.zeros(2), atol=1e-5)
    assert torch.allclose(y.var(dim=(0, 2, 3), unbiased=False), torch.ones(2), atol=1e-3)


def test_adabn_scope(simclr_model, small_splits):
    before = state_digest(simclr_model)
    trainable = state_digest(simclr_model, {"encoder", "primary", "secondary"})
    adapted = adabn_adapt(simclr_model, small_splits["testA"].tensor(level=0))
    assert state_digest(adapted, {"encoder", "primary", "secondary"}) == trainable
    assert state_digest(adapted, {"bn_stats"}) != state_digest(simclr_model, {"bn_stats"})
    assert state_digest(simclr_model) == before
    with pytest.raises(ValueError):
        adabn_adapt(simclr_model, torch.empty(0, 3, 64, 64))


def test_adabn_in_distribution_agreement(simclr_model, small_splits):
    val = small_splits["val"].tensor(level=0)
    base = predict_logits(simclr_model, val).argmax(1)
    adapted = predict_logits(adabn_adapt(simclr_model, small_splits["train"].tensor(level=0)), val).argmax(1)
    assert (base == adapted).float().mean().item() > 0.99


def test_episodes_are_canonical():
    cfg = AdaptConfig(episode_size=2)
    assert episodes(["c", "a", "b"], cfg) == [[1, 2], [0]]
    assert episodes(["c", "a", "b"], AdaptConfig(granularity="single")) == [[1], [2], [0]]


def test_none_matches_plain_evaluation(simclr_model, small_splits):
    test = small_splits["testA"]
    ev = evaluate_with_adaptation(simclr_model, test, cfg=AdaptConfig(method="none"))
    plain = evaluate_primary(simclr_model, test)
    assert torch.equal(ev.logits, plain["logits"])
    vals = {r.metric: r.value for r in ev.records}
    assert vals == {"loss": plain["loss"], "accuracy": plain["accuracy"]}
    assert ev.audit == []


@pytest.mark.parametrize("method", ["ttt", "adabn", "tent", "memo"])
def test_batch_order_invariance(simclr_model, small_splits, method):
    test = small_splits["testA"].subset(np.arange(24))
    cfg = AdaptConfig(method=method, step_size=1e-3, episode_size=8, memo_k=4)
    a = evaluate_with_adaptation(simclr_model, test, ShiftSpec.gaussian(0.05), cfg, seed=3)
    perm = np.random.default_rng(1).permutation(len(test))
    b = evaluate_with_adaptation(simclr_model, test.subset(perm), ShiftSpec.gaussian(0.05), cfg, seed=3)
    assert torch.equal(a.logits[perm], b.logits)
    assert all(e["pre_digest"] == e["post_digest"] and "reset_mismatch" not in e["flags"] for e in a.audit)


def test_step_size_grid_shape(simclr_model, small_splits):
    test = small_splits["testA"].subset(np.arange(12))
    records = []
    for shift in (ShiftSpec.identity(), ShiftSpec.gaussian(0.1), ShiftSpec.scanner(1)):
        for eta in (0, 1e-4, 1e-3, 1e-2, 1e-1):
            records += evaluate_with_adaptation(simclr_model, test, shift, AdaptConfig(step_size=eta)).records
    keys = {(r.shift, r.step_size) for r in records}
    assert len(keys) == 15
    assert sorted(r.metric for r in records) == ["accuracy"] * 15 + ["loss"] * 15


def test_adapt_csv_and_audit(tmp_path, simclr_model, small_splits):
    ev = evaluate_with_adaptation(simclr_model, small_splits["testA"].subset(np.arange(10)),
                                  cfg=AdaptConfig(step_size=1e-3, episode_size=4))
    path = write_adapt_csv(ev.records, tmp_path / "a.csv")
    assert read_adapt_csv(path) == ev.records
    audit = write_audit_jsonl(ev.audit, tmp_path / "audit.jsonl")
    lines = audit.read_text().splitlines()
    assert len(lines) == 3
    entry = json.loads(lines[0])
    assert {"episode", "pre_digest", "post_digest", "pre_secondary_loss", "post_secondary_loss", "flags"} <= set(entry)
    path.write_text(path.read_text() + "ttt,oops\n")
    with pytest.raises(ValueError, match="malformed"):
        read_adapt_csv(path)
