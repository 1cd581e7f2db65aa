import json

import numpy as np
import pytest
import torch

from ttt_histo.model import (
    ModelConfig,
    build_model,
    export_weights,
    frozen_bn_stats,
    import_weights,
    load_checkpoint,
    param_names,
    partition_params,
    restore,
    save_checkpoint,
    snapshot,
    state_digest,
)


def test_same_seed_same_digest():
    assert snapshot(build_model(seed=7)).digest == snapshot(build_model(seed=7)).digest
    assert snapshot(build_model(seed=7)).digest != snapshot(build_model(seed=8)).digest


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    a = torch.rand(3)
    torch.manual_seed(0)
    build_model(seed=5)
    assert torch.equal(torch.rand(3), a)


def test_large_image_size_accepted():
    model = build_model(image_size=526, latent_dim=512)
    model.eval()
    with torch.no_grad():
        z = model.encode(torch.rand(1, 3, 526, 526))
    assert z.shape == (1, 512)


@pytest.mark.parametrize("kw", [{"latent_dim": 0}, {"latent_dim": -3}, {"image_size": 63},
                                {"task": "jigsaw"}, {"widths": (8,)}])
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_encoder_has_batchnorm():
    model = build_model()
    assert sum(isinstance(m, torch.nn.BatchNorm2d) for m in model.modules()) >= 2


def test_encode_shapes_and_determinism():
    model = build_model(seed=1).eval()
    x = torch.rand(8, 3, 64, 64)
    with torch.no_grad():
        z = model.encode(x)
        assert z.shape == (8, 512)
        assert torch.isfinite(z).all()
        twin = model.encode(torch.stack([x[0], x[0]]))
        assert torch.equal(twin[0], twin[1])
        assert model.encode(x[:1]).shape == (1, 512)


@pytest.mark.parametrize("shape", [(2, 3, 32, 32), (2, 64, 64, 3), (3, 64, 64), (0, 3, 64, 64)])
def test_encode_rejects_bad_shape(shape):
    with pytest.raises(ValueError):
        build_model().encode(torch.rand(*shape))


def test_primary_logits_normalise():
    model = build_model(seed=2).eval()
    with torch.no_grad():
        z = torch.randn(5, 512)
        logits = model.predict_primary(z)
        assert logits.shape == (5, 3)
        assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(5), atol=1e-6)
        same = model.predict_primary(torch.stack([z[0], z[0]]))
        assert torch.equal(same[0], same[1])


def test_rsp_head_shapes_and_order_sensitivity():
    model = build_model(task="rsp", seed=3).eval()
    assert model.secondary_head.pair_input_dim == 1024
    z = torch.randn(4, 3, 512)
    with torch.no_grad():
        out = model.forward_rsp(z)
        assert out.shape == (4, 6)
        swapped = model.forward_rsp(z[:, [1, 0, 2]])
    assert not torch.allclose(out, swapped)
    with pytest.raises(ValueError):
        model.forward_rsp(torch.randn(4, 2, 512))


def test_projection_shapes():
    model = build_model(task="simclr", seed=3).eval()
    with torch.no_grad():
        p = model.forward_projection(torch.randn(144, 512))
        assert p.shape == (144, 128)
        same = model.forward_projection(torch.zeros(2, 512))
    assert torch.equal(same[0], same[1])
    assert build_model(proj_dim=32).forward_projection(torch.randn(2, 512)).shape == (2, 32)


def test_wrong_head_for_task():
    with pytest.raises(ValueError):
        build_model(task="simclr").forward_rsp(torch.randn(1, 3, 512))
    with pytest.raises(ValueError):
        build_model(task="rsp").forward_projection(torch.randn(1, 512))


@pytest.mark.parametrize("task", ["rsp", "simclr"])
def test_partition_is_exhaustive_and_disjoint(task):
    model = build_model(task=task)
    groups = [set(param_names(model, {r})) for r in ("encoder", "primary", "secondary")]
    all_names = {n for n, _ in model.named_parameters()}
    assert set.union(*groups) == all_names
    assert sum(len(g) for g in groups) == len(all_names)
    ttt = {id(p) for p in partition_params(model, {"encoder", "secondary"})}
    primary = {id(p) for p in model.primary_head.parameters()}
    assert ttt.isdisjoint(primary)
    assert len(ttt) + len(primary) == len(list(model.parameters()))


def test_affine_group_is_bn_scale_and_shift():
    model = build_model()
    expected = set()
    for name, m in model.named_modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            expected |= {f"{name}.weight", f"{name}.bias"}
    assert set(param_names(model, {"affine"})) == expected


def test_bn_stats_group_and_unknown_tag():
    model = build_model()
    names = param_names(model, {"bn_stats"})
    assert names and all(n.endswith(("running_mean", "running_var")) for n in names)
    with pytest.raises(ValueError):
        partition_params(model, {"decoder"})


def test_frozen_primary_head_under_optimisation():
    model = build_model(seed=4)
    before = [p.detach().clone() for p in model.primary_head.parameters()]
    opt = torch.optim.Adam(partition_params(model, {"encoder", "secondary"}), lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        loss = model(torch.rand(4, 3, 64, 64)).sum() + model.secondary_forward(torch.rand(4, 3, 64, 64)).sum()
        loss.backward()
        opt.step()
    for a, b in zip(before, model.primary_head.parameters()):
        assert torch.equal(a, b)


def test_snapshot_restore_round_trip():
    model = build_model(seed=5)
    snap = snapshot(model)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p))
    assert state_digest(model) != snap.digest
    restore(model, snap)
    assert snapshot(model).digest == snap.digest == state_digest(model)


def test_snapshot_covers_bn_running_stats():
    model = build_model(seed=5)
    snap = snapshot(model)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.add_(1.0)
                m.running_var.mul_(3.0)
    assert state_digest(model) != snap.digest
    restore(model, snap)
    assert state_digest(model) == snap.digest


def test_restore_into_other_architecture_fails():
    snap = snapshot(build_model(latent_dim=16))
    with pytest.raises(ValueError):
        restore(build_model(latent_dim=32), snap)
    with pytest.raises(ValueError):
        restore(build_model(task="rsp"), snapshot(build_model(task="simclr")))


def test_frozen_bn_stats_keeps_running_stats():
    model = build_model(seed=1).train()
    before = state_digest(model, {"bn_stats"})
    with frozen_bn_stats(model):
        model(torch.rand(4, 3, 64, 64))
    assert state_digest(model, {"bn_stats"}) == before
    model(torch.rand(4, 3, 64, 64))
    assert state_digest(model, {"bn_stats"}) != before


def test_checkpoint_round_trip(tmp_path):
    model = build_model(task="rsp", latent_dim=32, seed=9)
    with torch.no_grad():
        model.encoder.blocks[0][1].running_mean.add_(0.5)
    save_checkpoint(model, tmp_path / "ck", step=12, seeds={"model": 9})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 12
    assert manifest["digest"] == state_digest(model) == state_digest(loaded)
    assert loaded.task == "rsp"


def test_weight_export_is_little_endian_float32(tmp_path):
    model = build_model(latent_dim=16, seed=2)
    export_weights(model, tmp_path)
    index = json.loads((tmp_path / "weights.json").read_text())
    raw = (tmp_path / "weights.bin").read_bytes()
    name = "primary_head.weight"
    e = index[name]
    arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
    assert np.array_equal(arr.reshape(e["shape"]), model.primary_head.weight.detach().numpy())
    other = build_model(latent_dim=16, seed=3)
    import_weights(other, tmp_path)
    assert state_digest(other) == state_digest(model)
