import numpy as np
import pytest
import torch

from stflow.events import AffineMap
from stflow.masks import build_batch_masks, masks_from_condition_batch
from stflow.model import (
    ModelConfig,
    TorchMasks,
    VelocityModel,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_encode,
)

from conftest import TINY_MODEL


def small_model():
    torch.manual_seed(0)
    return VelocityModel(ModelConfig(spatial_dim=2, **TINY_MODEL)).eval()


def random_inputs(rng, B=3, L=7, d=2):
    z = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float32)
    locs = torch.as_tensor(rng.uniform(0, 1, (B, L, d)), dtype=torch.float32)
    state = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float32)
    xstate = torch.as_tensor(rng.standard_normal((B, L, d)), dtype=torch.float32)
    return z, locs, state, xstate


class TestSinusoidalEncode:
    def test_zero_maps_to_alternating_pattern(self):
        out = sinusoidal_encode(torch.tensor(0.0), 8)
        assert torch.allclose(out, torch.tensor([0.0, 1.0] * 4))

    def test_unit_bounded(self):
        v = torch.linspace(-5, 5, 101)
        out = sinusoidal_encode(v, 32)
        assert out.abs().max() <= 1.0

    def test_injective_on_probe(self):
        v = torch.linspace(0, 10, 1000, dtype=torch.float64)
        out = sinusoidal_encode(v, 32)
        dists = torch.cdist(out, out) + torch.eye(1000, dtype=torch.float64) * 1e9
        assert float(dists.min()) > 0.0

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_encode(torch.tensor(1.0), 7)


class TestForwardShapes:
    def test_velocity_shapes(self):
        model = small_model()
        rng = np.random.default_rng(0)
        z, locs, state, xstate = random_inputs(rng)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((3, 7), bool)))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
            v1 = model.temporal_velocity(state, 0.5, enc, tm)
            v2 = model.spatial_velocity(xstate, 0.5, z, enc, tm)
        assert v1.shape == (3, 7)
        assert v2.shape == (3, 7, 2)
        assert torch.isfinite(v1).all() and torch.isfinite(v2).all()

    def test_flow_time_validation(self):
        model = small_model()
        rng = np.random.default_rng(0)
        z, locs, state, xstate = random_inputs(rng)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((3, 7), bool)))
        enc = model.encode_history(z, locs, tm.encoder_self)
        with pytest.raises(ValueError, match="flow time"):
            model.temporal_velocity(state, 1.5, enc, tm)

    def test_spatial_needs_times(self):
        model = small_model()
        rng = np.random.default_rng(0)
        z, locs, _, xstate = random_inputs(rng)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((3, 7), bool)))
        enc = model.encode_history(z, locs, tm.encoder_self)
        with pytest.raises(ValueError, match="times"):
            model.spatial_velocity(xstate, 0.5, None, enc, tm)

    def test_all_padded_tokens_zero_representation(self):
        model = small_model()
        rng = np.random.default_rng(1)
        z, locs, _, _ = random_inputs(rng)
        pad = np.zeros((3, 7), bool)
        tm = TorchMasks.from_batch(build_batch_masks("ar", pad))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
        assert torch.equal(enc, torch.zeros_like(enc))


class TestCausality:
    """Future events must have exactly zero influence under the causal mask."""

    def test_temporal_and_spatial_invariance(self):
        model = small_model()
        rng = np.random.default_rng(2)
        B, L = 2, 9
        z, locs, state, xstate = random_inputs(rng, B, L)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((B, L), bool)))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
            v1 = model.temporal_velocity(state, 0.4, enc, tm)
            v2 = model.spatial_velocity(xstate, 0.6, z, enc, tm)
        for n in range(L):
            z2, locs2 = z.clone(), locs.clone()
            z2[:, n:] += 7.0
            locs2[:, n:] -= 4.0
            other = torch.ones(L, dtype=torch.bool)
            other[n] = False
            s2, x2, zc2 = state.clone(), xstate.clone(), z.clone()
            s2[:, other] += 3.0
            x2[:, other] += 2.0
            zc2[:, other] += 1.0
            with torch.no_grad():
                enc2 = model.encode_history(z2, locs2, tm.encoder_self)
                w1 = model.temporal_velocity(s2, 0.4, enc2, tm)
                w2 = model.spatial_velocity(x2, 0.6, zc2, enc2, tm)
            assert torch.equal(v1[:, n], w1[:, n])
            assert torch.equal(v2[:, n], w2[:, n])

    def test_own_time_changes_only_own_spatial_velocity(self):
        model = small_model()
        rng = np.random.default_rng(3)
        B, L, n = 1, 6, 3
        z, locs, _, xstate = random_inputs(rng, B, L)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((B, L), bool)))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
            v = model.spatial_velocity(xstate, 0.5, z, enc, tm)
            zc = z.clone()
            zc[:, n] += 1.0
            w = model.spatial_velocity(xstate, 0.5, zc, enc, tm)
        delta = (v - w).abs().sum(dim=-1)[0]
        assert delta[n] > 0
        assert torch.equal(v[0, :n], w[0, :n])
        assert torch.equal(v[0, n + 1:], w[0, n + 1:])


class TestConditioningSoundness:
    def test_targets_invariant_to_other_targets_ground_truth(self):
        model = small_model()
        rng = np.random.default_rng(4)
        B, L = 2, 8
        z, locs, state, xstate = random_inputs(rng, B, L)
        conds = [np.array([1, 0, 1, 0, 1, 1, 0, 1], dtype=np.int8),
                 np.array([0, 1, 1, 0, 1, 0, 1, 1], dtype=np.int8)]
        bm = masks_from_condition_batch(conds, np.ones((B, L), bool))
        tm = TorchMasks.from_batch(bm)
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
            v1 = model.temporal_velocity(state, 0.3, enc, tm)
            v2 = model.spatial_velocity(xstate, 0.8, z, enc, tm)
        z2, locs2 = z.clone(), locs.clone()
        for i, c in enumerate(conds):
            tgt = np.where(c == 0)[0]
            z2[i, tgt] += 11.0
            locs2[i, tgt] -= 5.0
        with torch.no_grad():
            enc2 = model.encode_history(z2, locs2, tm.encoder_self)
            w1 = model.temporal_velocity(state, 0.3, enc2, tm)
            w2 = model.spatial_velocity(xstate, 0.8, z, enc2, tm)
        target = tm.target
        assert torch.equal(v1[target], w1[target])
        assert torch.equal(v2[target], w2[target])

    def test_masked_out_encoder_rows_are_zero(self):
        model = small_model()
        rng = np.random.default_rng(5)
        z, locs, _, _ = random_inputs(rng, 1, 5)
        bm = masks_from_condition_batch([np.array([1, 0, 1, 0, 1], np.int8)],
                                        np.ones((1, 5), bool))
        tm = TorchMasks.from_batch(bm)
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
        assert torch.equal(enc[0, 1], torch.zeros_like(enc[0, 1]))
        assert torch.equal(enc[0, 3], torch.zeros_like(enc[0, 3]))
        assert not torch.equal(enc[0, 0], torch.zeros_like(enc[0, 0]))


class TestDivergence:
    def test_identity_field_divergence_is_dimension(self):
        model = small_model()
        model.spatial_velocity = lambda state, t, z, enc, m: state
        rng = np.random.default_rng(6)
        state = torch.as_tensor(rng.standard_normal((2, 4, 2)), dtype=torch.float32)
        _, div = model.spatial_divergence(state, 0.5, None, None, None)
        assert torch.allclose(div, torch.full((2, 4), 2.0))

    def test_constant_field_divergence_is_zero(self):
        model = small_model()
        model.spatial_velocity = lambda state, t, z, enc, m: torch.ones_like(state) * 3.0 + 0.0 * state
        state = torch.randn(1, 3, 2)
        _, div = model.spatial_divergence(state, 0.1, None, None, None)
        assert torch.allclose(div, torch.zeros(1, 3))

    def test_against_central_finite_differences(self):
        torch.manual_seed(7)
        model = VelocityModel(ModelConfig(spatial_dim=2, **TINY_MODEL)).double().eval()
        rng = np.random.default_rng(7)
        B, L = 4, 6
        z = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float64)
        locs = torch.as_tensor(rng.uniform(0, 1, (B, L, 2)), dtype=torch.float64)
        xstate = torch.as_tensor(rng.standard_normal((B, L, 2)), dtype=torch.float64)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((B, L), bool)))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
        _, div = model.spatial_divergence(xstate, 0.5, z, enc, tm)
        h = 1e-4
        fd = torch.zeros(B, L, dtype=torch.float64)
        with torch.no_grad():
            for i in range(2):
                e = torch.zeros_like(xstate)
                e[..., i] = h
                vp = model.spatial_velocity(xstate + e, 0.5, z, enc, tm)[..., i]
                vm = model.spatial_velocity(xstate - e, 0.5, z, enc, tm)[..., i]
                fd += (vp - vm) / (2 * h)
        assert float((div - fd).abs().max()) < 1e-3

    def test_temporal_derivative_against_finite_differences(self):
        torch.manual_seed(8)
        model = VelocityModel(ModelConfig(spatial_dim=2, **TINY_MODEL)).double().eval()
        rng = np.random.default_rng(8)
        B, L = 3, 5
        z = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float64)
        locs = torch.as_tensor(rng.uniform(0, 1, (B, L, 2)), dtype=torch.float64)
        state = torch.as_tensor(rng.standard_normal((B, L)), dtype=torch.float64)
        tm = TorchMasks.from_batch(build_batch_masks("ar", np.ones((B, L), bool)))
        with torch.no_grad():
            enc = model.encode_history(z, locs, tm.encoder_self)
        _, dv = model.temporal_derivative(state, 0.5, enc, tm)
        h = 1e-5
        with torch.no_grad():
            vp = model.temporal_velocity(state + h, 0.5, enc, tm)
            vm = model.temporal_velocity(state - h, 0.5, enc, tm)
        fd = (vp - vm) / (2 * h)
        assert float((dv - fd).abs().max()) < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = small_model()
        amap = AffineMap([2.0, 0.5], [0.0, -1.0])
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, amap, 1e-6, {"note": "test"})
        bundle = load_checkpoint(path)
        assert bundle.eps == 1e-6
        assert bundle.meta["note"] == "test"
        assert np.allclose(bundle.affine.scale, [2.0, 0.5])
        for (k1, p1), (k2, p2) in zip(model.state_dict().items(),
                                      bundle.model.state_dict().items()):
            assert k1 == k2 and torch.equal(p1, p2)
        assert not bundle.model.training

    def test_format_tag_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        torch.save({"format": "other"}, path)
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(path)
