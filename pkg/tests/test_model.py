import math

import numpy as np
import pytest
import torch

from aepm.model import (
    AEPM,
    ModelConfig,
    SelfAttention,
    TransformerBlock,
    init_parameters,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
    spatial_block,
    temporal_block,
)

TINY = ModelConfig(n=3, l=4, d=8, heads=2, M=1, N=2)


def _x(cfg, b=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, cfg.l, cfg.n, 3, generator=g, dtype=dtype)


class TestConfig:
    def test_d_k(self):
        assert ModelConfig(d=32, heads=4).d_k == 8

    @pytest.mark.parametrize(
        "kw", [dict(d=30, heads=4), dict(N=1), dict(n=0), dict(M=0), dict(mlp_hidden=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


class TestInit:
    def test_deterministic(self):
        a = init_parameters(TINY, seed=3).state_dict()
        b = init_parameters(TINY, seed=3).state_dict()
        for k in a:
            assert torch.equal(a[k], b[k])

    def test_seed_matters(self):
        a = init_parameters(TINY, seed=3).embed.weight
        b = init_parameters(TINY, seed=4).embed.weight
        assert not torch.equal(a, b)

    def test_fan_in_scaling(self):
        cfg = ModelConfig(n=3, l=4, d=32, heads=4, M=1, N=2)
        stds = [init_parameters(cfg, s, torch.float64).embed.weight.std().item() for s in range(10)]
        assert np.mean(stds) == pytest.approx(1 / math.sqrt(3), rel=0.2)

    def test_positional_scale(self):
        m = init_parameters(ModelConfig(n=16, l=25), seed=0, dtype=torch.float64)
        pos = torch.cat([m.spatial_pos.flatten(), m.temporal_pos.flatten()])
        assert pos.std().item() == pytest.approx(0.02, rel=0.2)


class TestEmbed:
    def test_linear(self):
        m = init_parameters(TINY, 0, torch.float64)
        x = _x(TINY)
        np.testing.assert_allclose(m.embed_input(2.5 * x).detach(), 2.5 * m.embed_input(x).detach(), rtol=1e-12)
        assert torch.all(m.embed_input(torch.zeros_like(x)) == 0)

    def test_single_token_manual(self):
        m = init_parameters(TINY, 0, torch.float64)
        with torch.no_grad():
            m.embed.bias.copy_(torch.arange(8, dtype=torch.float64) * 0.1)
        x = _x(TINY)
        v = x[1, 2, 0].tolist()
        W = m.embed.weight.detach().tolist()
        expected = [sum(W[r][c] * v[c] for c in range(3)) + 0.1 * r for r in range(8)]
        np.testing.assert_allclose(m.embed_input(x)[1, 2, 0].detach(), expected, atol=1e-12)

    @pytest.mark.parametrize("shape, axis", [((2, 5, 3, 3), "l"), ((2, 4, 2, 3), "n"), ((2, 4, 3, 2), "channels")])
    def test_shape_error(self, shape, axis):
        m = init_parameters(TINY, 0)
        with pytest.raises(ValueError, match=axis):
            m.embed_input(torch.zeros(shape))


class TestSelfAttention:
    def test_single_token(self):
        torch.manual_seed(0)
        att = SelfAttention(8, 2).double()
        x = torch.randn(1, 1, 8, dtype=torch.float64)
        out, (w, _) = att(x, capture=True)
        assert torch.all(w == 1)
        np.testing.assert_allclose(out.detach(), att.out(att.v(x)).detach(), atol=1e-14)

    def test_rows_sum_to_one(self):
        torch.manual_seed(1)
        att = SelfAttention(8, 4)
        _, (w, _) = att(torch.randn(5, 7, 8) * 3, capture=True)
        assert w.shape == (5, 4, 7, 7)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert torch.all((w >= 0) & (w <= 1))

    def test_hand_worked_two_tokens(self):
        att = SelfAttention(2, 1).double()
        with torch.no_grad():
            att.q.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
            att.k.weight.copy_(torch.tensor([[1.0, 1.0], [0.0, 1.0]]))
            att.v.weight.copy_(torch.tensor([[2.0, 0.0], [1.0, -1.0]]))
            att.out.weight.copy_(torch.eye(2))
            for lin in (att.q, att.k, att.v, att.out):
                lin.bias.zero_()
        X = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]], dtype=torch.float64)
        out, (w, _) = att(X, capture=True)
        # Q = X, K = [[1,0],[2,2]], V = [[2,1],[0,-2]]
        s = math.sqrt(2)
        scores = [[1 / s, 2 / s], [0.0, 4 / s]]
        W = [[math.exp(a) / sum(math.exp(b) for b in row) for a in row] for row in scores]
        V = [[2.0, 1.0], [0.0, -2.0]]
        expected = [[sum(W[i][j] * V[j][c] for j in range(2)) for c in range(2)] for i in range(2)]
        np.testing.assert_allclose(w[0, 0].detach(), W, atol=1e-10)
        np.testing.assert_allclose(out[0].detach(), expected, atol=1e-10)

    def test_post_norm_block(self):
        torch.manual_seed(2)
        blk = TransformerBlock(8, 2, 16).double()
        x = torch.randn(3, 5, 8, dtype=torch.float64)
        y, _ = blk(x)
        a, _ = blk.attn(x)
        h = blk.norm1(x + a)
        np.testing.assert_allclose(y.detach(), blk.norm2(h + blk.mlp(h)).detach(), atol=1e-12)


class TestBlocks:
    def setup_method(self):
        torch.manual_seed(0)
        self.blk = TransformerBlock(8, 2, 16).double()

    def test_spatial_reshape_identity(self):
        F_ = torch.randn(1, 1, 5, 8, dtype=torch.float64)
        y, _ = spatial_block(F_, self.blk)
        direct, _ = self.blk(F_[0])
        np.testing.assert_allclose(y[0].detach(), direct.detach(), atol=1e-14)

    def test_temporal_reshape_identity(self):
        F_ = torch.randn(1, 6, 1, 8, dtype=torch.float64)
        y, _ = temporal_block(F_, self.blk)
        direct, _ = self.blk(F_[:, :, 0])
        np.testing.assert_allclose(y[:, :, 0].detach(), direct.detach(), atol=1e-14)

    def test_shapes(self):
        F_ = torch.randn(3, 4, 5, 8, dtype=torch.float64)
        assert spatial_block(F_, self.blk)[0].shape == F_.shape
        assert temporal_block(F_, self.blk)[0].shape == F_.shape

    def test_spatial_batch_independence(self):
        F_ = torch.randn(4, 3, 5, 8, dtype=torch.float64)
        y, _ = spatial_block(F_, self.blk)
        perm = torch.tensor([0, 3, 1, 2])
        y2, _ = spatial_block(F_[perm], self.blk)
        np.testing.assert_allclose(y2[0].detach(), y[0].detach(), atol=1e-14)
        # frames of one batch element are independent too
        G = F_.clone()
        G[0, 1:] = torch.randn_like(G[0, 1:])
        y3, _ = spatial_block(G, self.blk)
        np.testing.assert_allclose(y3[0, 0].detach(), y[0, 0].detach(), atol=1e-14)

    def test_temporal_joint_independence(self):
        F_ = torch.randn(2, 4, 5, 8, dtype=torch.float64)
        y, _ = temporal_block(F_, self.blk)
        G = F_.clone()
        G[:, :, 1:] += torch.randn_like(G[:, :, 1:])
        y2, _ = temporal_block(G, self.blk)
        np.testing.assert_allclose(y2[:, :, 0].detach(), y[:, :, 0].detach(), atol=1e-14)


class TestEncodeDecode:
    def test_encode_shape_and_determinism(self):
        m = init_parameters(TINY, 0, torch.float64)
        x = _x(TINY, b=3)
        c1, _ = m.encode(x)
        c2, _ = m.encode(x)
        assert c1.shape == (3, 4, 3, 8)
        assert torch.equal(c1, c2)

    def test_four_spatial_maps(self):
        cfg = ModelConfig(n=16, l=25, d=32, M=4, N=10, heads=4)
        m = init_parameters(cfg, 0)
        _, rec = m.encode(torch.randn(2, 25, 16, 3), capture=True)
        assert len(rec.spatial) == 4 and len(rec.temporal) == 4
        assert rec.spatial[0].shape == (2 * 25, 4, 16, 16)
        assert rec.temporal[0].shape == (2 * 16, 4, 25, 25)
        assert rec.has_temporal

    def test_positional_added_once(self):
        cfg = ModelConfig(n=3, l=4, d=8, heads=2, M=2, N=2)
        m = init_parameters(cfg, 0, torch.float64)
        x = _x(cfg)
        F_ = m.embed_input(x) + m.spatial_pos
        F_, _ = spatial_block(F_, m.spatial[0])
        F_ = F_ + m.temporal_pos[:, None]
        F_, _ = temporal_block(F_, m.temporal[0])
        F_, _ = spatial_block(F_, m.spatial[1])
        F_, _ = temporal_block(F_, m.temporal[1])
        c, _ = m.encode(x)
        np.testing.assert_allclose(c.detach(), F_.detach(), atol=1e-13)

    def test_sigma_positive_and_shapes(self):
        m = init_parameters(TINY, 0, torch.float64)
        pred, _ = m(_x(TINY, b=5))
        assert pred.mu.shape == (5, 4, 3, 3)
        assert pred.sigma.shape == (5, 4, 3, 1)
        assert pred.samples.shape == (5, 4, 3, 2, 3)
        assert pred.x_hat.shape == (5, 4, 3, 2, 3)
        assert torch.all(pred.sigma > 0)

    def test_degenerate_samples_clamp(self):
        mu = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        sigma = torch.rand(2, 4, 3, 1, dtype=torch.float64) + 0.1
        S = torch.full((2, 4, 3, 5, 3), 0.3, dtype=torch.float64)
        x_hat = reparameterize(mu, sigma, S)
        assert torch.isfinite(x_hat).all()
        np.testing.assert_allclose(x_hat, (mu.unsqueeze(-2) + sigma.unsqueeze(-2) / 1e-8 * S), rtol=1e-12)

    def test_std_identity_random(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            mu = torch.randn(3, 4, 3, 3, generator=g, dtype=torch.float64) * 10
            sigma = torch.rand(3, 4, 3, 1, generator=g, dtype=torch.float64) * 5 + 1e-3
            S = torch.randn(3, 4, 3, 7, 3, generator=g, dtype=torch.float64)
            x_hat = reparameterize(mu, sigma, S)
            std = x_hat.std(dim=-2, unbiased=False)
            np.testing.assert_allclose(std, sigma.expand_as(std), rtol=1e-5)
            mean_S, std_S = S.mean(-2), S.std(-2, unbiased=False)
            np.testing.assert_allclose(x_hat.mean(-2), mu + sigma * mean_S / std_S, atol=1e-6)

    def test_non_finite_names_decoder(self):
        m = init_parameters(TINY, 0, torch.float64)
        with torch.no_grad():
            m.f_s[-1].bias.fill_(float("inf"))
        with pytest.raises(FloatingPointError, match="sampler decoder"):
            m(_x(TINY))


class TestForward:
    @pytest.mark.parametrize(
        "cfg, shape",
        [
            (ModelConfig.h36m(), (2, 25, 16, 10, 3)),
            (ModelConfig.cmu(), (2, 30, 14, 10, 3)),
        ],
    )
    def test_published_shapes(self, cfg, shape):
        m = init_parameters(cfg, 0)
        pred, _ = m(torch.randn(2, cfg.l, cfg.n, 3))
        assert pred.x_hat.shape == shape

    def test_tiny_smoke(self):
        cfg = ModelConfig(n=3, l=4, d=8, heads=2, M=1, N=2)
        pred, _ = init_parameters(cfg, 0)(torch.randn(1, 4, 3, 3) * 20)
        assert all(torch.isfinite(t).all() for t in pred)

    def test_pre_norm_variant(self):
        cfg = ModelConfig(n=3, l=4, d=8, heads=2, M=2, N=3, norm_first=True)
        pred, _ = init_parameters(cfg, 0)(torch.randn(2, 4, 3, 3))
        assert pred.x_hat.shape == (2, 4, 3, 3, 3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = init_parameters(ModelConfig.cmu(), seed=5)
        save_checkpoint(tmp_path / "a.ckpt", m, meta={"epoch": 3})
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.model.config == m.config
        assert ck.meta == {"epoch": 3}
        for k, v in m.state_dict().items():
            assert torch.equal(v, ck.model.state_dict()[k]), k
        save_checkpoint(tmp_path / "b.ckpt", ck.model, meta={"epoch": 3})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_extra_arrays(self, tmp_path):
        m = init_parameters(TINY, 0)
        extra = {"adam.m.embed.weight": torch.ones(8, 3)}
        save_checkpoint(tmp_path / "c.ckpt", m, extra=extra)
        ck = load_checkpoint(tmp_path / "c.ckpt")
        assert torch.equal(ck.extra["adam.m.embed.weight"], torch.ones(8, 3))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"notackpt" + b"\0" * 20)
        with pytest.raises(ValueError, match="not an AEPM checkpoint"):
            load_checkpoint(tmp_path / "x.ckpt")
