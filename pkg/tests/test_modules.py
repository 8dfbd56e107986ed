import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch.nn import functional as F

from camoseg.backbone import DiffusionSchedule, FeaturePyramid, ToyBackbone, build_backbone, noise_latent
from camoseg.cin import CIN, binarize_to, instance_norm, score_and_select
from camoseg.config import BackboneConfig, Config, MaskGenConfig
from camoseg.errors import ConfigError, DomainError, ShapeError
from camoseg.maskgen import (
    DecoderLayer,
    MaskGenerator,
    PixelDecoder,
    TransformerDecoder,
    attention_block_mask,
)
from camoseg.msff import MSFF, resample
from camoseg.tva import TVA, mask_pool, mean_filter


# ------------------------------------------------------------ backbone

class TestNoise:
    def _sched(self, a, s):
        return DiffusionSchedule(np.array([a]), np.array([s]))

    @pytest.mark.parametrize("a,s,z,eps,want", [
        (1.0, 0.0, [1, 2], [5, 5], [1, 2]),
        (0.0, 1.0, [1, 2], [5, 5], [5, 5]),
        (0.8, 0.6, [1, 0], [0, 1], [0.8, 0.6]),
    ])
    def test_examples(self, a, s, z, eps, want):
        z, eps = np.array(z, float), np.array(eps, float)
        z0 = z.copy()
        assert np.allclose(noise_latent(z, 0, eps, self._sched(a, s)), want)
        assert np.array_equal(z, z0)

    def test_errors(self):
        sched = DiffusionSchedule.linear(10)
        with pytest.raises(DomainError):
            noise_latent(np.zeros(2), 10, np.zeros(2), sched)
        with pytest.raises(ShapeError):
            noise_latent(np.zeros(2), 0, np.zeros(3), sched)

    def test_schedule_variance_preserving(self):
        s = DiffusionSchedule.linear(1000)
        assert s.num_steps == 1000
        assert np.all(s.alphas**2 + s.sigmas**2 <= 1 + 1e-6) and s.alphas.min() >= 0 and s.sigmas.max() <= 1

    @given(st.floats(-3, 3), st.integers(0, 99))
    def test_linearity(self, a, t):
        r = np.random.default_rng(t)
        z, eps = r.normal(size=5), r.normal(size=5)
        s = DiffusionSchedule.linear(100)
        assert np.allclose(noise_latent(a * z, t, a * eps, s), a * noise_latent(z, t, eps, s), atol=1e-9)


@pytest.fixture(scope="module")
def backbone():
    return ToyBackbone(BackboneConfig(timestep=0))


class TestBackbone:
    def test_caption_unit_and_deterministic(self, backbone):
        img = torch.rand(2, 3, 64, 64)
        a, b = backbone.implicit_caption(img), backbone.implicit_caption(img)
        assert torch.equal(a, b)
        assert torch.allclose(a.norm(dim=-1), torch.ones(2), atol=1e-5)

    def test_caption_one_pixel_regression(self, backbone):
        img = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        img2 = img.clone()
        img2[0, :, 10, 10] = 1 - img2[0, :, 10, 10]
        cos = F.cosine_similarity(backbone.implicit_caption(img), backbone.implicit_caption(img2)).item()
        assert cos == pytest.approx(0.9996932745, abs=1e-6)
        assert cos < 1.0

    def test_empty_image(self, backbone):
        with pytest.raises(ShapeError):
            backbone.implicit_caption(torch.zeros(1, 3, 0, 4))

    def test_scales(self, backbone):
        pyr = backbone(torch.rand(1, 3, 512, 512))
        assert {s: tuple(x.shape[-2:]) for s, x in pyr.encoder_levels.items()} == {8: (64, 64), 16: (32, 32), 32: (16, 16)}
        assert tuple(pyr.decoder_final.shape) == (1, 64, 64, 64)
        assert [pyr.encoder_levels[s].shape[1] for s in (8, 16, 32)] == [32, 64, 128]

    def test_caption_influences_features(self, backbone):
        img = torch.rand(1, 3, 64, 64)
        cap = backbone.implicit_caption(img)
        a = backbone.extract_features(img, cap)
        b = backbone.extract_features(img, torch.zeros_like(cap))
        assert (a.decoder_final - b.decoder_final).abs().max() > 1e-6
        bumped = cap.clone()
        bumped[0, 0] += 1e-3
        c = backbone.extract_features(img, bumped)
        assert (c.encoder_levels[32] - a.encoder_levels[32]).abs().max() > 0

    def test_zero_input_finite_and_pure(self, backbone):
        img = torch.zeros(1, 3, 64, 64)
        a = backbone.extract_features(img, torch.zeros(1, 64))
        b = backbone.extract_features(img, torch.zeros(1, 64))
        assert torch.isfinite(a.decoder_final).all()
        assert all(torch.equal(a.encoder_levels[s], b.encoder_levels[s]) for s in (8, 16, 32))

    def test_frozen(self, backbone):
        assert not any(p.requires_grad for p in backbone.parameters())

    def test_kind_errors(self):
        with pytest.raises(ConfigError):
            build_backbone(BackboneConfig(kind="adapter"))
        with pytest.raises(ConfigError):
            build_backbone(BackboneConfig(kind="unet"))


# ----------------------------------------------------------------- msff

def _pyramid(seed=0, b=1, h8=8):
    g = torch.Generator().manual_seed(seed)
    levels = {8: torch.randn(b, 4, h8, h8, generator=g), 16: torch.randn(b, 3, h8 // 2, h8 // 2, generator=g),
              32: torch.randn(b, 2, h8 // 4, h8 // 4, generator=g)}
    return FeaturePyramid(levels, torch.randn(b, 5, h8, h8, generator=g))


class TestMSFF:
    def test_identity_gate(self):
        m, pyr = MSFF((4, 3, 2), 5), _pyramid()
        with torch.no_grad():
            m.gate.weight.zero_()
            m.gate.bias.fill_(1e4)
            m.dec_proj.weight.zero_()
            m.dec_proj.bias.zero_()
        x = torch.cat([resample(pyr.encoder_levels[s], (2, 2)) for s in (8, 16, 32)], 1)
        assert torch.equal(m(pyr), x)

    def test_annihilating_gate(self):
        m, pyr = MSFF((4, 3, 2), 5), _pyramid()
        with torch.no_grad():
            m.gate.weight.zero_()
            m.gate.bias.fill_(-1e4)
        assert torch.equal(m(pyr), m.project_decoder(pyr))

    def test_straight_line_oracle(self):
        m, pyr = MSFF((4, 3, 2), 5), _pyramid(3)
        out = m(pyr).detach().double()
        # steps written out per position with plain loops
        def area(x, f):
            c, h, w = x.shape
            return np.array([[[x[k, i * f:(i + 1) * f, j * f:(j + 1) * f].mean() for j in range(w // f)]
                              for i in range(h // f)] for k in range(c)])
        levels = [pyr.encoder_levels[s][0].double().numpy() for s in (8, 16, 32)]
        x = np.concatenate([area(levels[0], 4), area(levels[1], 2), levels[2]])
        wg = m.gate.weight.detach().double().numpy()[:, :, 0, 0]
        bg = m.gate.bias.detach().double().numpy()
        wd = m.dec_proj.weight.detach().double().numpy()[:, :, 0, 0]
        bd = m.dec_proj.bias.detach().double().numpy()
        dec = pyr.decoder_final[0].double().numpy()
        want = np.zeros_like(x)
        for i in range(2):
            for j in range(2):
                g = 1 / (1 + np.exp(-(wg @ x[:, i, j] + bg)))
                proj = np.mean([wd @ dec[:, 4 * i + a, 4 * j + b] + bd for a in range(4) for b in range(4)], axis=0)
                want[:, i, j] = g * x[:, i, j] + proj
        assert np.allclose(out[0].numpy(), want, atol=1e-5)

    def test_bounded_and_shape(self):
        m, pyr = MSFF((4, 3, 2), 5), _pyramid(b=2, h8=16)
        out = m(pyr)
        x = torch.cat([resample(pyr.encoder_levels[s], (4, 4)) for s in (8, 16, 32)], 1)
        assert out.shape == (2, 9, 4, 4)
        assert (out.abs() <= x.abs() + m.project_decoder(pyr).abs() + 1e-6).all()

    def test_gradient_reaches_every_level(self):
        m, pyr = MSFF((4, 3, 2), 5), _pyramid()
        for s in (8, 16, 32):
            pyr.encoder_levels[s].requires_grad_(True)
        m(pyr).sum().backward()
        assert all(pyr.encoder_levels[s].grad.abs().sum() > 0 for s in (8, 16, 32))

    def test_missing_level(self):
        pyr = _pyramid()
        del pyr.encoder_levels[16]
        with pytest.raises(ShapeError):
            MSFF((4, 3, 2), 5)(pyr)


# -------------------------------------------------------------- maskgen

class TestMaskGen:
    def test_pixel_decoder_scales(self):
        pd = PixelDecoder(9, 16, 8)
        out = pd(torch.randn(1, 9, 16, 16))
        assert [tuple(x.shape[-2:]) for x in out.intermediate] == [(16, 16), (32, 32), (64, 64)]
        assert tuple(out.per_pixel.shape) == (1, 8, 128, 128)

    def test_pixel_decoder_zero(self):
        pd = PixelDecoder(9, 16, 8)
        for mod in pd.modules():
            if isinstance(mod, torch.nn.Conv2d):
                torch.nn.init.zeros_(mod.weight)
                torch.nn.init.zeros_(mod.bias)
        out = pd(torch.zeros(1, 9, 2, 2))
        assert torch.count_nonzero(out.per_pixel) == 0

    def test_pixel_decoder_regression(self):
        torch.manual_seed(0)
        pd = PixelDecoder(9, 16, 8)
        out = pd(torch.randn(1, 9, 2, 2, generator=torch.Generator().manual_seed(1)))
        assert out.per_pixel.sum().item() == pytest.approx(313.240234375, rel=1e-5)

    def test_round_robin(self):
        assert [TransformerDecoder.scale_for_layer(i) for i in range(6)] == [32, 16, 8, 32, 16, 8]

    def test_layers_required(self):
        with pytest.raises(ConfigError):
            TransformerDecoder(8, 1, 16, 0)

    def test_single_layer_oracle(self):
        torch.manual_seed(0)
        layer = DecoderLayer(4, 1, 8).double().eval()
        q = torch.randn(1, 1, 4, dtype=torch.float64)
        mem = torch.randn(1, 6, 4, dtype=torch.float64)
        blocked = attention_block_mask(torch.full((1, 1, 2, 3), -1.0), (2, 3))
        assert not blocked.any()  # empty region falls back to full attention
        out = layer(q, mem, mem, blocked)
        a = layer.cross
        wq, wk, wv = a.in_proj_weight.chunk(3)
        bq, bk, bv = a.in_proj_bias.chunk(3)
        qq, kk, vv = q[0] @ wq.T + bq, mem[0] @ wk.T + bk, mem[0] @ wv.T + bv
        w = torch.softmax(qq @ kk.T / 2.0, -1)
        x = layer.norm1(q[0] + (w @ vv) @ a.out_proj.weight.T + a.out_proj.bias)
        s = layer.self_attn
        v2 = x @ s.in_proj_weight.chunk(3)[2].T + s.in_proj_bias.chunk(3)[2]
        x = layer.norm2(x + v2 @ s.out_proj.weight.T + s.out_proj.bias)
        x = layer.norm3(x + layer.ffn(x))
        assert torch.allclose(out[0], x, atol=1e-12)

    def test_masked_attention_respects_mask(self):
        logits = torch.full((1, 2, 4, 4), -1.0)
        logits[0, 0, :2, :2] = 1.0
        blocked = attention_block_mask(logits, (4, 4))
        assert blocked[0, 0].view(4, 4)[:2, :2].logical_not().all() and blocked[0, 0].sum() == 12
        assert not blocked[0, 1].any()

    def test_permutation_equivariance(self):
        torch.manual_seed(0)
        gen = MaskGenerator(9, MaskGenConfig(num_queries=5, layers=3, heads=1, embed_dim=8, hidden_dim=16, ffn_dim=32))
        gen.eval()
        pdo = gen.pixel_decode(torch.randn(1, 9, 2, 2))
        q = torch.randn(1, 5, 16)
        perm = torch.tensor([3, 0, 4, 1, 2])
        a = gen.transformer_decode(q, pdo)[:, perm]
        b = gen.transformer_decode(q[:, perm], pdo)
        assert torch.allclose(a, b, atol=1e-6)

    def test_predict_masks_null_and_delta(self):
        gen = MaskGenerator(9, MaskGenConfig(num_queries=1, layers=1, heads=1, embed_dim=2, hidden_dim=2, ffn_dim=4))
        with torch.no_grad():
            gen.embed_head.weight.copy_(torch.eye(2))
            gen.embed_head.bias.zero_()
        per_pixel = torch.zeros(1, 2, 3, 3)
        per_pixel[0, 1] = 1.0
        assert torch.count_nonzero(gen.predict_masks(torch.tensor([[[1.0, 0.0]]]), per_pixel, (3, 3)).mask_logits) == 0
        per_pixel = torch.zeros(1, 2, 3, 3)
        per_pixel[0, 0, 1, 2] = 1.0
        per_pixel[0, 1] = 1.0
        per_pixel[0, 1, 1, 2] = 0.0
        logits = gen.predict_masks(torch.tensor([[[1.0, 0.0]]]), per_pixel, (3, 3)).mask_logits[0, 0]
        want = torch.zeros(3, 3)
        want[1, 2] = 1.0
        assert torch.equal(logits, want)

    def test_end_to_end_shapes(self):
        from camoseg.model import CamoSegModel

        cfg = Config.desk()
        model = CamoSegModel(cfg).eval()
        out = model(torch.rand(1, 3, 128, 128), F.normalize(torch.randn(3, 64), dim=-1))
        assert out.preds.mask_logits.shape == (1, 20, 128, 128)
        assert out.preds.embeddings.shape == (1, 20, 64)
        assert ((out.preds.confidences >= 0) & (out.preds.confidences <= 1)).all()


# ------------------------------------------------------------------ tva

class TestTVA:
    def test_mask_pool(self, rng):
        f = torch.as_tensor(rng.normal(size=(4, 7, 7)))
        m = torch.as_tensor(rng.random((7, 7)) > 0.6)
        got = mask_pool(f, m)
        want = np.zeros(4)
        n = 0
        for i in range(7):
            for j in range(7):
                if m[i, j]:
                    want += f[:, i, j].numpy()
                    n += 1
        assert np.allclose(got.numpy(), want / n, atol=1e-12)
        assert torch.allclose(mask_pool(f, torch.ones(7, 7, dtype=torch.bool)), f.mean((1, 2)))
        one = torch.zeros(7, 7, dtype=torch.bool)
        one[3, 4] = True
        assert torch.equal(mask_pool(f, one), f[:, 3, 4])
        assert torch.count_nonzero(mask_pool(f, torch.zeros(7, 7, dtype=torch.bool))) == 0
        with pytest.raises(ShapeError):
            mask_pool(f, torch.ones(6, 7, dtype=torch.bool))

    def test_single_category(self):
        tva = TVA(4, 3)
        t = F.normalize(torch.randn(1, 4), dim=-1)
        rep = tva(torch.randn(2, 5, 4), t, torch.randn(2, 3, 4, 4))
        assert torch.equal(rep.weights, torch.ones(2, 5, 1))

    def test_straight_line(self, rng):
        tva = TVA(4, 3).double()
        z, t = torch.as_tensor(rng.normal(size=(1, 5, 4))), torch.as_tensor(rng.normal(size=(4, 4)))
        feats = torch.as_tensor(rng.normal(size=(1, 3, 3, 3)))
        rep = tva(z, t, feats)
        w_p, b_p = tva.proj.weight.detach().numpy(), tva.proj.bias.detach().numpy()
        for i in range(5):
            s = np.array([z[0, i].numpy() @ t[c].numpy() / 2.0 for c in range(4)])
            w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
            assert np.allclose(rep.weights[0, i].detach().numpy(), w, atol=1e-9)
            key = w_p @ (w @ t.numpy()) + b_p
            raw = np.array([[feats[0, :, a, b].numpy() @ key for b in range(3)] for a in range(3)])
            mean = raw.mean()
            filt = np.array([[v - mean if v - mean > 0 else 0.0 for v in row] for row in raw])
            assert np.allclose(rep.attention_filtered[0, i].detach().numpy(), filt, atol=1e-9)

    def test_uniform_weights_for_equal_text(self):
        t = F.normalize(torch.randn(1, 4), dim=-1).expand(3, 4)
        rep = TVA(4, 3)(torch.randn(1, 2, 4), t, torch.randn(1, 3, 2, 2))
        assert torch.allclose(rep.weights, torch.full((1, 2, 3), 1 / 3), atol=1e-9)

    @given(st.integers(0, 10_000))
    def test_invariants(self, seed):
        g = torch.Generator().manual_seed(seed)
        tva = TVA(6, 5)
        rep = tva(torch.randn(1, 4, 6, generator=g), torch.randn(3, 6, generator=g), torch.randn(1, 5, 4, 4, generator=g))
        assert torch.allclose(rep.weights.sum(-1), torch.ones(1, 4), atol=1e-6) and (rep.weights > 0).all()
        a, f = rep.attention_raw, rep.attention_filtered
        below = a < a.mean(dim=(-2, -1), keepdim=True)
        assert (f >= 0).all() and (f[below] == 0).all()
        assert (rep.per_instance_map[(f == 0).unsqueeze(2).expand_as(rep.per_instance_map)] == 0).all()

    def test_constant_raw(self):
        assert torch.count_nonzero(mean_filter(torch.full((2, 3, 5, 5), 0.7))) == 0

    def test_empty_text(self):
        with pytest.raises(ConfigError):
            TVA(4, 3)(torch.randn(1, 2, 4), torch.zeros(0, 4), torch.randn(1, 3, 2, 2))


# ------------------------------------------------------------------ cin

class TestCIN:
    def _inputs(self, seed=0, n=3):
        g = torch.Generator().manual_seed(seed)
        attn = torch.relu(torch.randn(1, n, 4, 4, generator=g, dtype=torch.float64))
        feats = torch.randn(1, 6, 4, 4, generator=g, dtype=torch.float64)
        coarse = torch.randn(1, n, 32, 32, generator=g, dtype=torch.float64)
        return attn, feats, coarse

    def test_warm_start_exact(self):
        cin = CIN(6).double()
        attn, feats, coarse = self._inputs()
        assert torch.equal(cin.forward_factored(attn, feats, coarse).final_mask_logits, coarse)
        assert torch.equal(cin(attn.unsqueeze(2) * feats.unsqueeze(1), coarse).final_mask_logits, coarse)

    def test_factored_equals_reference(self):
        cin = CIN(6).double()
        torch.nn.init.normal_(cin.residual.weight)
        attn, feats, coarse = self._inputs(1)
        a = cin.forward_factored(attn, feats, coarse)
        b = cin(attn.unsqueeze(2) * feats.unsqueeze(1), coarse)
        assert torch.allclose(a.final_mask_logits, b.final_mask_logits, atol=1e-10)
        assert torch.allclose(a.confidence, b.confidence, atol=1e-12)

    def test_straight_line_gamma_beta_confidence(self):
        cin = CIN(6).double()
        attn, feats, coarse = self._inputs(2)
        out = cin.forward_factored(attn, feats, coarse)
        m = binarize_to(coarse, (4, 4))[0].numpy()
        wp, bp = cin.proj.weight.detach().numpy(), cin.proj.bias.detach().numpy()
        for i in range(3):
            acc, n = np.zeros(12), 0
            for a in range(4):
                for b in range(4):
                    if m[i, a, b]:
                        acc += wp @ (attn[0, i, a, b].item() * feats[0, :, a, b].numpy()) + bp
                        n += 1
            v = acc / max(n, 1)
            gamma = cin.gamma.weight.detach().numpy() @ v + cin.gamma.bias.detach().numpy()
            beta = cin.beta.weight.detach().numpy() @ v + cin.beta.bias.detach().numpy()
            conf = 1 / (1 + np.exp(-(cin.confidence.weight.detach().numpy() @ v + cin.confidence.bias.detach().numpy())))
            assert np.allclose(out.gamma[0, i].detach().numpy(), gamma, atol=1e-10)
            assert np.allclose(out.beta[0, i].detach().numpy(), beta, atol=1e-10)
            assert out.confidence[0, i].item() == pytest.approx(conf[0], abs=1e-12)

    def test_instance_norm_stats(self, rng):
        x = torch.as_tensor(rng.normal(3, 5, size=(2, 3, 8, 8)))
        y = instance_norm(x)
        assert y.mean((-2, -1)).abs().max() < 1e-6
        assert (y.var((-2, -1), unbiased=False) - 1).abs().max() < 1e-4
        assert torch.count_nonzero(instance_norm(torch.full((1, 2, 4, 4), 3.0))) == 0

    def test_empty_coarse_mask(self):
        cin = CIN(6).double()
        attn, feats, _ = self._inputs()
        out = cin.forward_factored(attn, feats, torch.full((1, 3, 32, 32), -5.0, dtype=torch.float64))
        assert torch.count_nonzero(out.instance_vector) == 0 and torch.isfinite(out.confidence).all()

    def test_confidence_gradient(self):
        cin = CIN(3).double()
        v = torch.randn(6, dtype=torch.float64, requires_grad=True)
        f = lambda x: torch.sigmoid(cin.confidence(x)).sum()
        f(v).backward()
        h = 1e-5
        for k in range(6):
            e = torch.zeros(6, dtype=torch.float64)
            e[k] = h
            num = (f(v.detach() + e) - f(v.detach() - e)) / (2 * h)
            assert abs(num.item() - v.grad[k].item()) <= 1e-4 * max(abs(num.item()), 1e-8)

    def test_score_and_select(self):
        logits = torch.randn(3, 4, 4)
        assert [p["index"] for p in score_and_select(logits, [0.9, 0.4, 0.9], 0.5)] == [0, 2]
        assert len(score_and_select(logits, [0.1, 0.0, 0.3], 0.0)) == 3
        assert [p["index"] for p in score_and_select(logits, [1.0, 0.99, 1.0], 1.0)] == [0, 2]
        with pytest.raises(DomainError):
            score_and_select(logits, [0.1, 0.2, 0.3], 1.5)
