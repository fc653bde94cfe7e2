# test_embedder_denoiser.py
"""
Embedder, PCA split and denoiser tests.

Covers:
- Token sets, token masking and the null conditioning
- PCA fit against a brute-force eigendecomposition and the decomposition identity
- Masked fusion, cross-attention and the full UNet forward pass
- Finite-difference gradient check of the training loss (4 ablation configs)
"""

import itertools
import unittest

import numpy as np
import torch

from config import DenoiserConfig
from denoiser import CrossAttention, RefPaintModel, cross_attend, init_params, masked_fuse
from diffusion_schedule import build_schedule
from embedder import (
    KEEP_ONES,
    KEEP_ZEROS,
    PatchEmbedder,
    PatchTokens,
    decompose,
    fit_pca,
    null_context,
)
from errors import ParameterError, ShapeError
from trainer import TrainingDraw, compute_loss

SMALL = dict(resolution=8, base_channels=4, levels=2, attn_levels=(1,), embed_dim=8, patch_size=4)


def small_config(**overrides) -> DenoiserConfig:
    return DenoiserConfig(**{**SMALL, **overrides})


def randomize(model: torch.nn.Module, seed: int, std: float = 0.3) -> None:
    """Overwrite every parameter (including the zero-initialized head) with noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


class TestPatchTokens(unittest.TestCase):
    """Token containers and null conditioning."""

    def test_embedding_is_mean_of_valid_tokens(self):
        tokens = torch.tensor([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
        valid = torch.tensor([[1.0, 1.0, 0.0]])
        pt = PatchTokens(tokens=tokens, valid=valid, grid=(1, 3))
        self.assertTrue(torch.equal(pt.embedding(), torch.tensor([[2.0, 3.0]])))

    def test_empty_set_embeds_to_zero(self):
        pt = PatchTokens(tokens=torch.zeros(1, 4, 3), valid=torch.zeros(1, 4), grid=(2, 2))
        self.assertFalse(bool(pt.any_valid()[0]))
        self.assertTrue(torch.equal(pt.embedding(), torch.zeros(1, 3)))

    def test_with_null_replaces_dropped_sets(self):
        tokens = torch.ones(2, 4, 3)
        valid = torch.ones(2, 4)
        pt = PatchTokens(tokens=tokens, valid=valid, grid=(2, 2)).with_null(torch.tensor([False, True]))
        self.assertTrue(torch.equal(pt.tokens[0], tokens[0]))
        self.assertTrue(torch.equal(pt.tokens[1], torch.zeros(4, 3)))
        self.assertTrue(torch.equal(pt.valid[1], torch.tensor([1.0, 0.0, 0.0, 0.0])))

    def test_null_context_is_single_zero_token(self):
        ctx = null_context(5, batch=2)
        self.assertEqual(tuple(ctx.tokens.shape), (2, 1, 5))
        self.assertTrue(torch.equal(ctx.tokens, torch.zeros(2, 1, 5)))
        self.assertTrue(torch.equal(ctx.valid, torch.ones(2, 1)))

    def test_from_embedding_rejects_bad_rank(self):
        with self.assertRaises(ShapeError):
            PatchTokens.from_embedding(torch.zeros(1, 2, 3))


class TestPatchEmbedder(unittest.TestCase):
    """Encoding and token masking."""

    def setUp(self):
        torch.manual_seed(0)
        self.embedder = PatchEmbedder(small_config())
        self.image = torch.rand(3, 8, 8) * 2 - 1

    def test_encode_shapes(self):
        pt, emb = self.embedder.encode(self.image)
        self.assertEqual(tuple(pt.tokens.shape), (1, 4, 8))
        self.assertEqual(tuple(emb.shape), (1, 8))
        self.assertEqual(pt.grid, (2, 2))

    def test_wrong_resolution(self):
        with self.assertRaises(ShapeError):
            self.embedder.encode(torch.zeros(3, 16, 16))

    def test_token_validity_threshold(self):
        mask = torch.ones(1, 1, 8, 8)
        mask[..., :4, :4] = 0          # first patch fully excluded
        mask[..., :4, 4:6] = 0         # second patch exactly half excluded
        valid = self.embedder.token_validity(mask, KEEP_ONES)
        self.assertTrue(torch.equal(valid, torch.tensor([[False, True, True, True]])))
        inverse = self.embedder.token_validity(mask, KEEP_ZEROS)
        self.assertTrue(torch.equal(inverse, torch.tensor([[True, True, False, False]])))

    def test_unknown_keep_value(self):
        with self.assertRaises(ParameterError):
            self.embedder.token_validity(torch.ones(1, 1, 8, 8), "everything")

    def test_masked_encode_ignores_excluded_content(self):
        mask = torch.ones(8, 8)
        mask[:4, :4] = 0
        _, a = self.embedder.masked_encode(self.image, mask)
        edited = self.image.clone()
        edited[:, :4, :4] = torch.rand(3, 4, 4)
        _, b = self.embedder.masked_encode(edited, mask)
        self.assertTrue(torch.allclose(a, b, atol=1e-6))

    def test_masked_encode_full_keep_matches_encode(self):
        pt, emb = self.embedder.encode(self.image)
        masked_pt, masked_emb = self.embedder.masked_encode(self.image, torch.ones(8, 8), keep=KEEP_ONES)
        self.assertTrue(torch.equal(masked_pt.tokens, pt.tokens))
        self.assertTrue(torch.equal(masked_emb, emb))

    def test_masked_encode_all_excluded_warns(self):
        with self.assertLogs("embedder", level="WARNING"):
            pt, emb = self.embedder.masked_encode(self.image, torch.zeros(8, 8))
        self.assertFalse(bool(pt.any_valid()[0]))
        self.assertTrue(torch.equal(emb, torch.zeros(1, 8)))


class TestTokenValidityOnLargerGrid(unittest.TestCase):
    """Patch-level exclusion on a 4x4 token grid."""

    def setUp(self):
        self.embedder = PatchEmbedder(small_config(resolution=32, patch_size=8))

    def _loop_validity(self, mask: torch.Tensor) -> list:
        P = 8
        flags = []
        for r in range(4):
            for c in range(4):
                patch = mask[r * P:(r + 1) * P, c * P:(c + 1) * P]
                excluded = int((patch == 0).sum())
                flags.append(excluded / (P * P) <= self.embedder.threshold)
        return flags

    def test_top_half_excluded(self):
        mask = torch.ones(32, 32)
        mask[:16] = 0
        valid = self.embedder.token_validity(mask.view(1, 1, 32, 32), KEEP_ONES)
        self.assertEqual(valid[0].tolist(), [False] * 8 + [True] * 8)
        self.assertEqual(valid[0].tolist(), self._loop_validity(mask))

    def test_random_masks_match_patch_loop_and_grow_monotonically(self):
        gen = torch.Generator().manual_seed(17)
        for _ in range(20):
            mask = (torch.rand((32, 32), generator=gen) < 0.6).float()
            valid = self.embedder.token_validity(mask.view(1, 1, 32, 32), KEEP_ONES)[0]
            self.assertEqual(valid.tolist(), self._loop_validity(mask))
            larger = torch.maximum(mask, (torch.rand((32, 32), generator=gen) < 0.3).float())
            grown = self.embedder.token_validity(larger.view(1, 1, 32, 32), KEEP_ONES)[0]
            self.assertTrue(bool((grown | ~valid).all()))


class TestPca(unittest.TestCase):
    """Semantic/style split."""

    def setUp(self):
        rng = np.random.default_rng(4)
        scales = np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
        self.corpus = list(rng.standard_normal((200, 6)) * scales + rng.standard_normal(6))

    def test_components_orthonormal(self):
        basis = fit_pca(self.corpus, k=4)
        gram = basis.components @ basis.components.T
        self.assertLess(np.abs(gram - np.eye(4)).max(), 1e-6)

    def test_matches_brute_force_eigendecomposition(self):
        basis = fit_pca(self.corpus, k=3)
        X = np.stack(self.corpus)
        centered = X - X.mean(axis=0)
        cov = centered.T @ centered / X.shape[0]
        vals, vecs = np.linalg.eig(cov)
        order = np.argsort(-vals.real)
        for i in range(3):
            ref = vecs[:, order[i]].real
            ref = ref / np.linalg.norm(ref)
            if ref[np.argmax(np.abs(ref))] < 0:
                ref = -ref
            self.assertLess(np.abs(basis.components[i] - ref).max(), 1e-6)
        self.assertTrue(np.all(np.diff(basis.explained) <= 0))

    def test_sign_rule(self):
        basis = fit_pca(self.corpus, k=6)
        for row in basis.components:
            self.assertGreater(row[np.argmax(np.abs(row))], 0)

    def test_decomposition_reconstructs(self):
        basis = fit_pca(self.corpus, k=2)
        for e in self.corpus[:20]:
            c_sem, c_sty = decompose(e, basis)
            self.assertLess(np.abs(c_sem + c_sty - basis.mean - e).max(), 1e-10)

    def test_full_rank_style_is_mean(self):
        basis = fit_pca(self.corpus, k=6)
        _, c_sty = decompose(self.corpus[0], basis)
        self.assertLess(np.abs(c_sty - basis.mean).max(), 1e-10)

    def test_automatic_rank_reaches_variance_target(self):
        basis = fit_pca(self.corpus, variance_target=0.9)
        self.assertGreaterEqual(basis.explained.sum(), 0.9 - 1e-12)
        if basis.k > 1:
            self.assertLess(basis.explained[:-1].sum(), 0.9)

    def test_full_rank_semantic_part_is_embedding(self):
        basis = fit_pca(self.corpus, k=6)
        for e in self.corpus[:10]:
            c_sem, _ = decompose(e, basis)
            self.assertLess(np.abs(c_sem - e).max(), 1e-10)

    def test_points_on_a_line(self):
        direction = np.array([1.0, 2.0]) / np.sqrt(5.0)
        corpus = [np.array([3.0, -1.0]) + s * direction for s in np.linspace(-2.0, 3.0, 11)]
        basis = fit_pca(corpus, k=1)
        self.assertLess(np.abs(basis.components[0] - direction).max(), 1e-10)
        for e in corpus:
            _, c_sty = decompose(e, basis)
            self.assertLess(np.abs(c_sty - basis.mean).max(), 1e-10)

    def test_rank_deficient_corpus_keeps_orthonormal_components(self):
        corpus = [s * np.array([1.0, -1.0, 0.5]) for s in range(1, 8)]
        basis = fit_pca(corpus, k=2)
        gram = basis.components @ basis.components.T
        self.assertLess(np.abs(gram - np.eye(2)).max(), 1e-10)
        self.assertAlmostEqual(float(basis.explained[1]), 0.0, places=10)

    def test_empty_corpus(self):
        with self.assertRaises(ParameterError):
            fit_pca([], k=1)

    def test_rank_bounds(self):
        with self.assertRaises(ParameterError):
            fit_pca(self.corpus[:3], k=4)
        with self.assertRaises(ParameterError):
            fit_pca(self.corpus, k=7)

    def test_dimension_mismatch(self):
        basis = fit_pca(self.corpus, k=2)
        with self.assertRaises(ShapeError):
            decompose(np.zeros(5), basis)


class TestFusionAndAttention(unittest.TestCase):
    """Building blocks of the decoder."""

    def test_masked_fuse_selects_by_mask(self):
        F_side = torch.full((1, 2, 4, 4), 1.0)
        F_enc = torch.full((1, 2, 4, 4), 2.0)
        F_dec = torch.full((1, 3, 4, 4), 3.0)
        m = torch.ones(8, 8)
        m[:, :4] = 0
        out = masked_fuse(F_side, F_enc, F_dec, m)
        self.assertEqual(tuple(out.shape), (1, 5, 4, 4))
        self.assertTrue(torch.equal(out[:, :2, :, :2], torch.full((1, 2, 4, 2), 1.0)))
        self.assertTrue(torch.equal(out[:, :2, :, 2:], torch.full((1, 2, 4, 2), 2.0)))
        self.assertTrue(torch.equal(out[:, 2:], F_dec))

    def test_masked_fuse_is_linear_in_features(self):
        gen = torch.Generator().manual_seed(4)
        m = (torch.rand((4, 4), generator=gen) < 0.5).double()
        S1, S2, E1, E2 = (torch.randn((2, 3, 4, 4), generator=gen, dtype=torch.float64) for _ in range(4))
        D1, D2 = (torch.randn((2, 2, 4, 4), generator=gen, dtype=torch.float64) for _ in range(2))
        a, b = 1.5, -0.25
        combined = masked_fuse(a * S1 + b * S2, a * E1 + b * E2, a * D1 + b * D2, m)
        separate = a * masked_fuse(S1, E1, D1, m) + b * masked_fuse(S2, E2, D2, m)
        self.assertTrue(torch.allclose(combined, separate, atol=1e-12))

    def test_masked_fuse_checkerboard_matches_loop(self):
        m = torch.zeros(4, 4)
        for i in range(4):
            for j in range(4):
                m[i, j] = float((i // 2 + j // 2) % 2)
        gen = torch.Generator().manual_seed(6)
        F_side = torch.randn((1, 2, 4, 4), generator=gen)
        F_enc = torch.randn((1, 2, 4, 4), generator=gen)
        F_dec = torch.randn((1, 1, 4, 4), generator=gen)
        out = masked_fuse(F_side, F_enc, F_dec, m)
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    expected = F_enc[0, c, i, j] if m[i, j] == 1 else F_side[0, c, i, j]
                    self.assertEqual(float(out[0, c, i, j]), float(expected))
        self.assertTrue(torch.equal(out[:, 2:], F_dec))

    def test_masked_fuse_shape_checks(self):
        with self.assertRaises(ShapeError):
            masked_fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4), torch.ones(4, 4))
        with self.assertRaises(ShapeError):
            masked_fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 4, 4), torch.ones(6, 6))

    def test_empty_context_is_identity(self):
        torch.manual_seed(1)
        attn = CrossAttention(4, 3)
        x = torch.randn(2, 4, 3, 3)
        ctx = PatchTokens(tokens=torch.randn(2, 5, 3), valid=torch.zeros(2, 5), grid=(1, 5))
        self.assertTrue(torch.equal(cross_attend(x, ctx, attn), x))

    def test_invalid_tokens_are_ignored(self):
        torch.manual_seed(2)
        attn = CrossAttention(4, 3)
        x = torch.randn(1, 4, 3, 3)
        tokens = torch.randn(1, 3, 3)
        valid = torch.tensor([[1.0, 1.0, 0.0]])
        a = cross_attend(x, PatchTokens(tokens, valid, (1, 3)), attn)
        tokens_b = tokens.clone()
        tokens_b[0, 2] = 50.0
        b = cross_attend(x, PatchTokens(tokens_b, valid, (1, 3)), attn)
        self.assertTrue(torch.allclose(a, b, atol=1e-6))

    def test_single_token_adds_its_value(self):
        torch.manual_seed(3)
        attn = CrossAttention(4, 3).double()
        x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
        token = torch.randn(2, 1, 3, dtype=torch.float64)
        out = cross_attend(x, PatchTokens(token, torch.ones(2, 1, dtype=torch.float64), (1, 1)), attn)
        with torch.no_grad():
            value = attn.to_v(token[:, 0]).view(2, 4, 1, 1)
        self.assertTrue(torch.allclose(out, x + value, atol=1e-12))

    def test_token_order_does_not_matter(self):
        torch.manual_seed(4)
        attn = CrossAttention(4, 3).double()
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        tokens = torch.randn(1, 5, 3, dtype=torch.float64)
        valid = torch.tensor([[1.0, 0.0, 1.0, 1.0, 0.0]], dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 2, 1])
        a = cross_attend(x, PatchTokens(tokens, valid, (1, 5)), attn)
        b = cross_attend(x, PatchTokens(tokens[:, perm], valid[:, perm], (1, 5)), attn)
        self.assertTrue(torch.allclose(a, b, atol=1e-12))

    def test_single_context_broadcasts(self):
        attn = CrossAttention(4, 3)
        x = torch.randn(3, 4, 2, 2)
        out = cross_attend(x, null_context(3, batch=1), attn)
        self.assertEqual(tuple(out.shape), (3, 4, 2, 2))


class TestRefPaintModel(unittest.TestCase):
    """Forward pass, ablation switches and initialization."""

    def _inputs(self, batch=2):
        gen = torch.Generator().manual_seed(9)
        x = torch.randn((batch, 3, 8, 8), generator=gen)
        side = torch.randn((batch, 3, 8, 8), generator=gen)
        mask = torch.ones(batch, 1, 8, 8)
        mask[..., :, :4] = 0
        return x, side, mask

    def test_output_shape_and_zero_head(self):
        model = init_params(small_config(), seed=0)
        x, side, mask = self._inputs()
        out = model(x, 3, null_context(8, batch=2), side, mask)
        self.assertEqual(out.shape, x.shape)
        self.assertTrue(torch.equal(out, torch.zeros_like(x)))

    def test_init_is_reproducible_and_leaves_global_rng(self):
        state = torch.random.get_rng_state()
        a = init_params(small_config(), seed=3)
        b = init_params(small_config(), seed=3)
        self.assertTrue(torch.equal(state, torch.random.get_rng_state()))
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            self.assertEqual(ka, kb)
            self.assertTrue(torch.equal(va, vb))

    def test_ladder_side_off_ignores_side_input(self):
        model = RefPaintModel(small_config(enable_ladder_side=False))
        randomize(model, 1)
        self.assertIsNone(model.side_encoder)
        x, side, mask = self._inputs()
        ctx = null_context(8, batch=2)
        a = model(x, 5, ctx, side, mask)
        b = model(x, 5, ctx, side * -3.0, mask)
        self.assertTrue(torch.equal(a, b))

    def test_ladder_side_on_reads_side_input(self):
        model = RefPaintModel(small_config())
        randomize(model, 1)
        x, side, mask = self._inputs()
        ctx = null_context(8, batch=2)
        a = model(x, 5, ctx, side, mask)
        b = model(x, 5, ctx, side * -3.0, mask)
        self.assertFalse(torch.allclose(a, b))

    def test_fusion_switches_change_output(self):
        x, side, mask = self._inputs()
        ctx = null_context(8, batch=2)
        outputs = []
        for overrides in ({}, {"enable_mask_fusion": False}, {"fusion_mask_invert": True}):
            model = RefPaintModel(small_config(**overrides))
            randomize(model, 2)
            outputs.append(model(x, 5, ctx, side, mask))
        self.assertFalse(torch.allclose(outputs[0], outputs[1]))
        self.assertFalse(torch.allclose(outputs[0], outputs[2]))

    def test_context_changes_output(self):
        model = RefPaintModel(small_config())
        randomize(model, 3)
        x, side, mask = self._inputs()
        a = model(x, 5, null_context(8, batch=2), side, mask)
        b = model(x, 5, PatchTokens.from_embedding(torch.ones(2, 8)), side, mask)
        self.assertFalse(torch.allclose(a, b))

    def test_output_shape_across_resolutions_and_channels(self):
        for resolution, channels in ((32, 3), (64, 1)):
            with self.subTest(resolution=resolution, channels=channels):
                model = RefPaintModel(small_config(resolution=resolution, image_channels=channels))
                randomize(model, 5)
                gen = torch.Generator().manual_seed(resolution)
                x = torch.randn((2, channels, resolution, resolution), generator=gen)
                side = torch.randn((2, channels, resolution, resolution), generator=gen)
                mask = torch.ones(2, 1, resolution, resolution)
                mask[..., : resolution // 2, :] = 0
                with torch.no_grad():
                    out = model(x, 4, null_context(8, batch=2), side, mask)
                self.assertEqual(out.shape, x.shape)
                self.assertTrue(bool(torch.isfinite(out).all()))

    def test_shape_validation(self):
        model = RefPaintModel(small_config())
        x, side, mask = self._inputs()
        ctx = null_context(8, batch=2)
        with self.assertRaises(ShapeError):
            model(torch.zeros(2, 3, 16, 16), 0, ctx, side, mask)
        with self.assertRaises(ShapeError):
            model(x, 0, ctx, side[:1], mask)
        with self.assertRaises(ShapeError):
            model(x, 0, ctx, side, torch.ones(2, 1, 4, 4))

    def test_config_validation(self):
        with self.assertRaises(ParameterError):
            DenoiserConfig(resolution=10, patch_size=4, levels=2)
        with self.assertRaises(ParameterError):
            DenoiserConfig(levels=2, attn_levels=(2,))


class TestGradientCheck(unittest.TestCase):
    """Analytic gradients of the full loss against central differences."""

    N_PARAMS = 200
    H = 1e-3

    def _loss_fn(self, model, images, draw, sched):
        return lambda: compute_loss(model, images, draw, sched)

    def _check(self, ladder: bool, fusion: bool, seed: int):
        cfg = small_config(enable_ladder_side=ladder, enable_mask_fusion=fusion)
        model = RefPaintModel(cfg).double()
        randomize(model, seed, std=0.2)
        sched = build_schedule("linear", 20, 1e-3, 0.1)

        gen = torch.Generator().manual_seed(seed)
        images = torch.rand((2, 3, 8, 8), generator=gen, dtype=torch.float64) * 2 - 1
        masks = torch.ones(2, 1, 8, 8, dtype=torch.float64)
        masks[..., :, :4] = 0       # left half is the hole, so hole tokens stay valid
        masks[1, ..., 6:, 4:] = 0
        draw = TrainingDraw(masks=masks, t=torch.tensor([3, 15]),
                            eps=torch.randn((2, 3, 8, 8), generator=gen, dtype=torch.float64),
                            drop=torch.tensor([False, False]))
        loss = self._loss_fn(model, images, draw, sched)

        model.zero_grad()
        loss().backward()
        params = [p for p in model.parameters()]
        slots = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(slots), size=min(self.N_PARAMS, len(slots)), replace=False)

        analytic, numeric = [], []
        with torch.no_grad():
            for pick in picks:
                i, j = slots[pick]
                flat = params[i].view(-1)
                analytic.append(float(params[i].grad.view(-1)[j]))
                original = float(flat[j])
                flat[j] = original + self.H
                up = float(loss())
                flat[j] = original - self.H
                down = float(loss())
                flat[j] = original
                numeric.append((up - down) / (2 * self.H))
        a, n = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-30)
        self.assertLess(rel, 1e-3, f"ladder={ladder} fusion={fusion} relative error {rel:.2e}")

    def test_all_ablation_configs(self):
        for k, (ladder, fusion) in enumerate(itertools.product((True, False), repeat=2)):
            with self.subTest(ladder=ladder, fusion=fusion):
                self._check(ladder, fusion, seed=10 + k)


if __name__ == '__main__':
    unittest.main()
