import numpy as np
import pytest
import torch

from maskgan.core import ImageGrid, Modality, ShapeMismatch
from maskgan.networks import (
    AttentionMaskSet,
    ContentStack,
    MaskContentGenerator,
    NetworkSpec,
    PatchDiscriminator,
    SimplexViolation,
    compose,
    compose_arrays,
    discriminator_forward,
    generator_forward,
)

TINY = NetworkSpec(
    n_masks=3, gen_width=8, gen_downsamples=1, gen_res_blocks=1, disc_width=8, disc_layers=2
)


def norm_img(pixels):
    return ImageGrid(np.asarray(pixels, dtype=np.float64), Modality.MR, (-1.0, 1.0))


def random_simplex_masks(rng, n, h, w):
    logits = rng.normal(size=(n, h, w))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def oracle_compose(x, masks, contents):
    """Independent per-pixel accumulation."""
    h, w = x.shape
    out = np.zeros((h, w))
    n = masks.shape[0]
    for r in range(h):
        for c in range(w):
            acc = masks[n - 1, r, c] * x[r, c]
            for i in range(n - 1):
                acc += masks[i, r, c] * contents[i, r, c]
            out[r, c] = acc
    return out


class TestComposeExamples:
    def test_pure_background_identity(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(6, 6))
        masks = np.zeros((3, 6, 6))
        masks[2] = 1.0
        contents = rng.uniform(-1, 1, size=(2, 6, 6))
        out = compose(norm_img(x), AttentionMaskSet(masks), ContentStack(contents))
        np.testing.assert_array_equal(out.pixels, x)

    def test_pure_foreground_passthrough(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=(5, 5))
        masks = np.zeros((2, 5, 5))
        masks[0] = 1.0  # N=2: single foreground channel saturated
        c1 = rng.uniform(-1, 1, size=(1, 5, 5))
        out = compose(norm_img(x), AttentionMaskSet(masks), ContentStack(c1))
        np.testing.assert_array_equal(out.pixels, c1[0])

    def test_hand_specified_weighted_sum(self):
        rng = np.random.default_rng(2)
        x = np.array([[0.5, -0.5], [0.25, 1.0]])
        masks = random_simplex_masks(rng, 3, 2, 2)
        contents = rng.uniform(-1, 1, size=(2, 2, 2))
        out = compose(norm_img(x), AttentionMaskSet(masks), ContentStack(contents))
        np.testing.assert_allclose(out.pixels, oracle_compose(x, masks, contents), atol=1e-12)

    def test_shape_mismatch(self):
        masks = AttentionMaskSet(random_simplex_masks(np.random.default_rng(3), 3, 4, 4))
        contents = ContentStack(np.zeros((2, 4, 4)))
        with pytest.raises(ShapeMismatch):
            compose(norm_img(np.zeros((5, 5))), masks, contents)
        with pytest.raises(ShapeMismatch):
            compose(norm_img(np.zeros((4, 4))), masks, ContentStack(np.zeros((1, 4, 4))))

    def test_simplex_violation(self):
        # values individually in [0, 1] but sums at 1.5 per pixel
        ms = AttentionMaskSet(np.full((3, 4, 4), 0.5))
        with pytest.raises(SimplexViolation):
            compose(norm_img(np.zeros((4, 4))), ms, ContentStack(np.zeros((2, 4, 4))))


class TestComposeInvariants:
    def test_randomized_simplex_and_linearity(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            h, w = rng.integers(2, 9, size=2)
            n = int(rng.integers(2, 6))
            masks = random_simplex_masks(rng, n, h, w)
            assert np.abs(masks.sum(axis=0) - 1.0).max() <= 1e-5
            x = norm_img(rng.uniform(-1, 1, size=(h, w)))
            c1 = rng.uniform(-1, 1, size=(n - 1, h, w))
            c2 = rng.uniform(-1, 1, size=(n - 1, h, w))
            alpha = float(rng.uniform())
            ms = AttentionMaskSet(masks)
            blend = compose(x, ms, ContentStack(alpha * c1 + (1 - alpha) * c2))
            parts = alpha * compose(x, ms, ContentStack(c1)).pixels + (1 - alpha) * compose(
                x, ms, ContentStack(c2)
            ).pixels
            np.testing.assert_allclose(blend.pixels, parts, atol=1e-6)

    def test_background_faithfulness_exact_on_support(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            h, w = 8, 8
            masks = random_simplex_masks(rng, 4, h, w)
            support = rng.random((h, w)) < 0.3
            masks[:, support] = 0.0
            masks[3, support] = 1.0
            x = rng.uniform(-1, 1, size=(h, w))
            contents = rng.uniform(-1, 1, size=(3, h, w))
            out = compose(norm_img(x), AttentionMaskSet(masks), ContentStack(contents))
            np.testing.assert_array_equal(out.pixels[support], x[support])


class TestAttentionMaskSet:
    def test_rejects_out_of_range(self):
        bad = np.zeros((2, 3, 3))
        bad[0] = 1.5
        with pytest.raises(SimplexViolation):
            AttentionMaskSet(bad)

    def test_background_channel_is_last(self):
        m = random_simplex_masks(np.random.default_rng(6), 4, 2, 2)
        ms = AttentionMaskSet(m)
        np.testing.assert_array_equal(ms.background, m[3])
        assert ms.foreground.shape == (3, 2, 2)

    def test_content_bounds(self):
        with pytest.raises(Exception):
            ContentStack(np.full((1, 2, 2), 1.5))


class TestGeneratorForward:
    def test_finite_and_simplex_at_init(self):
        torch.manual_seed(0)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(7).uniform(-1, 1, size=(16, 16)))
        out = generator_forward(gen, img)
        assert np.isfinite(out.output.pixels).all()
        assert out.masks.simplex_deviation() <= 1e-5
        assert out.masks.maps.shape == (3, 16, 16)
        assert out.contents.contents.shape == (2, 16, 16)
        assert out.output.modality == Modality.CT

    def test_eval_determinism(self):
        torch.manual_seed(1)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(8).uniform(-1, 1, size=(12, 12)))
        a = generator_forward(gen, img)
        b = generator_forward(gen, img)
        np.testing.assert_array_equal(a.output.pixels, b.output.pixels)

    def test_requires_normalized_input(self):
        torch.manual_seed(2)
        gen = MaskContentGenerator(TINY, Modality.CT)
        raw = ImageGrid(np.zeros((8, 8)), Modality.CT, (-1000.0, 2000.0))
        with pytest.raises(Exception):
            generator_forward(gen, raw)

    def test_output_composes_from_parts(self):
        torch.manual_seed(3)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(9).uniform(-1, 1, size=(12, 12)))
        out = generator_forward(gen, img)
        recomposed = compose_arrays(img.pixels, out.masks.maps, out.contents.contents)
        np.testing.assert_allclose(out.output.pixels, recomposed, atol=1e-6)

    def test_two_branch_factorization(self):
        # Perturbing mask-head weights changes masks and (through them) the
        # output, but leaves the content branch activations untouched.
        torch.manual_seed(4)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(10).uniform(-1, 1, size=(12, 12)))
        before = generator_forward(gen, img)
        with torch.no_grad():
            for p in gen.mask_head.parameters():
                p.add_(0.3 * torch.randn_like(p))
        after = generator_forward(gen, img)
        assert not np.allclose(before.masks.maps, after.masks.maps, atol=1e-5)
        np.testing.assert_array_equal(before.contents.contents, after.contents.contents)
        assert not np.array_equal(before.output.pixels, after.output.pixels)

    def test_content_head_isolated_from_masks(self):
        torch.manual_seed(5)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(11).uniform(-1, 1, size=(12, 12)))
        before = generator_forward(gen, img)
        with torch.no_grad():
            for p in gen.content_head.parameters():
                p.add_(0.3 * torch.randn_like(p))
        after = generator_forward(gen, img)
        np.testing.assert_array_equal(before.masks.maps, after.masks.maps)
        assert not np.array_equal(before.contents.contents, after.contents.contents)

    def test_shared_encoder_feeds_both_heads(self):
        # one encoder object: perturbing it must move masks AND contents
        torch.manual_seed(6)
        gen = MaskContentGenerator(TINY, Modality.CT)
        img = norm_img(np.random.default_rng(12).uniform(-1, 1, size=(12, 12)))
        params = set(id(p) for p in gen.parameters())
        enc = set(id(p) for p in gen.encoder.parameters())
        mask_head = set(id(p) for p in gen.mask_head.parameters())
        content_head = set(id(p) for p in gen.content_head.parameters())
        assert enc | mask_head | content_head == params
        assert not (enc & mask_head) and not (enc & content_head)
        before = generator_forward(gen, img)
        with torch.no_grad():
            next(gen.encoder.parameters()).add_(0.5)
        after = generator_forward(gen, img)
        assert not np.array_equal(before.masks.maps, after.masks.maps)
        assert not np.array_equal(before.contents.contents, after.contents.contents)


class TestDiscriminator:
    def test_full_scale_patch_grid_and_receptive_field(self):
        torch.manual_seed(7)
        spec = NetworkSpec()  # full 70-px receptive field stack
        d = PatchDiscriminator(spec)
        assert d.receptive_field() == 70
        img = norm_img(np.zeros((224, 224)))
        scores = discriminator_forward(d, img)
        assert scores.shape == (26, 26)  # frozen regression value for 224 input

    def test_constant_zero_image_finite(self):
        torch.manual_seed(8)
        d = PatchDiscriminator(TINY)
        scores = discriminator_forward(d, norm_img(np.zeros((32, 32))))
        assert np.isfinite(scores).all()

    def test_translation_equivariance_interior(self):
        # norm-free discriminator: shifting the input by one patch stride
        # shifts the score grid by one cell (interior cells, tol 1e-3)
        torch.manual_seed(9)
        d = PatchDiscriminator(TINY, use_norm=False)
        stride = d.stride
        rng = np.random.default_rng(13)
        base = np.zeros((48, 48), dtype=np.float64)
        base[8:40, 8:40] = rng.uniform(-1, 1, size=(32, 32))
        shifted = np.roll(base, stride, axis=1)
        s0 = discriminator_forward(d, norm_img(base))
        s1 = discriminator_forward(d, norm_img(shifted))
        interior = np.s_[2:-2, 2:-2]
        np.testing.assert_allclose(s1[:, 1:][interior], s0[:, :-1][interior], atol=1e-3)


class TestNetworkSpec:
    def test_rejects_bad_sizes(self):
        with pytest.raises(Exception):
            NetworkSpec(n_masks=1)
        with pytest.raises(Exception):
            NetworkSpec(gen_width=0)
