import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nayer.embeddings import fallback_embeddings
from nayer.errors import DegenerateBatchError, ModeMismatchError, ShapeError
from nayer.synthesis import (
    ARCH_VARIANTS,
    ImageGenerator,
    InputMode,
    InputSpec,
    LatentMapper,
    NoisyLayer,
    PerSampleNoisy,
    PlainAffine,
    SNConv2d,
    SyntheticBatch,
    make_generator,
    make_latent,
    noisy_layer_forward,
    reinit_noisy_layer,
    spectral_normalize,
    synthesize,
)
from nayer.utils import params_fingerprint


class TestNoisyLayer:
    def test_reinit_deterministic(self):
        a = reinit_noisy_layer(32, 64, "A3", seed=5)
        b = reinit_noisy_layer(32, 64, "A3", seed=5)
        assert params_fingerprint(a) == params_fingerprint(b)

    def test_seed_changes_weights(self):
        a = reinit_noisy_layer(32, 64, "A3", seed=1)
        b = reinit_noisy_layer(32, 64, "A3", seed=2)
        assert not torch.equal(a.weight, b.weight)

    @pytest.mark.parametrize("variant", sorted(ARCH_VARIANTS))
    def test_bias_zero_after_reinit(self, variant):
        nl = reinit_noisy_layer(16, 24, variant, seed=9)
        assert float(nl.bias.abs().max()) == 0.0
        if nl.extra is not None:
            assert float(nl.extra.bias.abs().max()) == 0.0
        if nl.bn is not None:
            assert torch.equal(nl.bn_gamma, torch.ones(16))
            assert torch.equal(nl.bn_beta, torch.zeros(16))

    def test_identical_rows_zero_output(self):
        # batch-mode BN centers identical rows to zero; zero bias keeps them
        # zero (up to 1-ulp mean roundoff amplified by 1/sqrt(eps))
        nl = reinit_noisy_layer(8, 12, "A3", seed=0)
        rows = torch.randn(1, 8).repeat(6, 1)
        out = noisy_layer_forward(nl, rows, training=True)
        assert float(out.abs().max()) < 1e-3

    def test_output_shape(self):
        nl = reinit_noisy_layer(512, 1000, "A3", seed=0)
        out = noisy_layer_forward(nl, torch.randn(64, 512), training=True)
        assert out.shape == (64, 1000)

    def test_sigmoid_variant_range(self):
        nl = reinit_noisy_layer(16, 32, "A5", seed=3)
        out = noisy_layer_forward(nl, torch.randn(8, 16), training=True)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_degenerate_batch_rejected(self):
        nl = reinit_noisy_layer(16, 32, "A3", seed=0)
        with pytest.raises(DegenerateBatchError):
            noisy_layer_forward(nl, torch.randn(1, 16), training=True)
        # eval mode is fine with a single row
        out = noisy_layer_forward(nl, torch.randn(1, 16), training=False)
        assert out.shape == (1, 32)

    def test_bn_free_variants_accept_single_row(self):
        nl = reinit_noisy_layer(16, 32, "A1", seed=0)
        out = noisy_layer_forward(nl, torch.randn(1, 16), training=True)
        assert out.shape == (1, 32)

    def test_dropout_variant_eval_pure(self):
        nl = reinit_noisy_layer(16, 32, "A8", seed=0)
        x = torch.randn(4, 16)
        a = noisy_layer_forward(nl, x, training=False)
        b = noisy_layer_forward(nl, x, training=False)
        assert torch.equal(a, b)

    def test_dropout_variant_masks_in_training(self):
        nl = reinit_noisy_layer(16, 64, "A8", seed=0)
        out = noisy_layer_forward(nl, torch.randn(4, 16), training=True)
        assert int((out == 0).sum()) > 0

    def test_eval_purity(self):
        nl = reinit_noisy_layer(16, 32, "A3", seed=4)
        x = torch.randn(5, 16)
        assert torch.equal(noisy_layer_forward(nl, x, False), noisy_layer_forward(nl, x, False))


class TestMakeLatent:
    def setup_method(self):
        self.pool = fallback_embeddings(10, 16, seed=11)

    def test_sum_beta_zero_equals_lte(self):
        labels = [0, 3, 7, 7]
        lte = make_latent(InputMode.LTE, self.pool, labels, seed=21, latent_dim=24)
        summed = make_latent(InputMode.SUM, self.pool, labels, seed=21, beta=0.0, latent_dim=24)
        assert torch.allclose(lte, summed)

    def test_z_mode_deterministic(self):
        a = make_latent(InputMode.Z, None, [0, 1], seed=5, latent_dim=24)
        b = make_latent(InputMode.Z, None, [0, 1], seed=5, latent_dim=24)
        c = make_latent(InputMode.Z, None, [0, 1], seed=6, latent_dim=24)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_kto1_rows_distinct(self):
        nl = reinit_noisy_layer(16, 24, "A3", seed=2)
        latents = make_latent(InputMode.NL_KTO1, self.pool, list(range(10)), nl, latent_dim=24)
        dists = torch.cdist(latents, latents)
        dists.fill_diagonal_(float("inf"))
        assert float(dists.min()) > 0.0

    def test_mode_argument_mismatches(self):
        nl = reinit_noisy_layer(16, 24, "A3", seed=2)
        with pytest.raises(ModeMismatchError):
            make_latent(InputMode.LTE, self.pool, [0], nl, latent_dim=24)
        with pytest.raises(ModeMismatchError):
            make_latent(InputMode.NL_KTO1, self.pool, [0, 1], None, latent_dim=24)
        with pytest.raises(ModeMismatchError):
            make_latent(InputMode.Z, self.pool, [0], PlainAffine(16, 24), latent_dim=24)
        with pytest.raises(ModeMismatchError):
            make_latent(InputMode.LTE, self.pool, [0], beta=0.5, latent_dim=24)
        with pytest.raises(ModeMismatchError):
            make_latent(InputMode.NL_WO_BN, self.pool, [0, 1], nl, latent_dim=24)

    def test_oh_and_cat_shapes(self):
        oh = make_latent(InputMode.OH, self.pool, [0, 9], seed=1, latent_dim=24)
        cat = make_latent(InputMode.CAT, self.pool, [0, 9], seed=1, latent_dim=24)
        assert oh.shape == cat.shape == (2, 24)

    def test_1to1_per_sample_layer(self):
        per = PerSampleNoisy(16, 24, batch_size=4, seed=3)
        latents = make_latent(InputMode.NL_1TO1, self.pool, [1, 1, 2, 2], per, latent_dim=24)
        # same class, different per-sample weights: rows must differ
        assert not torch.allclose(latents[0], latents[1])
        with pytest.raises(ShapeError):
            make_latent(InputMode.NL_1TO1, self.pool, [1, 2], per, latent_dim=24)

    def test_input_spec_validation(self):
        with pytest.raises(ModeMismatchError):
            InputSpec(InputMode.SUM, None)
        with pytest.raises(ModeMismatchError):
            InputSpec(InputMode.SUM, -0.5)
        with pytest.raises(ModeMismatchError):
            InputSpec(InputMode.LTE, 0.5)
        InputSpec(InputMode.SUM, 0.5)


class TestSpectralNorm:
    def test_diag_oracle(self):
        w = torch.diag(torch.tensor([2.0, 1.0]))
        u = torch.tensor([0.6, 0.8])
        normalized, u_new, flag = spectral_normalize(w, u, n_iter=20)
        assert not flag
        top = float(torch.linalg.svdvals(normalized)[0])  # exact SVD oracle
        assert abs(top - 1.0) < 1e-3
        assert abs(float(u_new.norm()) - 1.0) < 1e-6

    def test_unit_norm_fixed_point(self):
        w = torch.eye(3)
        normalized, _, flag = spectral_normalize(w, torch.randn(3), n_iter=5)
        assert not flag
        assert float((normalized - w).abs().max()) < 1e-6

    def test_zero_matrix_guard(self):
        w = torch.zeros(4, 4)
        u = torch.randn(4)
        normalized, u_out, flag = spectral_normalize(w, u, n_iter=3)
        assert flag
        assert torch.equal(normalized, w)
        assert torch.equal(u_out, u)

    def test_conv_weight_within_band(self):
        g = torch.Generator().manual_seed(0)
        weight = torch.randn(16, 8, 3, 3, generator=g)
        u = torch.nn.functional.normalize(torch.randn(16, generator=g), dim=0)
        normalized, u, _ = spectral_normalize(weight, u, n_iter=10)
        sigma = float(torch.linalg.svdvals(normalized.reshape(16, -1))[0])
        assert 0.95 <= sigma <= 1.05

    def test_n_iter_precondition(self):
        with pytest.raises(ShapeError):
            spectral_normalize(torch.eye(2), torch.randn(2), n_iter=0)

    def test_snconv_freeze_flag(self):
        conv = SNConv2d(4, 4)
        conv.train()
        conv.update_u = False
        u_before = conv.u.clone()
        conv(torch.randn(2, 4, 5, 5))
        assert torch.equal(conv.u, u_before)


class TestGenerator:
    def test_small_shape(self):
        gen = make_generator(1000, (3, 32, 32), "small", width=128, seed=0)
        out = gen(torch.randn(4, 1000))
        assert out.shape == (4, 3, 32, 32)

    def test_large_reaches_224(self):
        gen = make_generator(64, (3, 224, 224), "large", width=16, seed=0)
        gen.eval()
        out = gen(torch.randn(2, 64))
        assert out.shape == (2, 3, 224, 224)
        assert gen.num_stages == 5

    def test_divisibility_enforced(self):
        with pytest.raises(ShapeError):
            ImageGenerator(64, (3, 30, 30), "small")
        with pytest.raises(ShapeError):
            ImageGenerator(64, (3, 24, 24), "large")

    def test_pixels_in_unit_range(self):
        gen = make_generator(32, (1, 8, 8), "small", width=16, seed=1)
        for training in (True, False):
            gen.train(training)
            out = gen(torch.randn(6, 32))
            assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_eval_mode_purity_and_row_identity(self):
        gen = make_generator(32, (1, 8, 8), "small", width=16, seed=1)
        gen.eval()
        latents = torch.randn(1, 32).repeat(2, 1)
        out1 = gen(latents)
        out2 = gen(latents)
        assert torch.equal(out1, out2)
        assert torch.equal(out1[0], out1[1])

    def test_latent_width_checked(self):
        gen = make_generator(32, (1, 8, 8), "small", width=16, seed=1)
        with pytest.raises(ShapeError):
            gen(torch.randn(2, 33))

    def test_training_batch_of_one_rejected(self):
        gen = make_generator(32, (1, 8, 8), "small", width=16, seed=1)
        gen.train()
        with pytest.raises(DegenerateBatchError):
            gen(torch.randn(1, 32))


class TestSynthesize:
    def setup_method(self):
        self.pool = fallback_embeddings(10, 16, seed=0)
        self.gen = make_generator(24, (1, 8, 8), "small", width=16, seed=0)

    def test_pixels_in_range_and_counts(self):
        nl = reinit_noisy_layer(16, 24, seed=0)
        batch = synthesize(self.pool, [0, 1, 2, 3], InputMode.NL_KTO1, nl, self.gen,
                           training=True, origin=(4, 1))
        assert len(batch) == 4
        assert batch.origin_epoch == 4 and batch.origin_iteration == 1
        assert float(batch.images.min()) >= 0.0 and float(batch.images.max()) <= 1.0

    def test_deterministic_in_eval(self):
        nl = reinit_noisy_layer(16, 24, seed=7)
        a = synthesize(self.pool, [1, 2], InputMode.NL_KTO1, nl, self.gen, training=False, seed=3)
        b = synthesize(self.pool, [1, 2], InputMode.NL_KTO1, nl, self.gen, training=False, seed=3)
        assert torch.equal(a.images, b.images)

    def test_reinit_independence(self):
        n1 = reinit_noisy_layer(16, 24, seed=1)
        n2 = reinit_noisy_layer(16, 24, seed=2)
        a = synthesize(self.pool, list(range(10)), InputMode.NL_KTO1, n1, self.gen, training=False)
        b = synthesize(self.pool, list(range(10)), InputMode.NL_KTO1, n2, self.gen, training=False)
        mean_l2 = float((a.images - b.images).flatten(1).norm(dim=1).mean())
        assert mean_l2 > 0.0

    def test_invalid_batch_rejected(self):
        with pytest.raises(ShapeError):
            SyntheticBatch(torch.rand(3, 1, 8, 8), torch.tensor([0, 1]))
        with pytest.raises(ShapeError):
            SyntheticBatch(torch.full((2, 1, 8, 8), 1.5), torch.tensor([0, 1]))


class TestInvariantProperties:
    def test_kto1_injectivity_100_seeds(self):
        pool = fallback_embeddings(10, 16, seed=1)
        for seed in range(100):
            nl = reinit_noisy_layer(16, 32, "A3", seed=seed)
            latents = noisy_layer_forward(nl, pool.embeddings, training=True)
            dists = torch.cdist(latents, latents)
            dists.fill_diagonal_(float("inf"))
            assert float(dists.min()) > 1e-8

    def test_bn_separates_clustered_embeddings(self):
        # rows clustered around a shared center, the geometry text embeddings have
        g = torch.Generator().manual_seed(3)
        center = torch.randn(32, generator=g)
        pool = center + 0.02 * torch.randn(10, 32, generator=g)
        nl = reinit_noisy_layer(32, 16, "A3", seed=0)
        nl.train()
        normalized = nl.bn(pool)

        def mean_pairwise(x):
            d = torch.cdist(x, x)
            return float(d.sum() / (x.shape[0] * (x.shape[0] - 1)))

        assert mean_pairwise(normalized) >= mean_pairwise(pool)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_fresh_layers_never_collapse(self, seed):
        pool = fallback_embeddings(6, 12, seed=0)
        nl = reinit_noisy_layer(12, 8, "A3", seed=seed)
        latents = noisy_layer_forward(nl, pool.embeddings, training=True)
        assert float(latents.std()) > 0.0


class TestLatentMapper:
    def setup_method(self):
        self.pool = fallback_embeddings(10, 16, seed=0)

    def test_reinit_modes_change_fingerprint(self):
        mapper = LatentMapper(InputMode.NL_KTO1, self.pool, 24, base_seed=0)
        mapper.reinit_for_round(1, 20)
        before = mapper.fingerprint()
        assert mapper.reinit_for_round(2, 20)
        assert mapper.fingerprint() != before

    def test_wo_reinit_is_stable(self):
        mapper = LatentMapper(InputMode.NL_WO_REINIT, self.pool, 24, base_seed=0)
        before = mapper.fingerprint()
        assert not mapper.reinit_for_round(123, 20)
        assert mapper.fingerprint() == before
        assert mapper.persistent

    def test_affine_modes_persistent(self):
        for mode in (InputMode.LTE, InputMode.OH, InputMode.CAT):
            mapper = LatentMapper(mode, self.pool, 24, base_seed=0)
            assert mapper.persistent
            assert not mapper.reinit_for_round(5, 8)
            out = mapper.make([0, 1, 2], noise_seed=4)
            assert out.shape == (3, 24)

    def test_wo_bn_forced_to_linear_variant(self):
        mapper = LatentMapper(InputMode.NL_WO_BN, self.pool, 24, base_seed=0)
        assert mapper.module.bn is None
        mapper.reinit_for_round(3, 8)
        out = mapper.make([0, 1], noise_seed=0)
        assert out.shape == (2, 24)

    def test_1to1_lazy_build_and_resize(self):
        mapper = LatentMapper(InputMode.NL_1TO1, self.pool, 24, base_seed=0)
        assert mapper.module is None
        mapper.reinit_for_round(1, 6)
        assert mapper.make(list(range(6)), 0).shape == (6, 24)
        mapper.reinit_for_round(2, 4)
        assert mapper.make([0, 1, 2, 3], 0).shape == (4, 24)
