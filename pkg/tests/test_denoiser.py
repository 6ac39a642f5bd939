import numpy as np
import pytest
import torch

import noisemix as nm
from noisemix.denoiser import embed_timestep_vector, load_checkpoint, save_checkpoint
from noisemix.fileio import ContainerError
from noisemix.forward import LatentShape, MultimodalLatent

from conftest import randomize_modulation


def expected_param_count(cfg: nm.DenoiserConfig) -> int:
    """Closed-form parameter count for the architecture."""
    d, tsd, N, L = cfg.model_dim, cfg.timestep_embed_dim, cfg.num_segments, cfg.layers
    M = cfg.num_modalities
    in_mult = 2 if cfg.self_conditioning else 1
    total = 0
    for w in cfg.widths:
        total += d * w * in_mult + d  # input projection
        total += w * d + w  # output projection
    total += M * N * d  # positional embeddings
    total += M * d  # modality embeddings
    total += (tsd * d + d) + (d * d + d)  # timestep MLP
    per_block = (3 * d * d + 3 * d) + (d * d + d) + (8 * d * d + 5 * d) + (6 * d * d + 6 * d)
    total += L * per_block
    total += 2 * d * d + 2 * d  # final modulation
    return total


class TestInit:
    def test_same_seed_bit_identical(self, tiny_config):
        a = nm.init_denoiser(tiny_config, 42)
        b = nm.init_denoiser(tiny_config, 42)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self, tiny_config):
        a = nm.init_denoiser(tiny_config, 1)
        b = nm.init_denoiser(tiny_config, 2)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_zero_modulation_blocks_are_inert(self, tiny_config, rng):
        # With every modulation map at zero, the transformer blocks are
        # identity maps and the timestep pathway is dead: scrambling the
        # attention, feed-forward, and timestep-MLP weights cannot change the
        # output, which depends only on the projections and embeddings.
        a = nm.init_denoiser(tiny_config, 5)
        b = nm.init_denoiser(tiny_config, 5)
        with torch.no_grad():
            for name, p in b.named_parameters():
                if "blocks" in name and "modulation" not in name:
                    p.add_(torch.randn_like(p))
                if name.startswith("t_mlp"):
                    p.add_(torch.randn_like(p))
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4, (2,)), rng)
        tvec = rng.integers(0, tiny_config.T + 1, size=(2, 4))
        out_a = nm.denoise(a, z, tvec)
        out_b = nm.denoise(b, z, tvec)
        for x, y in zip(out_a.parts, out_b.parts):
            assert np.array_equal(x, y)

    def test_zero_modulation_timestep_has_no_effect_at_init(self, tiny_config, rng):
        # Same init, different timestep vectors: with zero modulation the
        # conditioning pathway is the only timestep route, so outputs match.
        module = nm.init_denoiser(tiny_config, 5)
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4, (2,)), rng)
        out_a = nm.denoise(module, z, np.full((2, 4), 1, dtype=np.int64))
        out_b = nm.denoise(module, z, np.full((2, 4), 50, dtype=np.int64))
        for x, y in zip(out_a.parts, out_b.parts):
            assert np.array_equal(x, y)

    def test_parameter_count_closed_form(self):
        cfg = nm.DenoiserConfig(
            widths=(4, 6), num_segments=8, model_dim=32, layers=2, heads=4,
            T=1000, timestep_embed_dim=64, self_conditioning=True,
        )
        module = nm.init_denoiser(cfg, 0)
        assert sum(p.numel() for p in module.parameters()) == expected_param_count(cfg)

    def test_parameter_count_without_self_conditioning(self):
        cfg = nm.DenoiserConfig(
            widths=(3,), num_segments=5, model_dim=16, layers=3, heads=2,
            T=10, timestep_embed_dim=20, self_conditioning=False,
        )
        module = nm.init_denoiser(cfg, 0)
        assert sum(p.numel() for p in module.parameters()) == expected_param_count(cfg)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            nm.DenoiserConfig(model_dim=30, heads=4)
        with pytest.raises(ValueError):
            nm.DenoiserConfig(layers=0)


class TestTimestepEmbedding:
    def test_constant_tvec_tokens_differ_only_by_position(self, tiny_module):
        tvec = nm.constant_timestep_vector(17, 2, 4).entries
        emb = embed_timestep_vector(tvec, tiny_module)  # (2, 4, d)
        pos = tiny_module.pos_emb.detach().numpy()
        # Subtracting each token's positional embedding leaves a per-modality
        # constant (timestep MLP output + modality embedding).
        rem = emb - pos
        for m in range(2):
            assert np.allclose(rem[m], rem[m][0], atol=1e-12)

    def test_clean_and_full_noise_embeddings_distinct(self, tiny_config, tiny_module):
        e0 = embed_timestep_vector(nm.constant_timestep_vector(0, 2, 4).entries, tiny_module)
        eT = embed_timestep_vector(
            nm.constant_timestep_vector(tiny_config.T, 2, 4).entries, tiny_module
        )
        a, b = e0.reshape(-1), eT.reshape(-1)
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos < 0.99

    def test_segment_permutation_equivariance(self, tiny_module, rng):
        tvec = rng.integers(0, 50, size=(2, 4))
        perm = rng.permutation(4)
        base = embed_timestep_vector(tvec, tiny_module)
        # Relabel segments in the timestep vector and permute the positional
        # table the same way; the embedding must permute along with them.
        with torch.no_grad():
            original = tiny_module.pos_emb.clone()
            tiny_module.pos_emb.copy_(original[:, perm, :])
            permuted = embed_timestep_vector(tvec[:, perm], tiny_module)
            tiny_module.pos_emb.copy_(original)
        assert np.allclose(base[:, perm, :], permuted, atol=1e-12)

    def test_batched_tvec_shape(self, tiny_module, rng):
        tvec = rng.integers(0, 50, size=(3, 2, 4))
        emb = embed_timestep_vector(tvec, tiny_module)
        assert emb.shape == (3, 2, 4, tiny_module.config.model_dim)


class TestDenoise:
    @pytest.mark.parametrize("widths,N,batch", [((3, 2), 4, ()), ((5,), 3, (2,)), ((2, 2, 4), 6, (3,))])
    def test_output_shape_matches_input(self, widths, N, batch, rng):
        cfg = nm.DenoiserConfig(widths=widths, num_segments=N, model_dim=16, layers=1, heads=2, T=20)
        module = nm.init_denoiser(cfg, 1)
        z = MultimodalLatent.standard_normal(LatentShape(widths, N, batch), rng)
        tvec = rng.integers(0, 21, size=(len(widths), N))
        out = nm.denoise(module, z, tvec)
        assert out.widths == z.widths
        assert out.batch_shape == z.batch_shape
        assert out.num_segments == N

    def test_single_token_timestep_changes_output(self, live_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4), rng)
        tvec = np.full((2, 4), 25, dtype=np.int64)
        base = nm.denoise(live_module, z, tvec)
        bumped = tvec.copy()
        bumped[1, 2] = 49
        out = nm.denoise(live_module, z, bumped)
        delta = max(float(np.abs(a - b).max()) for a, b in zip(base.parts, out.parts))
        assert delta > 0.0

    def test_zero_self_cond_equals_omitted(self, tiny_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4, (2,)), rng)
        zeros = MultimodalLatent(tuple(np.zeros_like(p) for p in z.parts))
        tvec = rng.integers(0, 51, size=(2, 4))
        a = nm.denoise(tiny_module, z, tvec)
        b = nm.denoise(tiny_module, z, tvec, self_cond=zeros)
        for x, y in zip(a.parts, b.parts):
            assert np.array_equal(x, y)

    def test_deterministic_forward(self, live_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4), rng)
        tvec = rng.integers(0, 51, size=(2, 4))
        a = nm.denoise(live_module, z, tvec)
        b = nm.denoise(live_module, z, tvec)
        for x, y in zip(a.parts, b.parts):
            assert np.array_equal(x, y)

    def test_cross_modal_information_flow(self, live_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4), rng)
        tvec = np.full((2, 4), 10, dtype=np.int64)
        base = nm.denoise(live_module, z, tvec)
        z_zeroed = MultimodalLatent((z.parts[0], np.zeros_like(z.parts[1])))
        out = nm.denoise(live_module, z_zeroed, tvec)
        assert np.abs(base.parts[0] - out.parts[0]).max() > 0.0

    def test_shape_mismatch_rejected(self, tiny_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 3), 4), rng)
        with pytest.raises(ValueError):
            nm.denoise(tiny_module, z, np.zeros((2, 4), dtype=np.int64))

    def test_timestep_out_of_range_rejected(self, tiny_module, rng):
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4), rng)
        with pytest.raises(ValueError):
            nm.denoise(tiny_module, z, np.full((2, 4), 51, dtype=np.int64))


class TestGradients:
    def test_analytic_gradients_match_finite_differences(self):
        # Modest modulation keeps the network's local curvature low enough
        # that the finite-difference probe at the fixed step is trustworthy.
        cfg = nm.DenoiserConfig(
            widths=(3, 2), num_segments=4, model_dim=16, layers=2, heads=2, T=50
        )
        module = randomize_modulation(nm.init_denoiser(cfg, 0), seed=100, std=0.01)
        rng = np.random.default_rng(0)
        z = [torch.as_tensor(rng.standard_normal((2, 4, w))) for w in (3, 2)]
        tvec = torch.as_tensor(rng.integers(0, 51, size=(2, 2, 4)))

        def loss_fn():
            out = module(z, tvec, None)
            return sum((o**2).sum() for o in out)

        loss = loss_fn()
        loss.backward()
        params = [p for p in module.parameters() if p.grad is not None]
        coords = []
        picker = np.random.default_rng(7)
        while len(coords) < 120:
            p = params[picker.integers(len(params))]
            coords.append((p, tuple(picker.integers(s) for s in p.shape)))
        h = 1e-4
        worst = 0.0
        for p, idx in coords:
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = float(loss_fn())
                p[idx] = orig - h
                down = float(loss_fn())
                p[idx] = orig
            fd = (up - down) / (2 * h)
            ana = float(p.grad[idx])
            rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-6)
            worst = max(worst, rel)
        assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"


class TestCheckpoint:
    def test_round_trip(self, tiny_config, tmp_path, rng):
        module = nm.init_denoiser(tiny_config, 14)
        ema = {n: p.detach().clone() * 0.5 for n, p in module.named_parameters()}
        path = tmp_path / "ckpt.nmx"
        save_checkpoint(path, module, ema, step=123)
        ckpt = load_checkpoint(path)
        assert ckpt.step == 123
        assert ckpt.config == tiny_config
        rebuilt = ckpt.build_module()
        z = MultimodalLatent.standard_normal(LatentShape((3, 2), 4), rng)
        tvec = rng.integers(0, 51, size=(2, 4))
        a = nm.denoise(module, z, tvec)
        b = nm.denoise(rebuilt, z, tvec)
        for x, y in zip(a.parts, b.parts):
            assert np.array_equal(x, y)
        ema_module = ckpt.build_module(use_ema=True)
        for name, p in ema_module.named_parameters():
            assert torch.equal(p, ema[name])

    def test_shape_validation_on_load(self, tiny_config, tmp_path):
        module = nm.init_denoiser(tiny_config, 14)
        path = tmp_path / "ckpt.nmx"
        save_checkpoint(path, module)
        ckpt = load_checkpoint(path)
        bad = dict(ckpt.params)
        bad["pos_emb"] = bad["pos_emb"][:, :2, :]
        broken = type(ckpt)(
            config=ckpt.config, params=bad, ema=None, step=0, extra_tensors={}, header=ckpt.header
        )
        with pytest.raises(ValueError, match="shape"):
            broken.build_module()

    def test_corrupted_file_rejected(self, tiny_config, tmp_path):
        module = nm.init_denoiser(tiny_config, 14)
        path = tmp_path / "ckpt.nmx"
        save_checkpoint(path, module)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="checksum"):
            load_checkpoint(path)
