import numpy as np
import pytest
import torch

from msmvc.config import ConvnetConfig, load_config
from msmvc.convnet import (ConformerEncoder, ConversionModel, Decoder,
                           parameter_count)
from msmvc.errors import InvalidInputError, LengthMismatchError

torch.manual_seed(0)

SMALL = ConvnetConfig(d_enc=32, heads=4, conv_kernel=7, prenet_dim=16,
                      decoder_rnn_dim=24, postnet_channels=16)


class TestEncoder:
    @pytest.fixture(scope="class")
    def encoder(self):
        return ConformerEncoder(in_dim=20, cfg=SMALL).eval()

    def test_length_preserving(self, encoder):
        for T in (17, 64, 200):
            out = encoder(torch.randn(1, T, 20))
            assert out.shape == (1, T, 32)

    def test_order_aware(self, encoder):
        x = torch.randn(1, 24, 20)
        perm = torch.randperm(24)
        out = encoder(x)
        out_shuffled = encoder(x[:, perm])
        # positional encoding makes a permuted input produce different frames
        assert not torch.allclose(out[:, perm], out_shuffled, atol=1e-5)

    def test_single_frame(self, encoder):
        assert encoder(torch.randn(1, 1, 20)).shape == (1, 1, 32)

    def test_width_mismatch_rejected(self, encoder):
        with pytest.raises(InvalidInputError):
            encoder(torch.randn(1, 10, 21))


class TestDecoder:
    @pytest.fixture(scope="class")
    def decoder(self):
        return Decoder(ctx_dim=12, cfg=SMALL)

    def test_output_shapes_both_modes(self, decoder):
        decoder.eval()
        ctx = torch.randn(2, 9, 12)
        teacher = torch.randn(2, 9, 80)
        pre, post = decoder(ctx, teacher)
        assert pre.shape == post.shape == (2, 9, 80)
        pre, post = decoder(ctx, None)
        assert pre.shape == post.shape == (2, 9, 80)

    def test_teacher_forced_deterministic_in_eval(self, decoder):
        decoder.eval()
        ctx = torch.randn(1, 7, 12)
        teacher = torch.randn(1, 7, 80)
        a = decoder(ctx, teacher)
        b = decoder(ctx, teacher)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_prenet_noise_only_in_training(self, decoder):
        ctx = torch.randn(1, 7, 12)
        decoder.train()
        torch.manual_seed(1)
        a = decoder(ctx, None)[0]
        torch.manual_seed(2)
        b = decoder(ctx, None)[0]
        assert not torch.equal(a, b)

    def test_teacher_length_mismatch(self, decoder):
        with pytest.raises(LengthMismatchError):
            decoder(torch.randn(1, 7, 12), torch.randn(1, 8, 80))

    def test_reconstruction_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        dec = Decoder(ctx_dim=6, cfg=ConvnetConfig(
            d_enc=8, prenet_dim=8, decoder_rnn_dim=10, postnet_channels=8,
            prenet_dropout=0.0)).double()
        dec.eval()
        ctx = torch.randn(1, 4, 6, dtype=torch.float64)
        target = torch.randn(1, 4, 80, dtype=torch.float64)

        def loss_value():
            pre, post = dec(ctx, target)
            return ((target - pre) ** 2).sum() + ((target - post) ** 2).sum()

        loss = loss_value()
        dec.zero_grad()
        loss.backward()
        weight = dec.proj.weight
        analytic = weight.grad[:3, :5].clone()
        eps = 1e-6
        fd = torch.zeros_like(analytic)
        for i in range(3):
            for j in range(5):
                with torch.no_grad():
                    weight[i, j] += eps
                    up = loss_value().item()
                    weight[i, j] -= 2 * eps
                    down = loss_value().item()
                    weight[i, j] += eps
                fd[i, j] = (up - down) / (2 * eps)
        rel = (analytic - fd).abs().max() / fd.abs().max()
        assert rel < 1e-4


def tiny_model(**overrides):
    cfg = load_config(overrides={
        "convnet": {"d_enc": 32, "heads": 4, "conv_kernel": 7,
                    "prenet_dim": 16, "decoder_rnn_dim": 24,
                    "postnet_channels": 16},
        "stylenet": {"local_filters": [4, 4, 8, 8, 8, 8],
                     "global_filters": [4, 4, 8, 8, 8, 8],
                     "ssl_embed_dim": 8, "d_e": 4, "d_spk": 8},
        **overrides})
    return ConversionModel(cfg, ["spkA", "spkB"], codebook_sizes=(16, 16))


class TestConversionModel:
    def test_end_to_end_length_preservation(self):
        model = tiny_model().eval()
        for T in (65, 130):
            bn = torch.randn(1, T, 256)
            ssl = torch.randint(0, 16, (1, T, 2))
            prosody = torch.rand(1, T, 3)
            with torch.no_grad():
                pre, post, styles = model(bn, ssl, prosody, torch.tensor([0]))
            assert pre.shape == post.shape == (1, T, 80)
            assert styles.global_vec.shape == (1, 4)

    def test_speaker_swap_changes_output(self):
        model = tiny_model().eval()
        T = 70
        bn = torch.randn(1, T, 256)
        ssl = torch.randint(0, 16, (1, T, 2))
        prosody = torch.rand(1, T, 3)
        with torch.no_grad():
            _, a, _ = model(bn, ssl, prosody, torch.tensor([0]))
            _, b, _ = model(bn, ssl, prosody, torch.tensor([1]))
        assert (a - b).abs().mean() > 0

    def test_unknown_speaker_lists_known(self):
        model = tiny_model()
        with pytest.raises(InvalidInputError, match="spkA"):
            model.speaker_index("nobody")

    def test_default_parameter_count_order(self):
        cfg = load_config()
        model = ConversionModel(cfg, [f"spk{i:02d}" for i in range(8)])
        count = parameter_count(model)
        # same order of magnitude as the reported 4.14 M at full scale
        assert 414_000 <= count <= 41_400_000
