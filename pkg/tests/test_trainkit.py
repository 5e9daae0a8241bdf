import json

import numpy as np
import pytest
import torch

from msmvc.errors import InvalidInputError, NumericalError
from msmvc.pipeline import _training_oracles, load_oracles
from msmvc.trainkit import (Oracles, TrainingData, TrainingExample,
                            finetune_alternating, load_checkpoint,
                            parameter_fingerprints, sample_simulation_batch,
                            train_reconstruction)


@pytest.fixture(scope="module")
def data(mini_ws, mini_cfg):
    return TrainingData.from_cache(mini_ws.manifest(), mini_ws.cache(mini_cfg))


@pytest.fixture(scope="module")
def oracles(mini_ws, mini_cfg):
    return _training_oracles(mini_cfg, load_oracles(mini_ws, mini_cfg))


class TestTrainingExample:
    def test_content_equals_style(self):
        TrainingExample(content_utt="u1", style_utt="u1", speaker="s", alpha=0)
        with pytest.raises(InvalidInputError):
            TrainingExample(content_utt="u1", style_utt="u2", speaker="s",
                            alpha=0)

    def test_alpha_domain(self):
        with pytest.raises(InvalidInputError):
            TrainingExample(content_utt="u", style_utt="u", speaker="s",
                            alpha=2)


class TestSimulationSampling:
    def test_never_assigns_source_speaker(self, data):
        rng = np.random.default_rng(0)
        examples, picks = sample_simulation_batch(data.records, rng, 64,
                                                  speakers=data.speakers)
        by_uid = {r.uid: r.speaker for r in data.records}
        for ex in examples:
            assert ex.alpha == 0
            assert ex.speaker != by_uid[ex.content_utt]

    def test_assignment_uniform_within_3_sigma(self, data):
        rng = np.random.default_rng(1)
        n = 10_000
        examples, _ = sample_simulation_batch(data.records, rng, n,
                                              speakers=data.speakers)
        K = len(data.speakers)
        counts = {s: 0 for s in data.speakers}
        for ex in examples:
            counts[ex.speaker] += 1
        p = 1.0 / (K - 1)
        # each source excludes itself; with uniform sources the target
        # marginal is uniform over all speakers
        expected = n / K
        sigma = np.sqrt(n * (1 / K) * (1 - 1 / K))
        for s, c in counts.items():
            assert abs(c - expected) <= 3 * sigma

    def test_single_speaker_corpus_rejected(self, data):
        only = [r for r in data.records if r.speaker == data.speakers[0]]
        with pytest.raises(InvalidInputError):
            sample_simulation_batch(only, np.random.default_rng(0), 4)


class TestReconstructionTraining:
    def test_runs_and_logs(self, mini_ws, mini_cfg, data, oracles, tmp_path):
        res = train_reconstruction(mini_cfg, data, oracles, tmp_path,
                                   tag="t1", stop_on_convergence=False)
        assert res.checkpoint.exists()
        rows = [json.loads(l) for l in open(res.log)]
        assert len(rows) == mini_cfg.trainkit.recon.epochs
        for key in ("epoch", "mode_mix", "L_recons", "L_style_low",
                    "L_style_mid", "L_style_high", "L_speaker", "lr"):
            assert key in rows[0]

    def test_same_seed_identical_epoch0_loss(self, mini_cfg, data, oracles,
                                             tmp_path):
        import copy
        cfg = copy.deepcopy(mini_cfg)
        cfg.trainkit.recon.epochs = 1
        a = train_reconstruction(cfg, data, oracles, tmp_path / "a", tag="a",
                                 stop_on_convergence=False)
        b = train_reconstruction(cfg, data, oracles, tmp_path / "b", tag="b",
                                 stop_on_convergence=False)
        assert a.epoch_losses[0] == b.epoch_losses[0]

    def test_nonfinite_loss_aborts_with_dump(self, mini_cfg, data, oracles,
                                             tmp_path):
        import copy
        cfg = copy.deepcopy(mini_cfg)
        cfg.trainkit.recon.epochs = 1
        poisoned = TrainingData(records=list(data.records),
                                speakers=data.speakers,
                                mel_mean=data.mel_mean, mel_std=data.mel_std)
        bad = poisoned.records[0]
        poisoned.records[0] = type(bad)(
            uid=bad.uid, speaker=bad.speaker,
            bn=torch.full_like(bad.bn, float("nan")), ssl=bad.ssl,
            prosody=bad.prosody, mel_norm=bad.mel_norm)
        with pytest.raises(NumericalError):
            train_reconstruction(cfg, poisoned, oracles, tmp_path, tag="bad",
                                 stop_on_convergence=False)
        assert (tmp_path / "diagnostic_dump.json").exists()


class TestCheckpointing:
    @pytest.fixture(scope="class")
    def trained(self, mini_cfg, data, oracles, tmp_path_factory):
        out = tmp_path_factory.mktemp("ckpt")
        res = train_reconstruction(mini_cfg, data, oracles, out, tag="base",
                                   stop_on_convergence=False)
        return out, res

    def test_save_load_save_byte_identical(self, trained):
        out, res = trained
        from msmvc import container
        tensors, meta = container.load(res.checkpoint)
        again = out / "again.ckpt"
        container.save(again, tensors, meta)
        assert res.checkpoint.read_bytes() == again.read_bytes()

    def test_resume_equivalence(self, mini_cfg, data, oracles, tmp_path):
        import copy
        cfg3 = copy.deepcopy(mini_cfg)
        cfg3.trainkit.recon.epochs = 3
        full = train_reconstruction(cfg3, data, oracles, tmp_path / "full",
                                    tag="m", stop_on_convergence=False)

        cfg2 = copy.deepcopy(mini_cfg)
        cfg2.trainkit.recon.epochs = 1
        part = train_reconstruction(cfg2, data, oracles, tmp_path / "part",
                                    tag="m", stop_on_convergence=False)
        cfg2.trainkit.recon.epochs = 3
        resumed = train_reconstruction(cfg2, data, oracles, tmp_path / "part",
                                       tag="m", resume_from=part.checkpoint,
                                       stop_on_convergence=False)
        assert resumed.epoch_losses[-1] == full.epoch_losses[-1]
        assert resumed.epoch_losses[-2] == full.epoch_losses[-2]

    def test_corrupted_checkpoint_rejected(self, trained):
        from msmvc.errors import IntegrityError
        out, res = trained
        blob = bytearray(res.checkpoint.read_bytes())
        blob[-10] ^= 0x55
        bad = out / "corrupt.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(bad)


class TestFinetune:
    @pytest.fixture(scope="class")
    def staged(self, mini_cfg, data, oracles, tmp_path_factory):
        out = tmp_path_factory.mktemp("ft")
        recon = train_reconstruction(mini_cfg, data, oracles, out, tag="v",
                                     stop_on_convergence=False)
        model_before, _, _, _ = load_checkpoint(recon.checkpoint)
        ft = finetune_alternating(mini_cfg, data, oracles, recon.checkpoint,
                                  out, tag="v")
        model_after, _, _, _ = load_checkpoint(ft.checkpoint)
        return model_before, model_after, ft

    def test_decoder_only_scope(self, staged):
        before, after, _ = staged
        fp_before = parameter_fingerprints(before)
        fp_after = parameter_fingerprints(after)
        for name in fp_before:
            if name.startswith("decoder."):
                assert fp_before[name] != fp_after[name], name
            else:
                assert fp_before[name] == fp_after[name], name

    def test_probe_metrics_recorded(self, staged):
        _, _, ft = staged
        assert "recon_loss" in ft.probe["start"]
        assert "sim_speaker_loss" in ft.probe["start"]
        assert "recon_loss" in ft.probe["end"]

    def test_log_declares_mode_mix(self, staged):
        _, _, ft = staged
        rows = [json.loads(l) for l in open(ft.log)]
        assert all(r["mode_mix"] == "1:1" for r in rows)

    def test_finetune_requires_recon_checkpoint(self, mini_cfg, data, oracles,
                                                staged, tmp_path):
        from msmvc.errors import NotReadyError
        _, _, ft = staged
        with pytest.raises(NotReadyError):
            finetune_alternating(mini_cfg, data, oracles, ft.checkpoint,
                                 tmp_path, tag="x")
