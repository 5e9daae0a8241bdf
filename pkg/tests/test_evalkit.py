import math

import numpy as np
import pytest

from msmvc.errors import (InvalidInputError, NotReadyError,
                          UndefinedCorrelationError)
from msmvc.evalkit import (EvalReport, evaluate_conversion, format_table,
                           mel_energy, pearson, run_ablation,
                           speaker_centroid, speaker_similarity, write_report)
from msmvc.pipeline import load_oracles
from msmvc.signal import FrameParams, MelSpectrogram
from msmvc.synthcorpus import utt_id


def brute_force_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return cov / (sx * sy)


class TestPearson:
    def test_self_correlation_is_one(self):
        x = np.array([0.3, 1.2, -0.5, 2.2])
        assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(2, 60))
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            assert abs(pearson(x, y) - brute_force_pearson(x, y)) < 1e-12

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(30)
        y = rng.standard_normal(30)
        assert pearson(x, y) == pytest.approx(pearson(y, x), abs=1e-14)
        assert pearson(2.5 * x + 1, y) == pytest.approx(pearson(x, y), abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            r = pearson(rng.standard_normal(10), rng.standard_normal(10))
            assert -1.0 <= r <= 1.0

    def test_errors(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        with pytest.raises(UndefinedCorrelationError):
            pearson([1.0, 1.0], [0.0, 1.0])
        with pytest.raises(InvalidInputError):
            pearson([1.0], [1.0])
        with pytest.raises(InvalidInputError):
            pearson([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(InvalidInputError):
            pearson([1.0, np.nan], [0.0, 1.0])


class TestMelEnergy:
    def test_monotone_in_level(self):
        quiet = np.full((4, 80), -4.0)
        loud = np.full((4, 80), -1.0)
        assert mel_energy(loud).mean() > mel_energy(quiet).mean()


@pytest.fixture(scope="module")
def probe_and_stats(mini_ws, mini_cfg):
    oracles = load_oracles(mini_ws, mini_cfg)
    cache = mini_ws.cache(mini_cfg)
    stats = cache.mel_stats(mini_ws.manifest())
    return oracles["probe"], stats


class TestSpeakerSimilarity:
    def test_self_similarity_is_one(self, mini_ws, mini_cfg, probe_and_stats):
        probe, stats = probe_and_stats
        cache = mini_ws.cache(mini_cfg)
        mel = cache.load_signal(utt_id(mini_ws.manifest().rows[0]))[0]["mel"]
        m = MelSpectrogram(values=mel.astype(np.float64))
        assert speaker_similarity(m, m, probe, stats) == pytest.approx(1.0)

    def test_same_speaker_beats_cross_speaker(self, mini_ws, mini_cfg,
                                              probe_and_stats):
        probe, stats = probe_and_stats
        cache = mini_ws.cache(mini_cfg)
        manifest = mini_ws.manifest()
        by_spk = {}
        for row in manifest.rows:
            mel = cache.load_signal(utt_id(row))[0]["mel"].astype(np.float64)
            by_spk.setdefault(row["speaker"], []).append(
                MelSpectrogram(values=mel))
        speakers = sorted(by_spk)
        same, cross = [], []
        for s in speakers:
            same.append(speaker_similarity(by_spk[s][0], by_spk[s][1],
                                           probe, stats))
        for a, b in zip(speakers, speakers[1:]):
            cross.append(speaker_similarity(by_spk[a][0], by_spk[b][0],
                                            probe, stats))
        assert np.mean(same) > np.mean(cross)

    def test_untrained_probe_not_ready(self, probe_and_stats):
        from msmvc.constraints import CrnnClassifier
        _, stats = probe_and_stats
        m = MelSpectrogram(values=np.zeros((30, 80)))
        with pytest.raises(NotReadyError):
            speaker_similarity(m, m, CrnnClassifier(4), stats)

    def test_bounded(self, mini_ws, mini_cfg, probe_and_stats):
        probe, stats = probe_and_stats
        cache = mini_ws.cache(mini_cfg)
        rows = mini_ws.manifest().rows[:6]
        mels = [MelSpectrogram(values=cache.load_signal(
            utt_id(r))[0]["mel"].astype(np.float64)) for r in rows]
        for a in mels:
            for b in mels:
                assert -1.0 <= speaker_similarity(a, b, probe, stats) <= 1.0


class TestEvaluateConversion:
    def test_report_fields_and_exclusion(self, mini_trained, mini_cfg,
                                         probe_and_stats):
        ws, results = mini_trained
        probe, stats = probe_and_stats
        from msmvc.trainkit import load_checkpoint
        model, mcfg, _, tensors = load_checkpoint(
            results["finetune"].checkpoint)
        model.eval()
        manifest = ws.manifest()
        cache = ws.cache(mini_cfg)
        target = manifest.speakers()[0]
        rep = evaluate_conversion(model, cache, manifest.split("test"), target,
                                  probe, stats,
                                  FrameParams.from_config(mcfg.signal),
                                  gl_iters=6,
                                  centroid_rows=manifest.split("train"))
        n_other = sum(1 for r in manifest.split("test")
                      if r["speaker"] != target)
        assert rep.n_utterances == n_other
        assert rep.speaker_cosine is not None
        assert -1.0 <= rep.speaker_cosine <= 1.0
        assert 0.0 <= rep.speaker_probe_accuracy <= 1.0
        if rep.pearson_lf0 is not None:
            assert -1.0 <= rep.pearson_lf0 <= 1.0

    def test_empty_manifest_rejected(self, mini_trained, mini_cfg,
                                     probe_and_stats):
        ws, results = mini_trained
        probe, stats = probe_and_stats
        from msmvc.trainkit import load_checkpoint
        model, mcfg, _, _ = load_checkpoint(results["finetune"].checkpoint)
        with pytest.raises(InvalidInputError):
            evaluate_conversion(model, ws.cache(mini_cfg), [], "spk00", probe,
                                stats, FrameParams.from_config(mcfg.signal))


class TestReportsAndAblation:
    def test_write_report_json_and_csv(self, tmp_path):
        rep = EvalReport(pearson_lf0=0.8, pearson_energy=0.9,
                         speaker_cosine=0.7, speaker_probe_accuracy=1.0,
                         n_utterances=3,
                         per_utterance=[{"utt_id": "u1", "pearson_lf0": 0.8,
                                         "pearson_energy": 0.9, "cosine": 0.7}])
        write_report(rep, tmp_path / "r.json", tmp_path / "r.csv")
        assert (tmp_path / "r.json").exists()
        assert "utt_id" in (tmp_path / "r.csv").read_text()

    def test_format_table_marks_absent(self):
        table = format_table({"full": EvalReport(n_utterances=2),
                              "no_frame": None})
        assert "absent" in table
        assert "full" in table

    def test_run_ablation_tolerates_missing_checkpoints(
            self, mini_trained, mini_cfg, probe_and_stats, tmp_path):
        ws, results = mini_trained
        probe, stats = probe_and_stats
        manifest = ws.manifest()
        checkpoints = {"full": results["finetune"].checkpoint,
                       "no_frame": tmp_path / "missing.ckpt"}
        out = run_ablation(checkpoints, ws.cache(mini_cfg),
                           manifest.split("test"), manifest.speakers()[0],
                           probe, stats,
                           FrameParams.from_config(mini_cfg.signal),
                           gl_iters=4, out_json=tmp_path / "ab.json")
        assert out["full"] is not None
        assert out["no_frame"] is None
        assert len(out) == 7
        assert (tmp_path / "ab.json").exists()

    def test_identical_inputs_identical_rows(self, mini_trained, mini_cfg,
                                             probe_and_stats, tmp_path):
        ws, results = mini_trained
        probe, stats = probe_and_stats
        manifest = ws.manifest()
        checkpoints = {"full": results["finetune"].checkpoint}
        kwargs = dict(cache=ws.cache(mini_cfg), test_rows=manifest.split("test"),
                      target_speaker=manifest.speakers()[0], probe=probe,
                      mel_stats=stats,
                      params=FrameParams.from_config(mini_cfg.signal),
                      gl_iters=4)
        a = run_ablation(checkpoints, **kwargs)
        b = run_ablation(checkpoints, **kwargs)
        assert a["full"].to_dict() == b["full"].to_dict()
