import numpy as np
import pytest

from msmvc import container
from msmvc.config import ExtractorConfig
from msmvc.errors import (InvalidInputError, LengthMismatchError,
                          NotReadyError)
from msmvc.extractors import (BNFeature, ContentExtractor,
                              ExternalFeatureSource, FeatureBundle,
                              SSLIndices, SSLQuantizer, probe_richness)
from msmvc.signal import MelSpectrogram
from msmvc.synthcorpus import utt_id


class TestTypes:
    def test_bn_dimension_enforced(self):
        with pytest.raises(InvalidInputError):
            BNFeature(values=np.zeros((10, 128), dtype=np.float32))

    def test_ssl_range_enforced(self):
        with pytest.raises(InvalidInputError):
            SSLIndices(values=np.array([[0, 64]]), codebook_sizes=(64, 64))
        SSLIndices(values=np.array([[0, 63]]), codebook_sizes=(64, 64))

    def test_bundle_length_mismatch_names_stream(self):
        T = 6
        kw = dict(bn=np.zeros((T, 256)), ssl=np.zeros((T, 2), dtype=np.int64),
                  lf0=np.zeros(T), vuv=np.zeros(T), energy=np.zeros(T),
                  lf0_norm=np.zeros(T), energy_norm=np.zeros(T),
                  mel=np.zeros((T, 80)))
        FeatureBundle(**kw)
        kw["energy"] = np.zeros(T + 1)
        with pytest.raises(LengthMismatchError, match="energy"):
            FeatureBundle(**kw)


@pytest.fixture(scope="module")
def loaded(mini_ws, mini_cfg):
    from msmvc.pipeline import load_oracles
    return load_oracles(mini_ws, mini_cfg)


@pytest.fixture(scope="module")
def a_mel(mini_ws, mini_cfg):
    manifest = mini_ws.manifest()
    cache = mini_ws.cache(mini_cfg)
    tensors, _ = cache.load_signal(utt_id(manifest.rows[0]))
    return MelSpectrogram(values=tensors["mel"].astype(np.float64))


class TestContentExtractor:
    def test_not_ready_before_training(self):
        with pytest.raises(NotReadyError):
            ContentExtractor().extract(np.zeros((4, 80)))

    def test_frame_count_preserved(self, loaded, a_mel):
        bn = loaded["content"].extract(a_mel)
        assert bn.values.shape == (a_mel.num_frames, 256)

    def test_deterministic(self, loaded, a_mel):
        a = loaded["content"].extract(a_mel)
        b = loaded["content"].extract(a_mel)
        assert np.array_equal(a.values, b.values)

    def test_save_load_round_trip(self, loaded, a_mel, tmp_path):
        path = tmp_path / "content.extractor"
        loaded["content"].save(path)
        back = ContentExtractor.load(path)
        assert np.array_equal(back.extract(a_mel).values,
                              loaded["content"].extract(a_mel).values)


class TestSSLQuantizer:
    def test_not_ready_before_fit(self):
        with pytest.raises(NotReadyError):
            SSLQuantizer().extract(np.zeros((4, 80)))

    def test_indices_in_range(self, loaded, a_mel):
        idx = loaded["ssl"].extract(a_mel)
        assert idx.values.shape == (a_mel.num_frames, 2)
        assert idx.values.min() >= 0
        assert idx.values.max() < 64

    def test_silence_constant_index_per_group(self, loaded):
        silence = MelSpectrogram(values=np.full((50, 80), np.log(1e-5)))
        idx = loaded["ssl"].extract(silence).values
        assert len(np.unique(idx[:, 0])) == 1
        assert len(np.unique(idx[:, 1])) == 1

    def test_save_load_round_trip(self, loaded, a_mel, tmp_path):
        path = tmp_path / "ssl.extractor"
        loaded["ssl"].save(path)
        back = SSLQuantizer.load(path)
        assert np.array_equal(back.extract(a_mel).values,
                              loaded["ssl"].extract(a_mel).values)


class TestExternalSource:
    def test_swappable_bn_source(self, a_mel, tmp_path):
        values = np.random.default_rng(0).standard_normal(
            (a_mel.num_frames, 256)).astype(np.float32)
        container.save(tmp_path / "utt1.feat", {"values": values}, {})
        src = ExternalFeatureSource(tmp_path, kind="bn")
        bn = src.extract(a_mel, utt_id="utt1")
        assert np.array_equal(bn.values, values)

    def test_frame_mismatch_rejected(self, a_mel, tmp_path):
        values = np.zeros((a_mel.num_frames + 3, 256), dtype=np.float32)
        container.save(tmp_path / "utt2.feat", {"values": values}, {})
        src = ExternalFeatureSource(tmp_path, kind="bn")
        with pytest.raises(LengthMismatchError):
            src.extract(a_mel, utt_id="utt2")

    def test_missing_file_not_ready(self, a_mel, tmp_path):
        src = ExternalFeatureSource(tmp_path, kind="ssl")
        with pytest.raises(NotReadyError):
            src.extract(a_mel, utt_id="nope")

    def test_requires_utt_id(self, a_mel, tmp_path):
        src = ExternalFeatureSource(tmp_path, kind="bn")
        with pytest.raises(InvalidInputError):
            src.extract(a_mel)


class TestRichnessProbe:
    def test_report_fields(self, mini_ws, mini_cfg):
        from msmvc.pipeline import richness_reports
        reports = richness_reports(mini_ws, mini_cfg, kinds=("mel", "ssl"))
        for rep in reports.values():
            assert rep.mse_lf0 >= 0
            assert rep.mse_energy >= 0
            assert 0.0 <= rep.speaker_accuracy <= 1.0

    def test_rejects_single_speaker(self, mini_ws, mini_cfg):
        manifest = mini_ws.manifest()
        cache = mini_ws.cache(mini_cfg)
        stats = cache.mel_stats(manifest)
        rows = [r for r in manifest.rows if r["speaker"] == "spk00"]
        bundles = [cache.load_bundle(utt_id(r)) for r in rows]
        speakers = [r["speaker"] for r in rows]
        with pytest.raises(InvalidInputError):
            probe_richness("mel", bundles, bundles, speakers, speakers, stats)
