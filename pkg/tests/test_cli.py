import json

import numpy as np
import pytest

from msmvc import cli
from msmvc.signal import load_wav


def run_cli(*argv):
    return cli.main(list(argv))


class TestGenCorpus:
    def test_generates_manifest_and_result_file(self, tmp_path):
        wd = tmp_path / "run"
        code = run_cli("gen-corpus", "--workdir", str(wd), "--speakers", "2",
                       "--utts", "4", "--seed", "3")
        assert code == 0
        assert (wd / "corpus" / "manifest.jsonl").exists()
        assert (wd / "reports" / "gen_corpus.json").exists()

    def test_same_seed_identical_manifest(self, tmp_path):
        for name in ("a", "b"):
            run_cli("gen-corpus", "--workdir", str(tmp_path / name),
                    "--speakers", "2", "--utts", "3", "--seed", "5")
        a = (tmp_path / "a" / "corpus" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "corpus" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_single_speaker_is_invalid_input(self, tmp_path):
        code = run_cli("gen-corpus", "--workdir", str(tmp_path), "--speakers",
                       "1", "--utts", "4")
        assert code == cli.EXIT_INVALID_INPUT

    def test_out_dir_respected(self, tmp_path):
        corpus = tmp_path / "elsewhere"
        code = run_cli("gen-corpus", "--workdir", str(tmp_path / "wd"),
                       "--speakers", "2", "--utts", "3", "--seed", "1",
                       "--out", str(corpus))
        assert code == 0
        assert (corpus / "manifest.jsonl").exists()


class TestConfigHandling:
    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_section": {}}))
        code = run_cli("gen-corpus", "--workdir", str(tmp_path), "--config",
                       str(cfg), "--speakers", "2", "--utts", "3")
        assert code == cli.EXIT_INVALID_INPUT

    def test_bad_type_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"signal": {"n_mels": "eighty"}}))
        code = run_cli("gen-corpus", "--workdir", str(tmp_path), "--config",
                       str(cfg), "--speakers", "2", "--utts", "3")
        assert code == cli.EXIT_INVALID_INPUT

    def test_config_hash_printed(self, tmp_path, capsys):
        run_cli("gen-corpus", "--workdir", str(tmp_path), "--speakers", "2",
                "--utts", "3")
        assert "config hash:" in capsys.readouterr().out


class TestNotReadyPaths:
    def test_evaluate_without_model_exits_3(self, mini_ws, tmp_path, capsys):
        code = run_cli("evaluate", "--workdir", str(tmp_path))
        assert code == cli.EXIT_NOT_READY

    def test_train_without_oracles_exits_3(self, tmp_path):
        run_cli("gen-corpus", "--workdir", str(tmp_path), "--speakers", "2",
                "--utts", "3", "--seed", "2")
        code = run_cli("train", "--workdir", str(tmp_path))
        assert code == cli.EXIT_NOT_READY


def mini_cli_config(tmp_path):
    from tests.conftest import MINI_OVERRIDES
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(MINI_OVERRIDES))
    return str(path)


class TestConvertCommand:
    def test_convert_emits_mel_and_audio(self, mini_trained, mini_cfg,
                                         tmp_path):
        ws, _ = mini_trained
        manifest = ws.manifest()
        row = next(r for r in manifest.split("test")
                   if r["speaker"] != "spk00")
        wav = manifest.wav_path(row)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {k: v for k, v in mini_cfg.to_dict().items()}))
        out = tmp_path / "converted"
        code = run_cli("convert", "--workdir", str(ws.root), "--config",
                       str(cfg_path), "--in", str(wav), "--target", "spk00",
                       "--out", str(out), "--emit-audio")
        assert code == 0
        from msmvc import container
        tensors, meta = container.load(out.with_suffix(".mel"))
        source = load_wav(wav)
        expected_frames = int(np.ceil(len(source.samples) / 200))
        assert tensors["mel"].shape == (expected_frames, 80)
        out_wav = load_wav(out.with_suffix(".wav"))
        assert len(out_wav.samples) == expected_frames * 200

    def test_unknown_target_is_invalid_input(self, mini_trained, mini_cfg,
                                             tmp_path):
        ws, _ = mini_trained
        manifest = ws.manifest()
        wav = manifest.wav_path(manifest.rows[0])
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_cfg.to_dict()))
        code = run_cli("convert", "--workdir", str(ws.root), "--config",
                       str(cfg_path), "--in", str(wav), "--target", "spk99")
        assert code == cli.EXIT_INVALID_INPUT


class TestCacheDirOverride:
    def test_env_var_moves_feature_cache(self, tmp_path, monkeypatch):
        from msmvc.features import CACHE_ENV_VAR
        override = tmp_path / "elsewhere_cache"
        monkeypatch.setenv(CACHE_ENV_VAR, str(override))
        code = run_cli("gen-corpus", "--workdir", str(tmp_path / "wd"),
                       "--speakers", "2", "--utts", "3", "--seed", "4")
        assert code == 0
        assert any(override.glob("*.feat"))
        assert not (tmp_path / "wd" / "cache").exists()


class TestProbeAndAblate:
    def test_probe_writes_reports(self, mini_ws, mini_cfg, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_cfg.to_dict()))
        code = run_cli("probe", "--workdir", str(mini_ws.root), "--config",
                       str(cfg_path), "--features", "mel,ssl")
        assert code == 0
        payload = json.loads(
            (mini_ws.report_dir / "probe.json").read_text())
        assert set(payload["reports"]) == {"mel", "ssl"}

    def test_ablate_reports_seven_rows(self, mini_trained, mini_cfg, tmp_path,
                                       capsys):
        ws, _ = mini_trained
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(mini_cfg.to_dict()))
        code = run_cli("ablate", "--workdir", str(ws.root), "--config",
                       str(cfg_path))
        assert code == 0
        out = capsys.readouterr().out
        table_lines = [l for l in out.splitlines()
                       if l.strip() and not l.startswith("config hash")]
        assert len(table_lines) == 8  # header + full + six ablations
        assert "absent" in out
        payload = json.loads((ws.report_dir / "ablation.json").read_text())
        assert len(payload) == 7
