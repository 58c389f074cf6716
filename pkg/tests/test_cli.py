import csv
from pathlib import Path

import numpy as np
import pytest

from sicrn.cli import main
from sicrn.config import documented_defaults, load_run_config, parse_assignments
from sicrn.dsp_io import AudioClip, wav_read, wav_write
from sicrn.errors import ArgumentError
from sicrn.training import si_snr

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = str(CONFIGS / "smoke.txt")


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", SMOKE, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("init") / "id.ckpt"
    assert main(["init", "--config", SMOKE, "--set", "mask_init=identity", "--out", str(path)]) == 0
    return path


class TestConfigFile:
    def test_every_shipped_config_loads(self):
        for path in CONFIGS.glob("*.txt"):
            load_run_config(path)

    def test_defaults_cover_model_and_training(self):
        keys = documented_defaults()
        for k in ("freq_bins", "sic_widths", "lr", "batch_size", "win_length", "seed", "data_dir"):
            assert k in keys

    def test_comments_and_blanks(self):
        raw = parse_assignments(["# header", "", "lr = 1e-3  # tuned", "sic_widths=4,8"])
        assert raw == {"lr": "1e-3", "sic_widths": "4,8"}

    def test_freq_bins_follow_window(self):
        rc = load_run_config(None, {"win_length": "126", "hop": "40"})
        assert rc.model.freq_bins == 64

    def test_freq_bins_mismatch(self):
        with pytest.raises(ArgumentError):
            load_run_config(None, {"win_length": "126", "freq_bins": "65"})

    def test_unknown_key(self):
        with pytest.raises(ArgumentError, match="unknown config key 'colour'"):
            load_run_config(None, {"colour": "blue"})

    def test_bad_value(self):
        with pytest.raises(ArgumentError):
            load_run_config(None, {"epochs": "many"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "none.txt")


class TestTrain:
    def test_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"metrics.csv", "best.ckpt", "last.ckpt", "config.txt"}
        rows = read_rows(trained / "metrics.csv")
        assert rows[0][:6] == ["epoch", "step", "train_loss", "val_loss", "val_sisdr", "lr"]
        assert len(rows) == 3

    def test_deterministic(self, trained, tmp_path):
        assert main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 0
        # the wall-clock column is excluded
        a = [r[:-1] for r in read_rows(trained / "metrics.csv")]
        b = [r[:-1] for r in read_rows(tmp_path / "metrics.csv")]
        assert a == b

    def test_seed_changes_run(self, trained, tmp_path):
        assert main(["train", "--config", SMOKE, "--seed", "9", "--out", str(tmp_path)]) == 0
        assert read_rows(trained / "metrics.csv")[1][2] != read_rows(tmp_path / "metrics.csv")[1][2]

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        assert main(["train", "--config", SMOKE, "--set", "colour=blue", "--out", str(tmp_path)]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "no.txt"), "--out", str(tmp_path)]) == 2

    def test_data_dir(self, tmp_path):
        rng = np.random.default_rng(0)
        for sub in ("clean", "noise"):
            (tmp_path / "d" / sub).mkdir(parents=True)
            for i in range(2):
                wav_write(tmp_path / "d" / sub / f"{i}.wav", AudioClip(0.3 * rng.uniform(-1, 1, 1600)))
        code = main(["train", "--config", SMOKE, "--set", "epochs=1", "--data-dir", str(tmp_path / "d"),
                     "--out", str(tmp_path / "run")])
        assert code == 0

    def test_argparse_errors(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2


class TestEnhance:
    def test_identity_checkpoint_reproduces_input(self, identity_ckpt, tmp_path, capsys):
        x = 0.3 * np.sin(np.arange(4005) * 0.05) + 0.05 * np.random.default_rng(1).standard_normal(4005)
        wav_write(tmp_path / "in.wav", AudioClip(x))
        code = main(["enhance", "--ckpt", str(identity_ckpt), "--in", str(tmp_path / "in.wav"),
                     "--out", str(tmp_path / "out.wav"), "--ref", str(tmp_path / "in.wav")])
        assert code == 0
        y = wav_read(tmp_path / "out.wav").samples
        x16 = wav_read(tmp_path / "in.wav").samples
        assert len(y) == 4000  # whole hops covered by the 30/10 STFT
        assert si_snr(y[30:-30], x16[30:len(y) - 30]) >= 60
        assert "SI-SDR" in capsys.readouterr().out

    def test_bad_wav(self, identity_ckpt, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFF")
        code = main(["enhance", "--ckpt", str(identity_ckpt), "--in", str(tmp_path / "bad.wav"),
                     "--out", str(tmp_path / "o.wav")])
        assert code == 2

    def test_missing_checkpoint(self, tmp_path):
        code = main(["enhance", "--ckpt", str(tmp_path / "none.ckpt"), "--in", "x.wav", "--out", "y.wav"])
        assert code == 2


class TestEval:
    def test_report(self, trained, tmp_path):
        report = tmp_path / "r.csv"
        code = main(["eval", "--ckpt", str(trained / "best.ckpt"), "--synthetic", "20", "--seconds", "0.1",
                     "--report", str(report)])
        assert code == 0
        rows = read_rows(report)
        assert rows[0] == ["clip", "snr_db", "reverberant", "noisy_sisdr", "enhanced_sisdr"]
        assert len(rows) == 22 and rows[-1][0] == "mean"
        noisy = np.array([float(r[3]) for r in rows[1:-1]])
        assert float(rows[-1][3]) == pytest.approx(noisy.mean())

    def test_empty_set(self, trained):
        assert main(["eval", "--ckpt", str(trained / "best.ckpt"), "--synthetic", "0"]) == 2


class TestKernel:
    @pytest.mark.parametrize("axis,shape", [("time", (20, 1)), ("freq", (16, 1)), ("2d", (20, 16))])
    def test_dimensions(self, axis, shape, tmp_path):
        out = tmp_path / "k.csv"
        assert main(["kernel", "--config", SMOKE, "--axis", axis, "--length", "20", "--out", str(out)]) == 0
        assert np.loadtxt(out, delimiter=",", ndmin=2).shape == shape

    def test_reverse_from_checkpoint(self, trained, tmp_path):
        out = tmp_path / "k.csv"
        code = main(["kernel", "--ckpt", str(trained / "last.ckpt"), "--axis", "freq", "--direction", "reverse",
                     "--out", str(out)])
        assert code == 0

    def test_unknown_layer(self, tmp_path):
        code = main(["kernel", "--config", SMOKE, "--axis", "time", "--layer", "nope", "--out", str(tmp_path / "k")])
        assert code == 2


class TestInfoAndGradcheck:
    def test_info(self, capsys):
        assert main(["info", "--config", SMOKE]) == 0
        out = capsys.readouterr().out
        assert "parameters" in out and "MACs" in out and "2.16" in out

    def test_info_from_checkpoint(self, trained, capsys):
        assert main(["info", "--ckpt", str(trained / "best.ckpt")]) == 0

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--samples", "1"]) == 0
        out = capsys.readouterr().out
        assert "end-to-end" in out

    def test_gradcheck_failure_exit_code(self):
        assert main(["gradcheck", "--samples", "1", "--tol", "1e-30", "--tol-e2e", "1e-30"]) == 3
