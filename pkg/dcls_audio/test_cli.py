import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from scipy.io import wavfile

from dcls_audio.checkpoint import load_checkpoint, save_checkpoint
from dcls_audio.cli import build_parser, main
from dcls_audio.container import read_container
from dcls_audio.gradcheck import GradcheckResult
from dcls_audio.model import DclsConv2d, ModelSpec, build_model
from dcls_audio.train import TrainConfig


@pytest.fixture
def temp_dir():
    """Create a temporary working directory."""
    path = tempfile.mkdtemp()
    yield Path(path)
    shutil.rmtree(path, ignore_errors=True)


@pytest.fixture
def toy_checkpoint(temp_dir):
    path = temp_dir / "toy.ckpt"
    save_checkpoint(build_model(ModelSpec.toy(), np.random.default_rng(0)), path)
    return path


class TestParser:
    """Test cases for the argument parser."""

    def test_every_train_setting_has_a_flag(self):
        """Test that TrainConfig fields and train flags stay in sync."""
        parser = build_parser()
        for name in asdict(TrainConfig()):
            if name in ("seed", "threads"):
                continue
            args = parser.parse_args(["train", f"--{name.replace('_', '-')}", "1"])
            assert getattr(args, name) == "1"

    def test_global_flags_after_command(self):
        """Test --seed, --threads and --config on a subcommand."""
        args = build_parser().parse_args(["gradcheck", "--seed", "4", "--threads", "2", "--config", "x.cfg"])
        assert (args.seed, args.threads, args.config) == (4, 2, "x.cfg")

    def test_unknown_flag_rejected(self):
        """Test that argparse refuses unknown flags."""
        with pytest.raises(SystemExit) as excinfo:
            main(["paramcount", "--no-such-flag"])
        assert excinfo.value.code == 2

    def test_help_exits_zero(self, capsys):
        """Test that --help lists the commands."""
        with pytest.raises(SystemExit) as excinfo:
            main(["--help"])
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        for command in ("spectrogram", "gen-data", "train", "eval", "surgery", "gradcheck", "paramcount", "bench"):
            assert command in out

    @pytest.mark.parametrize("command, flags", [
        ("spectrogram", ["--in", "--out", "--resample", "--clip-seconds"]),
        ("gen-data", ["--out-dir", "--clips", "--classes", "--duration", "--sample-rate"]),
        ("train", ["--manifest", "--labels", "--out-dir", "--eval-manifest", "--spec", "--preset",
                   "--conv-method", "--dcls-size", "--dcls-count", "--dcls-version", "--epochs", "--optimizer"]),
        ("eval", ["--checkpoint", "--manifest", "--labels", "--report", "--batch-size"]),
        ("surgery", ["--in", "--out", "--size", "--count", "--version"]),
        ("gradcheck", ["--suite", "--seeds"]),
        ("paramcount", ["--preset", "--spec", "--checkpoint", "--dcls"]),
        ("bench", ["--baseline", "--dcls", "--batch-size", "--warmup", "--iters", "--frames"]),
    ])
    def test_command_help_lists_flags(self, command, flags, capsys):
        """Test that each command's --help documents its own and the global flags."""
        with pytest.raises(SystemExit) as excinfo:
            main([command, "--help"])
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        for flag in flags + ["--seed", "--threads", "--config", "--log-level"]:
            assert flag in out, flag


class TestCommands:
    """Test cases for the subcommands."""

    def test_spectrogram(self, temp_dir, capsys):
        """Test WAV -> container export with the printed shape."""
        wav = temp_dir / "tone.wav"
        t = np.arange(32000) / 32000
        wavfile.write(wav, 32000, (0.3 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
        out = temp_dir / "tone.spec"
        assert main(["spectrogram", "--in", str(wav), "--out", str(out), "--clip-seconds", "1"]) == 0
        assert capsys.readouterr().out.strip() == "1x128x101"
        container = read_container(out)
        assert container.metadata["kind"] == "spectrogram"
        assert container.arrays["spectrogram"].shape == (1, 128, 101)

    def test_spectrogram_rate_mismatch(self, temp_dir, capsys):
        """Test the one-line error and exit code 2 for a 44.1 kHz file."""
        wav = temp_dir / "cd.wav"
        wavfile.write(wav, 44100, np.zeros(44100, dtype=np.int16))
        code = main(["spectrogram", "--in", str(wav), "--out", str(temp_dir / "x.spec")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code == 2
        assert err[-1].startswith("error: AudioError: sample-rate mismatch")

    def test_missing_required_setting(self, capsys):
        """Test that a missing --in is reported as a config error."""
        assert main(["spectrogram", "--out", "x.spec"]) == 2
        assert "error: ConfigError: missing required setting(s): --in" in capsys.readouterr().err

    def test_surgery_even_size(self, toy_checkpoint, temp_dir, capsys):
        """Test that --size 22 fails with exit code 2."""
        code = main(["surgery", "--in", str(toy_checkpoint), "--out", str(temp_dir / "o.ckpt"), "--size", "22"])
        assert code == 2
        assert "dilated kernel size must be odd" in capsys.readouterr().err

    def test_surgery(self, toy_checkpoint, temp_dir, capsys):
        """Test the replacement report and the converted checkpoint."""
        out = temp_dir / "dcls.ckpt"
        code = main(["surgery", "--in", str(toy_checkpoint), "--out", str(out), "--size", "5", "--count", "3"])
        text = capsys.readouterr().out
        assert code == 0
        assert "2 replacements, 2 shared position groups" in text
        model = load_checkpoint(out)
        assert model.spec.conv_method == "dcls" and model.spec.dcls_size == 5
        assert all(isinstance(block.dwconv, DclsConv2d) for block in model.blocks())

    def test_paramcount_toy(self, capsys):
        """Test the ledger total for the toy preset."""
        assert main(["paramcount", "--preset", "toy"]) == 0
        assert capsys.readouterr().out.strip().splitlines()[-1] == "total: 4,876 (0.00 M)"

    def test_paramcount_checkpoint(self, toy_checkpoint, capsys):
        """Test counting a saved model."""
        assert main(["paramcount", "--checkpoint", str(toy_checkpoint)]) == 0
        assert "total: 4,876" in capsys.readouterr().out

    def test_gradcheck_failure_exit_code(self, capsys):
        """Test exit code 3 when a case exceeds its threshold."""
        fake = [GradcheckResult("tensor", "gelu", 0, 0.5, 1e-4)]
        with patch("dcls_audio.cli.run_gradcheck", return_value=fake) as mock_run:
            assert main(["gradcheck", "--suite", "tensor", "--seeds", "1"]) == 3
        mock_run.assert_called_once_with("tensor", 1, 0)
        assert capsys.readouterr().out.strip().endswith("FAIL")

    def test_config_file_precedence(self, temp_dir, capsys):
        """Test defaults < config file < flags for the gradcheck settings."""
        config_file = temp_dir / "gc.cfg"
        config_file.write_text("seed=7\nseeds=4\nsuite=dcls\n")
        fake = [GradcheckResult("dcls", "dcls_gauss_channel", 7, 1e-9, 1e-4)]
        with patch("dcls_audio.cli.run_gradcheck", return_value=fake) as mock_run:
            assert main(["gradcheck", "--config", str(config_file), "--seeds", "2"]) == 0
        mock_run.assert_called_once_with("dcls", 2, 7)

    def test_gradcheck_pass(self, capsys):
        """Test a real passing suite."""
        assert main(["gradcheck", "--suite", "dcls", "--seeds", "1"]) == 0
        assert capsys.readouterr().out.strip().endswith("PASS")

    def test_gen_train_eval(self, temp_dir, capsys):
        """Test the synthetic-data -> train -> eval round trip."""
        data = temp_dir / "data"
        assert main(["gen-data", "--out-dir", str(data), "--clips", "6", "--classes", "3", "--duration", "0.5"]) == 0
        config_file = temp_dir / "train.cfg"
        config_file.write_text("epochs=3\nwarmup_epochs=0\nbatch_size=3\n")
        run = temp_dir / "run"
        code = main([
            "train", "--manifest", str(data / "manifest.csv"), "--labels", str(data / "labels.txt"),
            "--out-dir", str(run), "--config", str(config_file), "--epochs", "1", "--clip-seconds", "0.5",
            "--conv-method", "dcls", "--dcls-size", "5", "--dcls-count", "3",
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "epochs: 1 " in out
        assert (run / "history.csv").is_file()
        assert load_checkpoint(run / "checkpoint.ckpt").spec.conv_method == "dcls"

        report = temp_dir / "report.csv"
        code = main([
            "eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--manifest", str(data / "manifest.csv"),
            "--labels", str(data / "labels.txt"), "--clip-seconds", "0.5", "--report", str(report),
        ])
        assert code == 0
        assert capsys.readouterr().out.strip().splitlines()[-1].startswith("mAP: ")
        assert report.is_file()

    def test_bench(self, toy_checkpoint, capsys):
        """Test that the 23x23 DCLS model is reported slower than the 7x7 baseline."""
        code = main(["bench", "--baseline", str(toy_checkpoint), "--batch-size", "2", "--warmup", "1",
                     "--iters", "3", "--frames", "160"])
        lines = capsys.readouterr().out.strip().splitlines()
        assert code == 0
        assert lines[0].startswith("baseline: ") and lines[1].startswith("dcls: ")
        baseline = float(lines[0].split()[1])
        dcls = float(lines[1].split()[1])
        ratio = float(lines[2].split(": ")[1])
        assert 0 < dcls < baseline
        assert ratio < 1.0

    @pytest.mark.parametrize("flag", ["--seeds", "--iters", "--batch-size"])
    def test_non_positive_counts_rejected(self, flag, toy_checkpoint, capsys):
        """Test that zero seeds or iterations fail with a one-line config error."""
        command = ["gradcheck"] if flag == "--seeds" else ["bench", "--baseline", str(toy_checkpoint)]
        assert main(command + [flag, "0"]) == 2
        assert "error: ConfigError:" in capsys.readouterr().err
        assert main(command + [flag, "-2"]) == 2

    def test_bad_boolean_in_config(self, temp_dir, capsys):
        """Test that a boolean setting only accepts true/false spellings."""
        config_file = temp_dir / "spec.cfg"
        config_file.write_text("resample=maybe\n")
        code = main(["spectrogram", "--in", "a.wav", "--out", "a.spec", "--config", str(config_file)])
        assert code == 2
        assert "error: ConfigError: invalid value 'maybe' for resample" in capsys.readouterr().err

    def test_bad_boolean_train_flag(self, temp_dir, capsys):
        """Test that --augment maybe is refused before any training."""
        code = main(["train", "--manifest", "m.csv", "--labels", "l.txt", "--out-dir", str(temp_dir),
                     "--augment", "maybe"])
        assert code == 2
        assert "invalid value 'maybe' for augment" in capsys.readouterr().err

    def test_train_keeps_dcls_settings_from_spec_file(self, temp_dir, capsys):
        """Test that --conv-method dcls does not reset S and m given by --spec."""
        data = temp_dir / "data"
        assert main(["gen-data", "--out-dir", str(data), "--clips", "3", "--classes", "2", "--duration", "0.5"]) == 0
        spec_file = temp_dir / "toy.spec"
        spec_file.write_text(ModelSpec.toy(num_classes=2, dcls_size=7, dcls_count=4).to_text())
        common = ["train", "--manifest", str(data / "manifest.csv"), "--labels", str(data / "labels.txt"),
                  "--spec", str(spec_file), "--epochs", "0", "--warmup-epochs", "0", "--clip-seconds", "0.5",
                  "--conv-method", "dcls"]

        assert main(common + ["--out-dir", str(temp_dir / "a")]) == 0
        spec = load_checkpoint(temp_dir / "a" / "checkpoint.ckpt").spec
        assert (spec.conv_method, spec.dcls_size, spec.dcls_count) == ("dcls", 7, 4)

        assert main(common + ["--out-dir", str(temp_dir / "b"), "--dcls-count", "5"]) == 0
        spec = load_checkpoint(temp_dir / "b" / "checkpoint.ckpt").spec
        assert (spec.dcls_size, spec.dcls_count) == (7, 5)

    def test_bad_config_key(self, temp_dir, capsys):
        """Test that an unknown key in --config is a one-line error."""
        config_file = temp_dir / "bad.cfg"
        config_file.write_text("sedd=3\n")
        assert main(["gradcheck", "--config", str(config_file)]) == 2
        assert "Unknown setting 'sedd'" in capsys.readouterr().err
