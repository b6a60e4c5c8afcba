"""
Command-line entry point: ``dcls-audio <command> [flags]``.

Every command exits 0 on success. Library errors exit 2 with a single
``error: <ErrorClass>: <message>`` line on stderr; a gradient-check
violation exits 3.
"""
import argparse
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from dcls_audio import __version__, config
from dcls_audio.audio import AudioError, FrontendConfig, load_wav, logmel, pad_or_truncate
from dcls_audio.checkpoint import load_checkpoint, save_checkpoint
from dcls_audio.config import ConfigError
from dcls_audio.container import CheckpointError, write_container
from dcls_audio.datasets import ManifestError, gen_synthetic, load_manifest
from dcls_audio.dcls import VERSIONS, DclsError, check_dcls_settings
from dcls_audio.gradcheck import SUITES, run_gradcheck, summarize
from dcls_audio.metrics import MetricError, eval_report
from dcls_audio.model import (
    CONV_METHODS,
    DCLS,
    Model,
    ModelSpec,
    ModelSpecError,
    build_model,
    count_params,
    forward,
    param_ledger,
    replace_depthwise_dcls,
)
from dcls_audio.pipeline import evaluate, train_loop
from dcls_audio.tensor_core import TensorError
from dcls_audio.train import TrainConfig, TrainingError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_GRADCHECK = 3

LIBRARY_ERRORS = (
    AudioError,
    CheckpointError,
    ConfigError,
    DclsError,
    ManifestError,
    MetricError,
    ModelSpecError,
    TensorError,
    TrainingError,
)

PRESETS = {"toy": ModelSpec.toy, "convnext-t": ModelSpec.convnext_tiny_audio}

COMMAND_DEFAULTS: Dict[str, Dict[str, object]] = {
    "spectrogram": {"input": None, "out": None, "resample": False, "clip_seconds": 10.0},
    "gen-data": {"out_dir": str(config.DATA_DIR / "synth"), "clips": 256, "classes": 8, "duration": 10.0, "sample_rate": 32000},
    "train": {
        "manifest": None, "labels": None, "out_dir": None, "eval_manifest": None, "eval_labels": None,
        "spec": None, "preset": "toy", "conv_method": None, "dcls_size": None, "dcls_count": None,
        "dcls_version": None, "resample": False,
    },
    "eval": {
        "checkpoint": None, "manifest": None, "labels": None, "report": None,
        "batch_size": 32, "clip_seconds": 10.0, "resample": False,
    },
    "surgery": {"input": None, "out": None, "size": 23, "count": 26, "version": "gauss"},
    "gradcheck": {"suite": "all", "seeds": 10},
    "paramcount": {"preset": "convnext-t", "spec": None, "checkpoint": None, "dcls": False},
    "bench": {"baseline": None, "dcls": None, "batch_size": 8, "warmup": 5, "iters": 20, "frames": 1001},
}

POSITIVE_SETTINGS = ("threads", "seeds", "iters", "batch_size", "frames")

TRAIN_FIELDS = [name for name in asdict(TrainConfig()) if name not in ("seed", "threads")]


def _flag(parser: argparse.ArgumentParser, name: str, help_text: str, kind=str, dest: Optional[str] = None, **kwargs):
    parser.add_argument(f"--{name}", dest=dest or name.replace("-", "_"), type=kind, default=None, help=help_text, **kwargs)


def _switch(parser: argparse.ArgumentParser, name: str, help_text: str):
    parser.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_const", const=True, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "seed", "random seed (default: DCLS_AUDIO_SEED or 0)", int)
    _flag(common, "threads", "worker threads (default: DCLS_AUDIO_THREADS or 1)", int)
    _flag(common, "config", "key=value settings file; flags given on the command line win")
    _flag(common, "log-level", "logging level (default: DCLS_AUDIO_LOG_LEVEL or WARNING)", str.upper,
          choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))

    parser = argparse.ArgumentParser(
        prog="dcls-audio",
        description="Learnable-spacing depthwise convolutions for audio tagging.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("spectrogram", parents=[common], help="WAV -> normalized log-mel array")
    _flag(p, "in", "input WAV file", dest="input")
    _flag(p, "out", "output container file")
    _switch(p, "resample", "resample to 32 kHz instead of failing")
    _flag(p, "clip-seconds", "pad or truncate to this length (default 10)", float)

    p = commands.add_parser("gen-data", parents=[common], help="generate the synthetic tagging dataset")
    _flag(p, "out-dir", "output directory (default: $DCLS_AUDIO_DATA_DIR/synth)")
    _flag(p, "clips", "number of clips (default 256)", int)
    _flag(p, "classes", "number of classes, at most 16 (default 8)", int)
    _flag(p, "duration", "clip length in seconds (default 10)", float)
    _flag(p, "sample-rate", "sample rate in Hz (default 32000)", int)

    p = commands.add_parser("train", parents=[common], help="train a model on a manifest")
    _flag(p, "manifest", "training manifest CSV")
    _flag(p, "labels", "label vocabulary file")
    _flag(p, "out-dir", "where history.csv and checkpoint.ckpt are written")
    _flag(p, "eval-manifest", "held-out manifest CSV (default: score the training manifest)")
    _flag(p, "eval-labels", "vocabulary of the held-out manifest (default: --labels)")
    _flag(p, "spec", "model spec file (key=value)")
    _flag(p, "preset", "model preset when no --spec is given", choices=sorted(PRESETS))
    _flag(p, "conv-method", "depthwise convolution type", choices=CONV_METHODS)
    _flag(p, "dcls-size", "dilated kernel size S (odd, default: from --spec, else 23)", int)
    _flag(p, "dcls-count", "kernel elements per channel m (default: from --spec, else 26)", int)
    _flag(p, "dcls-version", "DCLS interpolation (default: from --spec, else gauss)", choices=VERSIONS)
    _switch(p, "resample", "resample clips to 32 kHz")
    for name, value in asdict(TrainConfig()).items():
        if name in TRAIN_FIELDS:
            _flag(p, name.replace("_", "-"), f"training setting (default {value})")

    p = commands.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    _flag(p, "checkpoint", "checkpoint file")
    _flag(p, "manifest", "manifest CSV")
    _flag(p, "labels", "label vocabulary file")
    _flag(p, "report", "write the per-class report CSV here")
    _flag(p, "batch-size", "evaluation batch size (default 32)", int)
    _flag(p, "clip-seconds", "pad or truncate to this length (default 10)", float)
    _switch(p, "resample", "resample clips to 32 kHz")

    p = commands.add_parser("surgery", parents=[common], help="replace 7x7 depthwise convs with DCLS")
    _flag(p, "in", "input checkpoint", dest="input")
    _flag(p, "out", "output checkpoint")
    _flag(p, "size", "dilated kernel size S (odd, default 23)", int)
    _flag(p, "count", "kernel elements per channel m (default 26)", int)
    _flag(p, "version", "DCLS interpolation (default gauss)", choices=VERSIONS)

    p = commands.add_parser("gradcheck", parents=[common], help="64-bit finite-difference gradient suites")
    _flag(p, "suite", "suite to run (default all)", choices=("all",) + SUITES)
    _flag(p, "seeds", "seeds per case (default 10)", int)

    p = commands.add_parser("paramcount", parents=[common], help="parameter ledger and total")
    _flag(p, "preset", "model preset (default convnext-t)", choices=sorted(PRESETS))
    _flag(p, "spec", "model spec file (key=value)")
    _flag(p, "checkpoint", "count a saved model instead")
    _switch(p, "dcls", "count after DCLS surgery (S=23, m=26, gauss)")

    p = commands.add_parser("bench", parents=[common], help="eval throughput, baseline vs DCLS")
    _flag(p, "baseline", "baseline checkpoint")
    _flag(p, "dcls", "DCLS checkpoint (default: surgery on a copy of the baseline)")
    _flag(p, "batch-size", "batch size (default 8)", int)
    _flag(p, "warmup", "untimed iterations (default 5)", int)
    _flag(p, "iters", "timed iterations (default 20)", int)
    _flag(p, "frames", "spectrogram frames (default 1001)", int)
    return parser


def _like(default: object, value: object, key: str) -> object:
    if not isinstance(value, str) or default is None or isinstance(default, str):
        return value
    try:
        if isinstance(default, bool):
            return _boolean(value, key)
        return type(default)(value)
    except ValueError as e:
        raise ConfigError(f"invalid value {value!r} for {key}") from e


def _boolean(value: str, key: str) -> bool:
    text = value.strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ConfigError(f"invalid value {value!r} for {key}: expected true or false")


def _optional_int(value: object, fallback: int, key: str) -> int:
    if value is None:
        return fallback
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"invalid value {value!r} for {key}") from e


def resolve_settings(args: argparse.Namespace) -> Dict[str, object]:
    """Command settings with precedence defaults < --config file < flags."""
    defaults = dict(COMMAND_DEFAULTS[args.command])
    defaults.update(seed=config.DEFAULT_SEED, threads=config.DEFAULT_THREADS)
    if args.command == "train":
        defaults.update({name: None for name in TRAIN_FIELDS})
    file_values = config.load_key_value_file(args.config) if args.config else None
    cli_values = {key: getattr(args, key, None) for key in defaults}
    merged = config.merge_settings(defaults, file_values, cli_values)
    settings = {key: _like(defaults[key], value, key) for key, value in merged.items()}
    for key in POSITIVE_SETTINGS:
        if isinstance(settings.get(key), int) and settings[key] < 1:
            raise ConfigError(f"{key} must be at least 1, got {settings[key]}")
    return settings


def _require(settings: Dict[str, object], *names: str) -> None:
    missing = [name for name in names if not settings.get(name)]
    if missing:
        flags = ", ".join("--" + ("in" if n == "input" else n.replace("_", "-")) for n in missing)
        raise ConfigError(f"missing required setting(s): {flags}")


def _spec_from(settings: Dict[str, object]) -> ModelSpec:
    if settings.get("spec"):
        return ModelSpec.from_file(settings["spec"])
    return PRESETS[settings["preset"]]()


def cmd_spectrogram(settings: Dict[str, object]) -> int:
    _require(settings, "input", "out")
    frontend = FrontendConfig()
    clip = load_wav(settings["input"], resample=settings["resample"], target_rate=frontend.sample_rate)
    clip = pad_or_truncate(clip, int(round(settings["clip_seconds"] * clip.sample_rate)))
    spec = logmel(clip, frontend)
    write_container(settings["out"], {"kind": "spectrogram", "source": Path(settings["input"]).name}, {"spectrogram": spec})
    print("x".join(str(d) for d in spec.shape))
    return EXIT_OK


def cmd_gen_data(settings: Dict[str, object]) -> int:
    _require(settings, "out_dir")
    manifest = gen_synthetic(
        settings["out_dir"], settings["clips"], settings["classes"], settings["seed"],
        duration=settings["duration"], sample_rate=settings["sample_rate"], threads=settings["threads"],
    )
    print(f"wrote {len(manifest)} clips, {manifest.num_classes} classes: {Path(settings['out_dir']) / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(settings: Dict[str, object]) -> int:
    _require(settings, "manifest", "labels", "out_dir")
    overrides = {name: settings[name] for name in TRAIN_FIELDS}
    overrides.update(seed=settings["seed"], threads=settings["threads"])
    cfg = TrainConfig().with_overrides(overrides)

    spec = _spec_from(settings)
    if settings["conv_method"] is not None and settings["conv_method"] != DCLS:
        spec = replace(spec, conv_method=settings["conv_method"])
    elif settings["conv_method"] == DCLS or spec.conv_method == DCLS:
        # unset DCLS flags keep the values from --spec
        spec = spec.with_dcls(
            _optional_int(settings["dcls_size"], spec.dcls_size, "dcls_size"),
            _optional_int(settings["dcls_count"], spec.dcls_count, "dcls_count"),
            settings["dcls_version"] or spec.dcls_version,
        ).validate()
    logger.info("model: %s, conv_method %s", settings["spec"] or settings["preset"], spec.conv_method)

    manifest = load_manifest(settings["manifest"], settings["labels"])
    eval_manifest = None
    if settings["eval_manifest"]:
        eval_manifest = load_manifest(settings["eval_manifest"], settings["eval_labels"] or settings["labels"])

    model = build_model(spec, np.random.default_rng([cfg.seed, 0]))
    result = train_loop(
        model, manifest, cfg, np.random.default_rng([cfg.seed, 1]),
        out_dir=settings["out_dir"], eval_manifest=eval_manifest, resample=settings["resample"],
    )
    if len(result.history):
        last = result.history.iloc[-1]
        print(f"epochs: {len(result.history)}  final loss: {last['loss']:.4f}  mAP: {last['mAP']:.4f}")
    else:
        print("epochs: 0")
    if result.position_shift is not None:
        print(f"mean position shift: {result.position_shift:.4f}")
    print(f"history: {result.history_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(settings: Dict[str, object]) -> int:
    _require(settings, "checkpoint", "manifest", "labels")
    model = load_checkpoint(settings["checkpoint"])
    manifest = load_manifest(settings["manifest"], settings["labels"])
    buf, score = evaluate(
        model, manifest, batch_size=settings["batch_size"], clip_seconds=settings["clip_seconds"],
        threads=settings["threads"], resample=settings["resample"],
    )
    report = eval_report(buf, manifest.vocabulary)
    if settings["report"]:
        report.to_csv(settings["report"], index=False)
    print(report.to_string(index=False))
    print(f"mAP: {score:.4f}")
    return EXIT_OK


def cmd_surgery(settings: Dict[str, object]) -> int:
    _require(settings, "input", "out")
    check_dcls_settings(settings["size"], settings["count"], settings["version"])
    model = load_checkpoint(settings["input"])
    before = count_params(model)
    report = replace_depthwise_dcls(
        model, settings["size"], settings["count"], settings["version"], np.random.default_rng(settings["seed"])
    )
    for item in report:
        marker = "new" if item.new_group else "shared"
        print(f"{item.name}: {item.channels} channels -> DCLS ({marker} positions {item.share_tag})")
    groups = len({item.share_tag for item in report})
    print(f"{len(report)} replacements, {groups} shared position groups")
    after = count_params(model)
    print(f"parameters: {before:,} -> {after:,} ({after - before:+,})")
    save_checkpoint(model, settings["out"], seed=settings["seed"])
    return EXIT_OK


def cmd_gradcheck(settings: Dict[str, object]) -> int:
    results = run_gradcheck(settings["suite"], settings["seeds"], settings["seed"])
    failed = False
    for case, error, threshold, passed in summarize(results):
        print(f"{case}: max rel err {error:.2e} < {threshold:g}: {'PASS' if passed else 'FAIL'}")
        failed = failed or not passed
    worst = max(r.max_rel_err for r in results)
    print(f"max rel err {worst:.2e}: {'FAIL' if failed else 'PASS'}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_paramcount(settings: Dict[str, object]) -> int:
    if settings["checkpoint"]:
        model = load_checkpoint(settings["checkpoint"])
    else:
        spec = _spec_from(settings)
        if settings["dcls"]:
            spec = spec.with_dcls(23, 26, "gauss")
        model = build_model(spec, np.random.default_rng(settings["seed"]))
    ledger = param_ledger(model)
    print(ledger.to_string(index=False))
    total = count_params(model)
    print(f"total: {total:,} ({total / 1e6:.2f} M)")
    return EXIT_OK


def _throughput(model: Model, batch: np.ndarray, warmup: int, iters: int) -> float:
    for _ in range(warmup):
        forward(model, batch)
    start = time.perf_counter()
    for _ in range(iters):
        forward(model, batch)
    elapsed = time.perf_counter() - start
    return batch.shape[0] * iters / elapsed


def cmd_bench(settings: Dict[str, object]) -> int:
    _require(settings, "baseline")
    baseline = load_checkpoint(settings["baseline"])
    if settings["dcls"]:
        dcls_model = load_checkpoint(settings["dcls"])
    else:
        dcls_model = load_checkpoint(settings["baseline"])
        replace_depthwise_dcls(dcls_model, rng=np.random.default_rng(settings["seed"]))

    rng = np.random.default_rng(settings["seed"])
    batch = rng.normal(size=(settings["batch_size"], 1, FrontendConfig().n_mels, settings["frames"])).astype(np.float32)
    logger.info("bench: batch %s, %d timed iterations", batch.shape, settings["iters"])
    base_rate = _throughput(baseline, batch, settings["warmup"], settings["iters"])
    dcls_rate = _throughput(dcls_model, batch, settings["warmup"], settings["iters"])
    print(f"baseline: {base_rate:.2f} samples/s")
    print(f"dcls: {dcls_rate:.2f} samples/s")
    print(f"throughput ratio (dcls/baseline): {dcls_rate / base_rate:.3f}")
    return EXIT_OK


COMMANDS = {
    "spectrogram": cmd_spectrogram,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "surgery": cmd_surgery,
    "gradcheck": cmd_gradcheck,
    "paramcount": cmd_paramcount,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or config.LOG_LEVEL).upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logger.debug("command %s: %s", args.command, vars(args))
    try:
        return COMMANDS[args.command](resolve_settings(args))
    except LIBRARY_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
