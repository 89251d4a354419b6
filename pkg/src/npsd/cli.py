"""Command-line entry point: ``npsd {synth,train,estimate,enhance,eval}``.

Every option can also be given in a YAML config file (``--config``) under
the same name with dashes replaced by underscores; command-line flags win.
The fully resolved configuration is written to ``<out-dir>/effective_config.yaml``
and can be passed back with ``--config`` to reproduce a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys

import yaml

from . import dataset, dsp, enhance, estimator, evaluate, net, synthetic
from .errors import ConfigurationError, NpsdError

log = logging.getLogger("npsd")

DEFAULTS = {
    "seq_len": dataset.SEQ_LEN,
    "stride": dataset.STRIDE,
    "alpha": dataset.ALPHA,
    "train_snrs": list(dataset.TRAIN_SNRS),
    "eval_snrs": list(dataset.EVAL_SNRS),
    "train_seconds": 500.0,
    "validation_seconds": 45.0,
    "test_seconds": 90.0,
    "hidden": list(net.HIDDEN),
    "lr": 1e-3,
    "batch_size": 512,
    "patience": 2,
    "epochs": 100,
    "max_seconds": None,
    "clip_norm": None,
    "hop_steps": 32,
    "methods": ["lstm", "min_stat"],
    "min_stat_beta": 0.9,
    "min_stat_window": 96,
    "min_stat_compensation": 1.5,
    "dd_alpha": enhance.DD_ALPHA,
    "g_min": enhance.G_MIN,
    "seed": None,
    "threads": None,
}

# Keys that name corpus files; kept verbatim in the effective config.
CORPUS_KEYS = ("speech", "noise", "splits")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser, *keys: str) -> None:
    p.add_argument("--config", help="YAML run config (corpus globs and hyperparameters)")
    p.add_argument("--out-dir", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker/BLAS thread cap (env NPSD_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    types = {
        "seq_len": int, "stride": int, "alpha": float, "train_snrs": _floats, "eval_snrs": _floats,
        "train_seconds": float, "validation_seconds": float, "test_seconds": float, "hidden": _ints,
        "lr": float, "batch_size": int, "patience": int, "epochs": int, "max_seconds": float,
        "clip_norm": float, "hop_steps": int, "methods": lambda s: [m for m in s.split(",") if m],
        "min_stat_beta": float, "min_stat_window": int, "min_stat_compensation": float,
        "dd_alpha": float, "g_min": float,
    }
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=types[key], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npsd", description="LSTM-based noise PSD estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize training/validation sequences to NSEQ caches")
    _add_common(p, "seq_len", "stride", "alpha", "train_snrs", "eval_snrs", "train_seconds", "validation_seconds")

    p = sub.add_parser("train", help="train the LSTM estimator")
    _add_common(p, "seq_len", "stride", "alpha", "train_snrs", "eval_snrs", "train_seconds", "validation_seconds",
                "hidden", "lr", "batch_size", "patience", "epochs", "max_seconds", "clip_norm")
    p.add_argument("--data-dir", default=None, help="directory holding train.nseq / validation.nseq from synth")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("estimate", help="estimate the noise PSD of a WAV file")
    _add_common(p, "seq_len", "hop_steps", "min_stat_beta", "min_stat_window", "min_stat_compensation")
    p.add_argument("wav")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--method", choices=["lstm", "min_stat"], default="lstm")

    p = sub.add_parser("enhance", help="Wiener-enhance a WAV file given an NPSG noise track")
    _add_common(p, "dd_alpha", "g_min")
    p.add_argument("wav")
    p.add_argument("track", help="NPSG grid written by 'estimate'")
    p.add_argument("--output", default=None, help="output WAV (default <out-dir>/enhanced.wav)")

    p = sub.add_parser("eval", help="benchmark estimators on the test split")
    _add_common(p, "seq_len", "alpha", "eval_snrs", "test_seconds", "hop_steps", "methods", "min_stat_beta",
                "min_stat_window", "min_stat_compensation", "dd_alpha", "g_min")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--no-enhance", action="store_true", help="skip enhancement and SNRseg")

    p = sub.add_parser("demo-corpus", help="write a synthetic speech/noise corpus and config")
    p.add_argument("out_dir")
    p.add_argument("--speech-seconds", type=float, default=600.0)
    p.add_argument("--noise-seconds", type=float, default=300.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[dict, str]:
    """Merge defaults < config file < flags. Returns ``(config, base_dir)``."""
    cfg = {k: v for k, v in DEFAULTS.items()}
    base_dir = os.getcwd()
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise ConfigurationError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{args.config}: expected a mapping")
        unknown = set(loaded) - set(DEFAULTS) - set(CORPUS_KEYS) - {"out_dir", "base_dir"}
        if unknown:
            raise ConfigurationError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg.update(loaded)
        base_dir = loaded.get("base_dir") or os.path.dirname(os.path.abspath(args.config))
    for key in list(DEFAULTS) + ["out_dir"]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("threads") is None:
        env = os.environ.get("NPSD_THREADS")
        cfg["threads"] = int(env) if env else 1
    if cfg.get("seed") is None:
        cfg["seed"] = secrets.randbits(63)
        log.info("no --seed given; using recorded entropy seed %d", cfg["seed"])
    cfg["out_dir"] = cfg.get("out_dir") or "."
    cfg["base_dir"] = os.path.abspath(base_dir)
    _validate(cfg)
    return cfg, cfg["base_dir"]


def _validate(cfg: dict) -> None:
    checks = [
        (cfg["seq_len"] >= 1, "seq_len must be >= 1"),
        (cfg["stride"] >= 1, "stride must be >= 1"),
        (0.0 <= cfg["alpha"] < 1.0, "alpha must lie in [0, 1)"),
        (len(cfg["hidden"]) == 2 and min(cfg["hidden"]) >= 1, "hidden must be two positive sizes"),
        (cfg["lr"] > 0, "lr must be positive"),
        (cfg["batch_size"] >= 1, "batch_size must be >= 1"),
        (cfg["patience"] >= 1, "patience must be >= 1"),
        (cfg["epochs"] >= 0, "epochs must be >= 0"),
        (1 <= cfg["hop_steps"] <= cfg["seq_len"], "hop_steps must lie in [1, seq_len]"),
        (cfg["min_stat_window"] >= 1, "min_stat_window must be >= 1"),
        (0.0 <= cfg["g_min"] <= 1.0, "g_min must lie in [0, 1]"),
        (cfg["threads"] >= 1, "threads must be >= 1"),
        (0 <= cfg["seed"] < 2**64, "seed must fit in 64 bits"),
        (all(m in ("lstm", "min_stat") for m in cfg["methods"]), "methods are lstm and/or min_stat"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigurationError(message)


def write_effective_config(cfg: dict) -> str:
    os.makedirs(cfg["out_dir"], exist_ok=True)
    path = os.path.join(cfg["out_dir"], "effective_config.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump({k: v for k, v in cfg.items() if k != "out_dir"}, fh, sort_keys=True)
    return path


def _manifest(cfg: dict) -> dataset.CorpusManifest:
    return dataset.CorpusManifest.from_config(cfg, cfg["base_dir"])


def _out(cfg: dict, name: str) -> str:
    return os.path.join(cfg["out_dir"], name)


def _synthesize(cfg: dict, manifest: dataset.CorpusManifest, split: str):
    snrs = cfg["train_snrs"] if split == "train" else cfg["eval_snrs"]
    seconds = cfg["train_seconds"] if split == "train" else cfg["validation_seconds"]
    conditions = list(dataset.build_training_set(
        manifest, snrs, seconds, cfg["seq_len"], cfg["stride"], cfg["alpha"], cfg["seed"], split, cfg["threads"]))
    batch = dataset.SequenceBatch.concat([c.batch for c in conditions], cfg["seq_len"])
    stats = [{"noise": c.noise_type, "snr_db": c.snr_db, "frames": c.n_frames, "sequences": len(c.batch)}
             for c in conditions]
    return batch, stats


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    manifest = _manifest(cfg)
    write_effective_config(cfg)
    stats = {}
    for split in ("train", "validation"):
        batch, per_condition = _synthesize(cfg, manifest, split)
        dataset.write_sequences(_out(cfg, f"{split}.nseq"), batch)
        stats[split] = {"total": len(batch), "conditions": per_condition}
        print(f"{split}: {len(batch)} sequences")
    with open(_out(cfg, "synth_stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    return 0


def _load_or_synth(cfg: dict, data_dir: str | None):
    if data_dir:
        paths = [os.path.join(data_dir, f"{s}.nseq") for s in ("train", "validation")]
        for path in paths:
            if not os.path.isfile(path):
                raise ConfigurationError(f"sequence cache not found: {path}")
        return [dataset.read_sequences(p) for p in paths]
    manifest = _manifest(cfg)
    return [_synthesize(cfg, manifest, s)[0] for s in ("train", "validation")]


def cmd_train(cfg: dict, data_dir: str | None = None, resume: str | None = None) -> int:
    write_effective_config(cfg)
    if resume:
        if not os.path.isfile(resume):
            raise ConfigurationError(f"checkpoint not found: {resume}")
        params = net.load_checkpoint(resume)
    else:
        params = net.init_params(net.INPUT_SIZE, tuple(cfg["hidden"]), seed=cfg["seed"])
    history_path = _out(cfg, "history.csv")
    ckpt_path = _out(cfg, "model.npsd")
    if cfg["epochs"] == 0:
        net.save_checkpoint(params, ckpt_path)
        _write_history(history_path, [])
        return 0
    train_set, val_set = _load_or_synth(cfg, data_dir)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("training or validation set is empty (mixtures shorter than seq_len?)")
    config = net.TrainConfig(cfg["lr"], cfg["batch_size"], cfg["patience"], cfg["epochs"], cfg["seed"],
                             cfg["clip_norm"], cfg["max_seconds"])
    result = net.train(params, train_set.inputs, train_set.targets, val_set.inputs, val_set.targets, config,
                       on_epoch=lambda r: print(f"epoch {r.epoch}: train {r.train_mse:.6f} val {r.val_mse:.6f}"))
    net.save_checkpoint(result.params, ckpt_path)
    _write_history(history_path, result.history)
    print(f"best epoch {result.best_epoch}; checkpoint {ckpt_path}")
    return 0


def _write_history(path: str, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_mse!r},{r.val_mse!r}\n")


def _load_params(path: str | None) -> net.NetworkParams:
    if not path or not os.path.isfile(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    return net.load_checkpoint(path)


def cmd_estimate(cfg: dict, wav: str, checkpoint: str | None, method: str = "lstm") -> int:
    wave = dsp.require_rate(dsp.read_wav(wav))
    write_effective_config(cfg)
    spec = dsp.stft(wave)
    if method == "lstm":
        params = _load_params(checkpoint)
        track = estimator.estimate_lstm(params, spec, cfg["seq_len"], cfg["hop_steps"])
    else:
        track = estimator.estimate_min_stat(spec, cfg["min_stat_beta"], cfg["min_stat_window"],
                                            cfg["min_stat_compensation"])
    track.to_csv(_out(cfg, "track.csv"))
    track.to_grid(_out(cfg, "track.npsg"))
    mode = "zero-latency" if track.latency_frames == 0 else "block"
    print(f"method {method}: latency {track.latency_frames} frames ({mode} mode)")
    return 0


def cmd_enhance(cfg: dict, wav: str, track_path: str, output: str | None) -> int:
    wave = dsp.require_rate(dsp.read_wav(wav))
    if not os.path.isfile(track_path):
        raise ConfigurationError(f"track not found: {track_path}")
    write_effective_config(cfg)
    track = estimator.read_grid(track_path)
    spec = dsp.stft(wave)
    gains = enhance.wiener_gains(spec, track, cfg["dd_alpha"], cfg["g_min"])
    out = enhance.apply_and_resynthesize(spec, gains, len(wave))
    dsp.write_wav(output or _out(cfg, "enhanced.wav"), out)
    return 0


def cmd_eval(cfg: dict, checkpoint: str | None, with_enhancement: bool = True) -> int:
    params = _load_params(checkpoint) if "lstm" in cfg["methods"] else None
    manifest = _manifest(cfg)
    write_effective_config(cfg)
    settings = evaluate.BenchmarkSettings(
        cfg["eval_snrs"], cfg["test_seconds"], cfg["alpha"], cfg["seq_len"], cfg["hop_steps"], cfg["seed"],
        cfg["min_stat_beta"], cfg["min_stat_window"], cfg["min_stat_compensation"], cfg["dd_alpha"], cfg["g_min"],
        with_enhancement)
    report = evaluate.run_benchmark(manifest, cfg["methods"], params, settings)
    report.write(cfg["out_dir"])
    for row in report.average_rows():
        print(f"{row.method:9s} {row.snr_db:+5.1f} dB  LogErr {row.log_err_db:6.3f} dB  SNRseg {row.snr_seg_db:6.3f} dB")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "demo-corpus":
            path = synthetic.write_demo_corpus(args.out_dir, args.speech_seconds, args.noise_seconds, args.seed)
            print(path)
            return 0
        cfg, _ = resolve_config(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg["threads"]):
            if args.command == "synth":
                return cmd_synth(cfg)
            if args.command == "train":
                return cmd_train(cfg, args.data_dir, args.resume)
            if args.command == "estimate":
                return cmd_estimate(cfg, args.wav, args.checkpoint, args.method)
            if args.command == "enhance":
                return cmd_enhance(cfg, args.wav, args.track, args.output)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, not args.no_enhance)
    except (NpsdError, OSError) as exc:
        print(f"npsd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
