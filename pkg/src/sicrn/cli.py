"""``sicrn`` command line: train, enhance, eval, gradcheck, kernel, info, init.

Exit codes: 0 success, 2 usage or format problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checks
from .blocks import S4NDBlock
from .config import RunConfig, format_run_config, load_run_config
from .data import SynthConfig, dynamic_mix_epoch, load_wav_dir, synthetic_pools
from .dsp_io import AudioClip, StftConfig, istft_array, stft_array, wav_read, wav_write
from .errors import ArgumentError, FormatError, NumericError, UsageError
from .model import SICRNModel, load_checkpoint, macs_per_second, save_checkpoint
from .s4nd import kernel_2d
from .ssm import discretize, materialize_kernel
from .training import SyntheticSource, evaluate, si_sdr_metric, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
REFERENCE_PARAMS_M = 2.16
REFERENCE_MACS_G = 4.24


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args) -> RunConfig:
    over = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over["seed"] = str(args.seed)
    if getattr(args, "data_dir", None):
        over["data_dir"] = args.data_dir
    return load_run_config(getattr(args, "config", None), over)


def _stft_for(model: SICRNModel, extra: dict) -> StftConfig:
    if "win_length" in extra and "hop" in extra:
        return StftConfig(int(extra["win_length"]), int(extra["hop"]))
    if model.config.freq_bins == 256:
        return StftConfig()
    raise FormatError(f"checkpoint lacks STFT settings for {model.config.freq_bins} bins")


def _load(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    model, extra, _ = load_checkpoint(p, with_extras=True)
    return model, extra


def _model_from(args) -> tuple[SICRNModel, dict]:
    if getattr(args, "ckpt", None):
        return _load(args.ckpt)
    rc = _run_config(args)
    return SICRNModel(rc.model), {"win_length": rc.train.win_length, "hop": rc.train.hop}


# --------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_run_config(rc))
    clean = noise = None
    if rc.data_dir:
        clean, noise = load_wav_dir(rc.data_dir)
    source = SyntheticSource(rc.train, clean, noise)
    model = SICRNModel(rc.model)
    stft_extra = {"win_length": rc.train.win_length, "hop": rc.train.hop}

    def report(row):
        print(f"epoch {row['epoch']}: train_loss {row['train_loss']:.4f} val_loss {row['val_loss']:.4f} "
              f"val_sisdr {row['val_sisdr']:.2f} dB lr {row['lr']:.2e}")

    result = train_loop(rc.train, model, source, out, resume=args.resume, on_epoch=report,
                        extra=stft_extra)
    print(f"best validation loss {result.best_val:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model, extra = _load(args.ckpt)
    stft = _stft_for(model, extra)
    clip = wav_read(args.inp)
    if len(clip) < stft.win_length:
        raise ArgumentError(f"{args.inp}: {len(clip)} samples is shorter than one window")
    model.eval()
    _, enhanced = model.forward(stft_array(clip.samples, stft))
    out = istft_array(enhanced, stft)
    wav_write(args.out, AudioClip(np.clip(out, -1.0, 1.0), clip.sample_rate))
    print(f"wrote {args.out}: {len(out)} samples ({len(clip) - len(out)} trailing samples dropped)")
    if args.ref:
        ref = wav_read(args.ref).samples
        n = min(len(out), len(ref))
        print(f"SI-SDR vs reference: enhanced {float(si_sdr_metric(out[:n], ref[:n])):.2f} dB, "
              f"input {float(si_sdr_metric(clip.samples[:n], ref[:n])):.2f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = _load(args.ckpt)
    stft = _stft_for(model, extra)
    rng = np.random.default_rng([args.seed, 3])
    if args.data_dir:
        clean, noise = load_wav_dir(args.data_dir)
        count = args.clips or len(clean)
    else:
        count = args.synthetic
        if count < 1:
            raise ArgumentError("evaluation set is empty (--synthetic must be >= 1)")
        synth = SynthConfig(duration=args.seconds)
        clean, noise = synthetic_pools(max(count, 1), max(count // 2, 1), synth, args.seed + 1)
    samples = list(dynamic_mix_epoch(clean, noise, rng, count))
    if not samples:
        raise ArgumentError("evaluation set is empty")
    res = evaluate(model, samples, stft)
    rows = [(i, s.snr_db, s.reverberant, nz, en) for i, (s, (nz, en)) in enumerate(zip(samples, res["per_clip"]))]
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip", "snr_db", "reverberant", "noisy_sisdr", "enhanced_sisdr"])
            w.writerows(rows)
            w.writerow(["mean", "", "", res["noisy_sisdr"], res["sisdr"]])
    print(f"{len(rows)} clips: noisy {res['noisy_sisdr']:.2f} dB -> enhanced {res['sisdr']:.2f} dB SI-SDR")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = checks.tiny_config()
    if args.config or args.set:
        rc = _run_config(args)
        cfg = rc.model
    if cfg.dtype != "float64":
        print(f"note: dtype {cfg.dtype} overridden to float64 for finite differences")
    reports = checks.check_ops(args.tol, args.seed)
    failed = []
    print(f"{'op':<22}{'worst rel err':>15}  status")
    for name, rep in reports.items():
        print(f"{name:<22}{rep.worst:>15.3e}  {'ok' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failed.append(name)
    e2e = checks.check_end_to_end(cfg, args.tol_e2e, args.seed, n_samples=args.samples)
    worst = int(np.argmax(e2e.errors)) if e2e.errors else 0
    print(f"{'end-to-end':<22}{e2e.worst:>15.3e}  {'ok' if e2e.passed else 'FAIL'}"
          f"  (worst: {e2e.names[worst] if e2e.names else '-'})")
    if not e2e.passed:
        failed.append("end-to-end")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def _first_s4nd(model: SICRNModel, name: str | None):
    blocks = []
    for sic in (model.enc_sic1, model.enc_sic2, model.dec_sic3, model.dec_sic4):
        blocks.extend(b.s4nd for b in sic.global_branch if isinstance(b, S4NDBlock))
    if not blocks:
        raise UsageError("model has no S4ND layers (global_branch=inplace?)")
    if name is None:
        return blocks[0]
    for layer in blocks:
        if layer.name == name:
            return layer
    raise ArgumentError(f"no S4ND layer named {name!r}; have {[b.name for b in blocks]}")


def cmd_kernel(args) -> int:
    model, _ = _model_from(args)
    layer = _first_s4nd(model, args.layer)
    p = layer.to_s4nd2d(model.store, args.channel)
    f_len = args.freq_length or model.config.freq_bins
    if args.axis == "time":
        k = materialize_kernel(discretize(p.time), args.length).k[:, None]
    elif args.axis == "freq":
        ssm = p.freq if args.direction == "forward" else p.freq_rev
        if ssm is None:
            raise ArgumentError("unidirectional layer has no reverse frequency kernel")
        k = materialize_kernel(discretize(ssm), f_len).k[:, None]
    else:
        k = kernel_2d(p, args.length, f_len, args.direction)
    np.savetxt(args.out, k, delimiter=",", fmt="%.17g")
    print(f"{layer.name} channel {args.channel}: {args.axis} kernel {k.shape[0]}x{k.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_info(args) -> int:
    model, extra = _model_from(args)
    cfg = model.config
    n = model.param_count()
    macs = macs_per_second(cfg)
    print(f"parameters : {n:,} ({n / 1e6:.2f} M)   reference {REFERENCE_PARAMS_M} M")
    print(f"MACs       : {macs['total'] / 1e9:.2f} G/s   reference {REFERENCE_MACS_G} G/s")
    for key in ("conv", "ssm", "lstm"):
        print(f"  {key:<5}: {macs[key] / 1e9:.3f} G/s")
    print(f"config     : F={cfg.freq_bins} widths={list(cfg.sic_widths)} kernel={list(cfg.ic_kernel)} "
          f"lstm={cfg.lstm_layers}x{cfg.hidden} state={list(cfg.s4nd_state)}")
    return EXIT_OK


def cmd_init(args) -> int:
    rc = _run_config(args)
    model = SICRNModel(rc.model)
    save_checkpoint(model, args.out, {"win_length": rc.train.win_length, "hop": rc.train.hop})
    print(f"wrote fresh checkpoint {args.out} ({model.param_count():,} parameters)")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sicrn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, seed=True):
        p.add_argument("--config", help="key = value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            p.add_argument("--seed", type=int, help="seed for model init and data")

    p = sub.add_parser("train", help="train on dynamically mixed data")
    config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-dir", help="folder with clean/ and noise/ WAV subfolders")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one WAV file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref", help="clean reference WAV for an SI-SDR printout")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="SI-SDR of noisy and enhanced clips")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir")
    src.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--clips", type=int, help="mixtures to draw from --data-dir pools")
    p.add_argument("--seconds", type=float, default=1.0, help="synthetic clip length")
    p.add_argument("--report", help="per-clip CSV report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    config_args(p, seed=False)
    p.add_argument("--tol", type=float, default=checks.OP_TOL, help="per-op relative tolerance")
    p.add_argument("--tol-e2e", type=float, default=checks.END_TO_END_TOL)
    p.add_argument("--samples", type=int, default=3, help="coordinates probed per tensor end to end")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("kernel", help="dump materialized S4ND kernels as CSV")
    config_args(p)
    p.add_argument("--ckpt")
    p.add_argument("--axis", choices=("time", "freq", "2d"), required=True)
    p.add_argument("--direction", choices=("forward", "reverse"), default="forward")
    p.add_argument("--layer", help="S4ND layer name (default: the first)")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--length", type=int, default=100, help="time kernel length")
    p.add_argument("--freq-length", type=int, help="frequency kernel length (default: freq_bins)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("info", help="parameter count and analytic MACs")
    config_args(p)
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("init", help="write a freshly initialized checkpoint")
    config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"sicrn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArgumentError, FormatError, UsageError, OSError) as exc:
        print(f"sicrn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
