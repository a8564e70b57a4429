"""Command-line entry point: ``ecnet <command> ...``.

Exit codes: 0 success, 1 check failure, 2 IO or usage error, 3 numerical abort.
Human-facing messages go to stderr; records go to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .checkpoint import CheckpointError
from .data import (DatasetError, StreakParams, load_dataset, load_image, make_synthetic_pairs, save_image,
                   write_raw, write_synthetic_dataset)
from .losses import LossWeights
from .models import EcNet, NetworkConfig, RainAutoencoder
from .rlcn import RlcnParams, compute_rlcn
from .trainer import (DESK_CHANNELS, NonFiniteError, TrainConfig, Trainer, derain_image, desk_profile,
                      evaluate_index, load_model, train_autoencoder, train_ecnet)

log = logging.getLogger("ecnet")

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ECHO = "config.txt"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- flat config

def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _tuple_of(cast):
    def parse(v: str):
        v = v.strip()
        return tuple(cast(x) for x in v.split(",") if x.strip()) if v.strip().lower() != "none" else None
    return parse


def _optional(cast):
    def parse(v: str):
        return None if v.strip().lower() == "none" else cast(v)
    return parse


# key -> (section, field, parser); sections: train, weights, network, streak
KEYS: Dict[str, Tuple[str, str, Callable[[str], object]]] = {
    "epochs": ("train", "epochs", int),
    "lr": ("train", "lr", float),
    "decay_epochs": ("train", "decay_epochs", _tuple_of(int)),
    "decay_factor": ("train", "decay_factor", float),
    "clip": ("train", "clip", float),
    "batch": ("train", "batch", int),
    "patch": ("train", "patch", int),
    "seed": ("train", "seed", int),
    "tau": ("train", "tau", float),
    "max_iterations": ("train", "max_iterations", _optional(int)),
    "freeze_decoder": ("train", "freeze_decoder", _parse_bool),
    "ae_epochs": ("train", "ae_epochs", int),
    "ae_plateau_epochs": ("train", "ae_plateau_epochs", int),
    "ae_plateau_db": ("train", "ae_plateau_db", float),
    "ae_decay_fractions": ("train", "ae_decay_fractions", _tuple_of(float)),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "lambda_embed": ("weights", "embed", float),
    "lambda_att": ("weights", "att", float),
    "lambda_image": ("weights", "image", float),
    "stage_weights": ("weights", "stages", _tuple_of(float)),
    "channels": ("network", "channels", _tuple_of(int)),
    "stages": ("network", "stages", int),
    "recurrent": ("network", "recurrent", _parse_bool),
    "layered_lstm": ("network", "layered_lstm", _parse_bool),
    "skip_mode": ("network", "skip_mode", str),
    "use_rlcn": ("network", "use_rlcn", _parse_bool),
    "rlcn_window": ("network", "rlcn_window", int),
    "rlcn_epsilon": ("network", "rlcn_epsilon", float),
    "init_seed": ("network", "seed", _optional(int)),
    "streak_count": ("streak", "count", _tuple_of(int)),
    "streak_length": ("streak", "length", _tuple_of(float)),
    "streak_width": ("streak", "width", _tuple_of(float)),
    "streak_angle": ("streak", "angle", _tuple_of(float)),
    "streak_intensity": ("streak", "intensity", _tuple_of(float)),
    "streak_blur_sigma": ("streak", "blur_sigma", float),
    "streak_seed": ("streak", "seed", int),
}

VARIANTS = {
    "ecnet": {"recurrent": False, "layered_lstm": False, "stages": 1},
    "ecnet-ll": {"recurrent": True, "layered_lstm": True},
}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    out: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


class RunConfig:
    """Effective TrainConfig, NetworkConfig and StreakParams built from layered key=value sources."""

    def __init__(self, desk: bool = False):
        self.values: Dict[str, object] = {}
        train = desk_profile() if desk else TrainConfig()
        network = NetworkConfig(channels=DESK_CHANNELS) if desk else NetworkConfig()
        for key, (section, name, _) in KEYS.items():
            src = {"train": train, "weights": train.weights, "network": network, "streak": StreakParams()}[section]
            self.values[key] = getattr(src, name)
        self.values["init_seed"] = None      # follows ``seed`` unless set
        self.explicit: set = set()

    def apply(self, pairs: Dict[str, str], origin: str) -> None:
        for key, text in pairs.items():
            if key not in KEYS:
                raise ConfigError(f"{origin}: unknown key {key!r}")
            try:
                self.values[key] = KEYS[key][2](text)
                self.explicit.add(key)
            except ValueError as exc:
                raise ConfigError(f"{origin}: bad value for {key}: {exc}") from exc

    def section(self, name: str) -> dict:
        return {f: self.values[k] for k, (s, f, _) in KEYS.items() if s == name}

    def train(self) -> TrainConfig:
        d = self.section("train")
        d["weights"] = LossWeights(**{k: (list(v) if isinstance(v, tuple) else v)
                                      for k, v in self.section("weights").items()})
        if "epochs" in self.explicit and "decay_epochs" not in self.explicit:
            # keep the schedule shape when only the budget changes
            d["decay_epochs"] = ()
            return TrainConfig(**d).with_epochs(d["epochs"])
        return TrainConfig(**d)

    def network(self) -> NetworkConfig:
        d = self.section("network")
        if d["seed"] is None:
            d["seed"] = self.values["seed"]
        return NetworkConfig(**d)

    def streaks(self) -> StreakParams:
        return StreakParams(**self.section("streak"))

    def validate(self) -> None:
        self.train(), self.network(), self.streaks()

    def resolved(self) -> Dict[str, object]:
        """Values as the built configs see them (derived decay epochs, network seed)."""
        out = dict(self.values)
        tc, nc = self.train(), self.network()
        out["decay_epochs"] = tc.decay_epochs
        out["init_seed"] = nc.seed
        return out

    def echo(self, header: str = "") -> str:
        vals = self.resolved()
        head = f"# {header}\n" if header else ""
        return head + "".join(f"{k} = {_format(vals[k])}\n" for k in sorted(vals))

    def write_echo(self, out_dir, header: str = "") -> Path:
        path = Path(out_dir) / CONFIG_ECHO
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.echo(header))
        return path


def build_config(args) -> RunConfig:
    """defaults -> --desk profile -> --variant -> --config file -> named flags and --set (flags win)."""
    cfg = RunConfig(desk=getattr(args, "desk", False))
    variant = getattr(args, "variant", None)
    if variant:
        cfg.apply({k: _format(v) for k, v in VARIANTS[variant].items()}, f"--variant {variant}")
    if getattr(args, "config", None):
        cfg.apply(read_config_file(args.config), str(args.config))
    flags = {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            flags[key] = v if isinstance(v, str) else _format(v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        flags[k] = v
    cfg.apply(flags, "command line")
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


# ---------------------------------------------------------------- commands

def _progress(every: int):
    def cb(tr: Trainer, rec: dict) -> bool:
        if every and (rec["iter"] % every == 0 or rec["iter"] == tr.total_iterations):
            log.info("iter %d/%d  epoch %d  lr %.3g  loss %.5f  psnr %.2f dB", rec["iter"], tr.total_iterations,
                     rec["epoch"], rec["lr"], rec["total"], rec["psnr"])
        return False
    return cb


def _load_pairs(data, tau: float):
    index = load_dataset(data)
    if len(index) == 0:
        raise DatasetError(f"{data}: dataset is empty")
    log.info("loaded %d pairs from %s", len(index), data)
    return index.load_all(tau)


def cmd_synth(args) -> int:
    cfg = build_config(args)
    h, w = args.size
    pairs = make_synthetic_pairs(args.count, (h, w), cfg.streaks(), seed=args.seed, tau=cfg.values["tau"],
                                 quantize=True)
    manifest = write_synthetic_dataset(args.out, pairs)
    cfg.write_echo(args.out, f"synth count={args.count} seed={args.seed} size={h}x{w}")
    log.info("wrote %d pairs to %s", len(pairs), manifest.parent)
    return EXIT_OK


def cmd_rlcn(args) -> int:
    cfg = build_config(args)
    window = args.window if args.window is not None else cfg.values["rlcn_window"]
    eps = args.epsilon if args.epsilon is not None else cfg.values["rlcn_epsilon"]
    img = load_image(args.input)
    out = compute_rlcn(img, RlcnParams(window, eps))
    raw = Path(args.raw) if args.raw else Path(args.output).with_suffix(".ecni")
    write_raw(raw, out)
    # the PNG is min-max stretched per image; the raw dump keeps the values
    lo, hi = float(out.min()), float(out.max())
    save_image((out - lo) / (hi - lo) if hi > lo else out - lo, args.output)
    log.info("RLCN (window %d, epsilon %g) range [%.4g, %.4g] -> %s, %s", window, eps, lo, hi, args.output, raw)
    return EXIT_OK


def _resume(path, cfg: RunConfig, pairs, teacher, out) -> Trainer:
    """Continue under the archived config; only an explicit ``max_iterations`` extends the budget."""
    tr = Trainer.resume(path, pairs, teacher=teacher, out_dir=out)
    if "max_iterations" in cfg.explicit:
        tr.config = replace(tr.config, max_iterations=cfg.values["max_iterations"])
    return tr


def cmd_train_ae(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    cfg.write_echo(out, "train-ae")
    pairs = _load_pairs(args.data, cfg.values["tau"])
    tc = cfg.train()
    if args.resume:
        tr = _resume(args.resume, cfg, pairs, None, out)
        tr.run(callback=_progress(args.log_every))
    else:
        _, tr = train_autoencoder(pairs, tc, channels=cfg.network().channels, seed=cfg.network().seed,
                                  out_dir=out, callback=_progress(args.log_every))
    last = tr.log[-1] if tr.log else None
    if last:
        log.info("autoencoder done after %d iterations, last batch PSNR %.2f dB%s", tr.iteration, last["psnr"],
                 " (plateau)" if tr.stopped_early else "")
    log.info("checkpoint: %s", out / "ae.ckpt")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    cfg.write_echo(out, "train")
    tc, nc = cfg.train(), cfg.network()
    ae = None
    if args.ae:
        if not Path(args.ae).is_file():
            raise DatasetError(f"autoencoder checkpoint {args.ae} not found")
        ae = load_model(args.ae)
        if not isinstance(ae, RainAutoencoder):
            raise CheckpointError(f"{args.ae} is not an autoencoder checkpoint")
    elif tc.weights.embed > 0:
        raise ConfigError("training needs a pretrained autoencoder (--ae CKPT) unless lambda_embed = 0")
    pairs = _load_pairs(args.data, cfg.values["tau"])
    if args.resume:
        tr = _resume(args.resume, cfg, pairs, ae, out)
        tr.run(callback=_progress(args.log_every))
    else:
        _, tr = train_ecnet(pairs, ae, tc, nc, out_dir=out, callback=_progress(args.log_every))
    log.info("training done after %d iterations; checkpoint: %s", tr.iteration, out / "ecnet.ckpt")
    return EXIT_OK


def _load_net(path) -> EcNet:
    net = load_model(path)
    if not isinstance(net, EcNet):
        raise CheckpointError(f"{path} holds an autoencoder, not a deraining network")
    return net


def _image_files(path: Path) -> List[Path]:
    from .data import IMAGE_SUFFIXES
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_derain(args) -> int:
    net = _load_net(args.model)
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        jobs = [(p, dst / (p.stem + ".png")) for p in _image_files(src)]
    else:
        jobs = [(src, dst)]
    stages = args.stages if args.stages is not None else net.config.stages
    for inp, outp in jobs:
        img = load_image(inp)
        bg, outs, (h, w) = derain_image(net, img, stages)
        save_image(bg, outp)
        stem = outp.with_suffix("")
        if args.dump_stages:
            for st in outs:
                save_image(st.rain.data[0, :, :h, :w].transpose(1, 2, 0), f"{stem}_stage{st.stage}_rain.png")
        if args.dump_attention:
            if not net.gams:
                log.warning("%s has no attention modules; nothing to dump", args.model)
            for st in outs:
                for k, m in enumerate(st.maps):
                    f = 2 ** k
                    mh, mw = -(-h // f), -(-w // f)
                    save_image(m.data[0, :, :mh, :mw].transpose(1, 2, 0), f"{stem}_stage{st.stage}_att{k + 1}.png")
        log.info("%s -> %s (%d stages)", inp, outp, stages)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = None if args.identity else _load_net(args.model)
    index = load_dataset(args.data)
    res = evaluate_index(net, index, args.stages, y_channel=args.y_channel)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    ok = [r for r in res["per_image"] if "error" not in r]
    summary = {"summary": True, "images": len(ok), "failed": len(res["per_image"]) - len(ok),
               "mean_psnr": res["mean_psnr"], "mean_ssim": res["mean_ssim"],
               "channel": "y" if args.y_channel else "rgb"}
    with open(report, "w") as fh:
        for row in res["per_image"]:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    log.info("%d images: PSNR %.3f dB, SSIM %.4f -> %s", len(ok), res["mean_psnr"], res["mean_ssim"], report)
    if index.pairs and not ok:
        raise DatasetError("no image could be evaluated")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        log.info("%s", r.line())
    failed = [r for r in results if not r.ok]
    log.info("%d checks, %d failed", len(results), len(failed))
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def _size(text: str) -> Tuple[int, int]:
    parts = [int(x) for x in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"size must be N or H,W, got {text!r}")
    return parts[0], parts[1]


def _config_flags(p: argparse.ArgumentParser, training: bool) -> None:
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    if training:
        p.add_argument("--desk", action="store_true", help="desk profile: channels 8,16,32,64, patch 32, batch 8")
        p.add_argument("--variant", choices=sorted(VARIANTS), help="ecnet = single-shot, ecnet-ll = layered LSTM")
        for key in ("epochs", "lr", "batch", "patch", "seed", "stages", "channels", "max_iterations"):
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper())
        p.add_argument("--log-every", type=int, default=50, help="progress line every N iterations (0 = quiet)")
        p.add_argument("--resume", help="continue from a training checkpoint")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecnet", description="Single-image deraining with rain embedding consistency.")
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only warnings and errors on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    p = add("synth", help="write a synthetic rain/norain/mask dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(32, 32), help="N or H,W (default 32)")
    _config_flags(p, training=False)
    p.set_defaults(func=cmd_synth)

    p = add("rlcn", help="rectified local contrast normalization of one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True, help="visualization PNG")
    p.add_argument("--raw", help="ECNI float dump (default: OUT with .ecni suffix)")
    p.add_argument("--window", type=int)
    p.add_argument("--epsilon", type=float)
    _config_flags(p, training=False)
    p.set_defaults(func=cmd_rlcn)

    p = add("train-ae", help="pretrain the rain-to-rain autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p, training=True)
    p.set_defaults(func=cmd_train_ae)

    p = add("train", help="train the deraining network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ae", help="pretrained autoencoder checkpoint")
    _config_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = add("derain", help="derain an image or a directory of images")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--stages", type=int, help="recurrent stages (default: the model's, 6 unless changed)")
    p.add_argument("--dump-attention", action="store_true", help="write every attention map of every stage")
    p.add_argument("--dump-stages", action="store_true", help="write each stage's rain layer")
    p.set_defaults(func=cmd_derain)

    p = add("eval", help="PSNR/SSIM report over a paired dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--identity", action="store_true", help="score the rainy inputs themselves")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON lines: one per image plus a summary")
    p.add_argument("--stages", type=int)
    p.add_argument("--y-channel", action="store_true", help="score luma instead of RGB")
    p.set_defaults(func=cmd_eval)

    p = add("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _thread_limit():
    raw = os.environ.get("ECNET_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"ECNET_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    root = logging.getLogger("ecnet")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except NonFiniteError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (OSError, DatasetError, CheckpointError, ConfigError) as exc:
        log.error("error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
