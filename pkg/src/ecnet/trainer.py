"""Optimization: Adam, global-norm clipping, step schedule, training loops, evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, load_state, save_checkpoint, state_dict
from .data import DEFAULT_TAU, DatasetIndex, RainPair, pairs_to_batch
from .losses import LossWeights, Targets, loss_recurrent, loss_self, psnr, ssim_np, to_luma
from .models import EcNet, NetworkConfig, RainAutoencoder
from .rlcn import compute_rlcn
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "epoch", "lr", "total", "grad_norm", "scale")


class NonFiniteError(RuntimeError):
    def __init__(self, message: str, iteration: int = -1, batch: Sequence[int] = ()):
        super().__init__(message)
        self.iteration = iteration
        self.batch = list(batch)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    decay_epochs: Tuple[int, ...] = (25, 50, 75)
    decay_factor: float = 0.2
    clip: float = 5.0
    batch: int = 16
    patch: int = 96
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = DEFAULT_TAU
    max_iterations: Optional[int] = None
    freeze_decoder: bool = False
    ae_epochs: int = 30
    ae_plateau_epochs: int = 5
    ae_plateau_db: float = 0.1
    ae_decay_fractions: Tuple[float, ...] = (0.75,)
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if min(self.epochs, self.batch, self.patch) <= 0 or self.lr <= 0 or self.clip <= 0:
            raise ValueError("epochs, batch, patch, lr and clip must be positive")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay epochs must be ascending")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError("decay epochs must precede the final epoch")

    def with_epochs(self, epochs: int, fractions: Sequence[float] = (0.25, 0.5, 0.75)) -> "TrainConfig":
        """Same schedule shape (decays at the given fractions) over a different epoch budget."""
        # the first epoch always runs at the base rate
        decays = tuple(sorted(d for d in {max(2, round(epochs * f)) for f in fractions} if d < epochs))
        return replace(self, epochs=epochs, decay_epochs=decays)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["ae_decay_fractions"] = list(self.ae_decay_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        for k in ("decay_epochs", "ae_decay_fractions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


DESK_CHANNELS = (8, 16, 32, 64)


def desk_profile(config: TrainConfig = None) -> TrainConfig:
    """Reduced patch and batch size for CPU runs (channels go in the NetworkConfig)."""
    return replace(config or TrainConfig(), patch=32, batch=8)


# ---------------------------------------------------------------- optimizer pieces

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update from each parameter's ``grad``."""
    bad = [k for k, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteError(f"non-finite gradients in {bad[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def global_norm(params: Dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                         for p in params.values() if p.grad is not None))


def clip_gradients(params: Dict[str, Tensor], threshold: float = 5.0) -> Tuple[float, float]:
    """Scale all gradients so the global L2 norm is at most ``threshold``.

    Returns (scale applied, norm before clipping).
    """
    norm = global_norm(params)
    if norm <= threshold or norm == 0.0:
        return 1.0, norm
    scale = threshold / norm
    for p in params.values():
        if p.grad is not None:
            p.grad *= p.grad.dtype.type(scale)
    return scale, norm


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule; a decay epoch already uses the decayed rate."""
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {config.epochs}]")
    k = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.lr * config.decay_factor ** k


# ---------------------------------------------------------------- training loop

class Trainer:
    """Resumable training state for the autoencoder or the deraining network.

    Batches are a pure function of (seed, epoch, position in epoch), so a run
    restored from a checkpoint continues exactly where it stopped.
    """

    def __init__(self, model, config: TrainConfig, pairs: Sequence[RainPair],
                 teacher: Optional[RainAutoencoder] = None, out_dir=None):
        if not pairs:
            raise ValueError("no training pairs")
        self.model = model
        self.kind = "ae" if isinstance(model, RainAutoencoder) else "ecnet"
        self.config = config
        self.pairs = list(pairs)
        self.teacher = teacher
        self.out_dir = Path(out_dir) if out_dir else None
        self.divisor = 2 ** (len(self._channels()) - 1)
        for p in self.pairs:
            if min(p.shape) < config.patch:
                raise ValueError(f"pair {p.name} smaller than patch size {config.patch}")
        if config.patch % self.divisor:
            raise ValueError(f"patch {config.patch} not divisible by {self.divisor}")
        self.guides = None
        if self.kind == "ecnet" and model.config.use_rlcn:
            self.guides = [compute_rlcn(p.rainy, model.config.rlcn_params) for p in self.pairs]
        params = model.parameters()
        if self.kind == "ecnet" and config.freeze_decoder:
            params = {k: v for k, v in params.items() if not k.startswith("decoder.")
                      or k.startswith("decoder.proj.")}
        self.params = params
        self.adam = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
        self.iteration = 0
        self.epoch_psnr: List[float] = []
        self._epoch_acc: List[float] = []
        self.log: List[dict] = []
        self.stopped_early = False

    def _channels(self):
        return self.model.channels if self.kind == "ae" else self.model.config.channels

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(len(self.pairs) / self.config.batch)

    @property
    def total_iterations(self) -> int:
        total = self.config.epochs * self.iters_per_epoch
        if self.config.max_iterations is not None:
            total = min(total, self.config.max_iterations)
        return total

    def epoch_plan(self, epoch: int) -> List[List[Tuple[int, int, int]]]:
        rng = np.random.default_rng([self.config.seed, epoch])
        order = rng.permutation(len(self.pairs))
        size = self.config.patch
        items = []
        for k in order:
            h, w = self.pairs[k].shape
            items.append((int(k), int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))))
        b = self.config.batch
        return [items[i:i + b] for i in range(0, len(items), b)]

    def _crop(self, crops):
        s = self.config.patch
        sl = lambda y, x: (slice(y, y + s), slice(x, x + s))
        pairs = [RainPair(*(getattr(self.pairs[k], a)[sl(y, x)] for a in ("rainy", "background", "rain", "mask")))
                 for k, y, x in crops]
        rainy, bg, rain, mask = pairs_to_batch(pairs)
        guide = None
        if self.guides is not None:
            guide = np.ascontiguousarray(np.stack([self.guides[k][sl(y, x)] for k, y, x in crops]).transpose(0, 3, 1, 2))
        return rainy, bg, rain, mask, guide

    def _forward_loss(self, batch):
        rainy, bg, rain, mask, guide = batch
        if self.kind == "ae":
            with T.Tape() as tape:
                _, r_hat = self.model(Tensor(rain))
                loss = loss_self(Tensor(rain), r_hat)
            rec = {"stage_totals": [float(loss.data)], "components": [{"self": float(loss.data)}],
                   "psnr": psnr(r_hat.data, rain)}
            return tape, loss, rec
        w = self.config.weights
        z_ideal = None
        if self.teacher is not None and w.embed > 0:
            with T.no_grad():
                z_ideal, _, _ = self.teacher.encoder(Tensor(rain))
        with T.Tape() as tape:
            outs = self.model(Tensor(rainy), None if guide is None else Tensor(guide))
            targets = Targets(Tensor(bg), mask, z_ideal)
            loss, parts, totals = loss_recurrent(outs, targets, w)
        rec = {"stage_totals": totals, "components": parts,
               "psnr": psnr(np.clip(outs[-1].background.data, 0, 1), bg)}
        return tape, loss, rec

    def step(self) -> dict:
        ipe = self.iters_per_epoch
        epoch = self.iteration // ipe + 1
        pos = self.iteration % ipe
        crops = self.epoch_plan(epoch)[pos]
        lr = lr_at(epoch, self.config)
        self.model.zero_grad()
        tape, loss, rec = self._forward_loss(self._crop(crops))
        total = float(loss.data)
        if not math.isfinite(total):
            self._abort(f"non-finite loss {total}", crops)
        tape.backward(loss)
        if not all(np.all(np.isfinite(p.grad)) for p in self.params.values() if p.grad is not None):
            self._abort("non-finite gradient", crops)
        scale, norm = clip_gradients(self.params, self.config.clip)
        adam_step(self.params, self.adam, lr)
        for p in self.model.parameters().values():
            p.grad = None
        self.iteration += 1
        rec.update(iter=self.iteration, epoch=epoch, lr=lr, total=total, grad_norm=norm, scale=scale)
        self.log.append(rec)
        self._epoch_acc.append(rec["psnr"])
        if pos == ipe - 1:
            self.epoch_psnr.append(float(np.mean(self._epoch_acc)))
            self._epoch_acc = []
        return rec

    def _abort(self, why: str, crops) -> None:
        batch = [k for k, _, _ in crops]
        if self.out_dir is not None:
            self.save(self.out_dir / "last_good.ckpt")
        raise NonFiniteError(f"{why} at iteration {self.iteration + 1}, batch pairs {batch}",
                             self.iteration + 1, batch)

    def _plateaued(self) -> bool:
        k = self.config.ae_plateau_epochs
        if self.kind != "ae" or k <= 0 or len(self.epoch_psnr) <= k:
            return False
        recent = self.epoch_psnr[-k:]
        return max(recent) - self.epoch_psnr[-k - 1] < self.config.ae_plateau_db

    def run(self, max_iterations: Optional[int] = None,
            callback: Optional[Callable[["Trainer", dict], bool]] = None) -> List[dict]:
        """Train until the budget is spent, the plateau rule fires, or ``callback`` returns True."""
        stop_at = self.total_iterations if max_iterations is None else min(max_iterations, self.total_iterations)
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / f"{self.kind}_train.log"
            log_fh = open(log_path, "a")
            if log_path.stat().st_size == 0:
                log_fh.write("# iter\tstage_losses...\ttotal\tlr\tgrad_norm\tscale\n")
        try:
            while self.iteration < stop_at:
                rec = self.step()
                if log_fh is not None:
                    log_fh.write(format_log_record(rec) + "\n")
                every = self.config.checkpoint_every
                if self.out_dir is not None and every and self.iteration % every == 0:
                    self.save(self.out_dir / f"{self.kind}.ckpt")
                if callback is not None and callback(self, rec):
                    self.stopped_early = True
                    break
                if rec["iter"] % self.iters_per_epoch == 0 and self._plateaued():
                    logger.info("reconstruction PSNR plateaued at epoch %d", rec["epoch"])
                    self.stopped_early = True
                    break
        finally:
            if log_fh is not None:
                log_fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / f"{self.kind}.ckpt")
        return self.log

    # -------------------------------------------------------------- checkpoints

    def checkpoint(self) -> Checkpoint:
        tensors = state_dict(self.model)
        for k in self.adam.m:
            tensors[f"adam.m.{k}"] = self.adam.m[k].copy()
            tensors[f"adam.v.{k}"] = self.adam.v[k].copy()
        meta = model_meta(self.model)
        meta.update(train=self.config.to_dict(), iteration=self.iteration, adam_step=self.adam.step,
                    epoch=self.iteration // self.iters_per_epoch,
                    rng={"scheme": "per-epoch", "seed": self.config.seed},
                    epoch_psnr=self.epoch_psnr, epoch_acc=self._epoch_acc)
        return Checkpoint(meta, tensors)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, path, pairs: Sequence[RainPair], teacher: Optional[RainAutoencoder] = None,
               out_dir=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        tr = cls(model, TrainConfig.from_dict(ckpt.meta["train"]), pairs, teacher, out_dir)
        tr.iteration = int(ckpt.meta["iteration"])
        tr.adam.step = int(ckpt.meta["adam_step"])
        tr.epoch_psnr = list(ckpt.meta.get("epoch_psnr", []))
        tr._epoch_acc = list(ckpt.meta.get("epoch_acc", []))
        for name, arr in ckpt.tensors.items():
            if name.startswith("adam.m."):
                tr.adam.m[name[7:]] = arr.copy()
            elif name.startswith("adam.v."):
                tr.adam.v[name[7:]] = arr.copy()
            elif not name.startswith("model."):
                raise ValueError(f"unknown tensor {name} in {path}")
        return tr


def model_meta(model) -> dict:
    if isinstance(model, RainAutoencoder):
        return {"kind": "ae", "network": {"channels": list(model.channels)}}
    return {"kind": "ecnet", "network": model.config.to_dict()}


def model_from_checkpoint(ckpt: Checkpoint):
    kind = ckpt.meta.get("kind")
    if kind == "ae":
        model = RainAutoencoder(ckpt.meta["network"]["channels"])
    elif kind == "ecnet":
        model = EcNet(NetworkConfig.from_dict(ckpt.meta["network"]))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    load_state(model, {k: v for k, v in ckpt.tensors.items() if k.startswith("model.")})
    return model


def save_model(path, model, extra: Optional[dict] = None) -> None:
    meta = model_meta(model)
    meta.update(extra or {})
    save_checkpoint(path, Checkpoint(meta, state_dict(model)))


def load_model(path):
    return model_from_checkpoint(load_checkpoint(path))


def format_log_record(rec: dict) -> str:
    fields = [str(rec["iter"])] + [f"{v:.9g}" for v in rec["stage_totals"]]
    fields += [f"{rec['total']:.9g}", f"{rec['lr']:.9g}", f"{rec['grad_norm']:.9g}", f"{rec['scale']:.9g}"]
    return "\t".join(fields)


def train_autoencoder(pairs: Sequence[RainPair], config: TrainConfig, channels=DESK_CHANNELS,
                      seed: Optional[int] = None, out_dir=None, max_iterations=None, callback=None):
    """Pretrain the rain-to-rain autoencoder with the self-supervision loss."""
    ae = RainAutoencoder(channels, seed=config.seed if seed is None else seed)
    tr = Trainer(ae, config.with_epochs(config.ae_epochs, config.ae_decay_fractions), pairs, out_dir=out_dir)
    tr.run(max_iterations, callback)
    return ae, tr


def train_ecnet(pairs: Sequence[RainPair], ae: Optional[RainAutoencoder], config: TrainConfig,
                net_config: NetworkConfig, out_dir=None, max_iterations=None, callback=None):
    """Train the deraining network against a frozen autoencoder teacher.

    The decoder starts from the autoencoder's weights (skip projections zeroed).
    """
    from .models import init_decoder_from_ae

    net = EcNet(net_config)
    if ae is not None:
        init_decoder_from_ae(net, ae)
    tr = Trainer(net, config, pairs, teacher=ae, out_dir=out_dir)
    tr.run(max_iterations, callback)
    return net, tr


# ---------------------------------------------------------------- evaluation

def pad_to_multiple(img: np.ndarray, divisor: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Reflect-pad an N x C x H x W batch at the bottom/right."""
    h, w = img.shape[2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def derain_image(net: EcNet, rainy: np.ndarray, stages: Optional[int] = None):
    """Full-image inference on H x W x 3; returns (background, stage outputs cropped lazily)."""
    from .models import derain

    x = np.ascontiguousarray(rainy.transpose(2, 0, 1)[None].astype(np.float32))
    xp, (h, w) = pad_to_multiple(x, net.config.divisor)
    bg, outs = derain(net, xp, stages)
    return bg[0, :, :h, :w].transpose(1, 2, 0), outs, (h, w)


def evaluate(net: EcNet, pairs: Sequence[RainPair], stages: Optional[int] = None, y_channel: bool = False) -> dict:
    """Per-image and mean PSNR / SSIM of derained full images."""
    rows = []
    for p in pairs:
        bg_hat, _, _ = derain_image(net, p.rainy, stages)
        rows.append(image_metrics(p.name, np.clip(bg_hat, 0, 1), p.background, y_channel))
    return summarize(rows)


def image_metrics(name: str, pred: np.ndarray, target: np.ndarray, y_channel: bool = False) -> dict:
    a = pred.transpose(2, 0, 1)
    b = target.transpose(2, 0, 1)
    if y_channel:
        a, b = to_luma(a), to_luma(b)
    return {"file": name, "psnr": psnr(a, b), "ssim": ssim_np(a, b)}


def summarize(rows: List[dict]) -> dict:
    ok = [r for r in rows if "error" not in r]
    return {"per_image": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in ok])) if ok else float("nan"),
            "mean_ssim": float(np.mean([r["ssim"] for r in ok])) if ok else float("nan")}


def evaluate_index(net: Optional[EcNet], index: DatasetIndex, stages: Optional[int] = None, y_channel: bool = False,
                   tau: float = DEFAULT_TAU) -> dict:
    """Like :func:`evaluate` but loads lazily; unreadable pairs are reported and skipped.

    With ``net=None`` the rainy input itself is scored (the do-nothing baseline).
    """
    rows = []
    for k in range(len(index)):
        try:
            p = index.load(k, tau)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", index.pairs[k][0], exc)
            rows.append({"file": str(index.pairs[k][0]), "error": str(exc)})
            continue
        bg_hat = p.rainy if net is None else derain_image(net, p.rainy, stages)[0]
        rows.append(image_metrics(p.name, np.clip(bg_hat, 0, 1), p.background, y_channel))
    return summarize(rows)
