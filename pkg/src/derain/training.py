"""Alternating adversarial training, checkpoints and inference."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .attention import AttentiveRecurrentNet, attention_loss
from .autoencoder import (
    ContextualAutoencoder,
    IdentityExtractor,
    NonFiniteLossError,
    RandomFeatureExtractor,
    VGGExtractor,
    gan_term,
    generator_loss,
    multiscale_loss,
    perceptual_loss,
)
from .discriminator import AttentiveDiscriminator, discriminator_loss, map_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_att", "l_m", "l_p", "l_gan", "l_d", "l_map", "psnr", "ssim")

# variant -> (attentive generator, discriminator kind)
VARIANT_LAYOUT = {
    "A": (False, None),
    "A+D": (False, "plain"),
    "A+AD": (False, "attentive"),
    "AA+AD": (True, "attentive"),
}

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; ``last_checkpoint`` names the last good save."""

    def __init__(self, message, step, last_checkpoint=None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    variant: str = "AA+AD"
    steps: int = 1000
    batch_size: int = 2
    learning_rate: float = 2e-4
    seed: int = 0
    N: int = 4
    theta: float = 0.8
    gamma: float = 0.05
    lambdas: tuple[float, float, float] = (0.6, 0.8, 1.0)
    gan_weight: float = 1e-2
    image_size: int = 64
    feat_channels: int = 32
    lstm_channels: int = 32
    ae_width: int = 32
    disc_widths: tuple[int, ...] = (8, 16, 32, 64, 64, 64, 32)
    disc_fc: int = 1024
    disc_tap: int = 5
    beta1: float = 0.5
    beta2: float = 0.999
    share_weights: bool = True
    peephole: str = "pixel"
    skip: str = "add"
    perceptual: str = "random"
    perceptual_layer: str = ""
    eval_every: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"
    # linear decay of the learning rate to zero over the last lr_decay_steps steps; 0 keeps it constant
    lr_decay_steps: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_LAYOUT:
            raise ValueError(f"variant must be one of {list(VARIANT_LAYOUT)}, got {self.variant!r}")
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.disc_widths = tuple(int(v) for v in self.disc_widths)
        if len(self.lambdas) != 3:
            raise ValueError("lambdas needs three weights (1/4, 1/2, 1 scale)")
        if self.image_size < 8 or self.image_size % 4:
            raise ValueError(f"image_size must be >= 8 and divisible by 4, got {self.image_size}")
        if self.lr_decay_steps < 0:
            raise ValueError("lr_decay_steps must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.N < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and N >= 1 required")

    @property
    def attentive_generator(self):
        return VARIANT_LAYOUT[self.variant][0]

    @property
    def discriminator_kind(self):
        return VARIANT_LAYOUT[self.variant][1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def overrides(self):
        """Fields whose value differs from the defaults."""
        base = TrainConfig(variant=self.variant)
        return {k: v for k, v in self.to_dict().items() if base.to_dict()[k] != v and k != "variant"}


# --- model -----------------------------------------------------------------------


class AttentiveGAN(nn.Module):
    """Generator (optional attentive-recurrent net + autoencoder) and optional discriminator."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        size = (config.image_size, config.image_size)
        self.attention = (
            AttentiveRecurrentNet(
                size,
                config.feat_channels,
                config.lstm_channels,
                steps=config.N,
                share_weights=config.share_weights,
                peephole=config.peephole,
            )
            if config.attentive_generator
            else None
        )
        self.autoencoder = ContextualAutoencoder(width=config.ae_width, skip=config.skip)
        kind = config.discriminator_kind
        self.discriminator = (
            AttentiveDiscriminator(
                size,
                widths=config.disc_widths,
                fc_features=config.disc_fc,
                attentive=kind == "attentive",
                tap=config.disc_tap,
            )
            if kind
            else None
        )

    def generator_parameters(self):
        params = list(self.autoencoder.parameters())
        if self.attention is not None:
            params = list(self.attention.parameters()) + params
        return params

    def generate(self, image):
        """Returns ``(output, scales, rollout)``; rollout is None without attention."""
        if self.attention is not None:
            rollout = self.attention.rollout(image)
            att = rollout.final
        else:
            rollout = None
            att = image.new_full((image.shape[0], 1, *image.shape[-2:]), 0.5)
        output, scales = self.autoencoder(image, att)
        return output, scales, rollout


def build_extractor(config: TrainConfig):
    if config.perceptual == "random":
        layer = int(config.perceptual_layer) if config.perceptual_layer else None
        return RandomFeatureExtractor(layer=layer)
    if config.perceptual == "identity":
        return IdentityExtractor()
    if config.perceptual == "vgg":
        return VGGExtractor(layer=config.perceptual_layer or "relu2_2", weights="DEFAULT")
    raise ValueError(f"unknown perceptual extractor {config.perceptual!r}")


def _dtype(config):
    return {"float32": torch.float32, "float64": torch.float64}[config.dtype]


@contextmanager
def _float32_init():
    # draw initial weights in float32 whatever the process default, then cast
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def pairs_to_tensors(pairs, dtype=torch.float32):
    """Stack pairs into ``(degraded, clean, mask)`` tensors, NCHW."""
    shapes = {p.degraded.shape for p in pairs}
    if len(shapes) != 1:
        raise ValueError(f"batch images must share one size, got {sorted(shapes)}")
    degraded = torch.as_tensor(np.stack([p.degraded for p in pairs]), dtype=dtype).permute(0, 3, 1, 2)
    clean = torch.as_tensor(np.stack([p.clean for p in pairs]), dtype=dtype).permute(0, 3, 1, 2)
    mask = torch.as_tensor(np.stack([p.mask for p in pairs]), dtype=dtype)[:, None]
    return degraded.contiguous(), clean.contiguous(), mask.contiguous()


# --- checkpoint format ---------------------------------------------------------------
#
# magic "DRCK" | u32 version | u64 header length | JSON header | tensor bytes
# Header lists each tensor's name, dtype, shape, byte offset and length; tensor data
# is row-major little-endian.

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "u1"),
}
_DTYPE_NAMES = {v[0]: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    parameters: dict[str, torch.Tensor]
    config: TrainConfig
    step: int
    rng_state: bytes = b""
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def save(self, path):
        path = Path(path)
        entries, blobs, offset = [], [], 0
        for name, tensor in self.parameters.items():
            tensor = tensor.detach().cpu().contiguous()
            dname = _DTYPE_NAMES[tensor.dtype]
            data = tensor.numpy().astype(_DTYPES[dname][1], copy=False).tobytes(order="C")
            entries.append({"name": name, "dtype": dname, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {
            "version": self.version,
            "step": self.step,
            "config": self.config.to_dict(),
            "rng_state": self.rng_state.hex(),
            "extra": self.extra,
            "tensors": entries,
        }
        raw = json.dumps(header).encode("utf-8")
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", self.version, len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = 4 + struct.calcsize("<IQ")
        header = json.loads(data[start : start + hlen])
        base = start + hlen
        params = {}
        for e in header["tensors"]:
            torch_dtype, np_dtype = _DTYPES[e["dtype"]]
            buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=np_dtype).reshape(e["shape"]).copy()
            params[e["name"]] = torch.from_numpy(arr).to(torch_dtype)
        return cls(
            parameters=params,
            config=TrainConfig.from_dict(header["config"]),
            step=header["step"],
            rng_state=bytes.fromhex(header["rng_state"]),
            extra=header["extra"],
            version=version,
        )


def _optimizer_tensors(prefix, optimizer):
    sd = optimizer.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}.{idx}.{key}"] = torch.as_tensor(val)
    return tensors, sd["param_groups"]


def _load_optimizer(prefix, optimizer, tensors, groups):
    state = {}
    for name, val in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.rsplit(".", 2)
        state.setdefault(int(idx), {})[key] = val
    for g in groups:
        g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})


# --- training ---------------------------------------------------------------------


class Trainer:
    """Owns the model, optimizers and batch sampler for one training run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.dtype = _dtype(config)
        torch.manual_seed(config.seed)
        with _float32_init():
            self.model = AttentiveGAN(config).to(self.dtype)
            self.extractor = build_extractor(config).to(self.dtype)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.model.generator_parameters(), lr=config.learning_rate, betas=betas)
        self.opt_d = (
            torch.optim.Adam(self.model.discriminator.parameters(), lr=config.learning_rate, betas=betas)
            if self.model.discriminator is not None
            else None
        )
        self.rng = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.last_checkpoint = None

    # -- state

    def checkpoint(self):
        params = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        extra = {}
        t, groups = _optimizer_tensors("optim.g", self.opt_g)
        params.update(t)
        extra["optim.g"] = groups
        if self.opt_d is not None:
            t, groups = _optimizer_tensors("optim.d", self.opt_d)
            params.update(t)
            extra["optim.d"] = groups
        rng = self.rng.get_state().numpy().tobytes()
        return Checkpoint(params, self.config, self.step, rng, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None):
        trainer = cls(config or ckpt.config)
        trainer.load_state(ckpt)
        return trainer

    def load_state(self, ckpt: Checkpoint):
        model_sd = {k[len("model.") :]: v for k, v in ckpt.parameters.items() if k.startswith("model.")}
        self.model.load_state_dict(model_sd)
        if "optim.g" in ckpt.extra:
            _load_optimizer("optim.g", self.opt_g, ckpt.parameters, ckpt.extra["optim.g"])
        if self.opt_d is not None and "optim.d" in ckpt.extra:
            _load_optimizer("optim.d", self.opt_d, ckpt.parameters, ckpt.extra["optim.d"])
        if ckpt.rng_state:
            self.rng.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
        self.step = ckpt.step

    def save(self, path):
        self.checkpoint().save(path)
        self.last_checkpoint = Path(path)
        return self.last_checkpoint

    # -- steps

    def sample(self, data):
        degraded, clean, mask = data
        n = degraded.shape[0]
        idx = torch.randperm(n, generator=self.rng)[: self.config.batch_size]
        if n < self.config.batch_size:
            extra = torch.randint(n, (self.config.batch_size - n,), generator=self.rng)
            idx = torch.cat([idx, extra])
        return degraded[idx], clean[idx], mask[idx]

    def learning_rate(self, step):
        """Rate used for 1-based ``step``."""
        cfg = self.config
        if not cfg.lr_decay_steps:
            return cfg.learning_rate
        left = cfg.steps - step + 1
        return cfg.learning_rate * min(1.0, max(left, 0) / cfg.lr_decay_steps)

    def _map_target(self, rollout, mask):
        # no attentive generator: the attentive discriminator is supervised by the mask
        return rollout.final.detach() if rollout is not None else mask

    def train_step(self, batch):
        """One discriminator update then one generator update.

        ``batch`` is a list of SyntheticPair or a ``(degraded, clean, mask)`` tuple.
        """
        cfg = self.config
        if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "degraded"):
            batch = pairs_to_tensors(batch, self.dtype)
        degraded, clean, mask = batch
        if degraded.shape[0] == 0:
            raise ValueError("empty batch")
        disc = self.model.discriminator
        attentive_d = disc is not None and disc.attentive
        record = dict.fromkeys(LOG_COLUMNS[1:])
        lr = self.learning_rate(self.step + 1)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups if opt is not None else ():
                group["lr"] = lr

        output, scales, rollout = self.model.generate(degraded)

        if disc is not None:
            fake = disc(output.detach())
            real = disc(clean)
            target = self._map_target(rollout, mask) if attentive_d else None
            l_d = discriminator_loss(fake, real, target, gamma=cfg.gamma)
            if attentive_d:
                with torch.no_grad():
                    record["l_map"] = float(map_loss(fake, real, target))
            record["l_d"] = float(l_d.detach())
            self.opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            self.opt_d.step()

        l_att = attention_loss(rollout, mask, cfg.theta) if rollout is not None else 0.0
        l_m = multiscale_loss(scales, clean, cfg.lambdas)
        l_p = perceptual_loss(output, clean, self.extractor)
        if disc is not None:
            l_gan = gan_term(disc(output).logit)
        else:
            l_gan = 0.0
        l_g = generator_loss(l_gan, l_att, l_m, l_p, gan_weight=cfg.gan_weight)
        self.opt_g.zero_grad(set_to_none=True)
        l_g.backward()
        self.opt_g.step()
        if disc is not None:
            # the generator pass left gradients on D; they are cleared before D's next update
            self.opt_d.zero_grad(set_to_none=True)
            record["l_gan"] = float(l_gan.detach())
        if rollout is not None:
            record["l_att"] = float(l_att.detach())
        record["l_m"] = float(l_m.detach())
        record["l_p"] = float(l_p.detach())
        self.step += 1
        record["step"] = self.step
        return record

    @torch.no_grad()
    def evaluate_pair(self, degraded, clean):
        self.model.eval()
        out, _, _ = self.model.generate(degraded)
        self.model.train()
        o = out[0].permute(1, 2, 0).double().numpy()
        c = clean[0].permute(1, 2, 0).double().numpy()
        return metrics.psnr(o, c), metrics.ssim(o, c)

    def fit(self, pairs, steps=None, log_path=None, checkpoint_dir=None, eval_pair=None, progress=None):
        """Train until ``steps`` total steps; returns the list of loss records.

        Log rows append to ``log_path``; checkpoints land in ``checkpoint_dir``
        every ``checkpoint_every`` steps and at the end.
        """
        cfg = self.config
        steps = cfg.steps if steps is None else steps
        data = pairs_to_tensors(pairs, self.dtype) if not isinstance(pairs, tuple) else pairs
        if data[0].shape[-1] != cfg.image_size or data[0].shape[-2] != cfg.image_size:
            h, w = data[0].shape[-2:]
            raise ValueError(f"training images must be {cfg.image_size}x{cfg.image_size}, got {h}x{w}")
        ev = pairs_to_tensors([eval_pair], self.dtype)[:2] if eval_pair is not None else None
        ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        if ckdir is not None:
            ckdir.mkdir(parents=True, exist_ok=True)

        writer = fh = None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists() or log_path.stat().st_size == 0
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(LOG_COLUMNS)
        records = []
        try:
            while self.step < steps:
                try:
                    rec = self.train_step(self.sample(data))
                except NonFiniteLossError as exc:
                    raise TrainingAborted(
                        f"step {self.step + 1}: {exc}; last good checkpoint: {self.last_checkpoint}",
                        self.step + 1,
                        self.last_checkpoint,
                    ) from exc
                if ev is not None and cfg.eval_every and self.step % cfg.eval_every == 0:
                    rec["psnr"], rec["ssim"] = self.evaluate_pair(*ev)
                records.append(rec)
                if writer is not None:
                    writer.writerow([_fmt(rec[c]) for c in LOG_COLUMNS])
                    fh.flush()
                if ckdir is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(ckdir / f"step_{self.step:06d}.ckpt")
                if progress is not None:
                    progress(rec)
        finally:
            if fh is not None:
                fh.close()
        if ckdir is not None:
            self.save(ckdir / "final.ckpt")
        return records


def truncate_log(path, step):
    """Drop log rows after ``step`` so a resumed run continues the file cleanly."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(kept))
    tmp.replace(path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- inference --------------------------------------------------------------------


def load_generator(checkpoint):
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    with _float32_init():
        model = AttentiveGAN(checkpoint.config).to(_dtype(checkpoint.config))
    model_sd = {k[len("model.") :]: v for k, v in checkpoint.parameters.items() if k.startswith("model.")}
    model.load_state_dict(model_sd)
    model.eval()
    return model


def check_resolution(shape, image_size=None):
    h, w = shape[:2]
    if h % 4 or w % 4 or h < 16 or w < 16:
        raise ValueError(
            f"image is {h}x{w}; height and width must be >= 16 and divisible by 4 "
            f"(resize or crop to e.g. {max(16, h - h % 4)}x{max(16, w - w % 4)})"
        )
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ValueError(f"image is {h}x{w} but this checkpoint was trained at {image_size}x{image_size}; resize to match")


@torch.no_grad()
def infer(image, checkpoint, model=None):
    """Restore one ``(H, W, 3)`` image.

    Returns ``(output, maps)`` as numpy arrays; ``maps`` lists the per-step
    attention maps ``(H, W)`` and is empty for non-attentive variants.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    image = np.asarray(image, dtype=np.float64)
    check_resolution(image.shape, checkpoint.config.image_size)
    model = model or load_generator(checkpoint)
    dtype = _dtype(checkpoint.config)
    x = torch.as_tensor(image, dtype=dtype).permute(2, 0, 1)[None].contiguous()
    out, _, rollout = model.generate(x)
    output = out[0].permute(1, 2, 0).double().numpy()
    maps = [a[0, 0].double().numpy() for a in rollout.maps] if rollout is not None else []
    return output, maps


def evaluate_checkpoint(checkpoint, pairs, variant=None):
    """Run inference on ``pairs`` and score against their clean images."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    if variant is not None and checkpoint.config.variant != variant:
        raise ValueError(f"checkpoint was trained as {checkpoint.config.variant!r}, not {variant!r}")
    model = load_generator(checkpoint)
    outputs, ious = [], []
    for pair in pairs:
        out, maps = infer(pair.degraded, checkpoint, model=model)
        outputs.append(out)
        if maps:
            ious.append(metrics.attention_alignment(maps, pair.mask))
    iou_steps = [float(v) for v in np.mean(ious, axis=0)] if ious else None
    return metrics.evaluate_outputs(
        checkpoint.config.variant, outputs, [p.clean for p in pairs], ids=[p.id for p in pairs], attention_iou=iou_steps
    )
