"""Conditional GAN translator (pix2pix-style) from convolution to multislice images.

The generator is a U-Net that runs down to a 1x1 bottleneck; the discriminator
is a patch classifier over the channel-concatenated (conv, candidate) pair.
Images enter the networks in model space, ``2 * v / I_max - 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import (
    Dataset,
    ImagePair,
    IntensityImage,
    denormalize_from_model,
    normalize_for_model,
)
from .metrics import mean_frac_rmse_pct

INIT_STD = 0.02
ADAM_BETAS = (0.5, 0.999)


class Optimizer(str, Enum):
    ADAM = "ADAM"
    SGD = "SGD"


class RecLoss(str, Enum):
    MAE = "MAE"
    MSE = "MSE"
    MAE_MSE_BLEND = "MAE_MSE_BLEND"


class ImageSizeError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 2e-4
    batch_size: int = 3
    optimizer: Optimizer = Optimizer.ADAM
    rec_loss: RecLoss = RecLoss.MSE
    rec_weight: float = 100.0
    epochs: int = 200
    seed: int = 0
    base_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(_enum_value(self.optimizer)))
        object.__setattr__(self, "rec_loss", RecLoss(_enum_value(self.rec_loss)))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.base_channels < 1:
            raise ValueError("batch_size, epochs and base_channels must be >= 1")
        if self.rec_weight < 0:
            raise ValueError("rec_weight must be >= 0")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["optimizer"] = self.optimizer.value
        doc["rec_loss"] = self.rec_loss.value
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "HyperParams":
        return cls(**doc)


def _enum_value(v):
    if isinstance(v, Enum):
        return v.value
    return str(v).upper().replace("-", "_")


def _check_size(image_size: int) -> int:
    if image_size < 16 or image_size & (image_size - 1):
        raise ImageSizeError(f"image_size must be a power of two >= 16, got {image_size}")
    return int(math.log2(image_size))


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, INIT_STD, generator=gen)
            nn.init.zeros_(m.bias)


class UNetGenerator(nn.Module):
    """Encoder-decoder with mirrored skip connections, ``log2(size)`` stages deep."""

    def __init__(self, image_size: int, base_channels: int = 32):
        super().__init__()
        depth = _check_size(image_size)
        self.image_size = image_size
        self.widths = [min(base_channels * 2**i, 8 * base_channels) for i in range(depth)]
        w = self.widths

        downs = []
        for i in range(depth):
            c_in = 1 if i == 0 else w[i - 1]
            if i == 0:
                block = [nn.Conv2d(c_in, w[i], 4, 2, 1)]
            elif i == depth - 1:
                block = [nn.LeakyReLU(0.2), nn.Conv2d(c_in, w[i], 4, 2, 1)]
            else:
                block = [nn.LeakyReLU(0.2), nn.Conv2d(c_in, w[i], 4, 2, 1), nn.InstanceNorm2d(w[i])]
            downs.append(nn.Sequential(*block))
        self.downs = nn.ModuleList(downs)

        ups = []
        for level in reversed(range(depth)):
            c_in = w[level] if level == depth - 1 else 2 * w[level]
            if level == 0:
                block = [nn.ReLU(), nn.ConvTranspose2d(c_in, 1, 4, 2, 1), nn.Tanh()]
            else:
                c_out = w[level - 1]
                block = [nn.ReLU(), nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.InstanceNorm2d(c_out)]
            ups.append(nn.Sequential(*block))
        self.ups = nn.ModuleList(ups)

    @property
    def depth(self) -> int:
        return len(self.downs)

    def forward(self, x):
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        skips.pop()
        for j, up in enumerate(self.ups):
            if j > 0:
                x = torch.cat([x, skips.pop()], dim=1)
            x = up(x)
        return x


class PatchDiscriminator(nn.Module):
    """70x70-style patch classifier; emits one logit per receptive-field patch.

    Uses three stride-2 stages where the input allows (two at 16x16 so the
    logit grid stays non-empty), then two stride-1 stages.
    """

    def __init__(self, image_size: int, base_channels: int = 32):
        super().__init__()
        _check_size(image_size)
        self.image_size = image_size
        self.n_strided = min(3, int(math.log2(image_size)) - 2)
        b = base_channels
        layers: list[nn.Module] = [nn.Conv2d(2, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        c = b
        for i in range(1, self.n_strided):
            c_out = min(b * 2**i, 8 * b)
            layers += [nn.Conv2d(c, c_out, 4, 2, 1), nn.InstanceNorm2d(c_out), nn.LeakyReLU(0.2)]
            c = c_out
        c_out = min(b * 2**self.n_strided, 8 * b)
        layers += [nn.Conv2d(c, c_out, 4, 1, 1), nn.InstanceNorm2d(c_out), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(c_out, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, conv, candidate):
        return self.net(torch.cat([conv, candidate], dim=1))


def patch_grid_size(image_size: int) -> int:
    n_strided = min(3, _check_size(image_size) - 2)
    n = image_size // 2**n_strided
    return n - 2


def _seeds(seed: int) -> tuple[int, int]:
    g, d = np.random.SeedSequence(int(seed) & 0xFFFFFFFF).generate_state(2)
    return int(g), int(d)


def build_generator(image_size: int, base_channels: int = 32, seed: int = 0) -> UNetGenerator:
    net = UNetGenerator(image_size, base_channels)
    _init_weights(net, seed)
    return net


def build_discriminator(image_size: int, base_channels: int = 32, seed: int = 0) -> PatchDiscriminator:
    net = PatchDiscriminator(image_size, base_channels)
    _init_weights(net, seed)
    return net


def architecture_descriptor(image_size: int, base_channels: int) -> str:
    g = UNetGenerator(image_size, base_channels)
    d_strided = min(3, int(math.log2(image_size)) - 2)
    return (
        f"unet(size={image_size},widths={'-'.join(map(str, g.widths))},"
        f"norm=instance,act=lrelu0.2/relu,out=tanh)"
        f"|patchgan(base={base_channels},strided={d_strided},grid={patch_grid_size(image_size)})"
    )


def reconstruction_loss(kind, predicted, target):
    """MAE, MSE, or their 50:50 blend. Accepts tensors (returns a tensor) or arrays (returns a float)."""
    kind = RecLoss(_enum_value(kind))
    as_float = not isinstance(predicted, torch.Tensor)
    if as_float:
        predicted = torch.as_tensor(np.asarray(predicted, dtype=np.float64))
        target = torch.as_tensor(np.asarray(target, dtype=np.float64))
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    diff = predicted - target
    if kind is RecLoss.MAE:
        loss = diff.abs().mean()
    elif kind is RecLoss.MSE:
        loss = (diff**2).mean()
    else:
        loss = 0.5 * diff.abs().mean() + 0.5 * (diff**2).mean()
    return float(loss) if as_float else loss


def discriminator_loss(discriminator, conv, target, fake):
    real_logits = discriminator(conv, target)
    fake_logits = discriminator(conv, fake)
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return 0.5 * (real + fake)


def generator_loss(generator, discriminator, conv, target, hp: HyperParams):
    """Returns (total, adversarial, reconstruction) for one batch."""
    fake = generator(conv)
    logits = discriminator(conv, fake)
    adv = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))
    rec = reconstruction_loss(hp.rec_loss, fake, target)
    return adv + hp.rec_weight * rec, adv, rec


def _make_optimizer(params, hp: HyperParams):
    if hp.optimizer is Optimizer.ADAM:
        return torch.optim.Adam(params, lr=hp.learning_rate, betas=ADAM_BETAS)
    return torch.optim.SGD(params, lr=hp.learning_rate)


def to_tensor(images: Sequence[IntensityImage], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([normalize_for_model(im) for im in images])[:, None]
    return torch.as_tensor(arr, dtype=dtype)


@dataclass
class StepLosses:
    d_loss: float
    g_adv: float
    g_rec: float
    g_total: float


@dataclass
class TrainState:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    hp: HyperParams
    step: int = 0
    last: StepLosses | None = None


def init_state(image_size: int, hp: HyperParams) -> TrainState:
    g_seed, d_seed = _seeds(hp.seed)
    gen = build_generator(image_size, hp.base_channels, g_seed)
    disc = build_discriminator(image_size, hp.base_channels, d_seed)
    return TrainState(gen, disc, _make_optimizer(gen.parameters(), hp), _make_optimizer(disc.parameters(), hp), hp)


def train_step(state: TrainState, batch: Sequence[ImagePair]) -> TrainState:
    """One discriminator update followed by one generator update (in place)."""
    if not batch:
        raise ValueError("empty batch")
    size = state.generator.image_size
    if any(p.conv.shape != (size, size) for p in batch):
        raise ImageSizeError(f"batch images must be {size}x{size}")
    conv = to_tensor([p.conv for p in batch])
    target = to_tensor([p.multi for p in batch])
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()

    fake = gen(conv)
    d_loss = discriminator_loss(disc, conv, target, fake.detach())
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    logits = disc(conv, fake)
    g_adv = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))
    g_rec = reconstruction_loss(state.hp.rec_loss, fake, target)
    g_total = g_adv + state.hp.rec_weight * g_rec
    state.opt_g.zero_grad()
    g_total.backward()
    state.opt_g.step()

    state.step += 1
    state.last = StepLosses(d_loss.item(), g_adv.item(), g_rec.item(), g_total.item())
    return state


@dataclass(frozen=True)
class EpochCurve:
    entries: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        entries = tuple((int(e), float(v)) for e, v in self.entries)
        for i, (epoch, _) in enumerate(entries):
            if epoch != i + 1:
                raise ValueError("epochs must run 1, 2, 3, ...")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def errors(self) -> list[float]:
        return [v for _, v in self.entries]


@dataclass
class GanModel:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    image_size: int
    architecture_descriptor: str
    hp: HyperParams
    intensity_ceiling: float = 0.01
    loss_history: list[StepLosses] = field(default_factory=list)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "architecture_descriptor": self.architecture_descriptor,
            "image_size": self.image_size,
            "intensity_ceiling": self.intensity_ceiling,
            "hyperparams": self.hp.to_json(),
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
        torch.save(self.generator.state_dict(), directory / "generator.pt")
        torch.save(self.discriminator.state_dict(), directory / "discriminator.pt")

    @classmethod
    def load(cls, directory) -> "GanModel":
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        hp = HyperParams.from_json(meta["hyperparams"])
        size = meta["image_size"]
        gen = UNetGenerator(size, hp.base_channels)
        disc = PatchDiscriminator(size, hp.base_channels)
        gen.load_state_dict(torch.load(directory / "generator.pt", weights_only=True))
        disc.load_state_dict(torch.load(directory / "discriminator.pt", weights_only=True))
        expected = architecture_descriptor(size, hp.base_channels)
        if meta["architecture_descriptor"] != expected:
            raise ValueError(f"checkpoint architecture {meta['architecture_descriptor']!r} != {expected!r}")
        return cls(gen, disc, size, expected, hp, meta["intensity_ceiling"])


def predict_many(model: GanModel, convs: Sequence[IntensityImage], chunk: int = 16) -> list[IntensityImage]:
    for conv in convs:
        if conv.shape != (model.image_size, model.image_size):
            raise ImageSizeError(f"expected {model.image_size}x{model.image_size}, got {conv.shape}")
    model.generator.eval()
    out = []
    dtype = next(model.generator.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(convs), chunk):
            grid = model.generator(to_tensor(convs[i : i + chunk], dtype)).double().numpy()
            out.extend(denormalize_from_model(g[0], model.intensity_ceiling) for g in grid)
    return out


def predict(model: GanModel, conv: IntensityImage) -> IntensityImage:
    return predict_many(model, [conv])[0]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    train_set: Dataset,
    hp: HyperParams,
    eval_set: Dataset | None = None,
    on_epoch: Callable[[int, TrainState, float | None], None] | None = None,
) -> tuple[GanModel, EpochCurve]:
    """Train for ``hp.epochs`` full passes, scoring ``eval_set`` after every epoch."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    size = train_set.image_size
    state = init_state(size, hp)
    model = GanModel(
        state.generator,
        state.discriminator,
        size,
        architecture_descriptor(size, hp.base_channels),
        hp,
        train_set[0].conv.intensity_ceiling,
    )
    curve = []
    for epoch in range(1, hp.epochs + 1):
        losses = []
        for idx in epoch_batches(len(train_set), hp.batch_size, hp.seed, epoch):
            train_step(state, [train_set[int(i)] for i in idx])
            losses.append(state.last)
        model.loss_history.append(
            StepLosses(*(float(np.mean([getattr(s, f) for s in losses])) for f in ("d_loss", "g_adv", "g_rec", "g_total")))
        )
        score = None
        if eval_set is not None and len(eval_set):
            preds = predict_many(model, [p.conv for p in eval_set])
            score = mean_frac_rmse_pct(zip(eval_set.ids, preds), eval_set)
            curve.append((epoch, score))
        if on_epoch is not None:
            on_epoch(epoch, state, score)
    return model, EpochCurve(tuple(curve))

