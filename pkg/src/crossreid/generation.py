"""Cross-modality paired-image generation.

A shared content encoder strips modality-specific information, per-modality
style encoders capture it, and per-modality AdaIN decoders recombine
(content, style) pairs into images. Exchanging styles between a same-identity
RGB/IR pair yields generated counterparts so every real image acquires a
cross-modality partner.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import MLP, AdaptiveInstanceNorm2d, ResBlock, assign_adain_params, num_adain_params

RGB = "rgb"
IR = "ir"
MODALITIES = (RGB, IR)

# spatial reduction of the content encoder (two stride-2 convolutions)
CONTENT_DOWNSAMPLE = 4


@dataclass
class ArchConfig:
    """Channel/depth hyperparameters for the full model (generation + alignment)."""

    image_channels: int = 3
    base_channels: int = 16          # width of the first content-encoder conv
    content_channels: int = 64       # channels of the content code
    n_content_res: int = 2
    n_decoder_res: int = 4
    style_dim: int = 8
    style_base: int = 16             # width of the first style-encoder conv
    mlp_hidden: int = 64
    disc_base: int = 16
    n_disc_layers: int = 3
    first_kernel: int = 7            # encoder stem / decoder output kernel
    instance_channels: int = 128     # alignment tail width
    n_instance_res: int = 2

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def tiny_arch():
    """Smallest configuration; used by the finite-difference gradient checks."""
    return ArchConfig(
        base_channels=1, content_channels=2, n_content_res=1, n_decoder_res=1,
        style_dim=2, style_base=1, mlp_hidden=2, disc_base=1, n_disc_layers=2,
        first_kernel=3, instance_channels=4, n_instance_res=0,
    )


class ContentEncoder(nn.Module):
    """Modality-invariant encoder: stem conv, two stride-2 convs, residual blocks."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        b, c, k = arch.base_channels, arch.content_channels, arch.first_kernel
        layers = [
            nn.Conv2d(arch.image_channels, b, k, 1, k // 2),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 4, 2, 1),
            nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, c, 4, 2, 1),
            nn.InstanceNorm2d(c), nn.ReLU(inplace=True),
        ]
        layers += [ResBlock(c, norm="in") for _ in range(arch.n_content_res)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class StyleEncoder(nn.Module):
    """Modality-specific encoder: 2 strided convolutions, global average pooling, FC."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        s = arch.style_base
        self.convs = nn.Sequential(
            nn.Conv2d(arch.image_channels, s, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(s, 2 * s, 4, 2, 1), nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(2 * s, arch.style_dim)

    def forward(self, x):
        h = self.convs(x)
        h = h.mean(dim=(2, 3))
        return self.fc(h)


class Decoder(nn.Module):
    """AdaIN residual blocks followed by two upsampling convolutions and tanh output.

    All AdaIN affine parameters are produced from the style vector by a small
    mapping network, so style enters exclusively through AdaIN.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c, k = arch.content_channels, arch.first_kernel
        self.res = nn.Sequential(*[ResBlock(c, norm="adain") for _ in range(arch.n_decoder_res)])
        # layer norm (not instance norm) after upsampling: instance norm would
        # strip the per-channel statistics AdaIN just injected
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, max(c // 2, 1), 3, 1, 1),
            nn.GroupNorm(1, max(c // 2, 1)), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(max(c // 2, 1), max(c // 4, 1), 3, 1, 1),
            nn.GroupNorm(1, max(c // 4, 1)), nn.ReLU(inplace=True),
            nn.Conv2d(max(c // 4, 1), arch.image_channels, k, 1, k // 2),
            nn.Tanh(),
        )
        self.mapping = MLP(arch.style_dim, num_adain_params(self.res), arch.mlp_hidden, n_layers=2)

    def forward(self, content, style):
        assign_adain_params(self.res, self.mapping(style))
        return self.up(self.res(content))


class Discriminator(nn.Module):
    """Patch discriminator with stride-2 convolutions and a 1x1 scoring head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.disc_base
        layers = [nn.Conv2d(arch.image_channels, d, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(arch.n_disc_layers - 1):
            layers += [nn.Conv2d(d, 2 * d, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            d *= 2
        layers += [nn.Conv2d(d, 1, 1, 1, 0)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_weights(m):
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class GenerationModel(nn.Module):
    """Container for the three encoders, two decoders and two discriminators."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.content_encoder = ContentEncoder(self.arch)
        self.style_encoders = nn.ModuleDict({m: StyleEncoder(self.arch) for m in MODALITIES})
        self.decoders = nn.ModuleDict({m: Decoder(self.arch) for m in MODALITIES})
        self.discriminators = nn.ModuleDict({m: Discriminator(self.arch) for m in MODALITIES})
        self.apply(_init_weights)

    def generator_parameters(self):
        """Parameters updated by the generator-side objectives (everything but Dis)."""
        mods = [self.content_encoder, self.style_encoders, self.decoders]
        for mod in mods:
            yield from mod.parameters()

    def discriminator_parameters(self):
        return self.discriminators.parameters()


@dataclass
class PairedQuad:
    """One identity's real RGB/IR images plus their generated counterparts."""

    x_rgb: torch.Tensor
    x_ir: torch.Tensor
    x_ir2rgb: torch.Tensor
    x_rgb2ir: torch.Tensor
    identity: int


@dataclass
class PairedQuads:
    """Batched quads; `identities[i]` labels all four images of quad i."""

    x_rgb: torch.Tensor
    x_ir: torch.Tensor
    x_ir2rgb: torch.Tensor
    x_rgb2ir: torch.Tensor
    identities: torch.Tensor

    def __len__(self):
        return self.x_rgb.shape[0]

    def __getitem__(self, i) -> PairedQuad:
        return PairedQuad(self.x_rgb[i], self.x_ir[i], self.x_ir2rgb[i],
                          self.x_rgb2ir[i], int(self.identities[i]))

    def detach_generated(self):
        """Copy with generated images cut off from the generator graph."""
        return PairedQuads(self.x_rgb, self.x_ir, self.x_ir2rgb.detach(),
                           self.x_rgb2ir.detach(), self.identities)


def _pixels(batch):
    return batch.pixels if hasattr(batch, "pixels") else batch


def encode_content(model: GenerationModel, batch) -> torch.Tensor:
    """Modality-invariant content code, [N, C_c, H/4, W/4]."""
    return model.content_encoder(_pixels(batch))


def encode_style(model: GenerationModel, batch, modality: str) -> torch.Tensor:
    """Modality-specific style vector, [N, C_s]; `modality` selects the encoder."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    mods = getattr(batch, "modalities", None)
    if mods is not None and any(m != modality for m in mods):
        raise ValueError(f"batch contains non-{modality} items, refusing {modality} style encoder")
    return model.style_encoders[modality](_pixels(batch))


def decode(model: GenerationModel, content: torch.Tensor, style: torch.Tensor,
           target_modality: str) -> torch.Tensor:
    """Decode (content, style) into `target_modality` images in [-1, 1]."""
    if target_modality not in MODALITIES:
        raise ValueError(f"unknown modality {target_modality!r}")
    if content.shape[0] != style.shape[0]:
        raise ValueError(f"batch size mismatch: content {content.shape[0]} vs style {style.shape[0]}")
    return model.decoders[target_modality](content, style)


def intra_person_pairing(ids_rgb, ids_ir, rng: np.random.Generator) -> np.ndarray:
    """For each RGB item pick a uniformly random IR item of the same identity."""
    ids_rgb = np.asarray(ids_rgb)
    ids_ir = np.asarray(ids_ir)
    pairing = np.empty(len(ids_rgb), dtype=np.int64)
    for j, ident in enumerate(ids_rgb):
        candidates = np.flatnonzero(ids_ir == ident)
        if candidates.size == 0:
            raise ValueError(f"identity {ident} has no IR items to pair with")
        pairing[j] = candidates[rng.integers(candidates.size)]
    return pairing


def exchange_generate(model: GenerationModel, batch_rgb, batch_ir, pairing) -> PairedQuads:
    """Generate paired images by exchanging style intra-person.

    For RGB item j paired with IR item pairing[j]:
    x_ir2rgb = RGB-decode(content of IR item, style of RGB item) and
    x_rgb2ir = IR-decode(content of RGB item, style of IR item).
    """
    quads, _ = exchange_generate_with_codes(model, batch_rgb, batch_ir, pairing)
    return quads


def exchange_generate_with_codes(model, batch_rgb, batch_ir, pairing):
    """As :func:`exchange_generate` but also returns the intermediate codes."""
    pairing = torch.as_tensor(np.asarray(pairing), dtype=torch.long)
    ids_rgb = batch_rgb.identities
    ids_ir = batch_ir.identities
    if not torch.equal(ids_rgb, ids_ir[pairing]):
        bad = (ids_rgb != ids_ir[pairing]).nonzero().flatten().tolist()
        raise ValueError(f"pairing crosses identities at rgb indices {bad}")

    c_rgb = encode_content(model, batch_rgb)
    c_ir = encode_content(model, batch_ir)
    s_rgb = encode_style(model, batch_rgb, RGB)
    s_ir = encode_style(model, batch_ir, IR)

    c_ir_paired = c_ir[pairing]
    s_ir_paired = s_ir[pairing]
    x_ir2rgb = decode(model, c_ir_paired, s_rgb, RGB)
    x_rgb2ir = decode(model, c_rgb, s_ir_paired, IR)

    quads = PairedQuads(
        x_rgb=_pixels(batch_rgb),
        x_ir=_pixels(batch_ir)[pairing],
        x_ir2rgb=x_ir2rgb,
        x_rgb2ir=x_rgb2ir,
        identities=ids_rgb.clone(),
    )
    codes = {"c_rgb": c_rgb, "c_ir": c_ir, "s_rgb": s_rgb, "s_ir": s_ir, "pairing": pairing}
    return quads, codes


def recon_loss(model: GenerationModel, batch_rgb, batch_ir) -> torch.Tensor:
    """Mean L1 between each real image and its own-modality reconstruction (two terms)."""
    x_rgb = _pixels(batch_rgb)
    x_ir = _pixels(batch_ir)
    rec_rgb = decode(model, encode_content(model, x_rgb), encode_style(model, x_rgb, RGB), RGB)
    rec_ir = decode(model, encode_content(model, x_ir), encode_style(model, x_ir, IR), IR)
    return F.l1_loss(rec_rgb, x_rgb) + F.l1_loss(rec_ir, x_ir)


def cycle_loss(model: GenerationModel, quads: PairedQuads) -> torch.Tensor:
    """Translate generated images back and penalise L1 against the originals.

    The IR cycle re-encodes content from x_ir2rgb and IR style from x_rgb2ir;
    the RGB cycle is symmetric.
    """
    c_from_ir2rgb = encode_content(model, quads.x_ir2rgb)
    c_from_rgb2ir = encode_content(model, quads.x_rgb2ir)
    s_ir_fake = encode_style(model, quads.x_rgb2ir, IR)
    s_rgb_fake = encode_style(model, quads.x_ir2rgb, RGB)
    x_ir_cycle = decode(model, c_from_ir2rgb, s_ir_fake, IR)
    x_rgb_cycle = decode(model, c_from_rgb2ir, s_rgb_fake, RGB)
    return F.l1_loss(quads.x_rgb, x_rgb_cycle) + F.l1_loss(quads.x_ir, x_ir_cycle)


def adversarial_losses(model: GenerationModel, real_rgb, real_ir, fake_rgb, fake_ir,
                       mode: str = "lsgan") -> dict:
    """Least-squares (default) or log-form adversarial losses, summed over modalities.

    Fake images are detached inside the discriminator term, so `disc_loss`
    carries no generator gradient.
    """
    if mode not in ("lsgan", "log"):
        raise ValueError(f"unknown gan mode {mode!r}")
    disc_loss = _pixels(real_rgb).new_zeros(())
    gen_loss = _pixels(real_rgb).new_zeros(())
    pairs = ((RGB, _pixels(real_rgb), fake_rgb), (IR, _pixels(real_ir), fake_ir))
    for modality, real, fake in pairs:
        dis = model.discriminators[modality]
        score_real = dis(real)
        score_fake_d = dis(fake.detach())
        score_fake_g = dis(fake)
        if mode == "lsgan":
            disc_loss = disc_loss + ((score_real - 1) ** 2).mean() + (score_fake_d ** 2).mean()
            gen_loss = gen_loss + ((score_fake_g - 1) ** 2).mean()
        else:
            # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
            disc_loss = disc_loss + F.softplus(-score_real).mean() + F.softplus(score_fake_d).mean()
            gen_loss = gen_loss + F.softplus(-score_fake_g).mean()
    return {"disc_loss": disc_loss, "gen_loss": gen_loss}


def image_grid(rows) -> np.ndarray:
    """Tile rows of [3, H, W] tensors in [-1, 1] into one [H*, W*, 3] uint8 array."""
    pad = 2
    rows_np = []
    for row in rows:
        imgs = []
        for img in row:
            arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
            if arr.shape[0] == 1:
                arr = np.repeat(arr, 3, axis=0)
            arr = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
            arr = np.pad(arr.transpose(1, 2, 0), ((pad, pad), (pad, pad), (0, 0)),
                         constant_values=255)
            imgs.append(arr)
        rows_np.append(np.concatenate(imgs, axis=1))
    return np.concatenate(rows_np, axis=0)
