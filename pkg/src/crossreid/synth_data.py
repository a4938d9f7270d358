"""Synthetic two-modality re-identification dataset.

Each identity is a two-block figure (torso + legs) whose block colors come
from a palette in which several RGB colors share one IR intensity bucket, so
the IR-to-RGB mapping is one-to-many by construction. Images are rendered
with per-image pose/position jitter and noise, stored as lossless PNGs with
a line-delimited manifest, and reloaded bit-exactly.
"""

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .generation import IR, RGB

MANIFEST_NAME = "manifest.jsonl"
PALETTE_NAME = "palette.json"
IMAGE_DIR = "images"

# rng stream tags: per-identity spec sampling vs per-record rendering
_STREAM_IDENTITY = 0
_STREAM_RENDER = 1

_BG_RGB = 0.22
_BG_IR = 0.14
_TEXTURE_AMP_RGB = 0.03
_TEXTURE_AMP_IR = 0.02


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PaletteColor:
    name: str
    rgb: tuple  # floats in [0, 1]
    ir_level: float  # bucket intensity in [0, 1]


@dataclass(frozen=True)
class Palette:
    """Color table with a many-to-one color -> IR intensity bucket map."""

    colors: tuple

    def __post_init__(self):
        if len(self.colors) < 4:
            raise ConfigurationError(f"palette needs >= 4 colors, got {len(self.colors)}")
        buckets = {}
        for c in self.colors:
            buckets.setdefault(c.ir_level, []).append(c.name)
        thin = {lvl: names for lvl, names in buckets.items() if len(names) < 2}
        if thin:
            raise ConfigurationError(f"every IR bucket needs >= 2 colors, violated by {thin}")

    def __len__(self):
        return len(self.colors)

    def ir_buckets(self):
        """Map of IR level -> list of palette indices sharing it."""
        buckets = {}
        for i, c in enumerate(self.colors):
            buckets.setdefault(c.ir_level, []).append(i)
        return buckets

    def to_jsonable(self):
        return [{"name": c.name, "rgb": list(c.rgb), "ir_level": c.ir_level} for c in self.colors]

    @classmethod
    def from_jsonable(cls, data):
        return cls(tuple(PaletteColor(d["name"], tuple(d["rgb"]), d["ir_level"]) for d in data))


def default_palette() -> Palette:
    # four buckets, two visually distinct colors each: IR intensity carries at
    # most the bucket, never the color
    return Palette((
        PaletteColor("black", (0.05, 0.05, 0.05), 0.15),
        PaletteColor("gray", (0.45, 0.45, 0.45), 0.15),
        PaletteColor("red", (0.75, 0.08, 0.08), 0.38),
        PaletteColor("dark_blue", (0.08, 0.08, 0.60), 0.38),
        PaletteColor("green", (0.10, 0.55, 0.15), 0.62),
        PaletteColor("purple", (0.55, 0.15, 0.65), 0.62),
        PaletteColor("yellow", (0.95, 0.85, 0.15), 0.85),
        PaletteColor("white", (0.92, 0.92, 0.92), 0.85),
    ))


@dataclass(frozen=True)
class ContentRanges:
    """Uniform sampling ranges for the body-shape vector and base pose."""

    torso_width: tuple = (0.40, 0.62)   # fractions of image width
    torso_height: tuple = (0.26, 0.38)  # fractions of image height
    leg_width: tuple = (0.20, 0.40)
    leg_height: tuple = (0.28, 0.40)
    center_x: tuple = (0.42, 0.58)
    pose_deg: tuple = (-10.0, 10.0)

    def to_jsonable(self):
        return {k: list(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_jsonable(cls, data):
        return cls(**{k: tuple(v) for k, v in data.items()})


@dataclass(frozen=True)
class IdentitySpec:
    """Attributes of one synthetic person: shape/pose content plus block colors."""

    identity_id: int
    shape: tuple      # (torso_width, torso_height, leg_width, leg_height, center_x)
    base_pose_deg: float
    upper_color: int
    lower_color: int


@dataclass(frozen=True)
class RenderJitter:
    """Per-image perturbation; all-zero (and contrast 1) renders are deterministic."""

    dx: float = 0.0
    dy: float = 0.0
    dpose_deg: float = 0.0
    ir_contrast: float = 1.0


@dataclass(frozen=True)
class JitterMagnitudes:
    dx: float = 2.0
    dy: float = 2.0
    dpose_deg: float = 4.0
    ir_contrast: float = 0.08

    def to_jsonable(self):
        return dict(self.__dict__)

    @classmethod
    def from_jsonable(cls, data):
        return cls(**data)


def sample_identity(rng: np.random.Generator, palette: Palette,
                    content_ranges: ContentRanges | None = None,
                    identity_id: int = 0) -> IdentitySpec:
    """Draw an identity uniformly from the given attribute ranges."""
    Palette(palette.colors)  # re-validate bucket structure
    r = content_ranges or ContentRanges()
    shape = tuple(float(rng.uniform(lo, hi)) for lo, hi in (
        r.torso_width, r.torso_height, r.leg_width, r.leg_height, r.center_x))
    pose = float(rng.uniform(*r.pose_deg))
    upper = int(rng.integers(len(palette)))
    lower = int(rng.integers(len(palette)))
    return IdentitySpec(identity_id, shape, pose, upper, lower)


def sample_jitter(rng: np.random.Generator, magnitudes: JitterMagnitudes) -> RenderJitter:
    m = magnitudes
    return RenderJitter(
        dx=float(rng.uniform(-m.dx, m.dx)),
        dy=float(rng.uniform(-m.dy, m.dy)),
        dpose_deg=float(rng.uniform(-m.dpose_deg, m.dpose_deg)),
        ir_contrast=float(rng.uniform(1.0 - m.ir_contrast, 1.0 + m.ir_contrast)),
    )


def body_masks(spec: IdentitySpec, jitter: RenderJitter, size: tuple) -> tuple:
    """Ground-truth (torso, legs) boolean masks for one render's geometry."""
    h, w = size
    tw, th, lw, lh, cx = spec.shape
    torso_h = th * h
    legs_h = lh * h
    top = (h - torso_h - legs_h) * 0.45 + jitter.dy
    torso_rows = (top, top + torso_h)
    legs_rows = (top + torso_h, top + torso_h + legs_h)
    feet_y = legs_rows[1]
    lean = math.tan(math.radians(spec.base_pose_deg + jitter.dpose_deg))

    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    center = cx * w + jitter.dx + lean * (ys - feet_y)

    def block(rows, width_frac):
        half = width_frac * w / 2.0
        in_rows = (ys >= rows[0]) & (ys < rows[1])
        in_cols = np.abs(xs - center) <= half
        return in_rows & in_cols

    return block(torso_rows, tw), block(legs_rows, lw)


def _texture(h, w):
    ys = np.arange(h, dtype=np.float64)[:, None] / h
    xs = np.arange(w, dtype=np.float64)[None, :] / w
    return np.sin(2 * np.pi * (3.0 * xs + 1.0 * ys)) * np.sin(2 * np.pi * (5.0 * ys))


def render_rgb(spec: IdentitySpec, jitter: RenderJitter, rng: np.random.Generator,
               palette: Palette | None = None, size: tuple = (64, 32),
               noise_std: float = 0.01) -> np.ndarray:
    """Render the RGB view, [3, H, W] float32 in [-1, 1]."""
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"image size must be >= 16x16, got {h}x{w}")
    palette = palette or default_palette()
    torso, legs = body_masks(spec, jitter, size)
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = _BG_RGB + _TEXTURE_AMP_RGB * _texture(h, w)
    for mask, color_idx in ((torso, spec.upper_color), (legs, spec.lower_color)):
        color = palette.colors[color_idx].rgb
        for c in range(3):
            img[c][mask] = color[c]
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)


def render_ir(spec: IdentitySpec, jitter: RenderJitter, rng: np.random.Generator,
              palette: Palette | None = None, size: tuple = (64, 32),
              noise_std: float = 0.015) -> np.ndarray:
    """Render the IR view, [1, H, W] float32 in [-1, 1].

    Body intensities are the palette's IR bucket levels, so colors sharing a
    bucket are indistinguishable here; jitter.ir_contrast rescales the image
    around mid-gray.
    """
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"image size must be >= 16x16, got {h}x{w}")
    palette = palette or default_palette()
    torso, legs = body_masks(spec, jitter, size)
    img = np.empty((h, w), dtype=np.float64)
    img[:] = _BG_IR + _TEXTURE_AMP_IR * _texture(h, w)
    img[torso] = palette.colors[spec.upper_color].ir_level
    img[legs] = palette.colors[spec.lower_color].ir_level
    img = 0.5 + jitter.ir_contrast * (img - 0.5)
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)[None, :, :]


# ---------------------------------------------------------------------------
# dataset generation and loading


@dataclass
class DatasetConfig:
    ids_train: int = 100
    ids_test: int = 50
    per_modality: int = 8    # images per identity per modality
    height: int = 64
    width: int = 32
    seed: int = 0
    noise_std_rgb: float = 0.01
    noise_std_ir: float = 0.015
    rgb_cameras: int = 4
    ir_cameras: int = 2
    jitter: JitterMagnitudes = field(default_factory=JitterMagnitudes)
    content_ranges: ContentRanges = field(default_factory=ContentRanges)

    def to_jsonable(self):
        d = dict(self.__dict__)
        d["jitter"] = self.jitter.to_jsonable()
        d["content_ranges"] = self.content_ranges.to_jsonable()
        return d

    @classmethod
    def from_jsonable(cls, data):
        data = dict(data)
        data["jitter"] = JitterMagnitudes.from_jsonable(data["jitter"])
        data["content_ranges"] = ContentRanges.from_jsonable(data["content_ranges"])
        return cls(**data)


@dataclass(frozen=True)
class DatasetRecord:
    identity: int
    modality: str  # "rgb" | "ir"
    camera: int
    path: str
    split: str     # "train" | "test"

    def to_json_line(self):
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))


def _rng_for(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, index)))


class DatasetManifest:
    """On-disk dataset index: records, split, palette and the generation seed."""

    def __init__(self, root: Path, records, palette: Palette, config: DatasetConfig):
        self.root = Path(root)
        self.records = list(records)
        self.palette = palette
        self.config = config
        self.train_ids = sorted({r.identity for r in self.records if r.split == "train"})
        self.test_ids = sorted({r.identity for r in self.records if r.split == "test"})
        self._label_of = {ident: i for i, ident in enumerate(self.train_ids)}

    @property
    def seed(self):
        return self.config.seed

    @property
    def image_size(self):
        return (self.config.height, self.config.width)

    def train_label(self, identity: int) -> int:
        if identity not in self._label_of:
            raise ValueError(f"identity {identity} is not a training identity")
        return self._label_of[identity]

    def records_for(self, split=None, modality=None, identity=None):
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if modality is not None:
            out = [r for r in out if r.modality == modality]
        if identity is not None:
            out = [r for r in out if r.identity == identity]
        return out

    def manifest_bytes(self) -> bytes:
        return ("\n".join(r.to_json_line() for r in self.records) + "\n").encode()

    def palette_bytes(self) -> bytes:
        doc = {"palette": self.palette.to_jsonable(), "seed": self.config.seed,
               "config": self.config.to_jsonable()}
        return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()

    def save_index(self):
        (self.root / MANIFEST_NAME).write_bytes(self.manifest_bytes())
        (self.root / PALETTE_NAME).write_bytes(self.palette_bytes())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        palette_path = root / PALETTE_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
        records = []
        for line in manifest_path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(DatasetRecord(**d))
        doc = json.loads(palette_path.read_text())
        palette = Palette.from_jsonable(doc["palette"])
        config = DatasetConfig.from_jsonable(doc["config"])
        return cls(root, records, palette, config)

    # --- deterministic re-derivation of generation-time state ---

    def identity_specs(self) -> dict:
        """Re-derive every identity's spec from the generation seed."""
        n = self.config.ids_train + self.config.ids_test
        return {i: sample_identity(_rng_for(self.config.seed, _STREAM_IDENTITY, i),
                                   self.palette, self.config.content_ranges, identity_id=i)
                for i in range(n)}

    def record_render_params(self, record_index: int):
        """(spec, jitter) that produced records[record_index]; masks follow from them."""
        rec = self.records[record_index]
        spec = sample_identity(_rng_for(self.config.seed, _STREAM_IDENTITY, rec.identity),
                               self.palette, self.config.content_ranges, identity_id=rec.identity)
        rng = _rng_for(self.config.seed, _STREAM_RENDER, record_index)
        jitter = sample_jitter(rng, self.config.jitter)
        return spec, jitter

    def load_pixels(self, record: DatasetRecord) -> np.ndarray:
        """Load one image as [3, H, W] float32 in [-1, 1]; IR is replicated to 3 channels."""
        arr = np.asarray(Image.open(self.root / record.path))
        if record.modality == IR:
            if arr.ndim != 2:
                raise ValueError(f"IR image {record.path} is not single-channel")
            arr = arr[None, :, :].repeat(3, axis=0)
        else:
            arr = arr.transpose(2, 0, 1)
        return (arr.astype(np.float32) / 127.5) - 1.0


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _save_png(img: np.ndarray, path: Path):
    if img.shape[0] == 1:
        Image.fromarray(_to_uint8(img[0]), mode="L").save(path)
    else:
        Image.fromarray(_to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path)


def generate_dataset(config: DatasetConfig, out_dir, overwrite: bool = False) -> DatasetManifest:
    """Render the full dataset to `out_dir` and write its manifest files."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"output directory {out} is not empty (pass overwrite to replace)")
        shutil.rmtree(out)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)

    palette = _palette_of(config)
    n_ids = config.ids_train + config.ids_test
    specs = {i: sample_identity(_rng_for(config.seed, _STREAM_IDENTITY, i), palette,
                                config.content_ranges, identity_id=i)
             for i in range(n_ids)}
    if len({(s.shape, s.base_pose_deg, s.upper_color, s.lower_color) for s in specs.values()}) != n_ids:
        raise RuntimeError("identity attribute collision; change the seed")

    cameras = {RGB: list(range(config.rgb_cameras)),
               IR: list(range(config.rgb_cameras, config.rgb_cameras + config.ir_cameras))}
    records = []
    for identity in range(n_ids):
        split = "train" if identity < config.ids_train else "test"
        for modality in (RGB, IR):
            for k in range(config.per_modality):
                camera = cameras[modality][k % len(cameras[modality])]
                path = f"{IMAGE_DIR}/{identity:04d}_{modality}_c{camera}_{k:02d}.png"
                records.append(DatasetRecord(identity, modality, camera, path, split))

    size = (config.height, config.width)
    for index, rec in enumerate(records):
        rng = _rng_for(config.seed, _STREAM_RENDER, index)
        jitter = sample_jitter(rng, config.jitter)
        if rec.modality == RGB:
            img = render_rgb(specs[rec.identity], jitter, rng, palette, size, config.noise_std_rgb)
        else:
            img = render_ir(specs[rec.identity], jitter, rng, palette, size, config.noise_std_ir)
        _save_png(img, out / rec.path)

    manifest = DatasetManifest(out, records, palette, config)
    manifest.save_index()
    return manifest


def _palette_of(config: DatasetConfig) -> Palette:
    return default_palette()


@dataclass
class ImageBatch:
    """A batch of images with per-item modality, identity and camera labels."""

    pixels: torch.Tensor      # [N, 3, H, W] float32 in [-1, 1]
    identities: torch.Tensor  # [N] long, raw identity ids
    cameras: torch.Tensor     # [N] long
    modalities: list          # [N] of "rgb" | "ir"

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PKSampler:
    """P identities x K images per modality per batch."""

    p: int = 4
    k: int = 2


def _batch_from_records(manifest, records, rng, flip):
    pixels = []
    for rec in records:
        img = manifest.load_pixels(rec)
        if flip and rng.random() < 0.5:
            img = np.ascontiguousarray(img[:, :, ::-1])
        pixels.append(img)
    return ImageBatch(
        pixels=torch.from_numpy(np.stack(pixels)),
        identities=torch.tensor([r.identity for r in records], dtype=torch.long),
        cameras=torch.tensor([r.camera for r in records], dtype=torch.long),
        modalities=[r.modality for r in records],
    )


def load_batch(manifest: DatasetManifest, sampler: PKSampler, rng: np.random.Generator,
               split: str = "train", flip: bool = False):
    """Sample an aligned (RGB batch, IR batch) pair of P identities x K images each."""
    ids = manifest.train_ids if split == "train" else manifest.test_ids
    if sampler.p > len(ids):
        raise ValueError(f"P={sampler.p} exceeds the {len(ids)} available {split} identities")
    chosen = rng.choice(np.asarray(ids), size=sampler.p, replace=False)
    picked = {RGB: [], IR: []}
    for identity in chosen:
        for modality in (RGB, IR):
            recs = manifest.records_for(split=split, modality=modality, identity=int(identity))
            if not recs:
                raise ValueError(f"identity {identity} has no {modality} images in split {split}")
            replace = len(recs) < sampler.k
            idx = rng.choice(len(recs), size=sampler.k, replace=replace)
            picked[modality].extend(recs[i] for i in idx)
    batch_rgb = _batch_from_records(manifest, picked[RGB], rng, flip)
    batch_ir = _batch_from_records(manifest, picked[IR], rng, flip)
    return batch_rgb, batch_ir
