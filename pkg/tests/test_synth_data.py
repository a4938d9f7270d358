import json

import numpy as np
import pytest
from PIL import Image

from crossreid.synth_data import (ConfigurationError, ContentRanges, DatasetConfig,
                                  DatasetManifest, Palette, PaletteColor, PKSampler,
                                  RenderJitter, body_masks, default_palette, generate_dataset,
                                  load_batch, render_ir, render_rgb, sample_identity,
                                  sample_jitter)


def test_default_palette_one_to_many():
    palette = default_palette()
    assert len(palette) >= 4
    for level, indices in palette.ir_buckets().items():
        assert len(indices) >= 2, f"bucket {level} has a single color"


def test_palette_rejects_too_few_colors():
    colors = tuple(PaletteColor(f"c{i}", (0.1 * i,) * 3, 0.5) for i in range(3))
    with pytest.raises(ConfigurationError):
        Palette(colors)


def test_palette_rejects_thin_bucket():
    colors = (
        PaletteColor("a", (0.1, 0.1, 0.1), 0.2), PaletteColor("b", (0.2, 0.2, 0.2), 0.2),
        PaletteColor("c", (0.3, 0.3, 0.3), 0.5), PaletteColor("d", (0.9, 0.9, 0.9), 0.8),
    )
    with pytest.raises(ConfigurationError):
        Palette(colors)


def test_sample_identity_range_contract(rng):
    palette = default_palette()
    for _ in range(50):
        spec = sample_identity(rng, palette)
        assert 0 <= spec.upper_color < len(palette)
        assert 0 <= spec.lower_color < len(palette)
        ranges = ContentRanges()
        for value, (lo, hi) in zip(spec.shape, (ranges.torso_width, ranges.torso_height,
                                                ranges.leg_width, ranges.leg_height,
                                                ranges.center_x)):
            assert lo <= value <= hi


def test_sample_identity_deterministic():
    a = sample_identity(np.random.default_rng(42), default_palette())
    b = sample_identity(np.random.default_rng(42), default_palette())
    assert a == b


def test_sample_identity_palette_frequencies_uniform(rng):
    # each index frequency within 3 sigma of uniform over 10k draws
    palette = default_palette()
    n = 10_000
    counts = np.zeros(len(palette))
    for _ in range(n):
        spec = sample_identity(rng, palette)
        counts[spec.upper_color] += 1
    p = 1.0 / len(palette)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma), counts


def test_render_rgb_block_colors_match_palette(rng):
    palette = default_palette()
    spec = sample_identity(rng, palette)
    jitter = RenderJitter()
    img = render_rgb(spec, jitter, np.random.default_rng(1), palette, size=(64, 32), noise_std=0.02)
    torso, legs = body_masks(spec, jitter, (64, 32))
    upper_rgb = np.asarray(palette.colors[spec.upper_color].rgb) * 2 - 1
    lower_rgb = np.asarray(palette.colors[spec.lower_color].rgb) * 2 - 1
    assert np.allclose(img[:, torso].mean(axis=1), upper_rgb, atol=0.05)
    assert np.allclose(img[:, legs].mean(axis=1), lower_rgb, atol=0.05)


def test_render_deterministic_without_noise(rng):
    spec = sample_identity(rng, default_palette())
    jitter = RenderJitter()
    a = render_rgb(spec, jitter, np.random.default_rng(0), noise_std=0.0)
    b = render_rgb(spec, jitter, np.random.default_rng(1), noise_std=0.0)
    assert np.array_equal(a, b)
    c = render_ir(spec, jitter, np.random.default_rng(0), noise_std=0.0)
    d = render_ir(spec, jitter, np.random.default_rng(1), noise_std=0.0)
    assert np.array_equal(c, d)


def test_jittered_renders_differ(rng):
    spec = sample_identity(rng, default_palette())
    j1 = sample_jitter(rng, DatasetConfig().jitter)
    j2 = sample_jitter(rng, DatasetConfig().jitter)
    a = render_rgb(spec, j1, np.random.default_rng(0), noise_std=0.0)
    b = render_rgb(spec, j2, np.random.default_rng(0), noise_std=0.0)
    assert not np.array_equal(a, b)
    assert spec.identity_id == spec.identity_id  # labels unchanged by augmentation


def test_render_ir_same_bucket_indistinguishable(rng):
    # red and dark_blue share an IR bucket: body means must agree within noise
    palette = default_palette()
    names = [c.name for c in palette.colors]
    red, blue = names.index("red"), names.index("dark_blue")
    assert palette.colors[red].ir_level == palette.colors[blue].ir_level
    base = sample_identity(rng, palette)
    spec_red = base.__class__(base.identity_id, base.shape, base.base_pose_deg, red, red)
    spec_blue = base.__class__(base.identity_id, base.shape, base.base_pose_deg, blue, blue)
    means = {"red": [], "blue": []}
    for i in range(100):
        r = np.random.default_rng(1000 + i)
        jitter = RenderJitter()
        torso, legs = body_masks(spec_red, jitter, (64, 32))
        body = torso | legs
        means["red"].append(render_ir(spec_red, jitter, r)[0][body].mean())
        r = np.random.default_rng(1000 + i)
        means["blue"].append(render_ir(spec_blue, jitter, r)[0][body].mean())
    assert abs(np.mean(means["red"]) - np.mean(means["blue"])) < 0.01


def test_render_ir_single_channel(rng):
    spec = sample_identity(rng, default_palette())
    img = render_ir(spec, RenderJitter(), rng)
    assert img.shape[0] == 1


def test_render_rejects_small_canvas(rng):
    spec = sample_identity(rng, default_palette())
    with pytest.raises(ValueError):
        render_rgb(spec, RenderJitter(), rng, size=(8, 8))


def test_render_range(rng):
    spec = sample_identity(rng, default_palette())
    for fn in (render_rgb, render_ir):
        img = fn(spec, sample_jitter(rng, DatasetConfig().jitter), rng, noise_std=0.1)
        assert img.min() >= -1.0 and img.max() <= 1.0


# --- dataset generation ---


def test_generate_dataset_counts(tmp_path):
    config = DatasetConfig(ids_train=100, ids_test=5, per_modality=4, height=16, width=16, seed=3)
    manifest = generate_dataset(config, tmp_path / "ds")
    train_records = manifest.records_for(split="train")
    assert len(train_records) == 100 * (4 + 4)
    assert len(manifest.records_for(split="train", modality="rgb")) == 400


def test_generate_dataset_deterministic(tmp_path, tiny_dataset):
    config = tiny_dataset.config
    again = generate_dataset(config, tmp_path / "again")
    assert again.manifest_bytes() == tiny_dataset.manifest_bytes()
    assert again.palette_bytes() == tiny_dataset.palette_bytes()
    rec = tiny_dataset.records[5]
    a = (tiny_dataset.root / rec.path).read_bytes()
    b = (again.root / rec.path).read_bytes()
    assert a == b


def test_generate_dataset_split_contract(tiny_dataset):
    assert set(tiny_dataset.train_ids).isdisjoint(tiny_dataset.test_ids)
    for split, ids in (("train", tiny_dataset.train_ids), ("test", tiny_dataset.test_ids)):
        for identity in ids:
            assert tiny_dataset.records_for(split=split, modality="rgb", identity=identity)
            assert tiny_dataset.records_for(split=split, modality="ir", identity=identity)


def test_generate_dataset_refuses_nonempty_dir(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "junk.txt").write_text("hello")
    with pytest.raises(FileExistsError):
        generate_dataset(DatasetConfig(ids_train=4, ids_test=2, per_modality=1,
                                       height=16, width=16), out)


def test_manifest_round_trip(tiny_dataset):
    loaded = DatasetManifest.load(tiny_dataset.root)
    assert loaded.manifest_bytes() == tiny_dataset.manifest_bytes()
    assert loaded.palette_bytes() == tiny_dataset.palette_bytes()
    assert loaded.train_ids == tiny_dataset.train_ids


def test_ir_stored_single_channel_on_disk(tiny_dataset):
    rec = tiny_dataset.records_for(modality="ir")[0]
    with Image.open(tiny_dataset.root / rec.path) as img:
        assert img.mode == "L"
    pixels = tiny_dataset.load_pixels(rec)
    assert pixels.shape[0] == 3  # replicated on load
    assert np.array_equal(pixels[0], pixels[1]) and np.array_equal(pixels[1], pixels[2])


def test_loaded_pixels_in_range(tiny_dataset):
    for rec in tiny_dataset.records[:8]:
        pixels = tiny_dataset.load_pixels(rec)
        assert pixels.min() >= -1.0 and pixels.max() <= 1.0


def test_render_params_rederivation(tiny_dataset):
    # re-render a stored image from the re-derived (spec, jitter) and rng stream
    from crossreid.synth_data import _rng_for, _STREAM_RENDER, _to_uint8

    index = 3
    rec = tiny_dataset.records[index]
    spec, jitter = tiny_dataset.record_render_params(index)
    rng = _rng_for(tiny_dataset.config.seed, _STREAM_RENDER, index)
    sample_jitter(rng, tiny_dataset.config.jitter)  # advance the stream as generation did
    cfg = tiny_dataset.config
    if rec.modality == "rgb":
        img = render_rgb(spec, jitter, rng, tiny_dataset.palette, (cfg.height, cfg.width),
                         cfg.noise_std_rgb)
    else:
        img = render_ir(spec, jitter, rng, tiny_dataset.palette, (cfg.height, cfg.width),
                        cfg.noise_std_ir)
    stored = np.asarray(Image.open(tiny_dataset.root / rec.path))
    rendered = _to_uint8(img if rec.modality == "rgb" else img[0:1])
    if rec.modality == "rgb":
        rendered = rendered.transpose(1, 2, 0)
    else:
        rendered = rendered[0]
    assert np.array_equal(stored, rendered)


def test_identity_specs_match_generation(tiny_dataset):
    specs = tiny_dataset.identity_specs()
    assert len(specs) == tiny_dataset.config.ids_train + tiny_dataset.config.ids_test
    values = {(s.shape, s.base_pose_deg, s.upper_color, s.lower_color) for s in specs.values()}
    assert len(values) == len(specs)  # all identities distinct


# --- batch loading ---


def test_load_batch_shapes_and_alignment(tiny_dataset, rng):
    batch_rgb, batch_ir = load_batch(tiny_dataset, PKSampler(4, 2), rng)
    assert len(batch_rgb) == len(batch_ir) == 8
    assert sorted(batch_rgb.identities.tolist()) == sorted(batch_ir.identities.tolist())
    assert batch_rgb.identities.tolist() == batch_ir.identities.tolist()  # aligned ordering
    assert all(m == "rgb" for m in batch_rgb.modalities)
    assert all(m == "ir" for m in batch_ir.modalities)


def test_load_batch_deterministic(tiny_dataset):
    a = load_batch(tiny_dataset, PKSampler(4, 2), np.random.default_rng(5), flip=True)
    b = load_batch(tiny_dataset, PKSampler(4, 2), np.random.default_rng(5), flip=True)
    assert np.array_equal(a[0].pixels.numpy(), b[0].pixels.numpy())
    assert a[1].identities.tolist() == b[1].identities.tolist()


def test_load_batch_rejects_large_p(tiny_dataset, rng):
    with pytest.raises(ValueError):
        load_batch(tiny_dataset, PKSampler(p=99, k=1), rng)


def test_load_batch_coverage(tiny_dataset):
    rng = np.random.default_rng(11)
    seen = set()
    for _ in range(1000):
        batch_rgb, _ = load_batch(tiny_dataset, PKSampler(2, 1), rng)
        seen.update(batch_rgb.identities.tolist())
        if seen == set(tiny_dataset.train_ids):
            break
    assert seen == set(tiny_dataset.train_ids)
