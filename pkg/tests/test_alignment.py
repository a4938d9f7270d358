import math

import numpy as np
import pytest
import torch

from conftest import small_arch
from crossreid import alignment as al
from crossreid.alignment import (AlignmentModel, align_loss, classify, cls_loss,
                                 encode_instance_level, encode_set_level, extract_features,
                                 kl_divergence, make_alignment_model, triplet_loss,
                                 triplet_loss_exhaustive)
from crossreid.generation import GenerationModel, PairedQuads, encode_content, exchange_generate, intra_person_pairing
from crossreid.synth_data import PKSampler, load_batch

N_CLASSES = 12


@pytest.fixture()
def models():
    torch.manual_seed(0)
    generation = GenerationModel(small_arch())
    align = make_alignment_model(generation, N_CLASSES, share_set_encoder=True)
    return generation, align


def test_set_level_equals_content_encoder(models, tiny_dataset, rng):
    generation, align = models
    batch, _ = load_batch(tiny_dataset, PKSampler(3, 1), rng)
    with torch.no_grad():
        assert torch.equal(encode_set_level(align, batch), encode_content(generation, batch))


def test_shared_storage_updates_both_views(models, tiny_dataset, rng):
    generation, align = models
    batch, _ = load_batch(tiny_dataset, PKSampler(3, 1), rng)
    opt = torch.optim.SGD(align.parameters(), lr=0.1)
    m = encode_set_level(align, batch)
    _, v = encode_instance_level(align, m)
    labels = torch.tensor([tiny_dataset.train_label(int(i)) for i in batch.identities])
    loss = cls_loss(align, v, labels)
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        after_set = encode_set_level(align, batch)
        after_content = encode_content(generation, batch)
    assert torch.equal(after_set, after_content)
    assert align.set_encoder is generation.content_encoder


def test_separate_encoder_not_shared(tiny_dataset, rng):
    torch.manual_seed(0)
    generation = GenerationModel(small_arch())
    align = make_alignment_model(generation, N_CLASSES, share_set_encoder=False)
    assert align.set_encoder is not generation.content_encoder
    batch, _ = load_batch(tiny_dataset, PKSampler(2, 1), rng)
    with torch.no_grad():
        a = encode_set_level(align, batch)
        b = encode_content(generation, batch)
    assert not torch.equal(a, b)


def test_instance_level_pooling(models):
    _, align = models
    m = torch.randn(3, small_arch().content_channels, 8, 4)
    t, v = encode_instance_level(align, m)
    assert v.shape == (3, small_arch().instance_channels)
    assert torch.allclose(v, t.mean(dim=(2, 3)))


def test_instance_level_pooling_properties(models, monkeypatch):
    _, align = models

    class _Identity(torch.nn.Module):
        def forward(self, x):
            return x

    monkeypatch.setattr(align, "instance_encoder", _Identity())
    const = torch.full((2, 5, 4, 4), 3.25)
    _, v = encode_instance_level(align, const)
    assert torch.all(v == 3.25)
    t = torch.randn(2, 5, 4, 4)
    _, v1 = encode_instance_level(align, t)
    perm = torch.randperm(16)
    t_perm = t.reshape(2, 5, 16)[:, :, perm].reshape(2, 5, 4, 4)
    _, v2 = encode_instance_level(align, t_perm)
    assert torch.allclose(v1, v2, atol=1e-6)


# --- classifier ---


def test_classify_uniform_for_equal_logits(models):
    _, align = models
    with torch.no_grad():
        align.fc.weight.zero_()
        align.fc.bias.zero_()
    v = torch.randn(4, small_arch().instance_channels)
    p = classify(align, v, training_mode=False)
    assert torch.allclose(p, torch.full_like(p, 1.0 / N_CLASSES), atol=1e-7)


def test_classify_rows_normalized(models):
    _, align = models
    p = classify(align, torch.randn(6, small_arch().instance_channels), training_mode=False)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(dim=1), torch.ones(6), atol=1e-6)


def test_classify_shift_invariance(models):
    _, align = models
    v = torch.randn(3, small_arch().instance_channels)
    p1 = classify(align, v, training_mode=False)
    with torch.no_grad():
        align.fc.bias.add_(2.5)  # same constant added to every logit
    p2 = classify(align, v, training_mode=False)
    assert torch.allclose(p1, p2, atol=1e-6)


def test_classify_rejects_nonfinite(models):
    _, align = models
    v = torch.randn(2, small_arch().instance_channels)
    v[0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        classify(align, v, training_mode=False)


def test_classify_inference_uses_running_stats(models):
    _, align = models
    align.eval()
    v = torch.randn(4, small_arch().instance_channels)
    a = classify(align, v, training_mode=False)
    b = classify(align, v[:2], training_mode=False)
    assert torch.allclose(a[:2], b, atol=1e-7)  # batch composition must not matter


# --- KL / alignment loss ---


def test_kl_zero_when_equal():
    p = torch.tensor([[0.3, 0.7], [0.5, 0.5]])
    assert torch.allclose(kl_divergence(p, p), torch.zeros(2), atol=1e-9)


def test_kl_two_class_closed_form():
    p1 = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    p2 = torch.tensor([[0.25, 0.75]], dtype=torch.float64)
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert float(kl_divergence(p1, p2)) == pytest.approx(expected, abs=1e-9)
    assert float(kl_divergence(p1, p2)) == pytest.approx(0.1438, abs=1e-4)


def test_kl_nonnegative_random_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = rng.integers(2, 9)
        p1 = rng.dirichlet(np.ones(k))
        p2 = rng.dirichlet(np.ones(k))
        value = float(kl_divergence(torch.tensor(p1[None]), torch.tensor(p2[None])))
        direct = float(np.sum(p1 * (np.log(p1) - np.log(p2))))  # summation oracle
        assert value >= -1e-12
        assert value == pytest.approx(direct, abs=1e-6)


def test_kl_finite_with_degenerate_inputs():
    p1 = torch.tensor([[1.0, 0.0]])
    p2 = torch.tensor([[0.0, 1.0]])
    value = float(kl_divergence(p1, p2))
    assert math.isfinite(value) and value > 0


def test_align_loss_zero_for_identical_pairs(models):
    _, align = models
    x = torch.rand(4, 3, 32, 16) * 2 - 1
    quads = PairedQuads(x_rgb=x, x_ir=x, x_ir2rgb=x, x_rgb2ir=x,
                        identities=torch.arange(4))
    with torch.no_grad():
        value = float(align_loss(align, quads, training_mode=False))
    assert value == pytest.approx(0.0, abs=1e-9)


def test_align_loss_nonnegative(models, tiny_dataset, rng):
    generation, align = models
    batch_rgb, batch_ir = load_batch(tiny_dataset, PKSampler(3, 2), rng)
    pairing = intra_person_pairing(batch_rgb.identities.numpy(),
                                   batch_ir.identities.numpy(), rng)
    with torch.no_grad():
        quads = exchange_generate(generation, batch_rgb, batch_ir, pairing)
        assert float(align_loss(align, quads, training_mode=False)) >= 0


# --- classification loss ---


def test_cls_loss_zero_when_confident(models):
    _, align = models
    labels = torch.tensor([0, 1, 2])

    # rig the classifier to pass features through as logits
    class _Rig(torch.nn.Module):
        def forward(self, v):
            return v

    align.feat_bn = _Rig()
    align.fc = _Rig()
    v = torch.full((3, N_CLASSES), -50.0)
    for i, lab in enumerate(labels):
        v[i, lab] = 50.0
    assert float(cls_loss(align, v, labels)) == pytest.approx(0.0, abs=1e-9)


def test_cls_loss_uniform_oracle():
    torch.manual_seed(0)
    generation = GenerationModel(small_arch())
    align = make_alignment_model(generation, 100, share_set_encoder=True)
    with torch.no_grad():
        align.fc.weight.zero_()
        align.fc.bias.zero_()
    v = torch.randn(5, small_arch().instance_channels)
    align.eval()
    assert float(cls_loss(align, v, torch.zeros(5, dtype=torch.long))) == pytest.approx(
        math.log(100.0), abs=1e-5)


def test_cls_loss_monotone_in_ground_truth_logit(models):
    _, align = models

    class _Rig(torch.nn.Module):
        def forward(self, v):
            return v

    align.feat_bn = _Rig()
    align.fc = _Rig()
    base = torch.zeros(1, N_CLASSES)
    losses = []
    for boost in (0.0, 0.5, 1.0, 2.0):
        v = base.clone()
        v[0, 3] = boost
        losses.append(float(cls_loss(align, v, torch.tensor([3]))))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_cls_loss_label_range(models):
    _, align = models
    v = torch.randn(2, small_arch().instance_channels)
    with pytest.raises(ValueError, match="labels outside"):
        cls_loss(align, v, torch.tensor([0, N_CLASSES]))


# --- triplet loss ---


def test_triplet_zero_when_margin_satisfied():
    # 1-D embedding: positives 0.1 apart, negatives >= 2.9 away
    v = torch.tensor([[0.0], [0.1], [3.0], [3.1]])
    labels = [0, 0, 1, 1]
    assert float(triplet_loss(v, labels, margin=0.3)) == 0.0


def test_triplet_equal_distances_gives_margin():
    v = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    labels = [0, 0, 1, 1]
    assert float(triplet_loss(v, labels, margin=0.3)) == pytest.approx(0.3, abs=1e-6)


def test_triplet_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = int(rng.integers(4, 9))
        labels = rng.integers(0, 3, size=n)
        while len(set(labels.tolist())) < 2 or not _has_pair(labels):
            labels = rng.integers(0, 3, size=n)
        v = torch.tensor(rng.normal(size=(n, 4)))
        mined = float(triplet_loss(v, labels, margin=0.3))
        brute = float(triplet_loss_exhaustive(v, labels, margin=0.3))
        assert mined == pytest.approx(brute, abs=1e-9), f"trial {trial}"


def _has_pair(labels):
    _, counts = np.unique(labels, return_counts=True)
    return (counts >= 2).any()


def test_triplet_six_item_hand_case():
    v = torch.tensor([[0.0], [0.2], [1.0], [1.1], [2.0], [2.4]])
    labels = [0, 0, 1, 1, 2, 2]
    assert float(triplet_loss(v, labels, margin=0.3)) == pytest.approx(
        float(triplet_loss_exhaustive(v, labels, margin=0.3)), abs=1e-9)


def test_triplet_single_identity_error():
    v = torch.randn(4, 3)
    with pytest.raises(ValueError, match="two identities"):
        triplet_loss(v, [5, 5, 5, 5])


def test_triplet_printed_convention():
    v = torch.tensor([[0.0], [0.1], [3.0], [3.1]])
    labels = [0, 0, 1, 1]
    # [m - D_ap + D_an]+ is large when negatives are far
    printed = float(triplet_loss(v, labels, margin=0.3, convention="printed"))
    assert printed > 2.0
    with pytest.raises(ValueError, match="convention"):
        triplet_loss(v, labels, convention="cosine")


# --- feature extraction ---


def test_extract_features_shape_and_determinism(models, tiny_dataset, rng):
    _, align = models
    batch, _ = load_batch(tiny_dataset, PKSampler(3, 1), rng)
    pixels = torch.cat([batch.pixels, batch.pixels[:1]], dim=0)  # duplicate first image
    v = extract_features(align, pixels)
    assert v.shape == (4, small_arch().instance_channels)
    assert torch.equal(v[0], v[3])
    assert align.training  # mode restored


def test_extract_features_ignores_train_mode_state(models, tiny_dataset, rng):
    _, align = models
    batch, _ = load_batch(tiny_dataset, PKSampler(2, 1), rng)
    align.train()
    a = extract_features(align, batch)
    align.eval()
    b = extract_features(align, batch)
    assert torch.equal(a, b)
