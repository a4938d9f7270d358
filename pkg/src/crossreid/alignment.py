"""Feature alignment and identity-discriminative learning.

The set-level encoder shares parameter storage with the generation module's
content encoder (one nn.Module instance referenced by both), so both
modalities land in one feature space. An instance-level tail refines those
features; a classifier over training identities drives the instance-level
KL alignment of generated pairs and the classification loss, and a
batch-hard triplet loss shapes the pooled embedding.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .generation import ArchConfig, ContentEncoder, GenerationModel, PairedQuads, _pixels
from .networks import ResBlock

KL_EPS = 1e-8


class InstanceEncoder(nn.Module):
    """Residual backbone tail mapping content features to the instance space T."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c, t = arch.content_channels, arch.instance_channels
        layers = [nn.Conv2d(c, t, 3, 2, 1), nn.BatchNorm2d(t), nn.ReLU(inplace=True)]
        layers += [ResBlock(t, norm="bn") for _ in range(arch.n_instance_res)]
        self.net = nn.Sequential(*layers)

    def forward(self, m):
        return self.net(m)


class AlignmentModel(nn.Module):
    """Set-level encoder, instance-level encoder and identity classifier.

    When `set_encoder` is the generation model's content encoder, updates
    through either handle are observed through the other (weight sharing).
    """

    def __init__(self, arch: ArchConfig, num_classes: int, set_encoder: ContentEncoder | None = None,
                 margin: float = 0.3):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.margin = margin
        self.set_encoder = set_encoder if set_encoder is not None else ContentEncoder(arch)
        self.instance_encoder = InstanceEncoder(arch)
        self.feat_bn = nn.BatchNorm1d(arch.instance_channels)
        self.fc = nn.Linear(arch.instance_channels, num_classes)

    def logits(self, v):
        return self.fc(self.feat_bn(v))


def make_alignment_model(generation: GenerationModel, num_classes: int, share_set_encoder: bool,
                         margin: float = 0.3) -> AlignmentModel:
    enc = generation.content_encoder if share_set_encoder else None
    return AlignmentModel(generation.arch, num_classes, set_encoder=enc, margin=margin)


def encode_set_level(model: AlignmentModel, batch) -> torch.Tensor:
    """Set-level aligned features M; equals the content code under weight sharing."""
    return model.set_encoder(_pixels(batch))


def encode_instance_level(model: AlignmentModel, m: torch.Tensor):
    """Instance-level maps T and their spatial averages V."""
    t = model.instance_encoder(m)
    v = t.mean(dim=(2, 3))
    return t, v


def classify(model: AlignmentModel, v: torch.Tensor, training_mode: bool) -> torch.Tensor:
    """Per-identity probabilities; batch-norm uses running stats in inference mode."""
    if not torch.isfinite(v).all():
        raise FloatingPointError("non-finite feature vectors passed to classifier")
    was_training = model.feat_bn.training
    model.feat_bn.train(training_mode)
    try:
        logits = model.logits(v)
    finally:
        model.feat_bn.train(was_training)
    return F.softmax(logits, dim=1)


def kl_divergence(p1: torch.Tensor, p2: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """Row-wise KL(p1 || p2) in nats, with both sides eps-floored and renormalized."""
    p1 = torch.clamp(p1, min=eps)
    p1 = p1 / p1.sum(dim=-1, keepdim=True)
    p2 = torch.clamp(p2, min=eps)
    p2 = p2 / p2.sum(dim=-1, keepdim=True)
    return (p1 * (torch.log(p1) - torch.log(p2))).sum(dim=-1)


def _probabilities(model, images, training_mode):
    m = encode_set_level(model, images)
    _, v = encode_instance_level(model, m)
    return classify(model, v, training_mode)


def align_loss(model: AlignmentModel, quads: PairedQuads, training_mode: bool = True) -> torch.Tensor:
    """Instance-level alignment: KL between classifier predictions of each pair.

    Pair ordering: KL(p(x_ir) || p(x_ir2rgb)) averaged over quads, plus
    KL(p(x_rgb2ir) || p(x_rgb)) averaged over quads.
    """
    p_ir = _probabilities(model, quads.x_ir, training_mode)
    p_ir2rgb = _probabilities(model, quads.x_ir2rgb, training_mode)
    p_rgb2ir = _probabilities(model, quads.x_rgb2ir, training_mode)
    p_rgb = _probabilities(model, quads.x_rgb, training_mode)
    return kl_divergence(p_ir, p_ir2rgb).mean() + kl_divergence(p_rgb2ir, p_rgb).mean()


def cls_loss(model: AlignmentModel, v_real: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log probability of the ground-truth identity."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels outside [0, {model.num_classes}): "
                         f"min {int(labels.min())}, max {int(labels.max())}")
    return F.cross_entropy(model.logits(v_real), labels)


def pairwise_distances(v: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with a clamped sqrt for stable gradients."""
    sq = (v ** 2).sum(dim=1)
    d2 = sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * (v @ v.t())
    return torch.sqrt(torch.clamp(d2, min=1e-12))


def triplet_loss(v: torch.Tensor, labels, margin: float = 0.3,
                 convention: str = "distance") -> torch.Tensor:
    """Batch-hard triplet loss over Euclidean distances.

    Per anchor the hardest positive distance D_ap and hardest negative
    distance D_an enter a hinge. `convention="distance"` (default) uses
    [margin + D_ap - D_an]+; `convention="printed"` keeps the opposite signs,
    [margin - D_ap + D_an]+.
    """
    if convention not in ("distance", "printed"):
        raise ValueError(f"unknown triplet convention {convention!r}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = v.shape[0]
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    pos_mask = same & ~torch.eye(n, dtype=torch.bool)
    neg_mask = ~same
    if not neg_mask.any():
        raise ValueError("triplet loss needs at least two identities in the batch")
    has_pos = pos_mask.any(dim=1)
    if not has_pos.any():
        raise ValueError("triplet loss needs at least one identity with two items")

    dist = pairwise_distances(v)
    neg_inf = torch.finfo(dist.dtype).min
    pos_inf = torch.finfo(dist.dtype).max
    d_ap = torch.where(pos_mask, dist, torch.full_like(dist, neg_inf)).max(dim=1).values
    d_an = torch.where(neg_mask, dist, torch.full_like(dist, pos_inf)).min(dim=1).values
    if convention == "distance":
        hinge = torch.clamp(margin + d_ap - d_an, min=0.0)
    else:
        hinge = torch.clamp(margin - d_ap + d_an, min=0.0)
    return hinge[has_pos].mean()


def triplet_loss_exhaustive(v: torch.Tensor, labels, margin: float = 0.3,
                            convention: str = "distance") -> torch.Tensor:
    """Reference implementation enumerating all (anchor, positive, negative) triplets
    and taking each anchor's hardest pair; used to validate the mined version."""
    labels = [int(x) for x in labels]
    n = v.shape[0]
    dist = pairwise_distances(v)
    hinges = []
    any_negative = False
    for a in range(n):
        pos = [p for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [q for q in range(n) if labels[q] != labels[a]]
        any_negative = any_negative or bool(neg)
        if not pos or not neg:
            continue
        d_ap = max(dist[a, p] for p in pos)
        d_an = min(dist[a, q] for q in neg)
        if convention == "distance":
            hinges.append(torch.clamp(margin + d_ap - d_an, min=0.0))
        else:
            hinges.append(torch.clamp(margin - d_ap + d_an, min=0.0))
    if not any_negative:
        raise ValueError("triplet loss needs at least two identities in the batch")
    if not hinges:
        raise ValueError("triplet loss needs at least one identity with two items")
    return torch.stack(hinges).mean()


def extract_features(model: AlignmentModel, batch) -> torch.Tensor:
    """Retrieval features V (pooled, pre-batch-norm), computed in inference mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            m = encode_set_level(model, batch)
            _, v = encode_instance_level(model, m)
    finally:
        model.train(was_training)
    return v


def extract_features_numpy(model: AlignmentModel, pixels: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Chunked feature extraction for evaluation; returns float64 rows."""
    out = []
    for i in range(0, len(pixels), batch_size):
        chunk = torch.as_tensor(pixels[i:i + batch_size], dtype=torch.float32)
        out.append(extract_features(model, chunk).double().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.arch.instance_channels))
