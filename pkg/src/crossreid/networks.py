"""Convolutional building blocks shared by the generation and alignment networks."""

import torch
import torch.nn as nn


class AdaptiveInstanceNorm2d(nn.Module):
    """Instance norm whose affine parameters are assigned externally per forward.

    ``weight`` and ``bias`` are plain tensors of shape [N, C] filled in by
    :func:`assign_adain_params` before each decode; they are not learnable
    parameters of this layer. The scale is applied as (1 + weight) so a
    zero-initialized mapping network starts from a healthy identity scale.
    """

    def __init__(self, num_features, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.weight = None
        self.bias = None

    def forward(self, x):
        if self.weight is None or self.bias is None:
            raise RuntimeError("AdaIN parameters not assigned before forward")
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        x_norm = (x - mean) / torch.sqrt(var + self.eps)
        w = self.weight.unsqueeze(-1).unsqueeze(-1)
        b = self.bias.unsqueeze(-1).unsqueeze(-1)
        return (1.0 + w) * x_norm + b


def num_adain_params(module):
    """Total number of (scale, shift) values the AdaIN layers of `module` consume."""
    n = 0
    for m in module.modules():
        if isinstance(m, AdaptiveInstanceNorm2d):
            n += 2 * m.num_features
    return n


def assign_adain_params(module, params):
    """Distribute a [N, num_adain_params] tensor over the AdaIN layers of `module`."""
    for m in module.modules():
        if isinstance(m, AdaptiveInstanceNorm2d):
            m.bias = params[:, : m.num_features]
            m.weight = params[:, m.num_features : 2 * m.num_features]
            params = params[:, 2 * m.num_features :]
    if params.shape[1] != 0:
        raise ValueError(f"{params.shape[1]} unused AdaIN parameters")


def _norm_layer(kind, channels):
    if kind == "in":
        return nn.InstanceNorm2d(channels)
    if kind == "bn":
        return nn.BatchNorm2d(channels)
    if kind == "adain":
        return AdaptiveInstanceNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind: {kind!r}")


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a skip connection; norm is 'in', 'bn', 'adain' or 'none'."""

    def __init__(self, channels, norm="in"):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = _norm_layer(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm2 = _norm_layer(norm, channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class MLP(nn.Module):
    """Small fully-connected mapping network (ReLU between layers, linear output)."""

    def __init__(self, in_dim, out_dim, hidden_dim, n_layers=2):
        super().__init__()
        layers = []
        dim = in_dim
        for _ in range(n_layers - 1):
            layers += [nn.Linear(dim, hidden_dim), nn.ReLU(inplace=True)]
            dim = hidden_dim
        layers += [nn.Linear(dim, out_dim)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)
