#!/usr/bin/env python
# -----------------------------------------------------------------------------
# File Name : layers.py
#
# Layer primitives shared by the generators and critics: spectral
# normalization, convolution blocks, residual blocks and size probing.
#
# Licence : Apache License, Version 2.0
# -----------------------------------------------------------------------------

import logging

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional as F
from torch.nn import Parameter

logger = logging.getLogger(__name__)

device = 'cuda' if torch.cuda.is_available() else 'cpu'

# power iterations run when a kernel is first wrapped, so u/v start near the top singular pair
SN_WARMUP_ITERATIONS = 20


def l2normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


class PowerIterationState(object):
    """Left (*u*) and right (*v*) singular vector estimates of a kernel flattened to (out, -1)."""

    def __init__(self, u, v):
        self.u = u
        self.v = v

    @classmethod
    def for_weight(cls, weight):
        height = weight.shape[0]
        width = weight.reshape(height, -1).shape[1]
        u = l2normalize(weight.new_empty(height).normal_(0, 1))
        v = l2normalize(weight.new_empty(width).normal_(0, 1))
        return cls(u, v)


def spectral_normalize(weight, state, power_iterations=1, eps=1e-12):
    """Divide *weight* by its top singular value, estimated after *power_iterations* steps.

    *state* is a PowerIterationState updated in place. Gradients flow through the
    division but not through the power iteration. A zero kernel comes back unchanged.
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(power_iterations):
            state.v.copy_(l2normalize(torch.mv(w.t(), state.u), eps))
            state.u.copy_(l2normalize(torch.mv(w, state.v), eps))
    # the graph keeps copies; u and v change in place at the next forward
    u, v = state.u.clone(), state.v.clone()
    sigma = torch.dot(u, torch.mv(w, v))
    if abs(sigma.item()) < eps:
        return weight
    return weight / sigma


class SpectralNorm(nn.Module):
    """Wrap a conv or linear *module* so its kernel is spectrally normalized at every forward.

    One power-iteration step is taken per forward in training mode; evaluation mode
    reuses the stored vectors, so eval forwards do not mutate state.
    """

    def __init__(self, module, target='weight', power_iterations=1, warmup=SN_WARMUP_ITERATIONS):
        super(SpectralNorm, self).__init__()
        self.module = module
        self.target = target
        self.power_iterations = power_iterations

        w = getattr(module, target)
        state = PowerIterationState.for_weight(w.data)
        del module._parameters[target]
        module.register_parameter(target + '_bar', Parameter(w.data))
        module.register_buffer(target + '_u', state.u)
        module.register_buffer(target + '_v', state.v)
        self.power_iterate(warmup)
        setattr(module, target, self.normalized_weight().detach())

    @property
    def weight_bar(self):
        return getattr(self.module, self.target + '_bar')

    @property
    def state(self):
        return PowerIterationState(getattr(self.module, self.target + '_u'),
                                   getattr(self.module, self.target + '_v'))

    def power_iterate(self, n):
        with torch.no_grad():
            spectral_normalize(self.weight_bar, self.state, power_iterations=n)

    def normalized_weight(self):
        return spectral_normalize(self.weight_bar, self.state, power_iterations=0)

    def forward(self, *args):
        iterations = self.power_iterations if self.training else 0
        setattr(self.module, self.target,
                spectral_normalize(self.weight_bar, self.state, power_iterations=iterations))
        return self.module.forward(*args)


def spectral_modules(module):
    return [m for m in module.modules() if isinstance(m, SpectralNorm)]


def init_weights(module, std=0.02):
    """Normal(0, *std*) kernels and zero biases for every plain conv/linear layer under *module*."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and 'weight' in m._parameters:
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def make_activation(name):
    if name == 'relu':
        return nn.ReLU()
    elif name == 'lrelu':
        return nn.LeakyReLU(0.2)
    elif name == 'tanh':
        return nn.Tanh()
    raise ValueError('unsupported activation: %r' % name)


def sn_conv2d(in_channels, out_channels, kernel_size, stride=1, padding=0, std=0.02):
    conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
    init_weights(conv, std)
    return SpectralNorm(conv)


def sn_linear(in_features, out_features, std=0.02):
    linear = nn.Linear(in_features, out_features)
    init_weights(linear, std)
    return SpectralNorm(linear)


def conv_block(in_channels, out_channels, kernel_size, stride=1, padding=0,
               norm=True, activation='lrelu', spectral=False):
    """Conv, then instance norm (generators only), then activation."""
    if spectral:
        layers = [sn_conv2d(in_channels, out_channels, kernel_size, stride, padding)]
    else:
        layers = [nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)]
    if norm:
        layers.append(nn.InstanceNorm2d(out_channels, affine=False))
    if activation is not None:
        layers.append(make_activation(activation))
    return nn.Sequential(*layers)


def down_block(in_channels, out_channels, norm=True, spectral=False):
    """Halves the spatial size (rounding down)."""
    return conv_block(in_channels, out_channels, 4, stride=2, padding=1,
                      norm=norm, activation='lrelu', spectral=spectral)


class UpBlock(nn.Module):
    """Nearest-neighbour resize to an explicit size, optional skip concat, then 3x3 conv, instance norm and ReLU.

    *in_channels* counts the skip channels too.
    """

    def __init__(self, in_channels, out_channels, size):
        super(UpBlock, self).__init__()
        self.size = tuple(size)
        self.conv = conv_block(in_channels, out_channels, 3, padding=1, activation='relu')

    def forward(self, x, skip=None):
        x = F.interpolate(x, size=self.size, mode='nearest')
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super(ResidualBlock, self).__init__()
        self.body = nn.Sequential(
            conv_block(channels, channels, 3, padding=1, activation='relu'),
            conv_block(channels, channels, 3, padding=1, activation=None),
        )

    def forward(self, x):
        return x + self.body(x)


def probe_shapes(layers, input_shape):
    """Run a zero tensor of *input_shape* (without batch axis) through *layers*; return every output shape."""
    shapes = []
    with torch.no_grad():
        x = torch.zeros(input_shape).unsqueeze(0)
        for layer in layers:
            x = layer(x)
            shapes.append(tuple(x.shape[1:]))
    return shapes


def flat_size(shape):
    return int(np.prod(shape))
