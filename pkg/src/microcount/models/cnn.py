"""Convolutional backbones: a plain conv/pool stack and bottleneck ResNets."""

from __future__ import annotations

from math import prod

from ..tensor import ops
from ..tensor import flops as fl
from .layers import BatchNorm2d, Conv2d, MaxPool2d
from .module import Module


class PlainCNN(Module):
    """Stages of conv3x3 -> ReLU -> maxpool2, flattened."""

    output = "features"

    def __init__(self, image_size, channels, rng, in_channels=3):
        if image_size % (2 ** len(channels)):
            raise ValueError(f"image size {image_size} must be divisible by {2 ** len(channels)}")
        self.convs = []
        cin = in_channels
        for c in channels:
            self.convs.append(Conv2d(cin, c, 3, rng, padding=1))
            cin = c
        self.pool = MaxPool2d(2)
        side = image_size // 2 ** len(channels)
        self.feature_dim = channels[-1] * side * side

    def forward(self, x, lead=None):
        for conv in self.convs:
            x = self.pool(ops.relu(conv(x)))
        return ops.reshape(x, (x.shape[0], -1))

    def flops(self, shape, fpm=1.0, lead=False):
        total = 0.0
        for conv in self.convs:
            c, shape = conv.flops(shape, fpm)
            total += c + fl.elementwise(*shape)
            c, shape = self.pool.flops(shape, fpm)
            total += c
        return total, (shape[0], prod(shape[1:]))


class Bottleneck(Module):
    expansion = 4

    def __init__(self, cin, planes, stride, rng):
        cout = planes * self.expansion
        self.conv1 = Conv2d(cin, planes, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(planes)
        self.conv2 = Conv2d(planes, planes, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = BatchNorm2d(planes)
        self.conv3 = Conv2d(planes, cout, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.down_bn = BatchNorm2d(cout)

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = ops.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.down is None else self.down_bn(self.down(x))
        return ops.relu(out + identity)

    def flops(self, shape, fpm=1.0):
        total = 0.0
        s = shape
        for conv, relu in ((self.conv1, True), (self.conv2, True), (self.conv3, False)):
            c, s = conv.flops(s, fpm)
            total += c + fl.elementwise(*s) * (2 if relu else 1)
        if self.down is not None:
            total += self.down.flops(shape, fpm)[0] + fl.elementwise(*s)
        return total + 2 * fl.elementwise(*s), s


class ResNet(Module):
    """Stem (conv7 stride 2, BN, ReLU, maxpool3 stride 2) then bottleneck
    stages; features are the spatial mean of the last stage."""

    output = "features"

    def __init__(self, blocks, rng, base_width=64, in_channels=3):
        self.stem = Conv2d(in_channels, base_width, 7, rng, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(base_width)
        self.pool = MaxPool2d(3, 2, 1)
        self.layers = []
        cin = base_width
        for i, n in enumerate(blocks):
            planes = base_width * 2 ** i
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                self.layers.append(Bottleneck(cin, planes, stride, rng))
                cin = planes * Bottleneck.expansion
        self.feature_dim = cin

    def forward(self, x, lead=None):
        x = self.pool(ops.relu(self.stem_bn(self.stem(x))))
        for blk in self.layers:
            x = blk(x)
        return ops.mean(x, axis=(2, 3))

    def flops(self, shape, fpm=1.0, lead=False):
        total, s = self.stem.flops(shape, fpm)
        total += 2 * fl.elementwise(*s)
        c, s = self.pool.flops(s, fpm)
        total += c
        for blk in self.layers:
            c, s = blk.flops(s, fpm)
            total += c
        return total + fl.elementwise(*s), (s[0], s[1])
