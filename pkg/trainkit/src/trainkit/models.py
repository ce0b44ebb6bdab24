"""Network definitions.

The segmentation network pairs a 34-layer residual encoder (two 3x3
convolutions per block, stage widths 64/128/256/512, block counts
3/4/6/3) with a skip-connected decoder that restores full resolution via
nearest-neighbor upsampling and 3x3 convolutions. The classifier is the
50-layer residual network: a large-filter stem (Conv1), four bottleneck
stages (Conv2-Conv5), global average pooling, and a two-way head.

Every building block maps onto the inference engine's operator subset
(Conv/Relu/Add/Concat/MaxPool/Resize-nearest/GAP/Flatten/Gemm/
Sigmoid/Softmax); batch normalization exists only at training time and
is folded into the convolutions at export.
"""

from __future__ import annotations

from typing import List, Tuple

import torch
from torch import nn

ENCODER_BLOCK_COUNTS = (3, 4, 6, 3)
ENCODER_STAGE_WIDTHS = (64, 128, 256, 512)
CLASSIFIER_BLOCK_COUNTS = (3, 4, 6, 3)
CLASSIFIER_STAGE_WIDTHS = (64, 128, 256, 512)
BOTTLENECK_EXPANSION = 4


def _conv_bn(cin: int, cout: int, kernel: int, stride: int = 1) -> Tuple[nn.Conv2d, nn.BatchNorm2d]:
    conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False)
    return conv, nn.BatchNorm2d(cout)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1) -> None:
        super().__init__()
        self.stride = stride
        self.conv1, self.bn1 = _conv_bn(cin, cout, 3, stride)
        self.conv2, self.bn2 = _conv_bn(cout, cout, 3)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.proj_bn = nn.BatchNorm2d(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return self.relu(y + shortcut)


class Bottleneck(nn.Module):
    def __init__(self, cin: int, cmid: int, stride: int = 1) -> None:
        super().__init__()
        self.stride = stride
        cout = cmid * BOTTLENECK_EXPANSION
        self.conv1, self.bn1 = _conv_bn(cin, cmid, 1)
        self.conv2, self.bn2 = _conv_bn(cmid, cmid, 3, stride)
        self.conv3, self.bn3 = _conv_bn(cmid, cout, 1)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.proj_bn = nn.BatchNorm2d(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return self.relu(y + shortcut)


class ResidualEncoder(nn.Module):
    """34-layer backbone; forward returns the five skip feature maps."""

    def __init__(self, in_channels: int = 1) -> None:
        super().__init__()
        self.conv1, self.bn1 = _conv_bn(in_channels, 64, 7, stride=2)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stages = nn.ModuleList()
        cin = 64
        for count, width, stride in zip(
            ENCODER_BLOCK_COUNTS, ENCODER_STAGE_WIDTHS, (1, 2, 2, 2)
        ):
            blocks: List[nn.Module] = []
            for i in range(count):
                blocks.append(BasicBlock(cin, width, stride if i == 0 else 1))
                cin = width
            self.stages.append(nn.Sequential(*blocks))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        c1 = self.relu(self.bn1(self.conv1(x)))
        feats = [c1]
        y = self.maxpool(c1)
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats  # strides 2, 4, 8, 16, 32


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int) -> None:
        super().__init__()
        self.up = nn.Upsample(scale_factor=2.0, mode="nearest")
        self.conv1, self.bn1 = _conv_bn(cin + cskip, cout, 3)
        self.conv2, self.bn2 = _conv_bn(cout, cout, 3)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        y = torch.cat([self.up(x), skip], dim=1)
        y = self.relu(self.bn1(self.conv1(y)))
        return self.relu(self.bn2(self.conv2(y)))


class SegmentationNet(nn.Module):
    """Intensity slice (N,1,S,S) -> probability map (N,1,S,S); S % 32 == 0."""

    nominal_depth = 34

    def __init__(self) -> None:
        super().__init__()
        self.encoder = ResidualEncoder(1)
        widths = ENCODER_STAGE_WIDTHS
        self.dec4 = DecoderBlock(widths[3], widths[2], widths[2])
        self.dec3 = DecoderBlock(widths[2], widths[1], widths[1])
        self.dec2 = DecoderBlock(widths[1], widths[0], widths[0])
        self.dec1 = DecoderBlock(widths[0], 64, 64)
        self.up0 = nn.Upsample(scale_factor=2.0, mode="nearest")
        self.conv0, self.bn0 = _conv_bn(64, 32, 3)
        self.relu = nn.ReLU(inplace=True)
        self.head = nn.Conv2d(32, 1, 1)
        self.sigmoid = nn.Sigmoid()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c1, c2, c3, c4, c5 = self.encoder(x)
        y = self.dec4(c5, c4)
        y = self.dec3(y, c3)
        y = self.dec2(y, c2)
        y = self.dec1(y, c1)
        y = self.relu(self.bn0(self.conv0(self.up0(y))))
        return self.sigmoid(self.head(y))


class CascadeClassifierNet(nn.Module):
    """Masked-structure rows (N,3,S,S) -> two-way softmax (N,2)."""

    nominal_depth = 50

    def __init__(self) -> None:
        super().__init__()
        self.conv1, self.bn1 = _conv_bn(3, 64, 7, stride=2)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stages = nn.ModuleList()
        cin = 64
        for count, width, stride in zip(
            CLASSIFIER_BLOCK_COUNTS, CLASSIFIER_STAGE_WIDTHS, (1, 2, 2, 2)
        ):
            blocks: List[nn.Module] = []
            for i in range(count):
                blocks.append(Bottleneck(cin, width, stride if i == 0 else 1))
                cin = width * BOTTLENECK_EXPANSION
            self.stages.append(nn.Sequential(*blocks))
        self.fc = nn.Linear(cin, 2)
        self.softmax = nn.Softmax(dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        y = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for stage in self.stages:
            y = stage(y)
        y = y.mean(dim=(2, 3))
        return self.fc(y)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.softmax(self.logits(x))
