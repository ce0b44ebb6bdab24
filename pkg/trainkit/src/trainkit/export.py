"""Export trained networks as portable model files.

Walks the known architectures module by module, folding each batch-norm
into its preceding convolution so the serialized graph contains only the
operators the inference engine executes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .models import BasicBlock, Bottleneck, CascadeClassifierNet, SegmentationNet
from .onnx_write import GraphBuilder


def fold_conv_bn(conv: nn.Conv2d, bn: nn.BatchNorm2d) -> Tuple[np.ndarray, np.ndarray]:
    """Absorb an eval-mode batch norm into the convolution's weight/bias."""
    with torch.no_grad():
        scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
        weight = conv.weight * scale[:, None, None, None]
        base = conv.bias if conv.bias is not None else torch.zeros_like(bn.running_mean)
        bias = bn.bias + (base - bn.running_mean) * scale
    return weight.numpy(), bias.numpy()


def _conv_only(conv: nn.Conv2d) -> Tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        weight = conv.weight.numpy()
        bias = (
            conv.bias.numpy()
            if conv.bias is not None
            else np.zeros(conv.out_channels, dtype=np.float32)
        )
    return weight, bias


def _emit_folded(gb: GraphBuilder, x: str, conv: nn.Conv2d, bn: Optional[nn.BatchNorm2d]) -> str:
    weight, bias = fold_conv_bn(conv, bn) if bn is not None else _conv_only(conv)
    return gb.conv(
        x, weight, bias, stride=int(conv.stride[0]), pad=int(conv.padding[0])
    )


def _emit_basic_block(gb: GraphBuilder, x: str, block: BasicBlock) -> str:
    y = gb.relu(_emit_folded(gb, x, block.conv1, block.bn1))
    y = _emit_folded(gb, y, block.conv2, block.bn2)
    shortcut = (
        _emit_folded(gb, x, block.proj, block.proj_bn) if block.proj is not None else x
    )
    return gb.relu(gb.add(y, shortcut))


def _emit_bottleneck(gb: GraphBuilder, x: str, block: Bottleneck) -> str:
    y = gb.relu(_emit_folded(gb, x, block.conv1, block.bn1))
    y = gb.relu(_emit_folded(gb, y, block.conv2, block.bn2))
    y = _emit_folded(gb, y, block.conv3, block.bn3)
    shortcut = (
        _emit_folded(gb, x, block.proj, block.proj_bn) if block.proj is not None else x
    )
    return gb.relu(gb.add(y, shortcut))


def segmentation_model_bytes(net: SegmentationNet) -> bytes:
    net.eval()
    gb = GraphBuilder(graph_name="segmentation")
    enc = net.encoder
    c1 = gb.relu(_emit_folded(gb, gb.input_name, enc.conv1, enc.bn1))
    y = gb.maxpool(c1, kernel=3, stride=2, pad=1)
    skips = [c1]
    for stage in enc.stages:
        for block in stage:
            y = _emit_basic_block(gb, y, block)
        skips.append(y)
    c1, c2, c3, c4, c5 = skips

    y = c5
    for dec, skip in ((net.dec4, c4), (net.dec3, c3), (net.dec2, c2), (net.dec1, c1)):
        y = gb.concat([gb.upscale2x(y), skip])
        y = gb.relu(_emit_folded(gb, y, dec.conv1, dec.bn1))
        y = gb.relu(_emit_folded(gb, y, dec.conv2, dec.bn2))
    y = gb.upscale2x(y)
    y = gb.relu(_emit_folded(gb, y, net.conv0, net.bn0))
    y = _emit_folded(gb, y, net.head, None)
    return gb.build(gb.sigmoid(y))


def classifier_model_bytes(net: CascadeClassifierNet) -> bytes:
    net.eval()
    gb = GraphBuilder(graph_name="classifier")
    y = gb.relu(_emit_folded(gb, gb.input_name, net.conv1, net.bn1))
    y = gb.maxpool(y, kernel=3, stride=2, pad=1)
    for stage in net.stages:
        for block in stage:
            y = _emit_bottleneck(gb, y, block)
    y = gb.flatten(gb.global_average_pool(y))
    with torch.no_grad():
        y = gb.gemm(y, net.fc.weight.numpy(), net.fc.bias.numpy())
    return gb.build(gb.softmax(y))


def export_model(net: nn.Module, path) -> Path:
    if isinstance(net, SegmentationNet):
        blob = segmentation_model_bytes(net)
    elif isinstance(net, CascadeClassifierNet):
        blob = classifier_model_bytes(net)
    else:
        raise TypeError(f"no export walker for {type(net).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path
