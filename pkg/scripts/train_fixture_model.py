"""Train the strawberry-tiny fixture model on procedurally generated scenes.

Builds a torch mirror of the parsed cfg, trains it with a plain YOLOv3
loss on an endless synthetic stream, and exports Darknet weights that the
numpy engine loads unchanged. Torch is only needed here, never by the package.

    python scripts/train_fixture_model.py --steps 1500 --out tests/data/strawberry-tiny.weights
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent))

from berrydpu.detector import letterbox  # noqa: E402
from berrydpu.model_ir import (  # noqa: E402
    BN_EPS, ConvWeights, WeightStore, bundled_config, load_config, save_weights,
)
from berrydpu.tensor_engine import maxpool_geometry  # noqa: E402
from synth_strawberries import render_scene  # noqa: E402


class TorchNet(nn.Module):
    def __init__(self, graph):
        super().__init__()
        self.graph = graph
        self.convs = nn.ModuleDict()
        for layer in graph.conv_layers:
            f, c, k, _ = graph.kernel_shape(layer.index)
            conv = nn.Conv2d(c, f, k, layer.stride, layer.padding, bias=not layer.batch_normalize)
            mods = [conv]
            if layer.batch_normalize:
                mods.append(nn.BatchNorm2d(f, eps=BN_EPS, momentum=0.03))
            self.convs[str(layer.index)] = nn.Sequential(*mods)

    def forward(self, x):
        outs, heads = [], []
        for layer in self.graph.layers:
            prev = outs[-1] if outs else x
            kind = layer.kind
            if kind == "convolutional":
                y = self.convs[str(layer.index)](prev)
                if layer.activation == "leaky":
                    y = F.leaky_relu(y, 0.1)
            elif kind == "maxpool":
                _, _, off, ah, aw = maxpool_geometry(layer.size, layer.stride, *prev.shape[2:])
                y = F.max_pool2d(F.pad(prev, (off, aw, off, ah), value=float("-inf")), layer.size, layer.stride)
            elif kind == "upsample":
                y = F.interpolate(prev, scale_factor=layer.stride, mode="nearest")
            elif kind == "route":
                y = torch.cat([outs[s] for s in layer.sources], 1)
            elif kind == "shortcut":
                y = prev + outs[layer.sources[0]]
            else:
                y = prev
                heads.append(prev)
            outs.append(y)
        return heads

    def export(self) -> WeightStore:
        convs = {}
        for layer in self.graph.conv_layers:
            seq = self.convs[str(layer.index)]
            conv = seq[0]
            k = conv.weight.detach().numpy().astype(np.float32)
            if layer.batch_normalize:
                bn = seq[1]
                convs[layer.index] = ConvWeights(
                    bn.bias.detach().numpy().astype(np.float32), k,
                    bn.weight.detach().numpy().astype(np.float32),
                    bn.running_mean.numpy().astype(np.float32),
                    bn.running_var.numpy().astype(np.float32),
                )
            else:
                convs[layer.index] = ConvWeights(conv.bias.detach().numpy().astype(np.float32), k)
        return WeightStore(convs)


def letterbox_labels(labels, tf):
    out = []
    for c, x, y, w, h in labels:
        px, py = tf.point_to_letterbox(x * tf.width, y * tf.height)
        out.append((c, px / tf.target_w, py / tf.target_h, w * tf.width * tf.scale / tf.target_w,
                    h * tf.height * tf.scale / tf.target_h))
    return out


def make_batch(rng, n):
    xs, targets = [], []
    for b in range(n):
        image, labels = render_scene(rng, max_berries=5, min_berries=0 if rng.random() < 0.1 else 1)
        if rng.random() < 0.5:
            image = image[:, ::-1]
            labels = [(c, 1 - x, y, w, h) for c, x, y, w, h in labels]
        x, tf = letterbox(np.ascontiguousarray(image))
        xs.append(x[0])
        targets += [(b, *t) for t in letterbox_labels(labels, tf)]
    return torch.from_numpy(np.stack(xs)), torch.tensor(targets, dtype=torch.float32).reshape(-1, 6)


def wh_iou(wh, anchors):
    inter = torch.min(wh[:, None], anchors[None]).prod(2)
    return inter / (wh.prod(1)[:, None] + anchors.prod(1)[None] - inter)


def box_iou(a, b):
    """(N,4) vs (M,4) in cx,cy,w,h."""
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    inter = (torch.min(a1, b1) - torch.max(a0, b0)).clamp(min=0).prod(2)
    return inter / (a[:, None, 2:].prod(2) + b[None, :, 2:].prod(2) - inter)


def yolo_loss(heads, targets, graph):
    net_w, net_h = graph.input_width, graph.input_height
    all_anchors = torch.tensor(graph.yolo_layers[0].anchors, dtype=torch.float32)
    best = wh_iou(targets[:, 4:6] * torch.tensor([net_w, net_h]), all_anchors).argmax(1) if len(targets) else None
    total = 0.0
    for layer, head in zip(graph.yolo_layers, heads):
        bsz, _, gh, gw = head.shape
        na = len(layer.mask)
        p = head.view(bsz, na, 5 + layer.classes, gh, gw).permute(0, 1, 3, 4, 2)
        anchors = all_anchors[list(layer.mask)]
        obj_t = torch.zeros(p.shape[:4])
        noobj = torch.ones(p.shape[:4], dtype=torch.bool)
        # ignore predictions that already overlap a truth well
        with torch.no_grad():
            gy, gx = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
            pb = torch.stack([
                (torch.sigmoid(p[..., 0]) + gx) / gw,
                (torch.sigmoid(p[..., 1]) + gy) / gh,
                torch.exp(p[..., 2].clamp(max=6)) * anchors[:, 0, None, None] / net_w,
                torch.exp(p[..., 3].clamp(max=6)) * anchors[:, 1, None, None] / net_h,
            ], -1)
            for b in range(bsz):
                t = targets[targets[:, 0] == b]
                if len(t):
                    ious = box_iou(pb[b].reshape(-1, 4), t[:, 2:6]).max(1).values.view(na, gh, gw)
                    noobj[b] &= ious <= 0.5
        loss_box = loss_cls = 0.0
        if len(targets):
            for k, m in enumerate(layer.mask):
                sel = best == m
                if not sel.any():
                    continue
                t = targets[sel]
                b = t[:, 0].long()
                gi = (t[:, 2] * gw).long().clamp(0, gw - 1)
                gj = (t[:, 3] * gh).long().clamp(0, gh - 1)
                pp = p[b, k, gj, gi]
                obj_t[b, k, gj, gi] = 1.0
                noobj[b, k, gj, gi] = False
                scale = 2.0 - t[:, 4] * t[:, 5]
                tx, ty = t[:, 2] * gw - gi, t[:, 3] * gh - gj
                tw = torch.log(t[:, 4] * net_w / anchors[k, 0] + 1e-9)
                th = torch.log(t[:, 5] * net_h / anchors[k, 1] + 1e-9)
                loss_box = loss_box + (scale * (
                    F.binary_cross_entropy_with_logits(pp[:, 0], tx, reduction="none")
                    + F.binary_cross_entropy_with_logits(pp[:, 1], ty, reduction="none")
                    + 0.5 * (pp[:, 2] - tw) ** 2 + 0.5 * (pp[:, 3] - th) ** 2)).sum()
                cls_t = F.one_hot(t[:, 1].long(), layer.classes).float()
                loss_cls = loss_cls + F.binary_cross_entropy_with_logits(pp[:, 5:], cls_t, reduction="sum")
        pos = obj_t > 0
        loss_obj = F.binary_cross_entropy_with_logits(p[..., 4][pos], obj_t[pos], reduction="sum") \
            + F.binary_cross_entropy_with_logits(p[..., 4][noobj], obj_t[noobj], reduction="sum")
        total = total + (loss_box + loss_cls + loss_obj) / bsz
    return total


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cfg", default=str(bundled_config("strawberry-tiny")))
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--batch", type=int, default=12)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("tests/data/strawberry-tiny.weights"))
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    graph = load_config(args.cfg)
    net = TorchNet(graph)
    # start heads with low objectness so the early loss is not swamped by negatives
    for layer in graph.conv_layers:
        if not layer.batch_normalize:
            conv = net.convs[str(layer.index)][0]
            with torch.no_grad():
                conv.bias.view(len(graph.yolo_layers[0].mask), -1)[:, 4] = -4.0
    opt = torch.optim.AdamW(net.parameters(), lr=args.lr, weight_decay=5e-4)
    warm = 100
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warm) * 0.5 * (1 + math.cos(math.pi * min(1.0, s / args.steps))))
    t0 = time.time()
    net.train()
    for step in range(args.steps):
        x, targets = make_batch(rng, args.batch)
        loss = yolo_loss(net(x), targets, graph)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), 10.0)
        opt.step()
        sched.step()
        if step % 25 == 0 or step == args.steps - 1:
            print(f"step {step} loss {loss.item():.3f} lr {sched.get_last_lr()[0]:.2e} {time.time() - t0:.0f}s",
                  flush=True)
        if (step + 1) % 250 == 0 or step == args.steps - 1:
            net.eval()
            args.out.parent.mkdir(parents=True, exist_ok=True)
            args.out.write_bytes(save_weights(net.export(), graph))
            net.train()
    print("wrote", args.out)


if __name__ == "__main__":
    main()
