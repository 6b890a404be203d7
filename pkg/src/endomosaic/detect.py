"""Anchor-based lesion detector with selective negative mining.

A small three-stage convolutional backbone predicts, per anchor, a lesion
confidence and four box offsets. Because lesions occupy a tiny fraction of a
panorama, nearly all anchors are negative; training therefore keeps only the
highest-confidence negatives (the ones the model currently gets wrong) at a
fixed ratio to the positives and drops the easy rest, which keeps the
classification term from being swamped by background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .convnet import Conv2d, SiLU, sigmoid, zero_grads
from .raster import Raster

BCE_EPS = 1e-7
OFFSET_CLIP = 8.0  # log-space size deltas are clamped before exp


class EmptyTrainingSet(Exception):
    """No positives and no selected negatives: nothing to average."""


class EmptyDataset(Exception):
    """Training requested on an empty dataset."""


# ---------------------------------------------------------------------------
# boxes and anchors


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("box must have positive extent")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IOU of (n, 4) anchor boxes against (m, 4) ground truths."""
    if len(gts) == 0:
        return np.zeros((len(boxes), 0))
    ix = (np.minimum(boxes[:, None, 2], gts[None, :, 2])
          - np.maximum(boxes[:, None, 0], gts[None, :, 0]))
    iy = (np.minimum(boxes[:, None, 3], gts[None, :, 3])
          - np.maximum(boxes[:, None, 1], gts[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    return inter / (area_a[:, None] + area_g[None, :] - inter)


LABEL_POS, LABEL_NEG, LABEL_IGNORE = 1, 0, -1


@dataclass
class AnchorSet:
    """Regular anchor grid with per-anchor assignment state.

    Anchors are ordered cell-major (rows, then columns), then per-cell by
    scale-major/aspect-minor index, matching the detector head's channel
    layout. The grid is a pure function of (image size, scales, aspects,
    stride), so re-building it always yields the identical list.
    """

    boxes: np.ndarray              # (A, 4), clipped to image bounds
    raw_boxes: np.ndarray          # (A, 4), unclipped (used for decoding)
    image_size: tuple
    stride: int
    labels: np.ndarray = None      # (A,), LABEL_*
    matched_gt: np.ndarray = None  # (A,), index into the gt list, -1 if none

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.full(len(self.boxes), LABEL_NEG, dtype=np.int8)
        if self.matched_gt is None:
            self.matched_gt = np.full(len(self.boxes), -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.boxes)


def make_anchors(image_size: tuple, scales, aspects, stride: int) -> AnchorSet:
    """Lay |scales| x |aspects| anchors on every stride-spaced cell center."""
    w, h = image_size
    gw, gh = w // stride, h // stride
    boxes = []
    for gy in range(gh):
        for gx in range(gw):
            cx = (gx + 0.5) * stride
            cy = (gy + 0.5) * stride
            for s in scales:
                for a in aspects:
                    bw = s * np.sqrt(a)
                    bh = s / np.sqrt(a)
                    boxes.append([cx - bw / 2, cy - bh / 2,
                                  cx + bw / 2, cy + bh / 2])
    raw = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    clipped = raw.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0, w)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0, h)
    return AnchorSet(clipped, raw, (w, h), stride)


def match_anchors(anchors: AnchorSet, gts: list, pos_iou: float = 0.5,
                  neg_iou: float = 0.4) -> AnchorSet:
    """Assign anchors to ground truths by IOU.

    Positive above pos_iou, negative below neg_iou, ignored in between; in
    addition the single best anchor of every ground truth is forced positive
    so no ground truth goes unmatched.
    """
    gt_arr = np.array([g.as_array() for g in gts]).reshape(-1, 4)
    labels = np.full(len(anchors), LABEL_NEG, dtype=np.int8)
    matched = np.full(len(anchors), -1, dtype=np.int64)
    if len(gts):
        m = iou_matrix(anchors.boxes, gt_arr)
        best_gt = m.argmax(axis=1)
        best_iou = m[np.arange(len(anchors)), best_gt]
        labels[best_iou > pos_iou] = LABEL_POS
        labels[(best_iou >= neg_iou) & (best_iou <= pos_iou)] = LABEL_IGNORE
        matched[labels == LABEL_POS] = best_gt[labels == LABEL_POS]
        for g in range(len(gts)):
            a = int(m[:, g].argmax())  # argmax takes the lowest index on ties
            labels[a] = LABEL_POS
            if matched[a] < 0 or m[a, g] > m[a, matched[a]]:
                matched[a] = g
    return replace(anchors, labels=labels, matched_gt=matched)


def selective_negatives(negatives: list, n_pos: int, ratio: float) -> list:
    """Keep the highest-confidence negatives, ratio * max(n_pos, 1) of them.

    negatives is a list of (anchor index, predicted confidence); ties break
    by anchor index ascending. ratio=inf keeps everything.
    """
    if ratio <= 0:
        raise ValueError("ratio must be > 0")
    if np.isinf(ratio):
        quota = len(negatives)
    else:
        quota = int(ratio * max(n_pos, 1))
    order = sorted(negatives, key=lambda t: (-t[1], t[0]))
    return [idx for idx, _ in order[:min(len(negatives), quota)]]


# ---------------------------------------------------------------------------
# offsets


def encode_offsets(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Box -> anchor-relative (dx, dy, log dw, log dh) regression targets."""
    acx = (anchor_boxes[:, 0] + anchor_boxes[:, 2]) / 2
    acy = (anchor_boxes[:, 1] + anchor_boxes[:, 3]) / 2
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    gcx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
    gcy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
    gw = gt_boxes[:, 2] - gt_boxes[:, 0]
    gh = gt_boxes[:, 3] - gt_boxes[:, 1]
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_offsets(anchor_boxes: np.ndarray, t: np.ndarray) -> np.ndarray:
    acx = (anchor_boxes[:, 0] + anchor_boxes[:, 2]) / 2
    acy = (anchor_boxes[:, 1] + anchor_boxes[:, 3]) / 2
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    cx = acx + t[:, 0] * aw
    cy = acy + t[:, 1] * ah
    w = aw * np.exp(np.clip(t[:, 2], -OFFSET_CLIP, OFFSET_CLIP))
    h = ah * np.exp(np.clip(t[:, 3], -OFFSET_CLIP, OFFSET_CLIP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class DetectorSpec:
    """Architecture + anchor grid parameters (fixes the parameter count)."""

    scales: tuple = (10.0, 18.0)
    aspects: tuple = (1.0,)
    channels: tuple = (8, 16, 32)
    init_seed: int = 0

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspects)

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)


class TinyDetector:
    """Three stride-2 conv stages plus per-cell class and box heads."""

    def __init__(self, spec: DetectorSpec | None = None):
        self.spec = spec or DetectorSpec()
        rng = np.random.default_rng(self.spec.init_seed)
        chans = self.spec.channels
        k = self.spec.anchors_per_cell
        self.convs = []
        self.acts = []
        prev = 1
        for ch in chans:
            self.convs.append(Conv2d(prev, ch, 3, stride=2, pad=1, rng=rng))
            self.acts.append(SiLU())
            prev = ch
        self.head_cls = Conv2d(prev, k, 1, rng=rng)
        self.head_box = Conv2d(prev, 4 * k, 1, rng=rng)
        self.head_cls.w *= 0.1
        self.head_box.w *= 0.1

    def layers(self):
        return [*self.convs, self.head_cls, self.head_box]

    def params(self):
        out = []
        for layer in self.layers():
            out.extend(layer.params())
        return out

    def grads(self):
        out = []
        for layer in self.layers():
            out.extend(layer.grads())
        return out

    def forward(self, x: np.ndarray):
        """x: (n, 1, h, w) normalized input -> flat per-anchor outputs.

        Returns (logits (n, A), offsets (n, A, 4)) in anchor-grid order.
        """
        feat = x
        for conv, act in zip(self.convs, self.acts):
            feat = act.forward(conv.forward(feat))
        cls = self.head_cls.forward(feat)          # (n, k, gh, gw)
        box = self.head_box.forward(feat)          # (n, 4k, gh, gw)
        n, k, gh, gw = cls.shape
        logits = cls.transpose(0, 2, 3, 1).reshape(n, gh * gw * k)
        offs = (box.reshape(n, k, 4, gh, gw)
                .transpose(0, 3, 4, 1, 2)
                .reshape(n, gh * gw * k, 4))
        self._shape = (n, k, gh, gw)
        return logits, offs

    def backward(self, dlogits: np.ndarray, doffs: np.ndarray) -> None:
        n, k, gh, gw = self._shape
        dcls = dlogits.reshape(n, gh, gw, k).transpose(0, 3, 1, 2)
        dbox = (doffs.reshape(n, gh, gw, k, 4)
                .transpose(0, 3, 4, 1, 2)
                .reshape(n, 4 * k, gh, gw))
        dfeat = self.head_cls.backward(dcls) + self.head_box.backward(dbox)
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            dfeat = conv.backward(act.backward(dfeat))

    def zero_grads(self) -> None:
        zero_grads(self.layers())

    # -- persistence (deterministic byte layout; no timestamps) --

    def save(self, path) -> None:
        header = {
            "scales": list(self.spec.scales),
            "aspects": list(self.spec.aspects),
            "channels": list(self.spec.channels),
            "init_seed": self.spec.init_seed,
            "arrays": [list(p.shape) for p in self.params()],
        }
        blob = json.dumps(header, sort_keys=True).encode() + b"\n"
        for p in self.params():
            blob += np.ascontiguousarray(p, dtype="<f8").tobytes()
        with open(path, "wb") as f:
            f.write(blob)

    @classmethod
    def load(cls, path) -> "TinyDetector":
        with open(path, "rb") as f:
            raw = f.read()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode())
        spec = DetectorSpec(tuple(header["scales"]), tuple(header["aspects"]),
                            tuple(header["channels"]), header["init_seed"])
        model = cls(spec)
        off = nl + 1
        for p in model.params():
            n = p.size * 8
            p[...] = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(p.shape)
            off += n
        return model


def normalize_input(img) -> np.ndarray:
    """[0, 255] image -> zero-centered (1, h, w) array."""
    arr = img.plane() if isinstance(img, Raster) else np.asarray(img, dtype=np.float64)
    return (arr / 127.5 - 1.0)[None, :, :]


# ---------------------------------------------------------------------------
# loss


def detector_loss(logits: np.ndarray, offsets: np.ndarray, anchors: AnchorSet,
                  gts: list, selected_neg: list, box_weight: float = 1.0):
    """Classification + box regression loss over the selected anchor set.

    Mean binary cross-entropy over positives plus selected negatives (with
    probability clamping) plus box_weight times the mean smooth-L1 over the
    positive anchors' offset components. Returns (loss, dlogits, doffsets).
    """
    pos = np.nonzero(anchors.labels == LABEL_POS)[0]
    sel = np.concatenate([pos, np.asarray(selected_neg, dtype=np.int64)])
    if len(sel) == 0:
        raise EmptyTrainingSet("no positives and no selected negatives")
    y = np.zeros(len(sel))
    y[:len(pos)] = 1.0

    p = sigmoid(logits[sel])
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    bce = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
    dlogits = np.zeros_like(logits)
    live = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    dlogits[sel] += np.where(live, p - y, 0.0) / len(sel)

    doffsets = np.zeros_like(offsets)
    box_term = 0.0
    if len(pos) and box_weight > 0:
        gt_arr = np.array([gts[g].as_array() for g in anchors.matched_gt[pos]])
        target = encode_offsets(anchors.raw_boxes[pos], gt_arr)
        diff = offsets[pos] - target
        absd = np.abs(diff)
        sl1 = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5)
        box_term = float(sl1.mean())
        doffsets[pos] = box_weight * np.clip(diff, -1.0, 1.0) / diff.size
    return bce + box_weight * box_term, dlogits, doffsets


# ---------------------------------------------------------------------------
# training and inference


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.2
    momentum: float = 0.9
    steps: int = 400
    batch_size: int = 4
    seed: int = 0
    neg_ratio: float = 3.0      # negatives kept per positive; inf = plain loss
    pos_iou: float = 0.5
    neg_iou: float = 0.4


def train(model: TinyDetector, dataset: list, cfg: TrainConfig | None = None):
    """Minibatch SGD with momentum over (image, ground-truth boxes) samples.

    Deterministic given the seed: the same config reproduces the loss curve
    bit for bit. Returns the per-step loss curve; the model is updated in
    place.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise EmptyDataset("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    spec = model.spec

    images = []
    matched = []
    gt_lists = []
    for img, gts in dataset:
        x = normalize_input(img)
        images.append(x)
        h, w = x.shape[1], x.shape[2]
        anchors = make_anchors((w, h), spec.scales, spec.aspects, spec.stride)
        matched.append(match_anchors(anchors, gts, cfg.pos_iou, cfg.neg_iou))
        gt_lists.append(gts)

    velocity = [np.zeros_like(p) for p in model.params()]
    curve = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x = np.stack([images[i] for i in idx])
        logits, offs = model.forward(x)
        model.zero_grads()
        dlog = np.zeros_like(logits)
        doff = np.zeros_like(offs)
        total = 0.0
        for b, i in enumerate(idx):
            anchors = matched[i]
            n_pos = int((anchors.labels == LABEL_POS).sum())
            neg_idx = np.nonzero(anchors.labels == LABEL_NEG)[0]
            confs = sigmoid(logits[b, neg_idx])
            selected = selective_negatives(
                list(zip(neg_idx.tolist(), confs.tolist())), n_pos,
                cfg.neg_ratio)
            loss_b, dl, do = detector_loss(logits[b], offs[b], anchors,
                                           gt_lists[i], selected)
            total += loss_b
            dlog[b] = dl / cfg.batch_size
            doff[b] = do / cfg.batch_size
        model.backward(dlog, doff)
        curve.append(total / cfg.batch_size)
        if cfg.lr != 0.0:
            for p, v, g in zip(model.params(), velocity, model.grads()):
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
    return curve


def nms(dets: list, nms_iou: float = 0.45) -> list:
    """Greedy non-maximum suppression, highest confidence first.

    Ties break by list position; a detection survives only if it overlaps
    every already-kept detection by at most nms_iou.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= nms_iou for k in kept):
            kept.append(dets[i])
    return kept


def infer(model: TinyDetector, img, conf_thresh: float = 0.5,
          nms_iou: float = 0.45) -> list:
    """Run the detector on one image and return NMS-filtered detections."""
    x = normalize_input(img)[None, :, :, :]
    h, w = x.shape[2], x.shape[3]
    spec = model.spec
    anchors = make_anchors((w, h), spec.scales, spec.aspects, spec.stride)
    logits, offs = model.forward(x)
    conf = sigmoid(logits[0])
    keep = np.nonzero(conf > conf_thresh)[0]
    if not len(keep):
        return []
    boxes = decode_offsets(anchors.raw_boxes[keep], offs[0][keep])
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)

    dets = [Detection(Box(*boxes[i]), float(conf[keep[i]]))
            for i in range(len(keep))
            if boxes[i, 0] < boxes[i, 2] and boxes[i, 1] < boxes[i, 3]]
    return nms(dets, nms_iou)


# ---------------------------------------------------------------------------
# dataset layout: PNG images + one plain-text box file per image


def write_annotations(path, boxes: list) -> None:
    with open(path, "w") as f:
        for b in boxes:
            f.write(f"{b.x_min:.2f} {b.y_min:.2f} {b.x_max:.2f} {b.y_max:.2f}\n")


def read_annotations(path) -> list:
    boxes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            x0, y0, x1, y1 = (float(t) for t in line.split())
            boxes.append(Box(x0, y0, x1, y1))
    return boxes


def load_dataset(directory) -> list:
    """Read a directory of PNG images with sibling .txt annotation files."""
    from pathlib import Path

    from .raster import load_image

    samples = []
    for png in sorted(Path(directory).glob("*.png")):
        img = load_image(png)
        boxes = read_annotations(png.with_suffix(".txt"))
        samples.append((img, boxes))
    if not samples:
        raise EmptyDataset(f"no images found in {directory}")
    return samples


def detections_to_json(dets: list) -> str:
    """Serialize detections as a deterministic JSON list of {box, confidence}."""
    payload = [{"box": [d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
                "confidence": d.confidence} for d in dets]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
