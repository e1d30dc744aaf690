"""U-shaped fully convolutional network over the bird's-eye view.

Four downsampling stages with skip connections to a mirrored decoder, then two
3x3 heads: a D-dimensional instance-feature map and semantic logits. Invalid
cells are zeroed at the input and excluded from every loss, so perturbing them
can never change the objective.

The instance objective compares sampled pixel pairs through their Euclidean
feature distance: same-instance pairs are hinged above the ``delta_var``
margin, cross-instance pairs below ``delta_dist``; both sums are normalized by
their pair counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import BirdsEyeView
from .errors import ShapeError
from .nn import Conv3x3, ConvBnRelu, merge_params, merge_state


@dataclass
class PairLossConfig:
    delta_var: float = 0.5
    delta_dist: float = 1.5
    samples_per_instance: int = 100

    def __post_init__(self):
        if not (0 < self.delta_var < self.delta_dist):
            raise ValueError("margins must satisfy 0 < delta_var < delta_dist")
        if self.samples_per_instance < 2:
            raise ValueError("need at least 2 samples per instance")


@dataclass
class PairLossReport:
    l_var: float = 0.0
    l_dist: float = 0.0
    n_instances: int = 0
    n_var_pairs: int = 0
    n_dist_pairs: int = 0
    warned: bool = False


class InstanceNet2D:
    """Encoder widths 16-32-64-128 by default; requires H, W divisible by 16.

    Two normalized coordinate planes are appended to the input internally:
    identical-looking objects at different room positions must map to
    different embeddings, which a purely translation-equivariant stack cannot
    deliver from local appearance alone.
    """

    def __init__(self, in_channels=4, widths=(16, 32, 64, 128), embed_dim=8, n_classes=8, seed=0):
        rng = np.random.default_rng(seed)
        w1, w2, w3, w4 = widths
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.enc1 = ConvBnRelu("enc1", in_channels + 2, w1, rng)
        self.enc2 = ConvBnRelu("enc2", w1, w2, rng)
        self.enc3 = ConvBnRelu("enc3", w2, w3, rng)
        self.enc4 = ConvBnRelu("enc4", w3, w4, rng)
        self.bottleneck = ConvBnRelu("bottleneck", w4, w4, rng)
        self.dec4 = ConvBnRelu("dec4", w4 + w4, w3, rng)
        self.dec3 = ConvBnRelu("dec3", w3 + w3, w2, rng)
        self.dec2 = ConvBnRelu("dec2", w2 + w2, w1, rng)
        self.dec1 = ConvBnRelu("dec1", w1 + w1, w1, rng)
        # heads see the coordinate planes again: position-dependent embeddings
        # should not have to survive the whole encoder-decoder stack
        self.head_inst = Conv3x3("head_inst", w1 + 2, embed_dim, rng)
        self.head_sem = Conv3x3("head_sem", w1 + 2, n_classes, rng)
        self._blocks = [
            self.enc1, self.enc2, self.enc3, self.enc4, self.bottleneck,
            self.dec4, self.dec3, self.dec2, self.dec1, self.head_inst, self.head_sem,
        ]

    def forward(self, x: Tensor, training: bool):
        """x: (N, H, W, C) masked input. Returns (embeddings, semantic logits)."""
        n, h, w, _ = x.shape
        if h % 16 or w % 16:
            raise ShapeError(f"input H and W must be multiples of 16, got {h}x{w}")
        coords = np.empty((n, h, w, 2))
        coords[..., 0] = np.linspace(0.0, 1.0, h)[None, :, None]
        coords[..., 1] = np.linspace(0.0, 1.0, w)[None, None, :]
        coords = Tensor(coords)
        x = ad.concat([x, coords], axis=3)
        e1 = self.enc1(x, training)
        e2 = self.enc2(ad.maxpool2x2(e1), training)
        e3 = self.enc3(ad.maxpool2x2(e2), training)
        e4 = self.enc4(ad.maxpool2x2(e3), training)
        b = self.bottleneck(ad.maxpool2x2(e4), training)
        d4 = self.dec4(ad.concat([ad.upsample2x2(b), e4], axis=3), training)
        d3 = self.dec3(ad.concat([ad.upsample2x2(d4), e3], axis=3), training)
        d2 = self.dec2(ad.concat([ad.upsample2x2(d3), e2], axis=3), training)
        d1 = self.dec1(ad.concat([ad.upsample2x2(d2), e1], axis=3), training)
        head_in = ad.concat([d1, coords], axis=3)
        return self.head_inst(head_in), self.head_sem(head_in)

    def params(self):
        return merge_params(*self._blocks)

    def state(self):
        return merge_state(*self._blocks)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params().items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = np.array(arrays[name])
        for block in self._blocks:
            if hasattr(block, "bn"):
                block.bn.load_state(arrays)


def masked_input(view: BirdsEyeView) -> Tensor:
    """View channels zeroed outside the validity mask, with a batch axis."""
    x = view.channels * view.valid[:, :, None]
    return Tensor(x[None])


def pair_similarity(f_i: np.ndarray, f_j: np.ndarray) -> float:
    """Pixel-pair similarity: the Euclidean feature distance (smaller = closer)."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ShapeError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    return float(np.linalg.norm(f_i - f_j))


def _sample_groups(gt_instance, valid, m, seed):
    """Per-instance pixel samples, ordered and seeded independently of labels.

    Groups are processed by their smallest member pixel so relabeling instance
    ids changes neither the order nor the drawn subsets.
    """
    flat_inst = gt_instance.reshape(-1)
    flat_valid = valid.reshape(-1)
    groups = []
    for inst in np.unique(flat_inst[flat_valid & (flat_inst >= 0)]):
        pixels = np.flatnonzero(flat_valid & (flat_inst == inst))
        groups.append((int(pixels[0]), pixels))
    groups.sort(key=lambda g: g[0])
    samples = []
    for anchor, pixels in groups:
        rng = np.random.default_rng([seed, anchor])
        take = min(m, len(pixels))
        samples.append(rng.choice(pixels, size=take, replace=False))
    return samples


def instance_loss_2d(embeddings: Tensor, gt_instance, valid, cfg: PairLossConfig, seed: int):
    """Discriminative pair loss over sampled pixels of the visible instances.

    Returns ``(loss, report)``; with no visible instance the loss is zero and
    the report carries a warning flag.
    """
    data = embeddings.data
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ShapeError("expected a single view")
        embeddings = ad.reshape(embeddings, data.shape[1:])
        data = embeddings.data
    h, w, d = data.shape
    if gt_instance.shape != (h, w) or valid.shape != (h, w):
        raise ShapeError("instance raster and mask must match the embedding map")

    samples = _sample_groups(gt_instance, valid, cfg.samples_per_instance, seed)
    report = PairLossReport(n_instances=len(samples))
    if not samples:
        report.warned = True
        return Tensor(0.0), report

    sel = np.concatenate(samples)
    sizes = np.array([len(s) for s in samples])
    group_of = np.repeat(np.arange(len(samples)), sizes)
    t = len(sel)
    upper = np.triu(np.ones((t, t), dtype=bool), k=1)
    same = group_of[:, None] == group_of[None, :]
    mask_var = upper & same
    mask_dist = upper & ~same
    report.n_var_pairs = int(mask_var.sum())
    report.n_dist_pairs = int(mask_dist.sum())

    # two-level normalization: each pair term is averaged within its instance
    # (or instance pair), then across instances, so small instances carry the
    # same weight as large ones instead of vanishing from the objective
    c = len(samples)
    w_var = np.zeros((t, t))
    var_groups = np.flatnonzero(sizes >= 2)
    for g in var_groups:
        block = group_of == g
        pairs = sizes[g] * (sizes[g] - 1) // 2
        w_var[np.ix_(block, block)] = 1.0 / (pairs * len(var_groups))
    w_var *= mask_var
    w_dist = np.zeros((t, t))
    n_group_pairs = c * (c - 1) // 2
    for a in range(c):
        for b in range(a + 1, c):
            blk_a = group_of == a
            blk_b = group_of == b
            w_dist[np.ix_(blk_a, blk_b)] = 1.0 / (sizes[a] * sizes[b] * n_group_pairs)
    w_dist *= mask_dist

    flat = ad.reshape(embeddings, (h * w, d))
    s = ad.sqrt(ad.pairwise_sqdist(ad.gather_rows(flat, sel), ad.gather_rows(flat, sel)))
    loss = Tensor(0.0)
    if report.n_var_pairs:
        l_var = ad.tsum(ad.mul(ad.relu(ad.sub(s, cfg.delta_var)), Tensor(w_var)))
        report.l_var = l_var.item()
        loss = ad.add(loss, l_var)
    if report.n_dist_pairs:
        l_dist = ad.tsum(ad.mul(ad.relu(ad.sub(float(cfg.delta_dist), s)), Tensor(w_dist)))
        report.l_dist = l_dist.item()
        loss = ad.add(loss, l_dist)
    return loss, report


def semantic_loss_2d(logits: Tensor, gt_semantic, valid, class_weights):
    """Weighted cross-entropy over valid cells; zero (with a flag) if none."""
    data = logits.data
    if data.ndim == 4:
        logits = ad.reshape(logits, data.shape[1:])
        data = logits.data
    h, w, k = data.shape
    labeled = valid & (gt_semantic >= 0)
    idx = np.flatnonzero(labeled.reshape(-1))
    if idx.size == 0:
        return Tensor(0.0), True
    rows = ad.gather_rows(ad.reshape(logits, (h * w, k)), idx)
    return ad.cross_entropy(rows, gt_semantic.reshape(-1)[idx], class_weights), False


@dataclass
class StepReport2D:
    loss: float
    l_var: float
    l_dist: float
    l_sem: float
    warned: bool


def train_step_2d(net: InstanceNet2D, opt, views, cfg: PairLossConfig, class_weights, seed: int):
    """One optimization step over a batch of views; both heads, unit weights."""
    total = Tensor(0.0)
    sums = np.zeros(3)
    warned = False
    for i, view in enumerate(views):
        if view.gt_instance is None or view.gt_semantic is None:
            raise ValueError("training views need ground-truth rasters")
        emb, logits = net.forward(masked_input(view), training=True)
        l_inst, rep = instance_loss_2d(emb, view.gt_instance, view.valid, cfg, seed=seed * 7919 + i)
        l_sem, sem_warned = semantic_loss_2d(logits, view.gt_semantic, view.valid, class_weights)
        total = ad.add(total, ad.add(l_inst, l_sem))
        sums += [rep.l_var, rep.l_dist, l_sem.item()]
        warned |= rep.warned or sem_warned
    total = ad.mul(total, 1.0 / len(views))
    if not np.isfinite(total.item()):
        raise FloatingPointError("non-finite training loss; step aborted")
    opt.zero_grad()
    total.backward()
    opt.step()
    mean = sums / len(views)
    return StepReport2D(total.item(), mean[0], mean[1], mean[2], warned)


def embed_view(net: InstanceNet2D, view: BirdsEyeView):
    """Inference pass: instance features (and logits) for every cell, frozen stats."""
    with ad.no_grad():
        emb, logits = net.forward(masked_input(view), training=False)
    return emb.data[0], logits.data[0]
