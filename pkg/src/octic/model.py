"""Model families: assembly, forward, backward, and the training demo.

Four families share one skeleton. "d8" keeps every block octic and
invariantizes before the classifier; "i8" runs octic blocks up to a seam,
invariantizes there, and finishes with standard blocks; "h8" switches to
standard blocks at the seam with no invariantization, giving up invariance;
"standard" is a plain pre-norm ViT baseline.
"""
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import data, invariants, layers, steerable, tree

FAMILIES = ("standard", "d8", "i8", "h8")
SHARD = 8  # gradient accumulation grain; fixed so reductions are reproducible


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    family: str
    depth: int
    octic_depth: int
    channels: int
    heads: int
    patch: int
    image: int
    classes: int = data.NUM_CLASSES
    invariant: str = "power"
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid + 1

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.depth < 0 or not 0 <= self.octic_depth <= self.depth:
            raise ValueError("need 0 <= octic_depth <= depth")
        if self.family == "standard" and self.octic_depth != 0:
            raise ValueError("standard family has no octic blocks")
        if self.family == "d8" and self.octic_depth != self.depth:
            raise ValueError("d8 family must be octic at every block")
        if self.image % self.patch:
            raise ValueError("patch size must divide image size")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.invariant not in invariants.METHODS:
            raise ValueError(f"unknown invariant method {self.invariant!r}")
        octic = self.family != "standard"
        if octic and self.channels % (8 * self.heads):
            raise ValueError("octic attention needs 8*heads | channels")
        if not octic and self.channels % self.heads:
            raise ValueError("heads must divide channels")


@dataclass
class Model:
    config: ModelConfig
    embed: layers.PatchEmbedWeights
    posenc: np.ndarray
    cls_token: np.ndarray
    blocks: list
    inv_head: Optional[invariants.InvariantHeadParams]
    classifier: layers.DenseWeights


def _seam(cfg: ModelConfig) -> Optional[int]:
    """Block index before which invariantization runs, or None."""
    return cfg.octic_depth if cfg.family in ("d8", "i8") else None


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    octic = cfg.family != "standard"
    embed = layers.init_patch_embed(rng, cfg.channels, cfg.patch, octic)
    n = cfg.grid
    posenc = rng.uniform(-0.02, 0.02, (cfg.channels, n * n))
    cls_token = rng.uniform(-0.02, 0.02, cfg.channels)
    if octic:
        posenc = steerable.reynolds_project_posenc(
            posenc, steerable.GridGeometry(n))
        cls_token = steerable.reynolds_project_token(cls_token)
    blocks = []
    for i in range(cfg.depth):
        if i < cfg.octic_depth:
            blocks.append(layers.init_octic_block(rng, cfg.channels, cfg.heads))
        else:
            blocks.append(layers.init_standard_block(rng, cfg.channels, cfg.heads))
    inv_head = (invariants.init_invariant_head(rng, cfg.channels, cfg.invariant)
                if _seam(cfg) is not None else None)
    classifier = layers.init_dense(rng, cfg.channels, cfg.classes)
    return Model(cfg, embed, posenc, cls_token, blocks, inv_head, classifier)


def forward_with_cache(m: Model, img):
    cfg = m.config
    octic = cfg.family != "standard"
    x, c_embed = layers.patch_embed(m.embed, img)
    x, _ = layers.add_posenc_cls(x, m.posenc, m.cls_token, octic)
    seam = _seam(cfg)
    c_inv = None
    block_caches = []
    for i, p in enumerate(m.blocks):
        if seam == i:
            x, c_inv = invariants.invariant_head(m.inv_head, x)
        x, c = layers.block_forward(p, x)
        block_caches.append(c)
    if seam == cfg.depth:
        x, c_inv = invariants.invariant_head(m.inv_head, x)
    cls_feat = x[..., -1]
    logits = np.einsum("ij,...j->...i", m.classifier.w, cls_feat)
    if m.classifier.bias is not None:
        logits = logits + m.classifier.bias
    return logits, (c_embed, block_caches, c_inv, cls_feat, x.shape)


def forward(m: Model, img):
    return forward_with_cache(m, img)[0]


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    logp = _log_softmax(logits)
    return -float(logp[np.arange(len(labels)), labels].sum())


def _sum_loss_and_grad(m: Model, imgs, labels):
    """Loss summed over the batch (no mean), with matching gradients."""
    cfg = m.config
    logits, (c_embed, block_caches, c_inv, cls_feat, xshape) = \
        forward_with_cache(m, imgs)
    loss = cross_entropy(logits, labels)
    probs = np.exp(_log_softmax(logits))
    lbar = probs
    lbar[np.arange(len(labels)), labels] -= 1.0

    wbar = np.einsum("bi,bj->ij", lbar, cls_feat)
    bbar = lbar.sum(axis=0)
    featbar = np.einsum("ij,bi->bj", m.classifier.w, lbar)
    xbar = np.zeros(xshape)
    xbar[..., -1] = featbar

    seam = _seam(cfg)
    inv_grads = None
    if seam == cfg.depth:
        xbar, inv_grads = invariants.invariant_head_vjp(m.inv_head, c_inv, xbar)
    block_grads = [None] * cfg.depth
    for i in reversed(range(cfg.depth)):
        xbar, block_grads[i] = layers.block_vjp(m.blocks[i], block_caches[i], xbar)
        if seam == i:
            xbar, inv_grads = invariants.invariant_head_vjp(m.inv_head, c_inv, xbar)
    grid_bar, pbar, clsbar = layers.add_posenc_cls_vjp(None, xbar)
    _, embed_grads = layers.patch_embed_vjp(m.embed, c_embed, grid_bar)
    grads = Model(cfg, embed_grads, pbar, clsbar, block_grads, inv_grads,
                  layers.DenseWeights(wbar, bbar))
    return loss, grads


def thread_count(default=1) -> int:
    raw = os.environ.get("OCTIC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def _pairwise_reduce(items, combine=tree.add):
    while len(items) > 1:
        merged = [combine(items[i], items[i + 1])
                  for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def loss_and_grad(m: Model, imgs, labels, threads=None):
    """Mean cross-entropy and gradients, sharded for thread parallelism.

    Shard boundaries and the reduction tree are fixed, so results are
    identical for any thread count.
    """
    n = len(labels)
    spans = [(i, min(i + SHARD, n)) for i in range(0, n, SHARD)]
    work = lambda span: _sum_loss_and_grad(m, imgs[span[0]:span[1]],
                                           labels[span[0]:span[1]])
    threads = thread_count() if threads is None else max(1, threads)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, spans))
    else:
        results = [work(s) for s in spans]
    loss = _pairwise_reduce([float(r[0]) for r in results], combine=float.__add__)
    grads = _pairwise_reduce([r[1] for r in results])
    return loss / n, tree.map_arrays(lambda a: a / n, grads)


def project_constraints(m: Model) -> Model:
    """Return the model with every constrained array back on its subspace."""
    if m.config.family == "standard":
        return m
    embed = layers.PatchEmbedWeights(
        layers.project_patch_kernel(m.embed.kernel, m.embed.patch),
        steerable.reynolds_project_token(m.embed.bias),
        m.embed.patch)
    posenc = steerable.reynolds_project_posenc(
        m.posenc, steerable.GridGeometry(m.config.grid))
    cls_token = steerable.reynolds_project_token(m.cls_token)
    return dataclasses.replace(m, embed=embed, posenc=posenc,
                               cls_token=cls_token)


def sgd_step(m: Model, grads: Model, velocity: Model, lr, momentum=0.9):
    velocity = tree.map_arrays(lambda g, v: momentum * v - lr * g,
                               grads, velocity)
    updated = tree.map_arrays(lambda p, v: p + v, m, velocity)
    return project_constraints(updated), velocity


def accuracy(m: Model, imgs, labels, batch=64) -> float:
    hits = 0
    for i in range(0, len(labels), batch):
        logits = forward(m, imgs[i:i + batch])
        hits += int((logits.argmax(axis=-1) == labels[i:i + batch]).sum())
    return hits / len(labels)


def transformed_copy(imgs, seed):
    """Apply an independent random square symmetry to each image."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(imgs)
    for i in range(len(imgs)):
        out[i] = steerable.apply_image_action(int(rng.integers(8)), imgs[i])
    return out


@dataclass
class TrainResult:
    rows: list            # (step, loss, acc, rot_acc)
    final_acc: float
    final_rot_acc: float
    model: Model


def train_demo(cfg: ModelConfig, steps=600, lr=1e-2, momentum=0.9,
               batch_size=32, train_size=512, test_size=256,
               log_every=50, threads=None, dataset=None) -> TrainResult:
    """Runs the SGD loop; `dataset` overrides the synthetic task with
    (train_x, train_y, test_x, test_y) arrays, e.g. from an image manifest."""
    model = build_model(cfg)
    if dataset is None:
        train_x, train_y = data.synthetic_dataset(train_size, cfg.image, cfg.seed + 1)
        test_x, test_y = data.synthetic_dataset(test_size, cfg.image, cfg.seed + 2)
    else:
        train_x, train_y, test_x, test_y = dataset
        train_size = len(train_y)
    rot_x = transformed_copy(test_x, cfg.seed + 3)
    batch_rng = np.random.default_rng(cfg.seed + 4)
    velocity = tree.zeros_like(model)
    rows = []
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, train_size, batch_size)
        loss, grads = loss_and_grad(model, train_x[idx], train_y[idx], threads)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss is {loss} at step {step}")
        model, velocity = sgd_step(model, grads, velocity, lr, momentum)
        if step % log_every == 0 or step == steps:
            acc = accuracy(model, test_x, test_y)
            rot_acc = accuracy(model, rot_x, test_y)
            rows.append((step, loss, acc, rot_acc))
    final_acc = rows[-1][2] if rows else accuracy(model, test_x, test_y)
    final_rot = rows[-1][3] if rows else accuracy(model, rot_x, test_y)
    return TrainResult(rows, final_acc, final_rot, model)
