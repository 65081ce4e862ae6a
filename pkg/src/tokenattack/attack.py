"""Saliency-guided block-sparse ("token") attacks.

The image is cut into non-overlapping ``q x q`` blocks spanning all
channels.  Blocks are ranked once, at the clean input, by the l2 norm of the
loss gradient over their pixels; the top ``K`` are then perturbed by
gradient ascent on the cross-entropy loss, every step followed by a clamp to
the valid pixel range (and, for mixed-norm attacks, to an l-inf ball around
the clean image).  Pixels outside the chosen blocks are never touched.

Every attack entry point works on a batch; images that flip stop iterating
while the rest of the batch continues.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import _kernels
from .errors import ContractError, ShapeError
from .tensor import Tensor, backward, cross_entropy, mul, tsum

SALIENCY_MODES = ("grad_l2", "jsma_plus")
STEP_RULES = ("raw", "sign")


# ---------------------------------------------------------------- partitions


@dataclass(frozen=True)
class BlockPartition:
    channels: int
    height: int
    width: int
    q: int

    def __post_init__(self):
        if self.q < 1 or self.height % self.q or self.width % self.q:
            raise ShapeError(f"patch side {self.q} does not tile {self.height}x{self.width}")

    @classmethod
    def for_shape(cls, shape, q):
        c, h, w = shape[-3:]
        return cls(int(c), int(h), int(w), int(q))

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    @property
    def grid(self):
        return self.height // self.q, self.width // self.q

    @property
    def num_blocks(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def pixels_per_block(self):
        return self.q * self.q * self.channels

    def block_of(self, y, x):
        return (y // self.q) * self.grid[1] + x // self.q

    def block_slices(self, b):
        """``(rows, cols)`` slices of block ``b`` (raster order, 0-based)."""
        if not 0 <= b < self.num_blocks:
            raise ContractError(f"block {b} outside [0, {self.num_blocks})")
        r, c = divmod(int(b), self.grid[1])
        q = self.q
        return slice(r * q, (r + 1) * q), slice(c * q, (c + 1) * q)

    def mask(self, blocks):
        """Boolean ``[C, H, W]`` mask covering the given blocks."""
        m = np.zeros(self.shape, dtype=bool)
        for b in blocks:
            rs, cs = self.block_slices(b)
            m[:, rs, cs] = True
        return m


@dataclass(frozen=True)
class AttackBudget:
    k: int
    epsilon: object = None  # float, per-channel array [C,1,1], or None
    eta: float = 0.1
    max_iters: int = 100
    saliency_mode: str = "grad_l2"
    step_rule: str = "raw"

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("token budget K must be >= 1")
        if self.epsilon is not None and not np.all(np.asarray(self.epsilon) > 0):
            raise ContractError("epsilon must be > 0 when given")
        if not self.eta > 0:
            raise ContractError("step size eta must be > 0")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if self.saliency_mode not in SALIENCY_MODES:
            raise ContractError(f"saliency_mode must be one of {SALIENCY_MODES}")
        if self.step_rule not in STEP_RULES:
            raise ContractError(f"step_rule must be one of {STEP_RULES}")

    def check(self, partition):
        if self.k > partition.num_blocks:
            raise ContractError(f"K={self.k} exceeds the {partition.num_blocks} available blocks")


@dataclass
class AttackOutcome:
    success: bool
    x_adv: np.ndarray
    blocks: list
    iterations: int
    label: int
    pred: int
    linf: float
    l0: int
    pre_broken: bool = False
    warnings: list = field(default_factory=list)


# ----------------------------------------------------------------- saliency


def _model_dtype(model):
    return getattr(model, "dtype", np.float32)


def _as_batch(x):
    x = np.asarray(x)
    single = x.ndim == 3
    return (x[None] if single else x), single


def _labels(y, n, num_classes=None):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 1 and n > 1:
        y = np.repeat(y, n)
    if y.size != n:
        raise ShapeError(f"{n} images but {y.size} labels")
    if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ContractError(f"label outside [0, {num_classes})")
    return y


def loss_input_gradient(model, x, y, loss_fn=None):
    """Per-image ``dL/dx`` and logits for a batch ``x[N, C, H, W]``.

    ``L`` defaults to summed softmax cross-entropy, so each image's gradient
    is independent of the rest of the batch.
    """
    xt = Tensor(x, requires_grad=True, dtype=_model_dtype(model))
    logits = model(xt)
    if loss_fn is None:
        num_classes = logits.shape[-1]
        loss = cross_entropy(logits, _labels(y, len(x), num_classes), reduction="sum")
    else:
        loss = loss_fn(logits, y, xt)
    backward(loss)
    grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return grad, logits.data


def pixel_saliency(model, x, y, loss_fn=None):
    """``|dL/dx_i|`` per pixel; same shape as ``x`` (single image or batch)."""
    xb, single = _as_batch(x)
    grad, _ = loss_input_gradient(model, xb, y, loss_fn)
    sal = np.abs(grad)
    return sal[0] if single else sal


def jsma_plus_saliency(model, x, y):
    """Saliency gated on the true-class logit rising while the others fall.

    Per pixel, with ``gc = d f_y / d x_i`` and ``go = sum_{c != y} d f_c / d x_i``:
    zero if ``gc < 0`` or ``go > 0``, else ``-gc * go``.
    """
    xb, single = _as_batch(x)
    dtype = _model_dtype(model)
    xt = Tensor(xb, requires_grad=True, dtype=dtype)
    logits = model(xt)
    n, m = logits.shape
    y = _labels(y, n, m)
    onehot = np.zeros((n, m), dtype=dtype)
    onehot[np.arange(n), y] = 1.0
    backward(tsum(mul(logits, Tensor(onehot, dtype=dtype))))
    gc = xt.grad.copy() if xt.grad is not None else np.zeros_like(xb)
    xt.zero_grad()
    backward(tsum(logits))
    gall = xt.grad if xt.grad is not None else np.zeros_like(xb)
    go = gall - gc
    score = np.where((gc < 0) | (go > 0), 0.0, -gc * go).astype(dtype)
    return score[0] if single else score


def block_saliency(pixmap, partition):
    """Per-block l2 norm of a per-pixel map: ``[C,H,W] -> [B]`` or ``[N,C,H,W] -> [N,B]``."""
    pixmap = np.asarray(pixmap)
    if pixmap.shape[-3:] != partition.shape:
        raise ContractError(f"saliency map {pixmap.shape} does not match partition {partition.shape}")
    k = _kernels.active()
    if pixmap.ndim == 3:
        return k.block_l2(np.ascontiguousarray(pixmap), partition.q)
    return np.stack([k.block_l2(np.ascontiguousarray(p), partition.q) for p in pixmap])


def select_topk(scores, k):
    """Indices of the ``k`` largest scores, descending; ties go to the lower index."""
    scores = np.asarray(scores)
    if k > scores.size:
        raise ContractError(f"K={k} exceeds {scores.size} blocks")
    if k < 0:
        raise ContractError("K must be non-negative")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


# --------------------------------------------------------------- projection


def _bounds(x_orig, epsilon, pixel_range):
    lo = np.full(x_orig.shape, -np.inf, dtype=x_orig.dtype)
    hi = np.full(x_orig.shape, np.inf, dtype=x_orig.dtype)
    if epsilon is not None:
        eps = np.asarray(epsilon, dtype=x_orig.dtype)
        lo = x_orig - eps
        hi = x_orig + eps
    if pixel_range is not None:
        rlo, rhi = (np.asarray(v, dtype=x_orig.dtype) for v in pixel_range)
        lo = np.maximum(lo, rlo)
        hi = np.minimum(hi, rhi)
    return np.broadcast_to(lo, x_orig.shape), np.broadcast_to(hi, x_orig.shape)


def project_block_linf(x_adv, x_orig, mask, epsilon=None, pixel_range=None):
    """Clamp masked pixels into ``[x - eps, x + eps]`` intersected with the pixel
    range; restore every unmasked pixel to ``x_orig`` exactly.

    ``mask`` is a boolean array broadcastable to the image, or a
    ``(partition, blocks)`` pair.
    """
    x_adv = np.asarray(x_adv)
    x_orig = np.asarray(x_orig, dtype=x_adv.dtype)
    if isinstance(mask, tuple):
        part, blocks = mask
        mask = part.mask(blocks)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x_orig.shape)
    lo, hi = _bounds(x_orig, epsilon, pixel_range)
    k = _kernels.active()
    return k.project(
        np.ascontiguousarray(x_adv),
        np.ascontiguousarray(x_orig),
        np.ascontiguousarray(mask),
        np.ascontiguousarray(lo),
        np.ascontiguousarray(hi),
    )


# ------------------------------------------------------------------- attack


def _saliency_batch(model, x, y, mode):
    if mode == "jsma_plus":
        return jsma_plus_saliency(model, x, y)
    return pixel_saliency(model, x, y)


def _select_blocks(pixmaps, partition, k):
    chosen, warns = [], []
    for pm in pixmaps:
        scores = block_saliency(pm, partition)
        if not np.any(scores > 0):
            # dead gradients: the first K blocks, flagged
            chosen.append(list(range(k)))
            warns.append(["all-zero saliency; fell back to the first K blocks"])
        else:
            chosen.append(select_topk(scores, k))
            warns.append([])
    return chosen, warns


def token_attack_batch(model, x, y, partition, budget, pixel_range=None, batch_size=128, workers=1):
    """Run the token attack on every image of ``x[N, C, H, W]``; one outcome per image.

    Images are processed in fixed chunks of ``batch_size``; with ``workers > 1``
    chunks run on a thread pool.  Chunking does not depend on ``workers``, so
    results are identical for any worker count.  Model parameters must not
    require gradients when ``workers > 1``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != partition.shape:
        raise ShapeError(f"images {x.shape} do not match partition {partition.shape}")
    budget.check(partition)
    y = _labels(y, len(x))
    starts = range(0, len(x), batch_size)

    def run(s):
        return _attack_chunk(model, x[s : s + batch_size], y[s : s + batch_size], partition, budget, pixel_range)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    return [o for c in chunks for o in c]


def _attack_chunk(model, x, y, partition, budget, pixel_range):
    dtype = _model_dtype(model)
    x = x.astype(dtype, copy=False)
    n = len(x)
    grad, logits = loss_input_gradient(model, x, y)
    if logits.shape[-1] and (y.max() >= logits.shape[-1] or y.min() < 0):
        raise ContractError(f"label outside [0, {logits.shape[-1]})")
    pred = np.argmax(logits, axis=1)
    pre_broken = pred != y

    if budget.saliency_mode == "grad_l2":
        pixmaps = np.abs(grad)
    else:
        pixmaps = jsma_plus_saliency(model, x, y)
    blocks = [[] for _ in range(n)]
    warns = [[] for _ in range(n)]
    mask = np.zeros(x.shape, dtype=bool)
    todo = np.flatnonzero(~pre_broken)
    if todo.size:
        chosen, w = _select_blocks(pixmaps[todo], partition, budget.k)
        for i, b, ww in zip(todo, chosen, w):
            blocks[i] = b
            warns[i] = ww
            mask[i] = partition.mask(b)

    lo, hi = _bounds(x, budget.epsilon, pixel_range)
    lo = np.where(mask, lo, x)
    hi = np.where(mask, hi, x)
    k = _kernels.active()
    x_adv = x.copy()
    iters = np.zeros(n, dtype=np.int64)
    success = pre_broken.copy()
    final_pred = pred.copy()
    active = todo
    g = grad[active]
    while active.size and iters[active[0]] < budget.max_iters:
        step = np.sign(g) if budget.step_rule == "sign" else g
        cand = x_adv[active] + (budget.eta * step).astype(dtype)
        x_adv[active] = k.project(
            np.ascontiguousarray(cand),
            x[active],
            mask[active],
            np.ascontiguousarray(lo[active]),
            np.ascontiguousarray(hi[active]),
        )
        iters[active] += 1
        g, lg = loss_input_gradient(model, x_adv[active], y[active])
        p = np.argmax(lg, axis=1)
        final_pred[active] = p
        flipped = p != y[active]
        success[active[flipped]] = True
        active = active[~flipped]
        g = g[~flipped]

    outcomes = []
    for i in range(n):
        delta = x_adv[i].astype(np.float64) - x[i].astype(np.float64)
        outcomes.append(
            AttackOutcome(
                success=bool(success[i]),
                x_adv=x_adv[i],
                blocks=blocks[i],
                iterations=int(iters[i]),
                label=int(y[i]),
                pred=int(final_pred[i]),
                linf=float(np.abs(delta).max()) if delta.size else 0.0,
                l0=int(np.count_nonzero(delta)),
                pre_broken=bool(pre_broken[i]),
                warnings=warns[i],
            )
        )
    return outcomes


def token_attack(model, x, y, partition, budget, pixel_range=None):
    """Attack a single ``[C, H, W]`` image; see :func:`token_attack_batch`."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"token_attack expects one [C, H, W] image, got {x.shape}")
    return token_attack_batch(model, x[None], [int(y)], partition, budget, pixel_range)[0]


# ---------------------------------------------------------- sparse variant


def sparse_pixel_budget(height, width, fraction=0.005, token_side=16):
    """Pixel budget ``fraction * H * W`` rounded up to a whole number of
    ``token_side x token_side`` tokens, so sparse and patch budgets match."""
    tok = token_side * token_side
    raw = height * width * fraction
    return max(1, math.ceil(raw / tok - 1e-12)) * tok


def sparse_attack_batch(model, x, y, s, budget, pixel_range=None, batch_size=128, workers=1):
    """Token attack with 1x1 blocks (each spanning all channels) and ``K = s``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if s > h * w:
        raise ContractError(f"pixel budget {s} exceeds {h * w} pixels")
    part = BlockPartition.for_shape(x.shape, 1)
    return token_attack_batch(model, x, y, part, replace(budget, k=int(s)), pixel_range, batch_size, workers)


def sparse_attack(model, x, y, s, budget, pixel_range=None):
    x = np.asarray(x)
    return sparse_attack_batch(model, x[None], [int(y)], s, budget, pixel_range)[0]


# --------------------------------------------------------- minimum-K search


def min_token_search_batch(model, x, y, partition, k_max, budget, pixel_range=None, batch_size=128, workers=1):
    """Smallest K in ``1..k_max`` that flips each image.

    Returns ``(min_k, outcomes)``: ``min_k[i]`` is 0 for images already
    misclassified, -1 when no K up to ``k_max`` succeeds.
    """
    if k_max < 1:
        raise ContractError("k_max must be >= 1")
    if k_max > partition.num_blocks:
        raise ContractError(f"k_max={k_max} exceeds {partition.num_blocks} blocks")
    x = np.asarray(x)
    y = _labels(y, len(x))
    n = len(x)
    min_k = np.full(n, -1, dtype=np.int64)
    outcomes = [None] * n
    remaining = np.arange(n)
    for kk in range(1, k_max + 1):
        if not remaining.size:
            break
        res = token_attack_batch(
            model, x[remaining], y[remaining], partition, replace(budget, k=kk), pixel_range, batch_size, workers
        )
        keep = []
        for i, o in zip(remaining, res):
            outcomes[i] = o
            if o.pre_broken:
                min_k[i] = 0
            elif o.success:
                min_k[i] = kk
            else:
                keep.append(i)
        remaining = np.asarray(keep, dtype=np.int64)
    return min_k, outcomes


def min_token_search(model, x, y, partition, k_max, budget, pixel_range=None):
    """Single-image form; returns ``(min_k or None, outcome)``."""
    mk, outs = min_token_search_batch(model, np.asarray(x)[None], [int(y)], partition, k_max, budget, pixel_range)
    return (None if mk[0] < 0 else int(mk[0])), outs[0]


# ----------------------------------------------------------- budget scaling


def scale_budget(base_k, base_h, base_w, target_h, target_w):
    """Token budget rescaled by pixel count, rounded half-up, at least 1."""
    if min(base_k, base_h, base_w, target_h, target_w) <= 0:
        raise ContractError("budget scaling needs positive sizes")
    ratio = (target_h * target_w) / (base_h * base_w)
    return max(1, int(math.floor(base_k * ratio + 0.5)))
