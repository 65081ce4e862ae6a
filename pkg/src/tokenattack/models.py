"""Toy classifiers: patch-token transformer, residual CNN and MLP-Mixer.

All three share one interface: ``model(images) -> logits`` where ``images``
is ``[N, C, H, W]`` (or a single ``[C, H, W]`` image, giving ``[m]`` logits).
Parameters live in an insertion-ordered ``dict`` of named tensors so they
map one-to-one onto checkpoint entries.
"""

from dataclasses import asdict, dataclass
import math

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    conv2d,
    gelu,
    layernorm,
    linear,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

FAMILIES = ("vit", "resnet", "mixer")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    channels: int
    height: int
    width_px: int
    num_classes: int = 10
    patch: int = 4
    depth: int = 4
    width: int = 64
    num_heads: int = 4
    mlp_ratio: int = 2
    token_hidden: int = 64

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown model family {self.family!r}")
        if self.num_classes < 2:
            raise ContractError("a classifier needs at least two classes")
        if min(self.channels, self.height, self.width_px, self.depth, self.width) < 1:
            raise ContractError("model dimensions must be positive")
        if self.family in ("vit", "mixer"):
            if self.height % self.patch or self.width_px % self.patch:
                raise ShapeError(
                    f"patch side {self.patch} does not divide {self.height}x{self.width_px}"
                )
        if self.family == "vit" and self.width % self.num_heads:
            raise ContractError("embedding width must be divisible by num_heads")
        if self.family == "resnet" and self.depth % 3:
            raise ContractError("resnet depth must be a multiple of 3 (three stages)")

    @property
    def input_shape(self):
        return (self.channels, self.height, self.width_px)

    @property
    def num_tokens(self):
        return (self.height // self.patch) * (self.width_px // self.patch)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_spec(family, dataset="mnist"):
    """Desk-scale architecture for MNIST (1x28x28) or CIFAR-10 (3x32x32)."""
    if dataset == "mnist":
        c, h, w = 1, 28, 28
    elif dataset == "cifar10":
        c, h, w = 3, 32, 32
    else:
        raise ContractError(f"unknown dataset {dataset!r}")
    if family == "resnet":
        return ModelSpec("resnet", c, h, w, depth=6, width=16)
    return ModelSpec(family, c, h, w, patch=4, depth=4, width=64)


# ------------------------------------------------------------ building blocks


def patchify(images, q):
    """``[N, C, H, W] -> [N, n, q*q*C]``; tokens in raster order, channel-minor."""
    n, c, h, w = images.shape
    if h % q or w % q:
        raise ShapeError(f"patch side {q} does not divide {h}x{w}")
    x = reshape(images, (n, c, h // q, q, w // q, q))
    x = transpose(x, (0, 2, 4, 3, 5, 1))
    return reshape(x, (n, (h // q) * (w // q), q * q * c))


def patch_embed(images, q, embed, bias=None, pos=None):
    """Flattened patches times ``embed`` plus optional bias and position table."""
    single = images.ndim == 3
    if single:
        images = reshape(images, (1,) + images.shape)
    tokens = linear(patchify(images, q), embed, bias)
    if pos is not None:
        tokens = add(tokens, pos)
    return reshape(tokens, tokens.shape[1:]) if single else tokens


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor = None
    b_q: Tensor = None
    b_k: Tensor = None
    b_v: Tensor = None
    b_o: Tensor = None
    num_heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.num_heads:
            raise ContractError(f"width {d} not divisible by {self.num_heads} heads")


def multi_head_attention(x, p):
    """Scaled dot-product self-attention over tokens of ``x[..., n, d]``.

    Per head: ``softmax(x Wq (x Wk)^T / sqrt(d_head)) x Wv``; heads are
    concatenated and projected by ``w_o`` when given.
    """
    if x.shape[-1] != p.w_q.shape[0]:
        raise ShapeError(f"token width {x.shape[-1]} does not match W_Q {p.w_q.shape}")
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    b, n, _ = x.shape
    h = p.num_heads
    dk = p.w_q.shape[1]
    dh = dk // h

    def heads(t):
        return transpose(reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    qh = heads(linear(x, p.w_q, p.b_q))
    kh = heads(linear(x, p.w_k, p.b_k))
    vh = heads(linear(x, p.w_v, p.b_v))
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, h * dh))
    if p.w_o is not None:
        out = linear(out, p.w_o, p.b_o)
    return reshape(out, out.shape[1:]) if single else out


def mlp(x, w1, b1, w2, b2):
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def self_attention_block(x, p, prefix, num_heads=1):
    """Pre-norm transformer block: attention residual then GELU-MLP residual."""
    attn = AttentionParams(
        w_q=p[prefix + "attn.w_q"],
        w_k=p[prefix + "attn.w_k"],
        w_v=p[prefix + "attn.w_v"],
        w_o=p[prefix + "attn.w_o"],
        b_q=p[prefix + "attn.b_q"],
        b_k=p[prefix + "attn.b_k"],
        b_v=p[prefix + "attn.b_v"],
        b_o=p[prefix + "attn.b_o"],
        num_heads=num_heads,
    )
    h = layernorm(x, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"])
    x = add(x, multi_head_attention(h, attn))
    h = layernorm(x, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"])
    return add(x, mlp(h, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"], p[prefix + "mlp.w2"], p[prefix + "mlp.b2"]))


def residual_block(x, w, b=None, stride=1, proj_w=None, proj_b=None):
    """``relu(shortcut(x) + relu(conv3x3(w, x)))``.

    Within a stage the shortcut is the identity; a stride-2 transition needs
    a 1x1 projection for the shortcut.
    """
    branch = relu(conv2d(x, w, b, stride=stride, pad=1))
    if proj_w is not None:
        shortcut = conv2d(x, proj_w, proj_b, stride=stride, pad=0)
    else:
        if stride != 1 or x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"residual block changes shape {x.shape} -> {branch.shape} without a projection"
            )
        shortcut = x
    return relu(add(shortcut, branch))


def mixer_block(x, p, prefix, num_tokens):
    """Token-mixing MLP across the token axis, then channel-mixing MLP."""
    if x.shape[-2] != num_tokens:
        raise ShapeError(f"mixer block built for {num_tokens} tokens, got {x.shape[-2]}")
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    h = layernorm(x, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"])
    h = transpose(h, (0, 2, 1))
    h = mlp(h, p[prefix + "tok.w1"], p[prefix + "tok.b1"], p[prefix + "tok.w2"], p[prefix + "tok.b2"])
    x = add(x, transpose(h, (0, 2, 1)))
    h = layernorm(x, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"])
    x = add(x, mlp(h, p[prefix + "ch.w1"], p[prefix + "ch.b1"], p[prefix + "ch.w2"], p[prefix + "ch.b2"]))
    return reshape(x, x.shape[1:]) if single else x


# -------------------------------------------------------------- parameters


def parameter_shapes(spec):
    """Ordered ``name -> shape`` map implied by a spec."""
    s = {}
    m = spec.num_classes
    if spec.family in ("vit", "mixer"):
        d = spec.width
        pdim = spec.patch * spec.patch * spec.channels
        n = spec.num_tokens
        s["embed.w"] = (pdim, d)
        s["embed.b"] = (d,)
        s["embed.pos"] = (n, d)
        hid = spec.mlp_ratio * d
        for i in range(spec.depth):
            pre = f"blocks.{i}."
            s[pre + "ln1.gamma"] = (d,)
            s[pre + "ln1.beta"] = (d,)
            if spec.family == "vit":
                for nm in ("q", "k", "v", "o"):
                    s[pre + f"attn.w_{nm}"] = (d, d)
                    s[pre + f"attn.b_{nm}"] = (d,)
            else:
                s[pre + "tok.w1"] = (n, spec.token_hidden)
                s[pre + "tok.b1"] = (spec.token_hidden,)
                s[pre + "tok.w2"] = (spec.token_hidden, n)
                s[pre + "tok.b2"] = (n,)
            s[pre + "ln2.gamma"] = (d,)
            s[pre + "ln2.beta"] = (d,)
            key = "mlp" if spec.family == "vit" else "ch"
            s[pre + f"{key}.w1"] = (d, hid)
            s[pre + f"{key}.b1"] = (hid,)
            s[pre + f"{key}.w2"] = (hid, d)
            s[pre + f"{key}.b2"] = (d,)
        s["norm.gamma"] = (d,)
        s["norm.beta"] = (d,)
        s["head.w"] = (d, m)
        s["head.b"] = (m,)
    else:
        w = spec.width
        s["stem.w"] = (w, spec.channels, 3, 3)
        s["stem.b"] = (w,)
        per_stage = spec.depth // 3
        cin = w
        for stage in range(3):
            cout = w * (2**stage)
            for j in range(per_stage):
                pre = f"blocks.{stage * per_stage + j}."
                s[pre + "conv.w"] = (cout, cin, 3, 3)
                s[pre + "conv.b"] = (cout,)
                if cin != cout:
                    s[pre + "proj.w"] = (cout, cin, 1, 1)
                    s[pre + "proj.b"] = (cout,)
                cin = cout
        s["head.w"] = (cin, m)
        s["head.b"] = (m,)
    return s


def _init_param(name, shape, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta",) or leaf.startswith("b"):
        return np.zeros(shape)
    if leaf == "pos":
        # mean-pooled readout: position must be visible from the first step
        return rng.normal(0.0, 0.5, shape)
    if name.startswith("head."):
        return rng.normal(0.0, 0.01, shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        gain = 2.0 if name.startswith("stem") or name.endswith("proj.w") else 1.0
        return rng.normal(0.0, math.sqrt(gain / fan_in), shape)
    return rng.normal(0.0, math.sqrt(1.0 / shape[0]), shape)


class Classifier:
    """A model family plus its named parameters; callable on image batches."""

    def __init__(self, spec, params):
        self.spec = spec
        expected = parameter_shapes(spec)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise ShapeError(f"parameter names do not match spec: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def requires_grad_(self, flag=True):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        return Classifier(self.spec, {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()})

    def copy(self):
        return Classifier(self.spec, {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.params.items()})

    def __call__(self, images):
        return model_forward(self, images)

    def logits(self, images, batch_size=256):
        """Gradient-free logits for a numpy batch ``[N, C, H, W]``."""
        images = np.asarray(images)
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append(model_forward(self, Tensor(images[i : i + batch_size], dtype=self.dtype)).data)
        if not outs:
            return np.zeros((0, self.spec.num_classes), dtype=self.dtype)
        return np.concatenate(outs, axis=0)

    def predict(self, images, batch_size=256):
        return np.argmax(self.logits(images, batch_size), axis=1)


def build_model(spec, seed=0):
    rng = np.random.default_rng(seed)
    params = {k: _init_param(k, shp, rng) for k, shp in parameter_shapes(spec).items()}
    return Classifier(spec, {k: Tensor(v) for k, v in params.items()})


def model_forward(model, images):
    """Unnormalized logits ``[N, m]`` (or ``[m]`` for one ``[C, H, W]`` image)."""
    spec = model.spec
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=model.dtype)
    single = images.ndim == 3
    if single:
        images = reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1:] != spec.input_shape:
        raise ShapeError(f"expected images of shape (N,)+{spec.input_shape}, got {images.shape}")
    p = model.params
    if spec.family == "resnet":
        x = relu(conv2d(images, p["stem.w"], p["stem.b"], stride=1, pad=1))
        for i in range(spec.depth):
            pre = f"blocks.{i}."
            proj = pre + "proj.w" in p
            x = residual_block(
                x,
                p[pre + "conv.w"],
                p[pre + "conv.b"],
                stride=2 if proj else 1,
                proj_w=p.get(pre + "proj.w"),
                proj_b=p.get(pre + "proj.b"),
            )
        feat = mean(x, axis=(2, 3))
    else:
        x = patch_embed(images, spec.patch, p["embed.w"], p["embed.b"], p["embed.pos"])
        if spec.family == "vit":
            for i in range(spec.depth):
                x = self_attention_block(x, p, f"blocks.{i}.", spec.num_heads)
        else:
            for i in range(spec.depth):
                x = mixer_block(x, p, f"blocks.{i}.", spec.num_tokens)
        x = layernorm(x, p["norm.gamma"], p["norm.beta"])
        feat = mean(x, axis=1)
    logits = linear(feat, p["head.w"], p["head.b"])
    return reshape(logits, (spec.num_classes,)) if single else logits
