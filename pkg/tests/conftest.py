import gzip
import os
from pathlib import Path
import struct

import numpy as np
import pytest

from tokenattack.models import ModelSpec, build_model
from tokenattack.tensor import Tensor, linear, reshape

MNIST_ROOT = Path(os.environ.get("TOKENATTACK_MNIST", "/root/data/mnist"))
CKPT_DIR = Path(os.environ.get("TOKENATTACK_CKPT_DIR", "/root/ckpt"))

SMALL_SPECS = {
    "vit": ModelSpec("vit", 1, 8, 8, patch=4, depth=1, width=8, num_heads=2),
    "resnet": ModelSpec("resnet", 1, 8, 8, depth=3, width=4),
    "mixer": ModelSpec("mixer", 1, 8, 8, patch=4, depth=1, width=8, token_hidden=4),
}


def have_mnist():
    return (MNIST_ROOT / "t10k-images-idx3-ubyte").exists() or (MNIST_ROOT / "t10k-images-idx3-ubyte.gz").exists()


@pytest.fixture(params=sorted(SMALL_SPECS))
def small_model(request):
    return build_model(SMALL_SPECS[request.param], seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class LinearProbe:
    """``logits = flatten(x) @ W + b``; differentiable toy classifier."""

    def __init__(self, w, b=None, dtype=np.float32):
        self.w = Tensor(w, dtype=dtype)
        self.b = Tensor(np.zeros(w.shape[1]) if b is None else b, dtype=dtype)
        self.dtype = np.dtype(dtype)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        return linear(reshape(x, (x.shape[0], -1)), self.w, self.b)


class ConstantModel:
    """Logits that ignore the input."""

    dtype = np.dtype(np.float32)

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)

    def __call__(self, x):
        n = x.shape[0]
        zero = reshape(x, (n, -1)) * Tensor(np.zeros(int(np.prod(x.shape[1:])), np.float32))
        return linear(zero, Tensor(np.zeros((zero.shape[1], len(self.logits)), np.float32)), Tensor(self.logits))


def fd_gradient(f, x, h=1e-3):
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, rtol=1e-3, floor=1e-5):
    """Per-coordinate relative error below ``rtol``, with an absolute floor."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    err = np.abs(a - n)
    return bool(np.all((err <= floor) | (err <= rtol * np.maximum(np.abs(a), np.abs(n)))))


# ----------------------------------------------------------- file fixtures


def idx_bytes(arr, magic=None):
    arr = np.asarray(arr, dtype=np.uint8)
    magic = magic if magic is not None else (0x800 | arr.ndim)
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def cifar_bytes(labels, images):
    out = bytearray()
    for lab, img in zip(labels, images):
        out.append(lab)
        out += np.asarray(img, dtype=np.uint8).tobytes()
    return bytes(out)


@pytest.fixture
def tiny_mnist(tmp_path):
    """A 12-image IDX pair (train and t10k names) under ``tmp_path``."""
    r = np.random.default_rng(5)
    imgs = r.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labs = (np.arange(12) % 10).astype(np.uint8)
    for prefix in ("train", "t10k"):
        (tmp_path / f"{prefix}-images-idx3-ubyte").write_bytes(idx_bytes(imgs))
        (tmp_path / f"{prefix}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_bytes(labs)))
    return tmp_path, imgs, labs


def malformed_corpus(root):
    """Ten malformed IDX / CIFAR-10 files: ``[(case, load_fn, error_type)]``."""
    from tokenattack.data import load_cifar10, load_idx
    from tokenattack.errors import ConsistencyError, FormatError, TruncatedFileError

    root = Path(root)
    imgs = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
    labs = np.array([3, 7], np.uint8)
    good_img = root / "good-images"
    good_img.write_bytes(idx_bytes(imgs))
    good_lab = root / "good-labels"
    good_lab.write_bytes(idx_bytes(labs))

    def put(name, data):
        p = root / name
        p.write_bytes(data)
        return p

    def images(name, data):
        p = put(name, data)
        return lambda: load_idx(p, good_lab)

    def labels(name, data):
        p = put(name, data)
        return lambda: load_idx(good_img, p)

    def cifar(name, data):
        p = put(name, data)
        return lambda: load_cifar10([p])

    rec = cifar_bytes([1], [np.zeros(3072, np.uint8)])
    raw_img = idx_bytes(imgs)
    return [
        ("images_wrong_magic", images("c1", idx_bytes(imgs, magic=0x0801)), FormatError),
        ("labels_with_image_magic", labels("c2", idx_bytes(labs, magic=0x0803)), FormatError),
        ("header_cut_short", images("c3", raw_img[:3]), TruncatedFileError),
        ("dims_cut_short", images("c4", raw_img[:10]), TruncatedFileError),
        ("payload_cut_short", images("c5", raw_img[:-5]), TruncatedFileError),
        ("trailing_bytes", images("c6", raw_img + b"\x00\x00"), FormatError),
        ("count_mismatch", labels("c7", idx_bytes(np.array([1, 2, 3], np.uint8))), ConsistencyError),
        ("corrupt_gzip", images("c8", b"\x1f\x8b" + b"\x00" * 30), FormatError),
        ("cifar_short_record", cifar("c9", rec[:3072]), FormatError),
        ("cifar_bad_label", cifar("c10", bytes([10]) + rec[1:]), FormatError),
    ]


# ------------------------------------------------------- acceptance lines

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
