"""Image files, packed datasets, splits and the synthetic corpus.

Pixels are stored as 8-bit values and loaded as ``p / 255`` floats; no
other normalisation is applied anywhere.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .episodes import LabeledSet, UnlabeledPool

PACK_MAGIC = b"ULDD"
LABEL_MAGIC = b"LBLS"
SPLITS = ("train", "val", "test")
IMAGE_EXTS = (".pgm", ".ppm")

# Class-index ranges per protocol, 1-based and half-open except the last.
OMNIGLOT_SPLITS = {"train": (1, 1150), "val": (1150, 1200), "test": (1200, 1624)}
MINIIMAGENET_SPLITS = {"train": (1, 65), "val": (65, 81), "test": (81, 101)}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    class_names: tuple
    image_shape: tuple
    count: int


# --- PGM / PPM -----------------------------------------------------------

def _tokens(data, n, pos):
    out = []
    while len(out) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            break
        out.append(data[start:pos])
    return out, pos


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) file as a (c, h, w) uint8 array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    toks, pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise DatasetError(f"{path}: only 8-bit images are supported (maxval {maxval}, size {w}x{h})")
    c = 1 if magic == b"P5" else 3
    pixels = data[pos + 1:pos + 1 + w * h * c]
    if len(pixels) != w * h * c:
        raise DatasetError(f"{path}: truncated pixel data ({len(pixels)} of {w * h * c} bytes)")
    return np.frombuffer(pixels, np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def write_pnm(path, image):
    """Write a (c, h, w) image as PGM (c=1) or PPM (c=3).

    Float images are taken to be in [0, 1] and rounded to 8 bits.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.dtype != np.uint8:
        img = to_uint8(img)
    c, h, w = img.shape
    if c not in (1, 3):
        raise DatasetError(f"{path}: cannot store {c} channels as PGM/PPM")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img.transpose(1, 2, 0).tobytes())


def to_uint8(x):
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def to_float(x):
    return np.asarray(x, dtype=np.float32) / np.float32(255)


# --- packed binary -------------------------------------------------------

def write_packed(path, images, labels=None, class_names=()):
    """``ULDD``, u32 count, u32 c, h, w, then raw u8 pixels in NCHW order.

    Labels, when given, follow as ``LBLS``, u32 class count, each name as
    u32 length plus utf-8, then one u32 label per image.
    """
    imgs = np.asarray(images)
    if imgs.dtype != np.uint8:
        imgs = to_uint8(imgs)
    n, c, h, w = imgs.shape
    parts = [PACK_MAGIC, struct.pack("<4I", n, c, h, w), np.ascontiguousarray(imgs).tobytes()]
    if labels is not None:
        labels = np.asarray(labels)
        names = list(class_names) or [str(i) for i in range(int(labels.max()) + 1 if n else 0)]
        parts += [LABEL_MAGIC, struct.pack("<I", len(names))]
        for name in names:
            raw = name.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw]
        parts.append(labels.astype("<u4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_packed(path):
    """Return ``(images uint8 NCHW, labels or None, class_names)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    if data[:4] != PACK_MAGIC:
        raise DatasetError(f"{path}: bad magic {data[:4]!r} at byte 0")
    if len(data) < 20:
        raise DatasetError(f"{path}: truncated header at byte {len(data)}")
    n, c, h, w = struct.unpack_from("<4I", data, 4)
    end = 20 + n * c * h * w
    if len(data) < end:
        raise DatasetError(f"{path}: truncated pixel data at byte {len(data)} (expected {end})")
    images = np.frombuffer(data, np.uint8, n * c * h * w, 20).reshape(n, c, h, w).copy()
    if len(data) == end:
        return images, None, ()
    pos = end
    if data[pos:pos + 4] != LABEL_MAGIC:
        raise DatasetError(f"{path}: unexpected trailing data at byte {pos}")
    try:
        (k,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        names = []
        for _ in range(k):
            (ln,) = struct.unpack_from("<I", data, pos)
            names.append(data[pos + 4:pos + 4 + ln].decode("utf-8"))
            pos += 4 + ln
        labels = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
    except (struct.error, ValueError, UnicodeDecodeError):
        raise DatasetError(f"{path}: malformed label block at byte {pos}") from None
    if pos + 4 * n != len(data):
        raise DatasetError(f"{path}: label block length mismatch at byte {pos}")
    return images, labels, tuple(names)


# --- directory datasets --------------------------------------------------

def _scan_dir(split_dir):
    classes = sorted(d for d in os.listdir(split_dir) if os.path.isdir(os.path.join(split_dir, d)))
    files = []
    for ci, name in enumerate(classes):
        cdir = os.path.join(split_dir, name)
        for f in sorted(os.listdir(cdir)):
            if f.lower().endswith(IMAGE_EXTS):
                files.append((os.path.join(cdir, f), ci))
    return classes, files


def _load_dir(split_dir):
    classes, files = _scan_dir(split_dir)
    if not files:
        raise DatasetError(f"{split_dir}: no .pgm/.ppm images found")
    images, labels = [], []
    first = None
    for path, ci in files:
        img = read_pnm(path)
        if first is None:
            first = (path, img.shape)
        elif img.shape != first[1]:
            raise DatasetError(f"inconsistent image shapes: {first[0]} is {first[1]}, {path} is {img.shape}")
        images.append(img)
        labels.append(ci)
    return np.stack(images), np.array(labels), tuple(classes)


def load_dataset(root, split, as_labeled):
    """Load ``root/<split>.bin`` or the tree ``root/<split>/<class>/*.pgm|ppm``.

    Unlabeled loading drops every trace of class membership: the pool gets
    fresh integer source ids in a shuffled order that is fixed per split.
    """
    packed = os.path.join(root, f"{split}.bin")
    tree = os.path.join(root, split)
    if os.path.isfile(packed):
        u8, labels, names = read_packed(packed)
        if as_labeled and labels is None:
            raise DatasetError(f"{packed}: packed file has no labels")
    elif os.path.isdir(tree):
        u8, labels, names = _load_dir(tree)
    else:
        raise DatasetError(f"no dataset for split {split!r} under {root} (expected {split}.bin or {split}/)")
    images = to_float(u8)
    if as_labeled:
        return LabeledSet(images, labels, names)
    order = np.random.default_rng(len(images)).permutation(len(images))
    return UnlabeledPool(images[order], tuple(range(len(images))))


def scan_dataset(root, split):
    """Describe a split without keeping its pixels."""
    packed = os.path.join(root, f"{split}.bin")
    if os.path.isfile(packed):
        u8, _, names = read_packed(packed)
    else:
        u8, _, names = _load_dir(os.path.join(root, split))
    return DatasetManifest(str(root), split, tuple(names), tuple(u8.shape[1:]), len(u8))


def pack_directory(src_root, dst_root, splits=SPLITS):
    """Convert every present ``src_root/<split>/`` tree into ``dst_root/<split>.bin``."""
    written = []
    for split in splits:
        tree = os.path.join(src_root, split)
        if not os.path.isdir(tree):
            continue
        u8, labels, names = _load_dir(tree)
        out = os.path.join(dst_root, f"{split}.bin")
        write_packed(out, u8, labels, names)
        written.append(out)
    if not written:
        raise DatasetError(f"{src_root}: none of the splits {', '.join(splits)} exist")
    return written


def split_of(class_index, protocol="omniglot"):
    """Which split a 1-based class index belongs to under ``protocol``."""
    table = {"omniglot": OMNIGLOT_SPLITS, "miniimagenet": MINIIMAGENET_SPLITS}[protocol]
    for split, (lo, hi) in table.items():
        if lo <= class_index < hi:
            return split
    raise ValueError(f"class index {class_index} is outside the {protocol} ranges")


def resize_bilinear(image, h, w):
    """Resize a (c, H, W) image with bilinear interpolation (pixel-centre aligned)."""
    img = np.asarray(image, dtype=np.float64)
    _, hh, ww = img.shape
    ys = np.clip((np.arange(h) + 0.5) * hh / h - 0.5, 0, hh - 1)
    xs = np.clip((np.arange(w) + 0.5) * ww / w - 0.5, 0, ww - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, hh - 1)
    x1 = np.minimum(x0 + 1, ww - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# --- synthetic corpus ----------------------------------------------------

MOTIFS = ("bars", "disk", "checker")
NOISE_SIGMA = 0.05
# instance-level nuisance: rotation (radians), relative scale, contrast
# drop, weight range of a faint motif from another class, background tilt
SPIN = 0.25
ZOOM = 0.15
CONTRAST = 0.4
CLUTTER = (0.1, 0.25)
GRADIENT = 0.2


def _class_params(rng, size):
    kind = MOTIFS[int(rng.integers(len(MOTIFS)))]
    p = {"kind": kind, "angle": rng.uniform(0, np.pi)}
    if kind == "bars":
        p["period"] = rng.uniform(0.2, 0.45) * size
        p["duty"] = rng.uniform(0.3, 0.6)
    elif kind == "disk":
        p["radius"] = rng.uniform(0.18, 0.38) * size
        p["ring"] = rng.uniform(0.25, 1.0)  # 1.0 = filled
        p["offset"] = rng.uniform(-0.12, 0.12, size=2) * size
    else:
        p["cell"] = rng.uniform(0.15, 0.3) * size
        p["phase"] = rng.uniform(0, 1, size=2)
    # a second, smaller disk marks each class's layout
    p["spot"] = rng.uniform(-0.3, 0.3, size=2) * size
    p["spot_r"] = rng.uniform(0.08, 0.14) * size
    p["level"] = rng.uniform(0.55, 1.0)
    return p


def _soft(v):
    return 1.0 / (1.0 + np.exp(-2.0 * v))  # edge about one pixel wide


def _motif(p, u, v):
    kind = p["kind"]
    if kind == "bars":
        t = (u / p["period"]) % 1.0
        img = _soft((p["duty"] - t) * p["period"]) * _soft(t * p["period"])
    elif kind == "disk":
        r = np.hypot(u - p["offset"][0], v - p["offset"][1])
        outer = _soft(p["radius"] - r)
        inner = _soft(r - p["radius"] * (1 - p["ring"])) if p["ring"] < 1 else 1.0
        img = outer * inner
    else:
        a = np.sin(np.pi * (u / p["cell"] + p["phase"][0]))
        b = np.sin(np.pi * (v / p["cell"] + p["phase"][1]))
        img = _soft(4 * a * b)
    spot = _soft(p["spot_r"] - np.hypot(u - p["spot"][0], v - p["spot"][1]))
    return np.maximum(img * p["level"], spot)


def _frame(h, w, rng, jitter, angle, spin, zoom):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = (h - 1) / 2 + rng.uniform(-jitter, jitter)
    cx = (w - 1) / 2 + rng.uniform(-jitter, jitter)
    ang = angle + rng.uniform(-spin, spin)
    s = rng.uniform(1 - zoom, 1 + zoom)
    u = ((xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)) / s
    v = (-(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)) / s
    return u, v


def _render(p, h, w, rng, jitter, distractor):
    u, v = _frame(h, w, rng, jitter, p["angle"], SPIN, ZOOM)
    img = _motif(p, u, v) * rng.uniform(1 - CONTRAST, 1.0)
    if distractor is not None:
        du, dv = _frame(h, w, rng, jitter, distractor["angle"], np.pi, ZOOM)
        img = np.maximum(img, _motif(distractor, du, dv) * rng.uniform(*CLUTTER))
    gy, gx = rng.uniform(-GRADIENT, GRADIENT, size=2)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    return img + gy * (yy - 0.5) + gx * (xx - 0.5)


def generate_synthetic(classes, per_class, shape=(1, 28, 28), seed=0, jitter=None):
    """A labelled corpus of procedurally drawn motifs.

    Every class has its own motif (oriented bars, a disk or ring, or a
    checkerboard with a fixed phase) plus a small marker spot; instances
    differ by positional jitter, a slight rotation, contrast and additive
    Gaussian noise (sigma 0.05). Pixels are quantised to 8 bits so the
    corpus survives a round trip through the file formats unchanged.
    """
    if classes < 1 or per_class < 1:
        raise ValueError(f"classes and per_class must be positive, got {classes} and {per_class}")
    c, h, w = shape
    if c not in (1, 3) or h < 4 or w < 4:
        raise ValueError(f"unsupported synthetic shape {shape}")
    jitter = 0.08 * min(h, w) if jitter is None else jitter
    root = np.random.SeedSequence([int(seed), 0x53594E])
    class_seqs = root.spawn(classes)
    images = np.empty((classes * per_class, c, h, w), dtype=np.uint8)
    params = []
    for cs in class_seqs:
        param_ss, inst_ss = cs.spawn(2)
        params.append((_class_params(np.random.default_rng(param_ss), min(h, w)), inst_ss,
                       np.random.default_rng(param_ss).uniform(0.4, 1.0, size=c) if c == 3 else np.ones(1)))
    for k, (p, inst_ss, tint) in enumerate(params):
        for i, s in enumerate(inst_ss.spawn(per_class)):
            rng = np.random.default_rng(s)
            other = int(rng.integers(classes - 1)) if classes > 1 else None
            distractor = None if other is None else params[other + (other >= k)][0]
            base = _render(p, h, w, rng, jitter, distractor)
            img = base[None] * tint[:, None, None] + rng.normal(0, NOISE_SIGMA, size=(c, h, w))
            images[k * per_class + i] = to_uint8(img)
    labels = np.repeat(np.arange(classes), per_class)
    names = tuple(f"class{k:03d}" for k in range(classes))
    return LabeledSet(to_float(images), labels, names)


def synthetic_splits(train_classes=64, test_classes=20, per_class=20, shape=(1, 28, 28), seed=0):
    """Disjoint train and test corpora: ``(UnlabeledPool, LabeledSet)``.

    Test classes are drawn after the training classes from the same
    generator, so no class appears in both.
    """
    full = generate_synthetic(train_classes + test_classes, per_class, shape, seed)
    n_train = train_classes * per_class
    pool = UnlabeledPool(full.images[:n_train], tuple(range(n_train)))
    test = full.subset_classes(range(train_classes, train_classes + test_classes))
    return pool, test
