"""Image augmentation operators and operator sets.

Images are float arrays shaped (channels, height, width) with nominal
range [0, 1]. Every operator is a pure function of its input, its
parameters and the numpy ``Generator`` it is handed.

The two task-internal mixing operators (``tim_add`` / ``tim_sub``) blend
an image with a partner drawn from the same set under construction and
deliberately do *not* clamp their output: values outside [0, 1] are the
point of the subtraction variant. Use :func:`to_display` before writing
such images to disk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# --- primitive operators -------------------------------------------------


def random_crop(x, pad, rng):
    """Zero-pad by ``pad`` on every side, then crop back at a random offset."""
    c, h, w = x.shape
    if pad < 0 or pad > min(h, w):
        raise ValueError(f"random_crop: pad={pad} must lie in [0, {min(h, w)}]")
    if pad == 0:
        return x.copy()
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return np.ascontiguousarray(padded[:, top:top + h, left:left + w])


def _check_range(name, bounds):
    lo, hi = bounds
    if lo < 0 or hi < lo:
        raise ValueError(f"color_jitter: {name} range {bounds} must satisfy 0 <= lo <= hi")


def color_jitter(x, brightness=(0.6, 1.4), contrast=(0.6, 1.4), saturation=(0.6, 1.4), rng=None):
    """Brightness scale, then contrast and saturation interpolation.

    Each factor is drawn uniformly from its range. Contrast blends toward
    the image's mean gray level; saturation (colour images only) blends
    toward the per-pixel gray value. The result is clamped to [0, 1].
    """
    for name, bounds in (("brightness", brightness), ("contrast", contrast), ("saturation", saturation)):
        _check_range(name, bounds)
    rng = rng if rng is not None else np.random.default_rng()
    fb = rng.uniform(*brightness)
    fc = rng.uniform(*contrast)
    fs = rng.uniform(*saturation)
    out = x * x.dtype.type(fb)
    gray = _gray(out)
    mean = gray.mean()
    out = mean + x.dtype.type(fc) * (out - mean)
    if x.shape[0] == 3:
        gray = _gray(out)
        out = gray + x.dtype.type(fs) * (out - gray)
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def _gray(x):
    if x.shape[0] == 3:
        return (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2])[None].astype(x.dtype)
    return x.mean(axis=0, keepdims=True)


def rotate90(x, k):
    """Rotate counterclockwise by ``k`` quarter turns; returns (image, k)."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotate90: k={k!r} must be one of 0, 1, 2, 3")
    return np.ascontiguousarray(np.rot90(x, k, axes=(1, 2))), int(k)


# --- AutoAugment-style fixed policy ----------------------------------------

MAX_LEVEL = 10


def _affine(x, matrix, offset):
    return np.stack(
        [ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=0.0) for ch in x]
    ).astype(x.dtype, copy=False)


def _centered(x, matrix):
    h, w = x.shape[1:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return _affine(x, matrix, center - matrix @ center)


def _signed(level, scale, rng):
    v = level / MAX_LEVEL * scale
    return v if rng.random() < 0.5 else -v


def _shear_x(x, level, rng):
    s = _signed(level, 0.3, rng)
    return _centered(x, np.array([[1.0, 0.0], [s, 1.0]]))


def _shear_y(x, level, rng):
    s = _signed(level, 0.3, rng)
    return _centered(x, np.array([[1.0, s], [0.0, 1.0]]))


def _translate_x(x, level, rng):
    t = _signed(level, 0.33 * x.shape[2], rng)
    return _affine(x, np.eye(2), np.array([0.0, t]))


def _translate_y(x, level, rng):
    t = _signed(level, 0.33 * x.shape[1], rng)
    return _affine(x, np.eye(2), np.array([t, 0.0]))


def _rotate_small(x, level, rng):
    theta = math.radians(_signed(level, 30.0, rng))
    c, s = math.cos(theta), math.sin(theta)
    return _centered(x, np.array([[c, -s], [s, c]]))


def _invert(x, level, rng):
    return (1.0 - x).astype(x.dtype, copy=False)


def posterize(x, bits):
    """Keep the top ``bits`` bits of an 8-bit quantisation; 8 bits is a no-op."""
    if bits >= 8:
        return x.copy()
    step = 2 ** (8 - bits)
    q = np.floor(np.clip(x, 0, 1) * 255.0 / step) * step / 255.0
    return q.astype(x.dtype)


def _posterize(x, level, rng):
    return posterize(x, 8 - int(level / MAX_LEVEL * 4))


def _solarize(x, level, rng):
    threshold = 1.0 - level / MAX_LEVEL
    return np.where(x >= threshold, 1.0 - x, x).astype(x.dtype, copy=False)


def _brightness(x, level, rng):
    f = 1.0 + _signed(level, 0.9, rng)
    return np.clip(x * f, 0.0, 1.0).astype(x.dtype, copy=False)


def _contrast(x, level, rng):
    f = 1.0 + _signed(level, 0.9, rng)
    mean = _gray(x).mean()
    return np.clip(mean + f * (x - mean), 0.0, 1.0).astype(x.dtype, copy=False)


TRANSFORMS = {
    "ShearX": _shear_x,
    "ShearY": _shear_y,
    "TranslateX": _translate_x,
    "TranslateY": _translate_y,
    "Rotate": _rotate_small,
    "Invert": _invert,
    "Posterize": _posterize,
    "Solarize": _solarize,
    "Brightness": _brightness,
    "Contrast": _contrast,
}

# (transform, probability, level 0..10) pairs. Modelled on the published
# ImageNet policy with Equalize/AutoContrast mapped to Contrast and Color
# mapped to Brightness, since only this vocabulary is implemented.
AA_POLICY = (
    (("Posterize", 0.4, 8), ("Rotate", 0.6, 9)),
    (("Solarize", 0.6, 5), ("Contrast", 0.6, 5)),
    (("Contrast", 0.8, 8), ("Contrast", 0.6, 3)),
    (("Posterize", 0.6, 7), ("Posterize", 0.6, 6)),
    (("Contrast", 0.4, 7), ("Solarize", 0.2, 4)),
    (("Contrast", 0.4, 4), ("Rotate", 0.8, 8)),
    (("Solarize", 0.6, 3), ("Contrast", 0.6, 7)),
    (("Posterize", 0.8, 5), ("Contrast", 1.0, 2)),
    (("Rotate", 0.2, 3), ("Solarize", 0.6, 8)),
    (("Rotate", 0.8, 8), ("Brightness", 0.4, 4)),
    (("Rotate", 0.4, 9), ("Contrast", 0.6, 2)),
    (("Invert", 0.6, 4), ("Contrast", 1.0, 8)),
    (("Brightness", 0.6, 4), ("Contrast", 1.0, 8)),
    (("ShearX", 0.6, 5), ("TranslateY", 0.5, 4)),
    (("ShearY", 0.8, 6), ("TranslateX", 0.4, 5)),
    (("TranslateY", 0.6, 6), ("Invert", 0.2, 0)),
)


def apply_subpolicy(x, subpolicy, rng):
    """Apply each (transform, probability, level) triple in order."""
    out = x
    for name, prob, level in subpolicy:
        if rng.random() < prob:
            out = TRANSFORMS[name](out, level, rng)
    return out if out is not x else x.copy()


def auto_augment_lite(x, policy_index, rng):
    if not 0 <= policy_index < len(AA_POLICY):
        raise ValueError(f"auto_augment_lite: policy_index={policy_index} outside [0, {len(AA_POLICY)})")
    return apply_subpolicy(x, AA_POLICY[policy_index], rng)


# --- task-internal mixing ------------------------------------------------

def sample_beta(alpha, rng):
    """Beta(alpha, alpha) via the ratio of two Gamma(alpha) draws."""
    a = rng.standard_gamma(alpha)
    b = rng.standard_gamma(alpha)
    return a / (a + b) if a + b > 0 else 0.5


def tim_add_lambda(alpha, rng):
    lam = sample_beta(alpha, rng)
    return max(lam, 1.0 - lam)


def tim_sub_lambda(alpha, rng):
    lam = sample_beta(alpha, rng)
    return 0.5 + max(lam, 1.0 - lam)


def _check_pair(op, x_i, x_j, alpha):
    if x_i.shape != x_j.shape:
        raise ValueError(f"{op}: image shapes differ: {x_i.shape} and {x_j.shape}")
    if not alpha > 0:
        raise ValueError(f"{op}: alpha must be positive, got {alpha}")


def tim_add(x_i, x_j, alpha, rng=None, lam=None):
    """``lam * x_i + (1 - lam) * x_j`` with lam in [0.5, 1]; keeps x_i's label."""
    _check_pair("tim_add", x_i, x_j, alpha)
    if lam is None:
        lam = tim_add_lambda(alpha, rng)
    dt = x_i.dtype.type
    return dt(lam) * x_i + dt(1.0 - lam) * x_j


def tim_sub(x_i, x_j, alpha, rng=None, lam=None):
    """``lam * x_i - (1.5 - lam) * x_j`` with lam in [1, 1.5]; keeps x_i's label."""
    _check_pair("tim_sub", x_i, x_j, alpha)
    if lam is None:
        lam = tim_sub_lambda(alpha, rng)
    dt = x_i.dtype.type
    return dt(lam) * x_i - dt(1.5 - lam) * x_j


def to_display(x):
    """Clamp to [0, 1] for rendering only."""
    return np.clip(x, 0.0, 1.0)


# --- operator sets -------------------------------------------------------

KINDS = ("Identity", "RandomCrop", "ColorJitter", "Rotate90", "AutoAugmentLite", "TimAdd", "TimSub")


@dataclass(frozen=True)
class AugmentOp:
    """One operator with its parameters, e.g. ``AugmentOp("TimAdd", (("alpha", 0.6),))``.

    ``params`` is a sorted tuple of (name, value) pairs so that operators
    compare and hash by value. Rotate90 with ``k=None`` and
    AutoAugmentLite with ``policy=None`` draw their choice at apply time.
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(sorted(dict(self.params).items())))
        p = dict(self.params)
        if self.kind == "RandomCrop" and (not isinstance(p.get("pad"), int) or p["pad"] < 0):
            raise ValueError(f"RandomCrop needs a non-negative integer pad, got {p.get('pad')!r}")
        if self.kind == "Rotate90" and p.get("k") not in (None, 0, 1, 2, 3):
            raise ValueError(f"Rotate90: k={p.get('k')!r} must be None or one of 0..3")
        if self.kind == "AutoAugmentLite" and p.get("policy") is not None:
            if not 0 <= p["policy"] < len(AA_POLICY):
                raise ValueError(f"AutoAugmentLite: policy index {p['policy']} out of range")
        if self.kind in ("TimAdd", "TimSub") and not p.get("alpha", 0) > 0:
            raise ValueError(f"{self.kind}: alpha must be positive, got {p.get('alpha')!r}")
        if self.kind == "ColorJitter":
            for key in ("brightness", "contrast", "saturation"):
                _check_range(key, p.get(key, (1.0, 1.0)))

    def param(self, name, default=None):
        return dict(self.params).get(name, default)

    @property
    def needs_partner(self):
        return self.kind in ("TimAdd", "TimSub")

    def apply(self, x, rng, partners=None):
        """Return (image, rotation label or None)."""
        kind = self.kind
        if kind == "Identity":
            return x.copy(), None
        if kind == "RandomCrop":
            return random_crop(x, self.param("pad"), rng), None
        if kind == "ColorJitter":
            ranges = {k: self.param(k, (1.0, 1.0)) for k in ("brightness", "contrast", "saturation")}
            return color_jitter(x, rng=rng, **ranges), None
        if kind == "Rotate90":
            k = self.param("k")
            return rotate90(x, int(rng.integers(4)) if k is None else k)
        if kind == "AutoAugmentLite":
            policy = self.param("policy")
            idx = int(rng.integers(len(AA_POLICY))) if policy is None else policy
            return auto_augment_lite(x, idx, rng), None
        if not partners:
            raise ValueError(f"{kind} needs at least one partner image from the same set")
        partner = partners[int(rng.integers(len(partners)))]
        fn = tim_add if kind == "TimAdd" else tim_sub
        return fn(x, partner, self.param("alpha"), rng), None


@dataclass(frozen=True)
class Chain:
    """Operators bound into one composite member, applied left to right."""

    ops: tuple
    label: str = ""

    def __post_init__(self):
        if not self.ops:
            raise ValueError("Chain needs at least one operator")
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def needs_partner(self):
        return any(op.needs_partner for op in self.ops)

    def apply(self, x, rng, partners=None):
        label = None
        for op in self.ops:
            x, lab = op.apply(x, rng, partners)
            label = lab if lab is not None else label
        return x, label


@dataclass(frozen=True)
class OperatorSet:
    """A named, ordered, non-empty collection of operators (or chains)."""

    name: str
    ops: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.ops:
            raise ValueError(f"operator set {self.name!r} is empty")
        object.__setattr__(self, "ops", tuple(self.ops))

    def __len__(self):
        return len(self.ops)

    def __sub__(self, other):
        """Members of this set that are absent from ``other``."""
        theirs = set(other.ops)
        return [op for op in self.ops if op not in theirs]

    @property
    def needs_partner(self):
        return any(op.needs_partner for op in self.ops)

    @property
    def has_rotation(self):
        def rot(op):
            if isinstance(op, Chain):
                return any(o.kind == "Rotate90" for o in op.ops)
            return op.kind == "Rotate90"

        return any(rot(op) for op in self.ops)


def is_diverse(a_s, a_q):
    """True when each set contains an operator the other lacks."""
    return bool(a_s - a_q) and bool(a_q - a_s)


def apply_set(x, op_set, rng, partners=None):
    """Apply one member of ``op_set`` chosen uniformly at random.

    ``partners`` are the other images of the set under construction; the
    mixing operators pick their partner from them. Returns the augmented
    image and the rotation label when a quarter-turn rotation was applied.
    """
    if not isinstance(op_set, OperatorSet) or not op_set.ops:
        raise ValueError("apply_set needs a non-empty OperatorSet")
    member = op_set.ops[int(rng.integers(len(op_set.ops)))] if len(op_set.ops) > 1 else op_set.ops[0]
    return member.apply(x, rng, partners)


# --- presets -------------------------------------------------------------

DEFAULT_ALPHA_SUB = 0.8
DEFAULT_ALPHA_ADD = 0.6
JITTER_RANGE = (0.6, 1.4)


def crop_pad_for(size):
    """Crop padding used by the traditional augmentation: 4 px up to 32 px images, else 8."""
    return min(4 if size <= 32 else 8, size // 4)


def _atomic(name, size, alpha_sub, alpha_add):
    pad = crop_pad_for(size)
    crop = AugmentOp("RandomCrop", (("pad", pad),))
    jitter = AugmentOp(
        "ColorJitter",
        (("brightness", JITTER_RANGE), ("contrast", JITTER_RANGE), ("saturation", JITTER_RANGE)),
    )
    table = {
        "Identity": AugmentOp("Identity"),
        "TA": Chain((crop, jitter), "TA"),
        "Crop": crop,
        "Jitter": jitter,
        "AA": AugmentOp("AutoAugmentLite"),
        "R": AugmentOp("Rotate90"),
        "TIMadd": AugmentOp("TimAdd", (("alpha", float(alpha_add)),)),
        "TIMsub": AugmentOp("TimSub", (("alpha", float(alpha_sub)),)),
    }
    return table.get(name)


ATOMIC_PRESETS = ("Identity", "TA", "Crop", "Jitter", "AA", "R", "TIMadd", "TIMsub")


def resolve_preset(name, image_size=28, alpha_sub=DEFAULT_ALPHA_SUB, alpha_add=DEFAULT_ALPHA_ADD):
    """Build an :class:`OperatorSet` from a name such as ``"R+TA+TIMadd"``.

    Names are ``+``-joined atomic presets (see ``ATOMIC_PRESETS``); each
    atom contributes one member to the set.
    """
    members = []
    for part in name.split("+"):
        op = _atomic(part.strip(), image_size, alpha_sub, alpha_add)
        if op is None:
            raise KeyError(f"unknown augmentation preset {part!r} in {name!r}; atoms are {', '.join(ATOMIC_PRESETS)}")
        if op not in members:
            members.append(op)
    return OperatorSet(name, tuple(members))


# Support/query pairs in the order of the divergence-vs-accuracy ladder.
LADDER = (
    ("TA", "TA"),
    ("AA", "AA"),
    ("TA", "AA"),
    ("AA", "TA"),
    ("AA", "R"),
    ("AA", "R+TA"),
    ("AA", "R+TIMadd"),
    ("AA+TIMsub", "R+TIMadd"),
    ("AA+TIMsub", "R+TA+TIMadd"),
)
