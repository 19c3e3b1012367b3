"""Image ingestion, preprocessing, stratified splitting and SMOTE.

Images live in memory as HxWx3 arrays with values in [0, 255] until
:func:`normalize_and_encode` turns them into a float32 batch in [0, 1].
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import WeightArchive
from .errors import DataError, IngestionError, SmoteError, SplitError

log = logging.getLogger(__name__)

NETPBM_SUFFIXES = {".ppm", ".pgm", ".pnm"}
PIL_SUFFIXES = {".jpg", ".jpeg", ".png"}


@dataclass
class LabeledImageSet:
    images: list[np.ndarray]
    labels: np.ndarray
    class_names: tuple[str, ...]
    synthetic: np.ndarray | None = None
    errors: list[tuple[str, str]] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label outside the class table")
        if self.synthetic is None:
            self.synthetic = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(c) for name, c in zip(self.class_names, counts)}


# --------------------------------------------------------------------------
# netpbm codec


def _netpbm_tokens(blob: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(blob[start:pos])
    return tokens, pos


def read_netpbm(path) -> np.ndarray:
    """Decode a P2/P3/P5/P6 file into an HxWx3 uint8 array (grey is replicated)."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    (w, h, maxval), pos = _netpbm_tokens(blob, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"bad netpbm geometry {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace byte before raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = np.frombuffer(blob, dtype=dtype, count=n, offset=pos) if len(blob) - pos >= n * dtype.itemsize else None
        if raw is None:
            raise ValueError("truncated netpbm raster")
    else:
        toks, _ = _netpbm_tokens(blob, n, pos)
        raw = np.array([int(t) for t in toks])
    img = raw.reshape(h, w, channels).astype(np.float64)
    if maxval != 255:
        img = img * (255.0 / maxval)
    img = np.rint(img).clip(0, 255).astype(np.uint8)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_netpbm(path, img) -> None:
    """Write an HxW (P5) or HxWx3 (P6) uint8 image."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.rint(img).clip(0, 255).astype(np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot write image of shape {img.shape} as netpbm")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix in NETPBM_SUFFIXES:
        return read_netpbm(path)
    if suffix in PIL_SUFFIXES:
        try:
            from PIL import Image
        except ImportError:
            raise ValueError(f"{suffix} support needs Pillow; convert to PPM instead") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise ValueError(f"unsupported image format {suffix!r}")


def ingest_directory(root) -> LabeledImageSet:
    """Load ``<root>/<class_name>/*`` with classes in alphabetical order.

    Files that fail to decode are recorded in ``errors`` and skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class directories under {root}")
    suffixes = NETPBM_SUFFIXES | PIL_SUFFIXES
    images, labels, paths, errors = [], [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in suffixes)
        if not files:
            raise IngestionError(f"class directory {cdir.name!r} contains no images")
        for f in files:
            try:
                images.append(read_image(f))
            except (ValueError, OSError) as exc:
                errors.append((str(f), str(exc)))
                log.warning("skipping %s: %s", f, exc)
                continue
            labels.append(label)
            paths.append(str(f))
    if errors:
        log.warning("%d file(s) could not be decoded", len(errors))
    return LabeledImageSet(images, labels, tuple(p.name for p in class_dirs),
                           errors=errors, paths=paths)


def write_image_tree(images: LabeledImageSet, root) -> None:
    """Inverse of :func:`ingest_directory`, writing PPM files."""
    root = Path(root)
    for name in images.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    seen: dict[int, int] = {}
    for img, lab in zip(images.images, images.labels):
        i = seen.get(int(lab), 0)
        seen[int(lab)] = i + 1
        write_netpbm(root / images.class_names[lab] / f"{i:05d}.ppm", img)


# --------------------------------------------------------------------------
# preprocessing


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out=(176, 176)) -> np.ndarray:
    """Resize an HxWxC image with bilinear interpolation; returns float64."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    H, W = img.shape[:2]
    if H < 1 or W < 1:
        raise DataError(f"cannot resize an empty image {img.shape}")
    r0, r1, fr = _bilinear_axis(H, out[0])
    c0, c1, fc = _bilinear_axis(W, out[1])
    rows = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    res = rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return res[:, :, 0] if squeeze else res


def normalize_and_encode(images: LabeledImageSet, size=None):
    """Stack, scale to [0, 1] and one-hot encode.

    If ``size`` is given every image is first resized to ``size x size``.
    Returns ``(X float32 [N,H,W,3], Y float32 [N,c])``.
    """
    imgs = images.images
    if size is not None:
        imgs = [resize_bilinear(im, (size, size)) for im in imgs]
    X = np.stack([np.asarray(im, dtype=np.float64) for im in imgs]) if imgs else np.zeros((0, 0, 0, 3))
    if X.size and (X.min() < 0 or X.max() > 255):
        raise DataError(f"pixel values outside [0, 255]: [{X.min()}, {X.max()}]")
    X = (X / 255.0).astype(np.float32)
    return X, one_hot(images.labels, len(images.class_names))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((len(labels), num_classes), dtype=np.float32)
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


def as_labels(Y) -> np.ndarray:
    Y = np.asarray(Y)
    return Y.argmax(axis=1) if Y.ndim == 2 else Y.astype(np.int64)


# --------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    """Test share is carved off first, validation share from what remains."""

    test_fraction: float = 0.20
    val_fraction_of_remainder: float = 0.10
    seed: int = 42

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction_of_remainder"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise SplitError(f"{name} must be in (0, 1), got {v}")

    @classmethod
    def flat(cls, train=0.70, val=0.10, test=0.20, seed=42) -> "SplitSpec":
        """Fractions of the whole set, e.g. a literal 70/10/20 split."""
        if abs(train + val + test - 1) > 1e-9:
            raise SplitError("train/val/test fractions must sum to 1")
        return cls(test, val / (1 - test), seed)


def split_indices(labels, spec: SplitSpec = SplitSpec(), class_names=None):
    """Stratified ``(train_idx, val_idx, test_idx)``, each sorted ascending."""
    labels = as_labels(labels)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        name = class_names[c] if class_names is not None else str(c)
        if len(idx) < 5:
            raise SplitError(f"class {name!r} has {len(idx)} samples; at least 5 are needed to stratify")
        idx = rng.permutation(idx)
        n_test = _round_half_up(spec.test_fraction * len(idx))
        n_val = _round_half_up(spec.val_fraction_of_remainder * (len(idx) - n_test))
        parts[2].append(idx[:n_test])
        parts[1].append(idx[n_test:n_test + n_val])
        parts[0].append(idx[n_test + n_val:])
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)


def split_nested(X, Y, spec: SplitSpec = SplitSpec()):
    """Returns ``((X_train, Y_train), (X_val, Y_val), (X_test, Y_test))``."""
    tr, va, te = split_indices(Y, spec)
    X, Y = np.asarray(X), np.asarray(Y)
    return (X[tr], Y[tr]), (X[va], Y[va]), (X[te], Y[te])


# --------------------------------------------------------------------------
# SMOTE


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    seed: int = 42

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise SmoteError("k_neighbors must be positive")


def nearest_neighbors(X, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest rows (Euclidean, self excluded), ties by index."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((n, k), dtype=np.int64)
    step = max(1, (1 << 22) // max(n, 1))
    for s in range(0, n, step):
        d = sq[s:s + step, None] + sq[None, :] - 2.0 * (X[s:s + step] @ X.T)
        rows = np.arange(s, min(n, s + step))
        d[rows - s, rows] = np.inf
        out[s:s + step] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def smote_sample(x_i, x_j, u):
    """Interpolate ``x_i + u * (x_j - x_i)`` and clip to the parents' box.

    The clip only removes floating-point overshoot; in exact arithmetic the
    point already lies on the segment between the parents.
    """
    a = np.asarray(x_i, dtype=np.float64)
    b = np.asarray(x_j, dtype=np.float64)
    x_new = a + np.asarray(u, dtype=np.float64) * (b - a)
    return np.clip(x_new, np.minimum(a, b), np.maximum(a, b))


def smote(X, Y, cfg: SmoteConfig = SmoteConfig(), return_parents: bool = False):
    """Oversample every class up to the majority count.

    For each synthetic sample a random class member ``x_i`` and one of its
    ``k`` nearest same-class neighbours ``x_j`` are drawn and the sample is
    ``x_i + u * (x_j - x_i)`` with ``u ~ U[0, 1)``. Originals come first in
    the output, unchanged; synthetic rows are appended class by class.

    ``Y`` may be integer labels or one-hot rows; the output uses the same
    form. Returns ``(X', Y', synthetic_mask)`` and, if requested, the
    ``(n_synthetic, 2)`` array of parent indices into ``X``.
    """
    X = np.asarray(X)
    Y = np.asarray(Y)
    onehot = Y.ndim == 2
    labels = as_labels(Y)
    flat = X.reshape(len(X), -1)
    counts = np.bincount(labels)
    majority = counts.max() if len(counts) else 0
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    new_rows, new_labels, parents = [], [], []
    for c, n in enumerate(counts):
        need = majority - n
        if need == 0 or n == 0:
            continue
        if n < cfg.k_neighbors + 1:
            raise SmoteError(f"class {c} has {n} samples, fewer than k_neighbors+1 = "
                             f"{cfg.k_neighbors + 1}; use a smaller k_neighbors")
        members = np.flatnonzero(labels == c)
        nn = nearest_neighbors(flat[members], cfg.k_neighbors)
        pick = rng.integers(0, n, size=need)
        nbr = nn[pick, rng.integers(0, cfg.k_neighbors, size=need)]
        u = rng.random(need)[:, None]
        x_new = smote_sample(flat[members[pick]], flat[members[nbr]], u)
        new_rows.append(x_new.astype(flat.dtype if flat.dtype.kind == "f" else np.float64))
        new_labels.append(np.full(need, c, dtype=np.int64))
        parents.append(np.stack([members[pick], members[nbr]], axis=1))

    if new_rows:
        syn = np.concatenate(new_rows).reshape((-1,) + X.shape[1:])
        X_out = np.concatenate([X.astype(syn.dtype, copy=False), syn])
        lab_out = np.concatenate([labels] + new_labels)
        par = np.concatenate(parents)
    else:
        X_out, lab_out, par = X.copy(), labels.copy(), np.zeros((0, 2), np.int64)
    mask = np.zeros(len(lab_out), dtype=bool)
    mask[len(X):] = True
    Y_out = one_hot(lab_out, Y.shape[1]).astype(Y.dtype) if onehot else lab_out
    if return_parents:
        return X_out, Y_out, mask, par
    return X_out, Y_out, mask


# --------------------------------------------------------------------------
# end-to-end preparation


SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class PreparedData:
    X: np.ndarray          # float32 [N, H, W, 3] in [0, 1]
    Y: np.ndarray          # float32 one-hot [N, c]
    synthetic: np.ndarray  # bool [N]
    split: np.ndarray      # int [N]: 0 train, 1 val, 2 test
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def subset(self, which: str):
        m = self.split == SPLIT_CODES[which]
        return self.X[m], self.Y[m]

    def histogram(self, which: str | None = None) -> dict[str, int]:
        m = np.ones(len(self.Y), bool) if which is None else self.split == SPLIT_CODES[which]
        counts = np.bincount(as_labels(self.Y[m]), minlength=len(self.class_names))
        return {n: int(c) for n, c in zip(self.class_names, counts)}

    def to_archive(self) -> WeightArchive:
        arc = WeightArchive(meta={"class_names": list(self.class_names), **self.meta})
        arc.add("X", self.X)
        arc.add("Y", self.Y)
        arc.add("provenance", self.synthetic.astype(np.float32))
        arc.add("split", self.split.astype(np.float32))
        return arc

    @classmethod
    def from_archive(cls, arc: WeightArchive) -> "PreparedData":
        meta = dict(arc.meta)
        names = tuple(meta.pop("class_names", ()))
        return cls(np.array(arc["X"]), np.array(arc["Y"]), arc["provenance"] > 0.5,
                   arc["split"].astype(np.int64), names, meta)


def prepare(images: LabeledImageSet, size: int = 176, scenario: str = "smote",
            smote_order: str = "paper", split: SplitSpec = SplitSpec(),
            smote_cfg: SmoteConfig = SmoteConfig()) -> PreparedData:
    """Resize, normalize, optionally SMOTE, and split.

    ``smote_order="paper"`` oversamples the whole set before splitting, so
    synthetic rows can land in validation and test. ``"after-split"`` only
    oversamples the training subset.
    """
    if scenario not in ("smote", "no-smote"):
        raise DataError(f"unknown scenario {scenario!r}")
    if smote_order not in ("paper", "after-split"):
        raise DataError(f"unknown smote order {smote_order!r}")
    if len(images) == 0:
        raise DataError("dataset is empty")
    X, Y = normalize_and_encode(images, size)
    syn = np.zeros(len(Y), bool)
    names = images.class_names

    if scenario == "smote" and smote_order == "paper":
        X, Y, syn = smote(X, Y, smote_cfg)
    tr, va, te = split_indices(Y, split, names)
    codes = np.empty(len(Y), dtype=np.int64)
    codes[tr], codes[va], codes[te] = 0, 1, 2

    if scenario == "smote" and smote_order == "after-split":
        Xtr, Ytr, syn_tr = smote(X[tr], Y[tr], smote_cfg)
        extra = syn_tr.sum()
        X = np.concatenate([X, Xtr[syn_tr]])
        Y = np.concatenate([Y, Ytr[syn_tr]])
        syn = np.concatenate([syn, np.ones(extra, bool)])
        codes = np.concatenate([codes, np.zeros(extra, np.int64)])

    meta = {"scenario": scenario, "smote_order": smote_order, "size": size,
            "split_seed": split.seed, "smote_seed": smote_cfg.seed,
            "smote_k": smote_cfg.k_neighbors}
    return PreparedData(X.astype(np.float32), Y.astype(np.float32), syn, codes, names, meta)


# --------------------------------------------------------------------------
# synthetic fixture

TOY_CLASS_NAMES = ("MID", "MOD", "ND", "VMD")
# ventricle radius per class, in pixels of a 32x32 slice
_TOY_VENTRICLE = {0: 3.2, 1: 4.4, 2: 1.0, 3: 2.1}


def make_toy_dataset(counts=(100, 100, 100, 100), size: int = 32, seed: int = 0) -> LabeledImageSet:
    """Synthetic axial "slices" whose class is set by ventricle size.

    Each image is a bright elliptical brain on a dark background with two
    dark ventricles; ventricle radius grows with class severity. Position,
    shape and intensity are jittered and Gaussian noise is added.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    s = size / 32.0
    images, labels = [], []
    for label, n in enumerate(counts):
        for _ in range(n):
            cy, cx = size / 2 + rng.normal(0, 0.8 * s, 2)
            ry, rx = (13.0 + rng.normal(0, 0.6)) * s, (11.0 + rng.normal(0, 0.6)) * s
            brain = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            img = np.where(brain, 150.0 + rng.normal(0, 12), 15.0)
            r = (_TOY_VENTRICLE[label] + rng.normal(0, 0.2)) * s
            for side in (-1, 1):
                vy, vx = cy - 1.0 * s, cx + side * 3.0 * s
                vent = ((yy - vy) / (1.6 * r)) ** 2 + ((xx - vx) / r) ** 2 <= 1.0
                img = np.where(vent, 40.0, img)
            img = img + rng.normal(0, 8.0, img.shape)
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            images.append(np.repeat(img[:, :, None], 3, axis=2))
            labels.append(label)
    return LabeledImageSet(images, labels, TOY_CLASS_NAMES)
