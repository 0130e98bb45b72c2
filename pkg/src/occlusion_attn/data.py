"""Synthetic faces, mask augmentation, PPM/PGM folders, and verification pairs.

Identity traits are a pure function of the identity index; per-sample
nuisance (pose jitter, lighting, background, noise) is a pure function of
``(global_seed, identity, sample_index)``.  Nothing here touches global RNG
state, so generation is reproducible in any order and on any worker.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

_IDENTITY_SALT = 0x5EED_FACE

MASK_COLORS = {
    "blue": (0.40, 0.62, 0.88),
    "green": (0.36, 0.72, 0.52),
    "black": (0.06, 0.06, 0.07),
    "white": (0.95, 0.95, 0.95),
}

# mask band, as fractions of the face's vertical extent
MASK_TOP, MASK_BOTTOM = 0.55, 0.90


@dataclass(frozen=True)
class FaceGeometry:
    cy: float
    cx: float
    ry: float
    rx: float

    @classmethod
    def canonical(cls, height: int, width: int) -> FaceGeometry:
        return cls(0.5 * height, 0.5 * width, 0.42 * height, 0.34 * width)


@dataclass
class LabeledSample:
    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    identity: int
    masked: bool
    mask_region: np.ndarray    # (H, W) bool
    face: FaceGeometry


@dataclass
class AugmentConfig:
    ma_probability: float = 0.0
    flip_prob: float = 0.5
    translate_px: int = 2
    crop: int | None = None
    mask_colors: list[tuple[float, float, float]] = field(
        default_factory=lambda: list(MASK_COLORS.values()))

    def __post_init__(self):
        if not 0.0 <= self.ma_probability <= 1.0:
            raise ValueError(f"ma_probability must lie in [0, 1], got {self.ma_probability}")


@dataclass
class Dataset:
    images: np.ndarray         # (N, 3, H, W) float32
    identities: np.ndarray     # (N,) int
    masked: np.ndarray         # (N,) bool
    regions: np.ndarray        # (N, H, W) bool
    faces: list[FaceGeometry]
    source: np.ndarray | None = None   # underlying clean sample id, for pairing
    paths: list[str] | None = None

    def __post_init__(self):
        if self.source is None:
            self.source = np.arange(len(self.images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.identities[i]), bool(self.masked[i]),
                             self.regions[i], self.faces[i])

    @classmethod
    def from_samples(cls, samples: list[LabeledSample], source=None) -> Dataset:
        return cls(images=np.stack([s.image for s in samples]).astype(np.float32),
                   identities=np.array([s.identity for s in samples], dtype=np.int64),
                   masked=np.array([s.masked for s in samples], dtype=bool),
                   regions=np.stack([s.mask_region for s in samples]),
                   faces=[s.face for s in samples],
                   source=None if source is None else np.asarray(source))


# ---------------------------------------------------------------- rendering


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return y, x


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    """Soft inside-test: 1 deep inside, 0 outside, linear across one pixel."""
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _ellipse(y, x, cy, cx, ry, rx) -> np.ndarray:
    r = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
    return _coverage((r - 1.0) * min(ry, rx))


def _paint(img: np.ndarray, alpha: np.ndarray, color) -> None:
    img *= 1.0 - alpha
    img += alpha * np.asarray(color, dtype=np.float64)[:, None, None]


def identity_traits(identity: int) -> dict:
    rng = np.random.default_rng([_IDENTITY_SALT, identity])
    tone = rng.uniform()
    skin = (1 - tone) * np.array([0.96, 0.80, 0.68]) + tone * np.array([0.42, 0.28, 0.18])
    skin = np.clip(skin + rng.normal(0, 0.03, 3), 0, 1)
    hair = rng.choice([[0.08, 0.06, 0.05], [0.35, 0.22, 0.10], [0.85, 0.72, 0.40],
                       [0.60, 0.25, 0.10], [0.65, 0.65, 0.65]])
    return {
        "skin": skin,
        "hair": np.clip(hair + rng.normal(0, 0.05, 3), 0, 1),
        "rx": rng.uniform(0.29, 0.37),
        "ry": rng.uniform(0.40, 0.45),
        "hairline": rng.uniform(0.12, 0.40),
        "eye_y": rng.uniform(-0.32, -0.12),
        "eye_dx": rng.uniform(0.30, 0.55),
        "eye_r": rng.uniform(0.045, 0.08),
        "iris": rng.uniform(0.0, 0.6, 3),
        "brow_gap": rng.uniform(0.10, 0.20),
        "brow_len": rng.uniform(0.25, 0.45),
        "brow_th": rng.uniform(0.03, 0.06),
        "nose_len": rng.uniform(0.25, 0.45),
        "nose_w": rng.uniform(0.10, 0.22),
        "mouth_y": rng.uniform(0.45, 0.62),
        "mouth_w": rng.uniform(0.25, 0.50),
        "mouth_th": rng.uniform(0.04, 0.09),
        "lips": np.clip(np.array([0.70, 0.25, 0.28]) + rng.normal(0, 0.08, 3), 0, 1),
        "cheek": rng.uniform() < 0.5,
    }


def gen_identity_image(global_seed: int, identity: int, sample_index: int,
                       size: int = 32) -> LabeledSample:
    """Render one unmasked face of ``identity`` with per-sample jitter."""
    tr = identity_traits(identity)
    rng = np.random.default_rng([global_seed, identity, sample_index])
    y, x = _grid(size)
    scale = rng.uniform(0.95, 1.05)
    cy = size * 0.5 + rng.uniform(-1.5, 1.5)
    cx = size * 0.5 + rng.uniform(-1.5, 1.5)
    ry, rx = tr["ry"] * size * scale, tr["rx"] * size * scale

    # background: random colour plus a linear gradient
    bg = rng.uniform(0.05, 0.95, 3)
    grad = rng.normal(0, 0.15, 2)
    ramp = grad[0] * (y / size - 0.5) + grad[1] * (x / size - 0.5)
    img = np.clip(bg[:, None, None] + ramp[None], 0, 1)

    face = _ellipse(y, x, cy, cx, ry, rx)
    _paint(img, face, tr["skin"])
    # hair cap: the face ellipse above the hairline
    cap_edge = cy - ry + tr["hairline"] * 2 * ry
    hair = _ellipse(y, x, cy, cx, ry * 1.04, rx * 1.06) * _coverage(y - cap_edge)
    _paint(img, hair, tr["hair"])

    eye_y = cy + tr["eye_y"] * ry
    er = max(tr["eye_r"] * size, 0.9)
    for side in (-1, 1):
        ex = cx + side * tr["eye_dx"] * rx
        _paint(img, _ellipse(y, x, eye_y, ex, er * 0.8, er * 1.3), (0.97, 0.97, 0.97))
        _paint(img, _ellipse(y, x, eye_y, ex, er * 0.7, er * 0.7), tr["iris"])
        by = eye_y - tr["brow_gap"] * ry - er
        brow = (_coverage(np.abs(y - by) - tr["brow_th"] * size)
                * _coverage(np.abs(x - ex) - tr["brow_len"] * rx))
        _paint(img, brow * face, tr["hair"])
    if tr["cheek"]:
        _paint(img, 0.5 * _ellipse(y, x, eye_y + 0.25 * ry, cx - 0.55 * rx, 1.2, 1.2),
               (0.85, 0.45, 0.45))

    # nose wedge widening downwards from eye level
    top, bottom = eye_y, cy + tr["nose_len"] * ry
    t = np.clip((y - top) / max(bottom - top, 1e-6), 0, 1)
    half = 0.4 + t * tr["nose_w"] * rx
    nose = _coverage(np.abs(x - cx) - half) * _coverage(top - y) * _coverage(y - bottom)
    _paint(img, 0.45 * nose, tr["skin"] * 0.6)

    my = cy + tr["mouth_y"] * ry
    mouth = (_coverage(np.abs(y - my) - tr["mouth_th"] * size)
             * _coverage(np.abs(x - cx) - tr["mouth_w"] * rx))
    _paint(img, mouth, tr["lips"])

    img = img * rng.uniform(0.85, 1.15) + rng.normal(0, 0.02, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledSample(img, identity, False, np.zeros((size, size), dtype=bool),
                         FaceGeometry(cy, cx, ry, rx))


def mask_trapezoid(face: FaceGeometry, height: int, width: int) -> np.ndarray:
    """Nose-and-mouth band: 55%..90% of face height, tracking the ellipse width."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    top = face.cy - face.ry + MASK_TOP * 2 * face.ry
    bottom = face.cy - face.ry + MASK_BOTTOM * 2 * face.ry
    half_top = face.rx * np.sqrt(1 - ((top - face.cy) / face.ry) ** 2) * 1.02
    half_bottom = face.rx * np.sqrt(1 - ((bottom - face.cy) / face.ry) ** 2) * 1.02
    t = (y - top) / (bottom - top)
    half = half_top + t * (half_bottom - half_top)
    region = (y >= top) & (y <= bottom) & (np.abs(x - face.cx) <= half)
    # the overlay never reaches the upper 45% of the image
    region[: int(np.ceil(0.45 * height))] = False
    return region


def apply_mask(sample: LabeledSample, cfg: AugmentConfig, draw: float,
               color_pick: int) -> LabeledSample:
    """Overlay a flat-coloured mask when ``draw < cfg.ma_probability``."""
    if sample.masked:
        raise ValueError("apply_mask expects an unmasked sample")
    if not draw < cfg.ma_probability:
        return sample
    _, h, w = sample.image.shape
    region = mask_trapezoid(sample.face, h, w)
    color = np.asarray(cfg.mask_colors[color_pick % len(cfg.mask_colors)], dtype=np.float32)
    image = sample.image.copy()
    image[:, region] = color[:, None]
    return replace(sample, image=image, masked=bool(region.any()), mask_region=region)


def augment(sample: LabeledSample, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledSample:
    """Online mask augmentation, then flip and pad-shift-crop."""
    if not sample.masked:
        sample = apply_mask(sample, cfg, rng.uniform(), int(rng.integers(len(cfg.mask_colors))))
    image, region = sample.image, sample.mask_region
    if rng.uniform() < cfg.flip_prob:
        image, region = image[:, :, ::-1], region[:, ::-1]
    _, h, w = image.shape
    out_h = out_w = cfg.crop or h
    t = cfg.translate_px
    if t or (out_h, out_w) != (h, w):
        image = np.pad(image, ((0, 0), (t, t), (t, t)), mode="edge")
        region = np.pad(region, ((t, t), (t, t)))
        oy = int(rng.integers(0, h + 2 * t - out_h + 1))
        ox = int(rng.integers(0, w + 2 * t - out_w + 1))
        image = image[:, oy:oy + out_h, ox:ox + out_w]
        region = region[oy:oy + out_h, ox:ox + out_w]
    return replace(sample, image=np.ascontiguousarray(image),
                   mask_region=np.ascontiguousarray(region))


# ---------------------------------------------------------------- datasets


def make_synthetic_dataset(seed: int, n_identities: int, samples_per_identity: int,
                           size: int = 32, identity_offset: int = 0,
                           index_offset: int = 0) -> Dataset:
    samples = [gen_identity_image(seed, identity_offset + i, index_offset + j, size)
               for i in range(n_identities) for j in range(samples_per_identity)]
    ds = Dataset.from_samples(samples)
    ds.identities = ds.identities - identity_offset
    return ds


def make_eval_dataset(seed: int, n_identities: int, samples_per_identity: int,
                      size: int = 32, identity_offset: int = 0,
                      cfg: AugmentConfig | None = None) -> Dataset:
    """Clean images followed by a masked copy of each (colour drawn per image).

    ``source`` ties every masked copy to its clean original so pairs never
    compare an image with its own masked version.
    """
    cfg = cfg or AugmentConfig()
    forced = replace(cfg, ma_probability=1.0)
    clean = [gen_identity_image(seed, identity_offset + i, j, size)
             for i in range(n_identities) for j in range(samples_per_identity)]
    rng = np.random.default_rng([seed, 0xE7A1])
    masked = [apply_mask(s, forced, 0.0, int(rng.integers(len(cfg.mask_colors)))) for s in clean]
    n = len(clean)
    ds = Dataset.from_samples(clean + masked, source=np.concatenate([np.arange(n)] * 2))
    ds.identities = ds.identities - identity_offset
    return ds


def make_verification_pairs(dataset: Dataset, seed: int, n_genuine: int, n_impostor: int,
                            mode: str = "clean") -> list[tuple[int, int, bool]]:
    """Deterministic (a, b, is_genuine) pairs.

    ``clean`` pairs unmasked images with each other; ``masked_probe`` pairs a
    masked probe ``a`` with an unmasked gallery image ``b``.  Images sharing
    a source are never paired.
    """
    clean_idx = np.flatnonzero(~dataset.masked)
    if mode == "clean":
        probes, gallery = clean_idx, clean_idx
    elif mode == "masked_probe":
        probes, gallery = np.flatnonzero(dataset.masked), clean_idx
    else:
        raise ValueError(f"unknown pairing mode {mode!r}")
    ids, src = dataset.identities, dataset.source
    symmetric = mode == "clean"

    genuine = [(int(a), int(b)) for a, b in itertools.product(probes, gallery)
               if ids[a] == ids[b] and src[a] != src[b] and (not symmetric or a < b)]
    if n_genuine > len(genuine):
        raise ValueError(f"insufficient data: {len(genuine)} genuine pairs available, "
                         f"{n_genuine} requested")
    n_ids = len(np.unique(ids[gallery]))
    if n_impostor and n_ids < 2:
        raise ValueError("insufficient data: impostor pairs need at least 2 identities")
    n_imp_avail = sum(int((ids[gallery] != ids[a]).sum()) for a in probes)
    if symmetric:
        n_imp_avail //= 2
    if n_impostor > n_imp_avail:
        raise ValueError(f"insufficient data: {n_imp_avail} impostor pairs available, "
                         f"{n_impostor} requested")

    rng = np.random.default_rng([seed, 0x9A15])
    chosen = rng.choice(len(genuine), size=n_genuine, replace=False) if n_genuine else []
    pairs = [(*genuine[i], True) for i in chosen]
    seen: set[tuple[int, int]] = set()
    while len(seen) < n_impostor:
        a = int(probes[rng.integers(len(probes))])
        b = int(gallery[rng.integers(len(gallery))])
        if ids[a] == ids[b]:
            continue
        key = (min(a, b), max(a, b)) if symmetric else (a, b)
        if key in seen:
            continue
        seen.add(key)
        pairs.append((*key, False))
    return pairs


# ---------------------------------------------------------------- PPM / PGM


def write_pnm(path, image: np.ndarray) -> None:
    """(3, H, W) -> binary P6, (H, W) -> binary P5; values in [0, 1] or uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if arr.ndim == 3:
        header, body = b"P6", arr.transpose(1, 2, 0)
        h, w = arr.shape[1:]
    elif arr.ndim == 2:
        header, body = b"P5", arr
        h, w = arr.shape
    else:
        raise ValueError(f"cannot write image of shape {arr.shape}")
    Path(path).write_bytes(header + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(body).tobytes())


def read_pnm(path) -> np.ndarray:
    """Binary P5/P6 with maxval 255 -> uint8 (H, W) or (3, H, W)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: unreadable ({exc.strerror})") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PNM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError(f"{path}: unsupported PNM geometry {w}x{h} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    raster = buf[pos:pos + w * h * channels]
    if len(raster) != w * h * channels:
        raise ValueError(f"{path}: raster truncated")
    arr = np.frombuffer(raster, np.uint8)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).copy() if channels == 3 else arr.reshape(h, w).copy()


def load_image_folder(path) -> Dataset:
    """One subdirectory per identity, PPM/PGM files inside, sorted lexicographically.

    An optional ``<stem>.mask.pgm`` next to an image supplies its mask region.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root}: not a directory")
    samples, paths = [], []
    for identity, sub in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
        files = sorted(p for p in sub.iterdir()
                       if p.suffix in (".ppm", ".pgm") and not p.name.endswith(".mask.pgm"))
        if not files:
            raise ValueError(f"{sub}: identity directory contains no images")
        for f in files:
            raw = read_pnm(f)
            img = (np.repeat(raw[None], 3, axis=0) if raw.ndim == 2 else raw).astype(np.float32) / 255
            h, w = img.shape[1:]
            mask_file = f.with_name(f.stem + ".mask.pgm")
            region = read_pnm(mask_file) > 0 if mask_file.exists() else np.zeros((h, w), bool)
            samples.append(LabeledSample(img, identity, bool(region.any()), region,
                                         FaceGeometry.canonical(h, w)))
            paths.append(str(f.relative_to(root)))
    if not samples:
        raise ValueError(f"{root}: no identity directories")
    ds = Dataset.from_samples(samples)
    ds.paths = paths
    return ds


def write_image_folder(dataset: Dataset, out_dir) -> Path:
    """Write ``<identity>/<index>.ppm`` files plus a tab-separated manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    lines = []
    for i in range(len(dataset)):
        ident = int(dataset.identities[i])
        k = counters.get(ident, 0)
        counters[ident] = k + 1
        rel = Path(f"{ident:04d}") / f"{k:04d}.ppm"
        (out / rel.parent).mkdir(exist_ok=True)
        write_pnm(out / rel, dataset.images[i])
        if dataset.masked[i]:
            write_pnm(out / rel.with_name(f"{k:04d}.mask.pgm"),
                      dataset.regions[i].astype(np.uint8) * 255)
        lines.append(f"{rel.as_posix()}\t{ident}\t{int(dataset.masked[i])}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[tuple[str, int, bool]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rel, ident, masked = line.split("\t")
            rows.append((rel, int(ident), masked == "1"))
    return rows
