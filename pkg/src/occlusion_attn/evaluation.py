"""1:1 verification metrics, attention localization, and attention-map export."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, make_verification_pairs, write_pnm
from .model import FaceModel

log = logging.getLogger(__name__)

DEFAULT_FAR_GRID = (0.1, 0.01, 0.001)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ValueError("scores must be finite")


def _allowed_false_accepts(far_target: float, n_impostor: int) -> int:
    """Largest k with k / n <= far_target, using the same comparison as the sweep."""
    k = min(int(np.floor(far_target * n_impostor)), n_impostor)
    while k < n_impostor and (k + 1) / n_impostor <= far_target:
        k += 1
    while k > 0 and k / n_impostor > far_target:
        k -= 1
    return k


def tar_at_far(scores: ScoreSet, far_target: float) -> tuple[float, float]:
    """Best TAR with FAR(t) = #(impostor >= t)/n <= far_target, accepting score >= t.

    Exact counting: if ``k`` false accepts are allowed, every threshold strictly
    above the (k+1)-th largest impostor score is admissible, and the smallest
    such threshold that still changes anything is the lowest genuine score above
    it.  Returns (tar, threshold).
    """
    if not 0 < far_target <= 1:
        raise ValueError(f"far_target must lie in (0, 1], got {far_target}")
    gen, imp = scores.genuine, scores.impostor
    if gen.size == 0 or imp.size == 0:
        raise ValueError("tar_at_far needs non-empty genuine and impostor scores")
    if imp.size < 1 / far_target:
        warnings.warn(f"{imp.size} impostor scores cannot resolve FAR={far_target:g}",
                      stacklevel=2)
    k = _allowed_false_accepts(far_target, imp.size)
    if k >= imp.size:
        return 1.0, float(min(gen.min(), imp.min()))
    bound = np.sort(imp)[::-1][k]
    accepted = gen[gen > bound]
    if accepted.size == 0:
        return 0.0, float(np.nextafter(bound, np.inf))
    return accepted.size / gen.size, float(accepted.min())


def tar_at_far_sweep(scores: ScoreSet, far_target: float) -> float:
    """O(n^2) oracle: try every observed score (and +inf) as the threshold."""
    gen, imp = scores.genuine, scores.impostor
    best = 0.0
    for t in np.concatenate([gen, imp, [np.inf]]):
        far = float((imp >= t).sum()) / imp.size
        if far <= far_target:
            best = max(best, float((gen >= t).sum()) / gen.size)
    return best


def verification_accuracy(scores: ScoreSet) -> float:
    """Best balanced-count accuracy over all thresholds (LFW-style)."""
    s = np.concatenate([scores.genuine, scores.impostor])
    y = np.concatenate([np.ones(scores.genuine.size), np.zeros(scores.impostor.size)])
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # only evaluate at the last index of each tied score block
    last = np.r_[s[1:] != s[:-1], True]
    correct = tp + (scores.impostor.size - fp)
    return float(max(scores.impostor.size, correct[last].max()) / s.size)


def score_pairs(embeddings: np.ndarray, pairs) -> ScoreSet:
    e = np.asarray(embeddings, dtype=np.float64)
    used = sorted({i for a, b, _ in pairs for i in (a, b)})
    norms = np.ones(len(e))
    norms[used] = np.linalg.norm(e[used], axis=1)
    if (norms == 0).any():
        raise ValueError(f"zero-norm embedding at rows {np.flatnonzero(norms == 0).tolist()}")
    e = e / norms[:, None]
    gen, imp = [], []
    for a, b, same in pairs:
        (gen if same else imp).append(float(np.clip(e[a] @ e[b], -1.0, 1.0)))
    return ScoreSet(np.array(gen), np.array(imp))


def run_verification(model: FaceModel, dataset: Dataset, pairs, mode: str = "clean",
                     far_grid=DEFAULT_FAR_GRID) -> tuple[ScoreSet, dict]:
    """Embed every referenced image once, score the pairs, report TAR on the grid."""
    if not pairs:
        raise ValueError("empty pair list")
    used = sorted({i for a, b, _ in pairs for i in (a, b)})
    if used[0] < 0 or used[-1] >= len(dataset):
        raise ValueError(f"pair index out of range for dataset of size {len(dataset)}")
    emb = np.zeros((len(dataset), model.cfg.embedding_dim))
    emb[used] = model.embed(dataset.images[used])
    scores = score_pairs(emb, pairs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tars = {f"{far:g}": tar_at_far(scores, far)[0] for far in far_grid}
    report = {"mode": mode, "tar_at_far": tars, "accuracy": verification_accuracy(scores),
              "n_genuine": int(scores.genuine.size), "n_impostor": int(scores.impostor.size)}
    return scores, report


# ---------------------------------------------------------------- attention maps


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of (..., h, w) maps; rows of weights sum to 1."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]

    def weights(n_in: int, n_out: int) -> np.ndarray:
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
        return m

    wy, wx = weights(h, height), weights(w, width)
    return np.einsum("ph,...hw,qw->...pq", wy, maps, wx)


def attention_mass(attn: np.ndarray, region: np.ndarray) -> float:
    """Share of the attention mass that falls inside ``region``; 0 for an empty region."""
    attn = np.asarray(attn, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if attn.shape != region.shape:
        attn = upsample_bilinear(attn, *region.shape)
    total = attn.sum()
    if total <= 0:
        raise ValueError("attention map has no mass")
    if not region.any():
        return 0.0
    return float((attn * region).sum() / total)


@dataclass
class LocalizationReport:
    a_um_mass_in_mask: float
    a_m_mass_in_mask: float
    a_bg_mass_in_mask: float | None
    region_share: float
    n_images: int


def localization_report(model: FaceModel, dataset: Dataset) -> LocalizationReport | None:
    """Mean attention masses inside the ground-truth mask over masked images."""
    if model.variant.attention is None:
        return None
    idx = np.flatnonzero(dataset.masked)
    if idx.size == 0:
        raise ValueError("localization needs masked samples with ground-truth regions")
    maps = model.attention_maps(dataset.images[idx])
    regions = dataset.regions[idx]
    masses = {k: np.mean([attention_mass(v[i], regions[i]) for i in range(idx.size)])
              for k, v in maps.items()}
    return LocalizationReport(float(masses["a_um"]), float(masses["a_m"]),
                              float(masses["a_bg"]) if "a_bg" in masses else None,
                              float(regions.mean()), int(idx.size))


def export_attention(model: FaceModel, images: np.ndarray, out_dir) -> list[Path]:
    """Write input PPM, per-map PGMs (min-max scaled), a scale sidecar, and a composite."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"cannot write to {out}: {exc.strerror}") from None
    images = np.asarray(images)
    maps = model.attention_maps(images)
    h, w = images.shape[2:]
    written = []
    for i in range(len(images)):
        stem = f"{i:04d}"
        write_pnm(out / f"{stem}_input.ppm", images[i])
        written.append(out / f"{stem}_input.ppm")
        panels = [images[i]]
        scales = []
        for key, value in maps.items():
            up = upsample_bilinear(value[i], h, w)
            lo, hi = float(up.min()), float(up.max())
            scaled = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
            write_pnm(out / f"{stem}_{key}.pgm", scaled)
            written.append(out / f"{stem}_{key}.pgm")
            scales.append(f"{key} min={lo!r} max={hi!r}")
            panels.append(np.repeat(scaled[None], 3, axis=0))
        (out / f"{stem}_scale.txt").write_text("\n".join(scales) + "\n", encoding="utf-8")
        write_pnm(out / f"{stem}_composite.ppm", np.concatenate(panels, axis=2))
        written += [out / f"{stem}_scale.txt", out / f"{stem}_composite.ppm"]
    return written


def evaluate(model: FaceModel, dataset: Dataset, seed: int, n_genuine: int, n_impostor: int,
             far_grid=DEFAULT_FAR_GRID) -> dict:
    """Clean and masked-probe verification plus localization, as a report dict."""
    results = {}
    for mode in ("clean", "masked_probe"):
        pairs = make_verification_pairs(dataset, seed, n_genuine, n_impostor, mode)
        _, results[mode] = run_verification(model, dataset, pairs, mode, far_grid)
    loc = localization_report(model, dataset)
    return {
        "tar_at_far": {mode: r["tar_at_far"] for mode, r in results.items()},
        "clean_accuracy": results["clean"]["accuracy"],
        "masked_accuracy": results["masked_probe"]["accuracy"],
        "a_um_mass_in_mask": loc.a_um_mass_in_mask if loc else None,
        "a_m_mass_in_mask": loc.a_m_mass_in_mask if loc else None,
        "a_bg_mass_in_mask": loc.a_bg_mass_in_mask if loc else None,
        "mask_region_share": loc.region_share if loc else None,
    }
