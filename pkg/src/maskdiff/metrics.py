"""Distribution metrics over a pluggable feature extractor, plus mask overlap.

FID fits a Gaussian to each feature set and measures

    ||mu_1 - mu_2||^2 + Tr(S_1 + S_2 - 2 (S_1 S_2)^{1/2}),

with the matrix square root taken through a symmetric eigendecomposition of
sqrt(S_2) S_1 sqrt(S_2) (same trace, always symmetric PSD up to round-off;
eigenvalues are floored at zero). KID is the unbiased squared MMD with the
degree-3 polynomial kernel k(x, y) = (x.y/D + 1)^3, reported unclamped, so
slightly negative values are expected near the null. The inception score
exponentiates the mean KL divergence between per-sample class posteriors and
their marginal.

The built-in embedder is a fixed random convolutional projection (seed 42)
with global average pooling to 64 features. It exists so that scores are
deterministic and cheap at desk scale; they are NOT comparable to any
published number computed with an Inception network, and every report file
says so.

Overlap metrics reduce two binary masks to TP/FP/FN/TN pixel counts.
Empty-mask conventions: IoU and F1 are 1 when both masks are empty;
precision is 1 when both are empty, 0 when the prediction is empty but the
truth is not.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EMBED_DIM = 64
_EMBED_SEED = 42
_CLASSIFIER_SEED = 43
_N_CLASSES = 10


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class OverlapMetrics:
    iou: float
    f1: float
    accuracy: float
    precision: float


class FeatureExtractor(Protocol):
    identifier: str

    def embed(self, images: np.ndarray) -> np.ndarray: ...


def compute_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of an N x D feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"need an N x D matrix with N >= 2, got {features.shape}")
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / (features.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mu=mu, cov=cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    s2_root = _psd_sqrt(b.cov)
    inner = s2_root @ a.cov @ s2_root
    inner = (inner + inner.T) / 2.0
    tr_sqrt = float(np.sum(np.sqrt(np.maximum(np.linalg.eigvalsh(inner), 0.0))))
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    if not np.isfinite(fid):
        raise ValueError("non-finite Frechet distance")
    if fid < 0.0:
        if fid < -1e-6:
            raise ValueError(f"Frechet distance {fid} below numerical-noise floor")
        fid = 0.0
    return fid


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be N x D with matching D")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValueError(f"need at least 2 samples per set, got {m} and {n}")
    k_aa = _poly_kernel(a, a)
    k_bb = _poly_kernel(b, b)
    k_ab = _poly_kernel(a, b)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.mean())


def inception_score(probs: np.ndarray) -> float:
    """exp(mean KL(p(y|x) || p(y))) for an N x K matrix of class posteriors."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"need an N x K matrix, got shape {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("probabilities must be nonnegative")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("each row must sum to 1 within 1e-6")
    marginal = probs.mean(axis=0)
    safe = probs > 0
    log_ratio = np.zeros_like(probs)
    log_ratio[safe] = np.log(probs[safe]) - np.log(
        np.broadcast_to(marginal, probs.shape)[safe]
    )
    kl_per_row = (probs * log_ratio).sum(axis=1)
    return float(np.exp(kl_per_row.mean()))


def _check_binary(name: str, mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask must be strictly binary")
    return arr.astype(bool)


def overlap_metrics(pred: np.ndarray, truth: np.ndarray) -> OverlapMetrics:
    """Pixel-count overlap scores between two binary masks."""
    p = _check_binary("pred", pred)
    t = _check_binary("truth", truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    accuracy = (tp + tn) / (tp + fp + fn + tn)
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    return OverlapMetrics(iou=iou, f1=f1, accuracy=accuracy, precision=precision)


def conditioning_fidelity(generated: np.ndarray, mask: np.ndarray, threshold: float) -> float:
    """IoU between the generated image's bright region and its mask.

    The image is reduced to its mean over channels and binarized at
    ``threshold``; the mask must already be binary (1, H, W) or (H, W).
    """
    generated = np.asarray(generated)
    mask = np.asarray(mask)
    mask2d = mask[0] if mask.ndim == 3 else mask
    if generated.shape[-2:] != mask2d.shape:
        raise ValueError(
            f"spatial mismatch: image {generated.shape[-2:]} vs mask {mask2d.shape}"
        )
    pred = (generated.mean(axis=0) > threshold).astype(np.uint8)
    return overlap_metrics(pred, mask2d).iou


def _conv_stride2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    out = np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)
    return out + b[None, :, None, None]


class RandomConvEmbedder:
    """Fixed random three-layer conv net with global average pooling.

    Weights come from one seeded generator, so the embedding is identical
    across runs and platforms at float64 precision. Accepts 1- or 3-channel
    images of any size >= 16 x 16.
    """

    identifier = f"randconv3-seed{_EMBED_SEED}-d{EMBED_DIM}"

    def __init__(self):
        rng = np.random.default_rng(_EMBED_SEED)
        widths = [(16, 3), (32, 16), (EMBED_DIM, 32)]
        self._layers = []
        for out_ch, in_ch in widths:
            fan_in = in_ch * 9
            w = rng.uniform(-1, 1, (out_ch, in_ch, 3, 3)) / np.sqrt(fan_in)
            b = rng.uniform(-0.1, 0.1, out_ch)
            self._layers.append((w, b))

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) images, got shape {x.shape}")
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ValueError("images must be at least 16 x 16")
        if x.shape[1] == 1:
            x = np.repeat(x, 3, axis=1)
        if x.shape[1] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
        feats = []
        for start in range(0, x.shape[0], 32):  # chunk to bound window copies
            h = x[start : start + 32]
            for w, b in self._layers:
                h = np.tanh(_conv_stride2(h, w, b))
            feats.append(h.mean(axis=(2, 3)))
        return np.concatenate(feats, axis=0)


_default_embedder = None


def reference_embedder(images: np.ndarray) -> np.ndarray:
    """Embed a batch with the shared fixed-weight extractor."""
    global _default_embedder
    if _default_embedder is None:
        _default_embedder = RandomConvEmbedder()
    return _default_embedder.embed(images)


_classifier_head = None


def reference_class_probs(features: np.ndarray) -> np.ndarray:
    """10-way softmax head over embedder features, for toy-scale IS reports."""
    global _classifier_head
    if _classifier_head is None:
        rng = np.random.default_rng(_CLASSIFIER_SEED)
        _classifier_head = rng.uniform(-1, 1, (EMBED_DIM, _N_CLASSES)) / np.sqrt(EMBED_DIM)
    logits = np.asarray(features, dtype=np.float64) @ _classifier_head
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


def write_report(path, rows: list[dict]) -> None:
    """Plain-text metric table; one row per metric.

    Columns: metric, value, n_real, n_synth, embedder_id.
    """
    lines = [
        "# scores use a fixed random-projection embedder; they are not",
        "# comparable to published numbers computed with an Inception network",
        "metric\tvalue\tn_real\tn_synth\tembedder_id",
    ]
    for row in rows:
        lines.append(
            f"{row['metric']}\t{row['value']:.6f}\t{row['n_real']}\t"
            f"{row['n_synth']}\t{row['embedder_id']}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict[str, float]:
    values = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("metric\t") or not line.strip():
            continue
        fields = line.split("\t")
        values[fields[0]] = float(fields[1])
    return values
