"""Evaluation instruments: coupling, mutual information, discriminability AUC, GLCM, ECDFs."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from . import rng

GLCM_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


# --- disentanglement ------------------------------------------------------

def cosine_coupling(a, b) -> float:
    """|<a, b>| / (|a| |b|)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine coupling is undefined for a zero vector")
    return float(min(abs(a @ b) / (na * nb), 1.0))


def principal_projection(feats) -> np.ndarray:
    """Scores on the first principal axis (sign fixed by the largest loading)."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim == 1:
        return f.copy()
    f = f.reshape(len(f), -1)
    centred = f - f.mean(axis=0)
    if not np.any(centred):
        return np.zeros(len(f))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return centred @ axis


def equal_frequency_bins(v: np.ndarray, bins: int) -> np.ndarray:
    """Bin index per sample using empirical-quantile edges (ties share a bin)."""
    edges = np.quantile(v, np.linspace(0.0, 1.0, bins + 1))
    return np.searchsorted(edges[1:-1], v, side="right")


def mutual_information(a, b, bins: int = 16) -> float:
    """Plug-in MI (nats) over a bins x bins equal-frequency joint histogram.

    Multi-dimensional samples (n, d) are first reduced to their principal
    projection.
    """
    if bins < 1:
        raise ValueError("bins must be positive")
    a = principal_projection(a)
    b = principal_projection(b)
    if a.shape[0] != b.shape[0] or a.shape[0] < 2:
        raise ValueError("need equal sample counts of at least 2")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("mutual_information: constant input, returning 0")
        return 0.0
    ia = equal_frequency_bins(a, bins)
    ib = equal_frequency_bins(b, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


# --- discriminability -----------------------------------------------------

def auc_rank(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(tie) via the Mann-Whitney rank sum."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def roc_points(pos_scores, neg_scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) of the ROC staircase, thresholds swept from high to low."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0] + [float(np.mean(pos >= th)) for th in thresholds]
    fpr = [0.0] + [float(np.mean(neg >= th)) for th in thresholds]
    return np.array(fpr), np.array(tpr)


def cross_validated_scores(real_feats, synth_feats, folds: int = 5, seed: int = 0,
                           real_groups=None, synth_groups=None):
    """Out-of-fold decision scores of an L2 logistic classifier (real = positive).

    With group labels (subject ids) every group is held out as a whole, so a
    synthetic sample never sits in training while its own real subject is scored.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold, cross_val_predict
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    real = np.asarray(real_feats, dtype=np.float64).reshape(len(real_feats), -1)
    synth = np.asarray(synth_feats, dtype=np.float64).reshape(len(synth_feats), -1)
    if min(len(real), len(synth)) < folds:
        raise ValueError(f"each class needs at least {folds} samples (got {len(real)}, {len(synth)})")
    X = np.concatenate([real, synth])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(synth))])
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=1000))
    if (real_groups is None) != (synth_groups is None):
        raise ValueError("give group labels for both classes or neither")
    if real_groups is None:
        cv, groups = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2**32)), None
    else:
        groups = np.concatenate([np.asarray(real_groups, dtype=object), np.asarray(synth_groups, dtype=object)])
        if len(groups) != len(y):
            raise ValueError("group labels must match the feature rows")
        n_groups = len(set(groups.tolist()))
        if n_groups < folds:
            raise ValueError(f"need at least {folds} distinct groups (got {n_groups})")
        cv = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed % (2**32))
    scores = cross_val_predict(clf, X, y, cv=cv, groups=groups, method="decision_function")
    return scores[: len(real)], scores[len(real):]


def bootstrap_auc(pos_scores, neg_scores, n: int = 1000, seed: int = 0) -> np.ndarray:
    """AUCs of class-stratified bootstrap resamples of fixed scores."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    g = rng.generator(seed, "bootstrap-auc")
    out = np.empty(n)
    for i in range(n):
        out[i] = auc_rank(pos[g.integers(0, pos.size, pos.size)], neg[g.integers(0, neg.size, neg.size)])
    return out


class AucCI(NamedTuple):
    auc: float
    ci_low: float
    ci_high: float


@dataclass
class Discriminability:
    auc: float
    ci_low: float
    ci_high: float
    real_scores: np.ndarray
    synth_scores: np.ndarray
    bootstrap: np.ndarray

    def interval(self) -> AucCI:
        return AucCI(self.auc, self.ci_low, self.ci_high)


def discriminability(real_feats, synth_feats, bootstrap_n: int = 1000, seed: int = 0,
                     level: float = 0.95, real_groups=None, synth_groups=None) -> Discriminability:
    pos, neg = cross_validated_scores(real_feats, synth_feats, seed=seed,
                                      real_groups=real_groups, synth_groups=synth_groups)
    auc = auc_rank(pos, neg)
    boots = bootstrap_auc(pos, neg, bootstrap_n, seed)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(boots, [tail, 100.0 - tail])
    return Discriminability(auc, float(lo), float(hi), pos, neg, boots)


def discriminability_auc(real_feats, synth_feats, bootstrap_n: int = 1000, seed: int = 0) -> AucCI:
    """Real-vs-synthetic AUC with a 95% percentile bootstrap interval (lower is more realistic)."""
    return discriminability(real_feats, synth_feats, bootstrap_n, seed).interval()


# --- texture --------------------------------------------------------------

def quantize(x, levels: int, value_range=(0.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    q = np.floor((np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * levels)
    return np.clip(q, 0, levels - 1).astype(np.int64)


def glcm_counts(q: np.ndarray, levels: int, offset) -> np.ndarray:
    """Symmetric co-occurrence counts of quantized image ``q`` at ``offset``."""
    di, dj = offset
    H, W = q.shape
    if abs(di) >= H or abs(dj) >= W:
        raise ValueError(f"offset {offset} does not fit a {H}x{W} image")
    a = q[max(0, -di):H - max(0, di), max(0, -dj):W - max(0, dj)]
    b = q[max(0, di):H + min(0, di), max(0, dj):W + min(0, dj)]
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (a.ravel(), b.ravel()), 1)
    return counts + counts.T


def glcm_matrix(x, levels: int = 32, offset=(0, 1), value_range=(0.0, 1.0)) -> np.ndarray:
    counts = glcm_counts(quantize(x, levels, value_range), levels, offset)
    return counts / counts.sum()


def glcm_stats(x, levels: int = 32, offset=(0, 1), value_range=(0.0, 1.0)) -> dict:
    """GLCM contrast and homogeneity of ``x`` quantized to ``levels`` gray levels."""
    if levels < 2:
        raise ValueError("levels must be at least 2")
    counts = glcm_counts(quantize(x, levels, value_range), levels, offset)
    total = counts.sum()
    i, j = np.indices(counts.shape)
    contrast = int(np.sum((i - j) ** 2 * counts)) / total
    homogeneity = math.fsum((counts / (1.0 + np.abs(i - j))).ravel()) / total
    return {"contrast": float(contrast), "homogeneity": float(homogeneity)}


def lesion_crop(field, m, size: int):
    """``size`` x ``size`` window centred on the lesion bounding box, shifted to stay in frame."""
    f = np.asarray(field)
    H, W = f.shape
    if size > min(H, W):
        raise ValueError(f"crop size {size} exceeds the {H}x{W} grid")
    ys, xs = np.nonzero(np.asarray(m))
    if ys.size == 0:
        raise ValueError("empty mask: no lesion to crop")
    cy = (ys.min() + ys.max() + 1) // 2
    cx = (xs.min() + xs.max() + 1) // 2
    top = int(np.clip(cy - size // 2, 0, H - size))
    left = int(np.clip(cx - size // 2, 0, W - size))
    return f[top:top + size, left:left + size]


# --- feature encoders -----------------------------------------------------

class StatsEncoder:
    """Hand-crafted features: mean, sd, skewness, kurtosis, then GLCM
    contrast/homogeneity at four offsets. Values are quantized over
    ``value_range``, which by default covers both images and deviations."""

    def __init__(self, levels: int = 32, value_range=(-1.0, 1.0), offsets=GLCM_OFFSETS):
        self.levels = levels
        self.value_range = tuple(value_range)
        self.offsets = tuple(offsets)

    @property
    def dim(self) -> int:
        return 4 + 2 * len(self.offsets)

    def __call__(self, field) -> np.ndarray:
        f = np.asarray(field, dtype=np.float64)
        v = f.ravel()
        sd = v.std()
        if sd > 0:
            skew = float(stats.skew(v))
            kurt = float(stats.kurtosis(v))
        else:
            skew = kurt = 0.0
        feats = [v.mean(), sd, skew, kurt]
        for off in self.offsets:
            g = glcm_stats(f, self.levels, off, self.value_range)
            feats += [g["contrast"], g["homogeneity"]]
        return np.asarray(feats)


class ExternalEncoder:
    """Adapter around any deterministic callable field -> feature vector."""

    def __init__(self, fn: Callable, dim: int | None = None):
        self.fn = fn
        self._dim = dim

    def __call__(self, field) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(field)), dtype=np.float64).ravel()
        if self._dim is None:
            self._dim = out.size
        elif out.size != self._dim:
            raise ValueError(f"encoder output length changed: {out.size} != {self._dim}")
        return out


def load_external_encoder(path: str) -> ExternalEncoder:
    """``module_or_file.py:function`` -> ExternalEncoder."""
    import importlib
    import importlib.util

    target, _, attr = path.rpartition(":")
    if not target:
        raise ValueError("external encoder spec must look like path/to/file.py:function")
    if target.endswith(".py"):
        spec = importlib.util.spec_from_file_location("pathosyn_external_encoder", target)
        if spec is None or spec.loader is None:
            raise ImportError(f"cannot load encoder module {target}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    else:
        module = importlib.import_module(target)
    return ExternalEncoder(getattr(module, attr))


# --- fidelity -------------------------------------------------------------

@dataclass(frozen=True)
class EcdfCurve:
    values: np.ndarray
    fractions: np.ndarray

    def rows(self):
        return list(zip(self.values.tolist(), self.fractions.tolist()))


def ecdf(samples) -> EcdfCurve:
    v = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("ECDF of an empty sample")
    values, counts = np.unique(v, return_counts=True)
    return EcdfCurve(values, np.cumsum(counts) / v.size)


def nearest_distances(real_feats, synth_feats) -> np.ndarray:
    real = np.asarray(real_feats, dtype=np.float64).reshape(len(real_feats), -1)
    synth = np.asarray(synth_feats, dtype=np.float64).reshape(len(synth_feats), -1)
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("both feature sets must be nonempty")
    return cdist(synth, real).min(axis=1)


def feature_distance_ecdf(real_feats, synth_feats) -> EcdfCurve:
    """ECDF of each synthetic vector's Euclidean distance to its nearest real vector."""
    return ecdf(nearest_distances(real_feats, synth_feats))


# --- reports --------------------------------------------------------------

def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()) if v.size else float("nan"),
            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "n": int(v.size)}


def disentanglement_report(encoder, pairs, bins: int = 16, bootstrap_n: int = 200, seed: int = 0) -> dict:
    """Coupling C per subject and corpus MI between substrate and deviation features.

    ``pairs`` is an iterable of (x_sub, r). Subjects whose deviation (or either
    feature vector) is identically zero have no defined coupling and are
    skipped. MI is reported as the full-corpus estimate with a bootstrap sd.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("disentanglement needs at least 2 subjects")
    f_sub, f_res, couplings, skipped = [], [], [], 0
    for x_sub, r in pairs:
        if not np.any(np.asarray(r)):
            skipped += 1
            continue
        a, b = encoder(x_sub), encoder(r)
        if not np.any(a) or not np.any(b):
            skipped += 1
            continue
        couplings.append(cosine_coupling(a, b))
        f_sub.append(a)
        f_res.append(b)
    report = {"C": _summary(couplings), "skipped": skipped}
    if len(f_sub) >= 2:
        f_sub, f_res = np.asarray(f_sub), np.asarray(f_res)
        mi = mutual_information(f_sub, f_res, bins)
        g = rng.generator(seed, "mi-bootstrap")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            boots = [mutual_information(f_sub[idx], f_res[idx], bins)
                     for idx in (g.integers(0, len(f_sub), len(f_sub)) for _ in range(bootstrap_n))]
        report["MI"] = {"mean": mi, "sd": float(np.std(boots, ddof=1)) if bootstrap_n > 1 else 0.0,
                        "n": len(f_sub)}
    else:
        report["MI"] = {"mean": float("nan"), "sd": float("nan"), "n": len(f_sub)}
    return report
