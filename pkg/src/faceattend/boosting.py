"""Discrete AdaBoost over Haar stumps and the attentional cascade.

A weak classifier votes ``+1`` (face) when ``polarity * value >=
polarity * threshold`` and ``-1`` otherwise. A stage accepts a window when
the alpha-weighted vote sum reaches the stage threshold; a cascade accepts
a window only when every stage does, and stops at the first rejection.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import (ConfigurationError, DegenerateDistributionError, GeometryError,
                     TrainingError, ValidationError)
from .haar import (DEFAULT_BASE, FeatureGeometry, HaarFeature, enumerate_features,
                   eval_feature, feature_matrix, stack_tables, window_norms)
from .imagecore import IntegralImage, Rect

log = logging.getLogger(__name__)

CASCADE_VERSION = 1
EPS_MIN = 1e-10


@dataclass(frozen=True)
class WeakClassifier:
    feature: HaarFeature
    threshold: float
    polarity: int
    alpha: float

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValidationError("polarity must be -1 or +1")
        if not self.alpha >= 0:
            raise ValidationError("alpha must be non-negative")

    def vote(self, value):
        """+1/-1 vote for a scalar or array of normalized feature values."""
        v = np.asarray(value, dtype=np.float64)
        out = np.where(self.polarity * v >= self.polarity * self.threshold, 1, -1)
        return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Stage:
    weaks: tuple
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "weaks", tuple(self.weaks))
        if not self.weaks:
            raise ValidationError("a stage needs at least one weak classifier")

    @property
    def total_alpha(self) -> float:
        return float(sum(w.alpha for w in self.weaks))


@dataclass(frozen=True)
class Cascade:
    base: int
    stages: tuple
    variance_normalization: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValidationError("a cascade needs at least one stage")

    def __len__(self):
        return len(self.stages)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": CASCADE_VERSION,
            "base": self.base,
            "normalization": "variance" if self.variance_normalization else "area",
            "stages": [
                {
                    "threshold": st.threshold,
                    "weaks": [
                        {"kind": w.feature.kind, "x": w.feature.x, "y": w.feature.y,
                         "w": w.feature.w, "h": w.feature.h, "threshold": w.threshold,
                         "polarity": w.polarity, "alpha": w.alpha}
                        for w in st.weaks
                    ],
                }
                for st in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Cascade":
        if doc.get("version") != CASCADE_VERSION:
            raise ValidationError(f"unsupported cascade version {doc.get('version')!r}")
        norm = doc.get("normalization", "variance")
        if norm not in ("variance", "area"):
            raise ValidationError(f"unknown normalization {norm!r}")
        stages = []
        for st in doc["stages"]:
            weaks = [WeakClassifier(HaarFeature(w["kind"], int(w["x"]), int(w["y"]), int(w["w"]), int(w["h"])),
                                    float(w["threshold"]), int(w["polarity"]), float(w["alpha"]))
                     for w in st["weaks"]]
            stages.append(Stage(tuple(weaks), float(st["threshold"])))
        return cls(int(doc["base"]), tuple(stages), norm == "variance")

    def save(self, path) -> Path:
        path = Path(path)
        # json writes floats with repr(), which round-trips exactly
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Cascade":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingSet:
    """Labelled ``base x base`` windows; labels are -1 (non-face) or +1 (face)."""

    windows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3 or self.windows.shape[1] != self.windows.shape[2]:
            raise ValidationError("windows must be a (m, base, base) stack")
        if len(self.windows) != len(self.labels):
            raise ValidationError("one label per window")
        if not np.isin(self.labels, (-1, 1)).all():
            raise ValidationError("labels must be -1 or +1")
        if not ((self.labels == 1).any() and (self.labels == -1).any()):
            raise ValidationError("training set needs both labels")

    @property
    def base(self) -> int:
        return self.windows.shape[1]

    def __len__(self):
        return len(self.labels)


# -- weak learner ------------------------------------------------------------

@dataclass
class Stump:
    index: int
    threshold: float
    polarity: int
    error: float


class SortedValues:
    """Feature values with their per-feature ascending sort, reused across rounds."""

    def __init__(self, values: np.ndarray):
        v = np.atleast_2d(np.asarray(values))
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        self.values = v
        self.order = np.argsort(v, axis=1, kind="stable").astype(np.int32)
        self.sorted = np.take_along_axis(v, self.order, axis=1)


def fit_stump(values, labels, weights, chunk: int = 1024) -> Stump:
    """Feature, threshold and polarity minimizing weighted 0/1 error.

    ``values`` is ``(n_features, m)`` (or a :class:`SortedValues`). Candidate
    thresholds sit midway between consecutive distinct sorted values, plus
    one below the minimum and one above the maximum. Ties go to the earlier
    feature, then the lower threshold, then polarity +1.
    """
    sv = values if isinstance(values, SortedValues) else SortedValues(values)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != sv.values.shape[1] or len(y) != len(w):
        raise ValidationError("weights and labels must match the sample count")
    if (w < 0).any():
        raise ValidationError("weights must be non-negative")
    wpos = np.where(y == 1, w, 0.0)
    wneg = np.where(y == 1, 0.0, w)
    tp, tn = wpos.sum(), wneg.sum()
    if tp <= 0 or tn <= 0:
        raise DegenerateDistributionError("all weight lies on a single label")
    m = len(w)
    best = None
    for start in range(0, sv.values.shape[0], chunk):
        order = sv.order[start:start + chunk]
        srt = sv.sorted[start:start + chunk]
        zeros = np.zeros((len(order), 1))
        cp = np.concatenate([zeros, np.cumsum(wpos[order], axis=1)], axis=1)
        cn = np.concatenate([zeros, np.cumsum(wneg[order], axis=1)], axis=1)
        err = np.stack([cp + (tn - cn), cn + (tp - cp)], axis=2)  # (F, m+1, 2)
        valid = np.ones((len(order), m + 1), dtype=bool)
        valid[:, 1:m] = srt[:, :-1] < srt[:, 1:]
        err[~valid] = np.inf
        flat = int(np.argmin(err))
        f, k, p = np.unravel_index(flat, err.shape)
        e = err[f, k, p]
        if best is None or e < best[0] - 1e-15:
            best = (e, start + f, k, p)
    _, f, k, p = best
    row = sv.sorted[f]
    if k == 0:
        thr = float(row[0]) - 1.0
    elif k == m:
        thr = float(row[-1]) + 1.0
    else:
        thr = 0.5 * (float(row[k - 1]) + float(row[k]))
    polarity = 1 if p == 0 else -1
    votes = np.where(polarity * sv.values[f] >= polarity * thr, 1, -1)
    error = float(w[votes != y].sum() / w.sum())
    return Stump(int(f), float(thr), polarity, error)


def train_weak(pool, training_set: TrainingSet, weights, variance: bool = True) -> WeakClassifier:
    """Best single-feature stump on ``training_set`` under ``weights``.

    The returned classifier carries ``alpha = 0``; boosting assigns it.
    """
    if not pool:
        raise ConfigurationError("empty feature pool")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(training_set) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("weights must be a distribution over the samples")
    values = feature_matrix(pool, training_set.windows, variance, dtype=np.float64)
    st = fit_stump(values, training_set.labels, w)
    return WeakClassifier(pool[st.index], st.threshold, st.polarity, 0.0)


def alpha_for(eps: float) -> float:
    e = min(max(eps, EPS_MIN), 1.0 - EPS_MIN)
    return 0.5 * math.log((1.0 - e) / e)


@dataclass
class BoostRound:
    stump: Stump
    alpha: float
    error: float
    votes: np.ndarray
    weights: np.ndarray


def boost_rounds(values, labels, rounds: int, weights=None):
    """Yield one :class:`BoostRound` per discrete AdaBoost round.

    Stops early when no stump beats chance (error >= 0.5), and after a
    round with zero weighted error.
    """
    sv = values if isinstance(values, SortedValues) else SortedValues(values)
    y = np.asarray(labels, dtype=np.int64)
    m = len(y)
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64).copy()
    w /= w.sum()
    for _ in range(rounds):
        st = fit_stump(sv, y, w)
        eps = st.error
        if eps >= 0.5:
            log.debug("boosting stopped: best weighted error %.4f", eps)
            return
        alpha = alpha_for(eps)
        votes = np.where(st.polarity * sv.values[st.index] >= st.polarity * st.threshold, 1, -1)
        w = w * np.exp(-alpha * y * votes)
        w /= w.sum()
        yield BoostRound(st, alpha, eps, votes, w.copy())
        if eps <= 0.0:
            return


@dataclass
class BoostResult:
    weaks: list
    errors: list
    weights: np.ndarray

    def error_bound(self) -> float:
        """Product of per-round factors 2*sqrt(eps*(1-eps))."""
        return float(np.prod([2.0 * math.sqrt(e * (1.0 - e)) for e in self.errors]))


def adaboost(training_set: TrainingSet, pool, rounds: int, variance: bool = True,
             values=None) -> BoostResult:
    """Discrete AdaBoost with single-feature stumps.

    ``values`` may pass a precomputed ``(len(pool), m)`` feature matrix; the
    stumps then index into ``pool`` by row.
    """
    if not pool:
        raise ConfigurationError("empty feature pool")
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    if values is None:
        values = feature_matrix(pool, training_set.windows, variance, dtype=np.float64)
    weaks, errors = [], []
    w = np.full(len(training_set), 1.0 / len(training_set))
    for rd in boost_rounds(values, training_set.labels, rounds):
        weaks.append(WeakClassifier(pool[rd.stump.index], rd.stump.threshold, rd.stump.polarity, rd.alpha))
        errors.append(rd.error)
        w = rd.weights
    if not weaks:
        raise TrainingError("no weak classifier beats chance on this distribution")
    return BoostResult(weaks, errors, w)


def strong_scores(weaks, values_by_weak) -> np.ndarray:
    """Sum of alpha * vote; ``values_by_weak[t]`` holds weak ``t``'s feature values."""
    total = 0.0
    for wk, v in zip(weaks, values_by_weak):
        total = total + wk.alpha * wk.vote(v)
    return np.asarray(total, dtype=np.float64)


# -- cascade training ----------------------------------------------------------

@dataclass
class StageReport:
    stage: int
    n_weak: int
    detection: float
    false_positive: float
    cumulative_fp: float


def train_cascade(positives, negatives, pool=None, detection_rate: float = 0.99,
                  fp_rate: float = 0.5, overall_fp: float = 1e-3, max_weak: int = 200,
                  max_stages: int = 50, variance: bool = True, stage_negatives=None,
                  random_state=0):
    """Grow a cascade until the surviving-negative fraction drops to ``overall_fp``.

    ``positives`` and ``negatives`` are ``(m, base, base)`` window stacks.
    Each stage restarts boosting from uniform weights on all positives plus
    the negatives that survived every earlier stage (a seeded sample of at
    most ``stage_negatives`` of them, when set). After each added weak
    classifier the stage threshold is set to ``min(0.5 * sum(alpha), s)``,
    where ``s`` is the highest score still accepting a fraction
    ``detection_rate`` of the positives; the stage is complete once its
    false-positive rate on its training negatives is at most ``fp_rate``.
    Survivors are then re-measured on every remaining negative. Training
    stops when the surviving fraction reaches ``overall_fp`` or no
    negatives are left.

    Returns ``(cascade, reports)``.
    """
    pos = np.asarray(positives, dtype=np.uint8)
    neg = np.asarray(negatives, dtype=np.uint8)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigurationError("positive and negative sets must be non-empty")
    if not (0 < detection_rate <= 1) or not (0 < fp_rate < 1):
        raise ConfigurationError("need 0 < detection_rate <= 1 and 0 < fp_rate < 1")
    base = pos.shape[1]
    if pos.shape[1:] != (base, base) or neg.shape[1:] != (base, base):
        raise ConfigurationError("all windows must be base x base")
    if pool is None:
        pool = enumerate_features(base)
    if not pool:
        raise ConfigurationError("empty feature pool")
    for f in pool:
        if not f.fits(base):
            raise GeometryError(f"{f} does not fit a {base}x{base} window")

    rng = np.random.default_rng(random_state)
    vpos = feature_matrix(pool, pos, variance)
    n_pos, n_neg0 = len(pos), len(neg)
    need = math.ceil(detection_rate * n_pos - 1e-12)
    active = np.arange(n_neg0)
    stages, reports = [], []

    while len(active) and len(stages) < max_stages:
        idx = len(stages)
        if stage_negatives is not None and len(active) > stage_negatives:
            sample = np.sort(rng.choice(active, stage_negatives, replace=False))
        else:
            sample = active
        values = SortedValues(np.concatenate([vpos, feature_matrix(pool, neg[sample], variance)], axis=1))
        labels = np.concatenate([np.ones(n_pos, dtype=np.int64), -np.ones(len(sample), dtype=np.int64)])
        scores = np.zeros(len(labels))
        weaks = []
        done = False
        for rd in boost_rounds(values, labels, max_weak):
            st = rd.stump
            weaks.append(WeakClassifier(pool[st.index], st.threshold, st.polarity, rd.alpha))
            scores += rd.alpha * rd.votes
            ps, ns = scores[:n_pos], scores[n_pos:]
            thr = min(0.5 * sum(w.alpha for w in weaks), float(np.sort(ps)[::-1][need - 1]))
            fp = float(np.mean(ns >= thr))
            if fp <= fp_rate:
                done = True
                break
        del values
        if not done:
            raise TrainingError(f"stage {idx}: false-positive rate {fp_rate} not reached "
                                f"with {len(weaks)} weak classifiers", stage=idx)
        stage = Stage(tuple(weaks), thr)
        det = float(np.mean(ps >= thr))
        if sample is active:
            keep = ns >= thr
        else:
            keep = stage_scores(stage, neg[active], variance) >= thr
            fp = float(np.mean(keep))
        stages.append(stage)
        active = active[keep]
        cum = len(active) / n_neg0
        reports.append(StageReport(idx, len(weaks), det, fp, cum))
        log.info("stage %d: %d weak, detection %.4f, fp %.4f, cumulative fp %.6f",
                 idx, len(weaks), det, fp, cum)
        if cum <= overall_fp:
            break
    return Cascade(base, tuple(stages), variance), reports


def stage_scores(stage: Stage, windows, variance: bool = True) -> np.ndarray:
    """Alpha-weighted vote sums of ``stage`` on a stack of base windows."""
    feats = [w.feature for w in stage.weaks]
    vals = feature_matrix(feats, windows, variance, dtype=np.float64)
    return strong_scores(stage.weaks, vals)


# -- window classification --------------------------------------------------------

def _stage_sum(stage: Stage, ii, window, scale, ii_sq):
    total = 0.0
    for wk in stage.weaks:
        v = eval_feature(ii, wk.feature, window, scale, normalize=True, ii_sq=ii_sq)
        total += wk.alpha * wk.vote(v)
    return total


def classify_window(c: Cascade, ii: IntegralImage, window: Rect, scale: float = 1.0,
                    ii_sq: IntegralImage | None = None):
    """``(is_face, stages_evaluated)`` with early exit on the first rejecting stage.

    ``ii_sq`` (integral of squared pixels) is required for cascades trained
    with variance normalization.
    """
    if c.variance_normalization and ii_sq is None:
        raise ConfigurationError("variance-normalized cascade needs the squared integral image")
    sq = ii_sq if c.variance_normalization else None
    for i, stage in enumerate(c.stages):
        if _stage_sum(stage, ii, window, scale, sq) < stage.threshold:
            return False, i + 1
    return True, len(c.stages)


def window_margin(c: Cascade, ii, window, scale=1.0, ii_sq=None) -> float:
    """Final stage's weighted vote sum minus its threshold."""
    sq = ii_sq if c.variance_normalization else None
    last = c.stages[-1]
    return _stage_sum(last, ii, window, scale, sq) - last.threshold


class CascadeEvaluator:
    """Vectorized cascade evaluation over many windows of one frame."""

    def __init__(self, cascade: Cascade):
        self.cascade = cascade
        self._geo = {}

    def _geometry(self, i, scale):
        key = (i, round(scale, 12))
        if key not in self._geo:
            st = self.cascade.stages[i]
            geo = FeatureGeometry([w.feature for w in st.weaks], scale)
            thr = np.array([w.threshold for w in st.weaks])
            pol = np.array([w.polarity for w in st.weaks], dtype=np.float64)
            alpha = np.array([w.alpha for w in st.weaks])
            self._geo[key] = (geo, thr, pol, alpha)
        return self._geo[key]

    def run(self, table, xs, ys, side, scale, norms):
        """Evaluate windows with top-left corners ``(xs, ys)``.

        ``table`` is the frame's padded integral table, or a ``(m, s+1, s+1)``
        stack with one table per window. ``norms`` holds the per-window
        normalizers. Returns ``(accepted, stages_evaluated, margins)``;
        margins are only meaningful for accepted windows.
        """
        stacked = np.ndim(table) == 3
        m = len(xs)
        accepted = np.ones(m, dtype=bool)
        evaluated = np.zeros(m, dtype=np.int64)
        margins = np.zeros(m)
        alive = np.arange(m)
        for i, stage in enumerate(self.cascade.stages):
            if not len(alive):
                break
            geo, thr, pol, alpha = self._geometry(i, scale)
            ext_x = (geo.x + geo.w).max()
            ext_y = (geo.y + geo.h).max()
            if ext_x > side or ext_y > side:
                raise GeometryError(f"stage {i} features exceed a {side}px window at scale {scale}")
            if stacked:
                raw = geo.raw_values(table[alive], xs[alive], ys[alive])
            else:
                raw = geo.raw_values(table, xs[alive], ys[alive])
            vals = raw / norms[alive][None, :]
            votes = np.where(pol[:, None] * vals >= (pol * thr)[:, None], 1.0, -1.0)
            s = alpha @ votes
            evaluated[alive] += 1
            ok = s >= stage.threshold
            margins[alive] = s - stage.threshold
            accepted[alive[~ok]] = False
            alive = alive[ok]
        return accepted, evaluated, margins


# -- estimator ---------------------------------------------------------------------

class HaarCascadeClassifier(BaseEstimator, ClassifierMixin):
    """Boosted Haar cascade as a scikit-learn classifier over square windows.

    Parameters
    ----------
    detection_rate : float
        Minimum per-stage detection rate on the training positives.
    fp_rate : float
        Maximum per-stage false-positive rate on surviving negatives.
    overall_fp : float
        Training stops once the surviving-negative fraction reaches this.
    max_weak : int
        Weak classifiers allowed per stage before training fails.
    max_stages : int
    variance_normalization : bool
        Divide feature values by the window's pixel standard deviation.
    max_features : int or None
        Random subset of the enumerated feature pool to search; None uses all.
    stage_negatives : int or None
        Cap on the negatives each stage is boosted on; None uses all survivors.
    random_state : int
        Seed for feature and negative subsampling.

    ``X`` is ``(m, base, base)`` or ``(m, base*base)``; the larger of the two
    class labels is the face class.
    """

    def __init__(self, detection_rate=0.99, fp_rate=0.5, overall_fp=1e-3, max_weak=200,
                 max_stages=50, variance_normalization=True, max_features=None, stage_negatives=None,
                 random_state=0):
        self.detection_rate = detection_rate
        self.fp_rate = fp_rate
        self.overall_fp = overall_fp
        self.max_weak = max_weak
        self.max_stages = max_stages
        self.variance_normalization = variance_normalization
        self.max_features = max_features
        self.stage_negatives = stage_negatives
        self.random_state = random_state

    @staticmethod
    def _windows(X):
        X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
        if X.ndim == 2:
            side = math.isqrt(X.shape[1])
            if side * side != X.shape[1]:
                raise ValidationError("flattened windows must be square")
            X = X.reshape(len(X), side, side)
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ValidationError("windows must be square")
        if X.min() < 0 or X.max() > 255:
            raise ValidationError("window pixels must lie in [0, 255]")
        return np.rint(X).astype(np.uint8)

    def fit(self, X, y):
        W = self._windows(X)
        y = np.asarray(y)
        if len(y) != len(W):
            raise ValidationError("one label per window")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValidationError("exactly two classes are required")
        is_pos = y == self.classes_[1]
        pool = enumerate_features(W.shape[1])
        if self.max_features is not None and self.max_features < len(pool):
            rng = np.random.default_rng(self.random_state)
            keep = np.sort(rng.choice(len(pool), self.max_features, replace=False))
            pool = [pool[i] for i in keep]
        self.cascade_, self.stage_report_ = train_cascade(
            W[is_pos], W[~is_pos], pool, self.detection_rate, self.fp_rate, self.overall_fp,
            self.max_weak, self.max_stages, self.variance_normalization,
            stage_negatives=self.stage_negatives, random_state=self.random_state)
        return self

    def _accept(self, W):
        m, side, _ = W.shape
        if side != self.cascade_.base:
            raise ValidationError(f"expected {self.cascade_.base}x{self.cascade_.base} windows")
        tables = stack_tables(W)
        norms = window_norms(W, self.cascade_.variance_normalization)
        zeros = np.zeros(m, dtype=np.intp)
        accepted, _, margins = CascadeEvaluator(self.cascade_).run(tables, zeros, zeros, side, 1.0, norms)
        return accepted, margins

    def predict(self, X):
        check_is_fitted(self, "cascade_")
        accepted, _ = self._accept(self._windows(X))
        return np.where(accepted, self.classes_[1], self.classes_[0])

    def decision_function(self, X):
        """Margin of the last stage reached (negative for rejected windows)."""
        check_is_fitted(self, "cascade_")
        _, margins = self._accept(self._windows(X))
        return margins


__all__ = [
    "WeakClassifier", "Stage", "Cascade", "TrainingSet", "Stump", "SortedValues", "fit_stump",
    "train_weak", "alpha_for", "boost_rounds", "BoostResult", "adaboost", "StageReport",
    "train_cascade", "stage_scores", "classify_window", "window_margin", "CascadeEvaluator",
    "HaarCascadeClassifier", "DEFAULT_BASE", "EPS_MIN",
]
