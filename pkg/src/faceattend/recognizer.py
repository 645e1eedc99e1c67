"""Gallery loading, model training and nearest-neighbour identification."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import (ConfigurationError, DimensionError, EmptyGalleryError, ModelStateError, NamingError,
                     RosterError)
from .imagecore import CHIP_SIZE, GrayImage, flatten, load_gray
from .subspace import DEFAULT_MAX_ITER, DEFAULT_TOL, SubspaceModel, lda_train, loo_threshold

IMAGE_SUFFIXES = (".png", ".pgm", ".jpg", ".jpeg")
ROSTER_FIELDS = ("subject_id", "name", "enrollment_no", "first_file", "last_file")


@dataclass(frozen=True)
class Subject:
    subject_id: str
    name: str
    enrollment_no: str
    first_file: int
    last_file: int

    def owns(self, number: int) -> bool:
        return self.first_file <= number <= self.last_file


class Roster:
    """Subjects and the (inclusive) file-number range holding each one's chips."""

    def __init__(self, subjects):
        self.subjects = list(subjects)
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise RosterError("duplicate subject_id in roster")
        spans = sorted((s.first_file, s.last_file, s.subject_id) for s in self.subjects)
        for s in self.subjects:
            if s.first_file > s.last_file:
                raise RosterError(f"subject {s.subject_id}: first_file after last_file")
        for a, b in zip(spans, spans[1:]):
            if b[0] <= a[1]:
                raise RosterError(f"subjects {a[2]} and {b[2]} have overlapping file ranges")
        self._by_id = {s.subject_id: s for s in self.subjects}

    def __len__(self):
        return len(self.subjects)

    def __getitem__(self, subject_id: str) -> Subject:
        return self._by_id[subject_id]

    def get(self, subject_id, default=None):
        return self._by_id.get(subject_id, default)

    def subject_for(self, number: int) -> Subject:
        for s in self.subjects:
            if s.owns(number):
                return s
        raise RosterError(f"file number {number} is outside every roster range")

    @classmethod
    def read(cls, path) -> "Roster":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(ROSTER_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise RosterError(f"{path}: missing columns {sorted(missing)}")
            subjects = []
            for line, row in enumerate(reader, start=2):
                try:
                    subjects.append(Subject(row["subject_id"].strip(), row["name"].strip(),
                                            row["enrollment_no"].strip(), int(row["first_file"]),
                                            int(row["last_file"])))
                except (TypeError, ValueError) as exc:
                    raise RosterError(f"{path}:{line}: bad file range") from exc
        return cls(subjects)

    def write(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROSTER_FIELDS)
            for s in self.subjects:
                w.writerow([s.subject_id, s.name, s.enrollment_no, s.first_file, s.last_file])
        return path


@dataclass(frozen=True)
class GalleryEntry:
    path: Path
    number: int
    vector: np.ndarray
    label: str
    name: str
    enrollment_no: str


@dataclass
class Gallery:
    entries: list
    roster: Roster

    def __len__(self):
        return len(self.entries)

    @property
    def X(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])

    @property
    def labels(self) -> list:
        return [e.label for e in self.entries]

    @property
    def classes(self) -> list:
        return list(dict.fromkeys(self.labels))


def file_number(path) -> int:
    stem = Path(path).stem
    if not stem.isdigit():
        raise NamingError(f"{Path(path).name}: gallery files must be named <number>{Path(path).suffix}")
    return int(stem)


def image_files(directory) -> list:
    """Image files of ``directory`` sorted by numeric basename."""
    d = Path(directory)
    if not d.is_dir():
        raise EmptyGalleryError(f"{d} is not a directory")
    files = [p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: (file_number(p), p.name))


def build_gallery(directory, roster) -> Gallery:
    """Load numbered 100x100 chips and attach roster identities."""
    if not isinstance(roster, Roster):
        roster = Roster.read(roster)
    files = image_files(directory)
    if not files:
        raise EmptyGalleryError(f"no images in {directory}")
    entries = []
    for p in files:
        num = file_number(p)
        img = load_gray(p)
        if img.shape != (CHIP_SIZE, CHIP_SIZE):
            raise DimensionError(f"{p.name}: expected {CHIP_SIZE}x{CHIP_SIZE}, got {img.width}x{img.height}")
        try:
            s = roster.subject_for(num)
        except RosterError as exc:
            raise RosterError(f"{p.name}: {exc}") from None
        entries.append(GalleryEntry(p, num, flatten(img), s.subject_id, s.name, s.enrollment_no))
    return Gallery(entries, roster)


def train(g: Gallery, seed: int = 0, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SubspaceModel:
    if len(g) == 0:
        raise EmptyGalleryError("empty gallery")
    return lda_train(g.X, g.labels, tol=tol, max_iter=max_iter, seed=seed)


@dataclass(frozen=True)
class MatchResult:
    label: str | None          # None means Unknown
    nearest: str               # class of the closest gallery item, decided or not
    distance: float
    runner_up: float           # closest gallery item of any other class
    elapsed_ms: float
    index: int = -1

    @property
    def known(self) -> bool:
        return self.label is not None


def _probe_vector(probe) -> np.ndarray:
    if isinstance(probe, GrayImage):
        return flatten(probe)
    return np.asarray(probe, dtype=np.float64).ravel()


def class_centroids(weights: np.ndarray, labels):
    classes = list(dict.fromkeys(labels))
    lab = np.asarray(labels)
    return np.stack([weights[lab == c].mean(axis=0) for c in classes]), classes


def nearest(weights: np.ndarray, labels, y: np.ndarray):
    """(index, distance, runner-up distance) of the 1-NN of ``y`` among ``weights``.

    Ties go to the lower index.
    """
    d = np.sqrt(((weights - y) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    lab = np.asarray(labels)
    other = d[lab != lab[i]]
    return i, float(d[i]), float(other.min()) if other.size else float("inf")


def recognize(m: SubspaceModel, probe, tau: float | None = None, mode: str = "lda",
              centroid: bool = False) -> MatchResult:
    """Identify ``probe`` by Euclidean nearest neighbour in face space.

    ``tau`` defaults to the threshold stored in the model for ``mode``; a
    nearest distance above it yields an Unknown result.
    """
    t0 = time.perf_counter()
    if m is None or m.N == 0:
        raise ModelStateError("recognize needs a trained, non-empty model")
    if tau is None:
        tau = m.threshold(mode)
    if not tau > 0:
        raise ConfigurationError("tau must be positive")
    x = _probe_vector(probe)
    if x.shape[0] != m.n:
        raise DimensionError(f"probe has {x.shape[0]} values, model expects {m.n}")
    y = (x - m.mean) @ m.basis(mode)
    weights, labels = m.weights(mode), m.gallery_labels
    if centroid:
        weights, labels = class_centroids(weights, labels)
    i, dist, runner = nearest(weights, labels, y)
    lab = labels[i]
    elapsed = (time.perf_counter() - t0) * 1000.0
    return MatchResult(lab if dist <= tau else None, lab, dist, runner, elapsed, i)


class FisherfaceRecognizer(BaseEstimator, ClassifierMixin, TransformerMixin):
    """scikit-learn front end: PCA+LDA face space with 1-NN matching.

    Parameters
    ----------
    mode : {"lda", "pca"}
        Match in the combined fisherface space or in the PCA space alone.
    tol, max_iter : float, int
        Fast PCA convergence controls.
    centroid : bool
        Match against class centroids instead of individual gallery items.
    reject : bool
        If True, ``predict`` returns ``unknown_label`` beyond the stored
        threshold (or ``tau`` when given).
    """

    def __init__(self, mode="lda", tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, centroid=False,
                 reject=False, tau=None, unknown_label="unknown", random_state=0):
        self.mode = mode
        self.tol = tol
        self.max_iter = max_iter
        self.centroid = centroid
        self.reject = reject
        self.tau = tau
        self.unknown_label = unknown_label
        self.random_state = random_state

    def fit(self, X, y):
        if self.mode not in ("lda", "pca"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        self._label_of = {str(c): c for c in self.classes_}
        self.model_ = lda_train(X, [str(v) for v in y], tol=self.tol, max_iter=self.max_iter,
                                seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.model_.mean) @ self.model_.basis(self.mode)

    def _gallery(self):
        w, labels = self.model_.weights(self.mode), self.model_.gallery_labels
        if self.centroid:
            w, labels = class_centroids(w, labels)
        return w, labels

    def kneighbors(self, X):
        """Nearest gallery distance and label for each row of ``X``."""
        Y = self.transform(X)
        w, labels = self._gallery()
        sq = (w * w).sum(axis=1)
        D = np.sqrt(np.maximum((Y * Y).sum(axis=1)[:, None] + sq[None, :] - 2.0 * Y @ w.T, 0.0))
        idx = D.argmin(axis=1)
        return D[np.arange(len(Y)), idx], [labels[i] for i in idx]

    def predict(self, X):
        dist, labels = self.kneighbors(X)
        out = [self._label_of[lab] for lab in labels]
        if self.reject:
            tau = self.tau if self.tau is not None else self.model_.threshold(self.mode)
            out = [lab if d <= tau else self.unknown_label for lab, d in zip(out, dist)]
        return np.array(out, dtype=object if self.reject else self.classes_.dtype)

    def score_threshold(self, q=95.0):
        """Leave-one-out nearest-neighbour distance percentile of the gallery."""
        check_is_fitted(self, "model_")
        return loo_threshold(self.model_.weights(self.mode), q)


__all__ = ["Subject", "Roster", "GalleryEntry", "Gallery", "file_number", "image_files", "build_gallery",
           "train", "MatchResult", "recognize", "nearest", "class_centroids", "FisherfaceRecognizer"]
