"""Face-space numerics: fixed-point PCA, a Jacobi eigensolver and PCA+LDA.

Data matrices follow the scikit-learn layout: one face vector per row,
``X.shape == (N, n)``.
"""
from __future__ import annotations

import base64
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConvergenceError, DegenerateClassesError, DimensionError, EmptyInputError,
                     InsufficientDataError, ModelStateError, RankError, SymmetryError)

log = logging.getLogger(__name__)

MODEL_VERSION = 1
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1000
RANK_EPS = 1e-12
RIDGE_EPS = 1e-8
MAX_CONDITION = 1e12


class SubspaceWarning(UserWarning):
    pass


def _as_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionError("expected a 2-D (samples x dimension) matrix")
    return X


def fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    V = np.array(V, dtype=np.float64, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def mean_face(X) -> np.ndarray:
    X = _as_rows(X)
    if X.shape[0] == 0:
        raise EmptyInputError("no face vectors")
    return X.mean(axis=0)


@dataclass
class Covariance:
    """Covariance in the working space.

    ``kind == "direct"``: ``matrix`` is the ``n x n`` covariance.
    ``kind == "gram"``: ``matrix`` is the ``N x N`` Gram matrix
    ``(1/N) C^T C`` of the centred data ``C`` (``n x N``), kept in
    ``centered`` so eigenvectors can be lifted back to image space.
    """

    matrix: np.ndarray
    kind: str = "direct"
    centered: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def covariance(X, mean=None, method: str = "auto") -> Covariance:
    """Sample covariance, or its Gram surrogate when dimension exceeds sample count."""
    X = _as_rows(X)
    N, n = X.shape
    if N < 2:
        raise InsufficientDataError("covariance needs at least two samples")
    mu = X.mean(axis=0) if mean is None else np.asarray(mean, dtype=np.float64)
    C = (X - mu).T  # n x N
    if method == "auto":
        method = "direct" if n <= N else "gram"
    if method == "direct":
        S = C @ C.T / N
        return Covariance(0.5 * (S + S.T), "direct")
    if method == "gram":
        G = C.T @ C / N
        return Covariance(0.5 * (G + G.T), "gram", C)
    raise ValueError(f"unknown covariance method {method!r}")


@dataclass
class PCAResult:
    vectors: np.ndarray        # (dim, p), orthonormal columns
    values: np.ndarray         # (p,), non-increasing
    iterations: list = field(default_factory=list)
    converged: list = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations))


def _orthonormalize(V: np.ndarray) -> np.ndarray:
    """Two passes of modified Gram-Schmidt, column order preserved."""
    V = V.copy()
    for _ in range(2):
        for j in range(V.shape[1]):
            v = V[:, j]
            if j:
                v = v - V[:, :j] @ (V[:, :j].T @ v)
            V[:, j] = v / np.linalg.norm(v)
    return V


def fast_pca(cov, p: int, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             seed: int = 0, strict: bool = True) -> PCAResult:
    """Leading ``p`` eigenpairs by deflated fixed-point (power) iteration.

    For each component a seeded random vector is repeatedly multiplied by
    the covariance, Gram-Schmidt orthogonalized against the components
    already found and normalized, until ``|1 - |phi_new . phi_old|| <= tol``.
    Eigenvalues are the Rayleigh quotients ``phi^T S phi``.

    ``cov`` is a symmetric matrix or a :class:`Covariance`; for the Gram
    surrogate the vectors are lifted to image space as ``C u / ||C u||``.
    With ``strict=False`` a component that has not converged after
    ``max_iter`` steps is kept (and reported in ``converged``) instead of
    raising :class:`ConvergenceError`.
    """
    if not isinstance(cov, Covariance):
        cov = Covariance(np.asarray(cov, dtype=np.float64))
    S = cov.matrix
    d = S.shape[0]
    if p < 1 or p > d:
        raise RankError(f"cannot extract {p} components from a {d}-dimensional space")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    Phi = np.zeros((d, p))
    values = np.zeros(p)
    iterations, converged = [], []
    for i in range(p):
        prev = Phi[:, :i]
        phi = rng.standard_normal(d)
        phi -= prev @ (prev.T @ phi)
        phi /= np.linalg.norm(phi)
        delta = np.inf
        ok = False
        # ||S phi|| after deflation bounds the remaining eigenvalues
        floor = RANK_EPS * values[0] if i else 0.0
        for it in range(1, max_iter + 1):
            new = S @ phi
            new -= prev @ (prev.T @ new)
            norm = np.linalg.norm(new)
            if norm <= floor or norm == 0.0 or not np.isfinite(norm):
                raise RankError(f"component {i} vanished: requested rank exceeds the data rank")
            new /= norm
            delta = abs(1.0 - abs(float(new @ phi)))
            phi = new
            if delta <= tol:
                ok = True
                break
        if not ok:
            if strict:
                raise ConvergenceError(f"component {i} did not converge in {max_iter} iterations "
                                       f"(last delta {delta:.3e})", index=i, delta=delta)
        Phi[:, i] = phi
        values[i] = float(phi @ S @ phi)
        if values[i] <= RANK_EPS * max(values[0], np.finfo(float).tiny):
            raise RankError(f"component {i} has eigenvalue {values[i]:.3e}: requested rank exceeds the data rank")
        iterations.append(it)
        converged.append(ok)
    if not all(converged):
        warnings.warn(f"{converged.count(False)} of {p} components stopped at max_iter={max_iter}",
                      SubspaceWarning, stacklevel=2)

    order = np.argsort(-values, kind="stable")
    Phi, values = Phi[:, order], values[order]
    iterations = [iterations[k] for k in order]
    converged = [converged[k] for k in order]
    if cov.kind == "gram":
        Phi = _orthonormalize(cov.centered @ Phi)
    return PCAResult(fix_signs(Phi), values, iterations, converged)


def _round_robin(n: int):
    """n-1 rounds of disjoint index pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(players[: n // 2]), np.array(players[n // 2:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def oracle_eig(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps visit every off-diagonal pair once, grouped into rounds of
    disjoint pairs whose rotations are applied together. Iteration stops when
    the off-diagonal Frobenius norm falls below ``tol * ||S||_F``.
    Returns ``(values, vectors)`` sorted by descending eigenvalue.
    """
    A = np.array(S, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("oracle_eig needs a square matrix")
    n = A.shape[0]
    scale = max(1.0, float(np.abs(A).max())) if n else 1.0
    if n and np.abs(A - A.T).max() > 1e-9 * scale:
        raise SymmetryError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    if n == 1:
        return A[0].copy(), np.ones((1, 1))
    m = n + (n % 2)
    if m != n:
        A = np.pad(A, ((0, 1), (0, 1)))
    V = np.eye(m)
    fro = np.linalg.norm(A)
    target = tol * fro
    rounds = _round_robin(m)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= target:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            app, aqq = A[P, P], A[Q, Q]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[:, P].copy(), A[:, Q]
            A[:, P] = c * Ap - s * Aq
            A[:, Q] = s * Ap + c * Aq
            Ap, Aq = A[P, :].copy(), A[Q, :]
            A[P, :] = c[:, None] * Ap - s[:, None] * Aq
            A[Q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            Vp, Vq = V[:, P].copy(), V[:, Q]
            V[:, P] = c * Vp - s * Vq
            V[:, Q] = s * Vp + c * Vq
    vals = np.diag(A)[:n].copy()
    V = V[:n, :n]
    order = np.argsort(-vals, kind="stable")
    return vals[order], fix_signs(V[:, order])


@dataclass
class ScatterPair:
    between: np.ndarray
    within: np.ndarray

    def total(self) -> np.ndarray:
        return self.between + self.within


def scatter_matrices(Y, labels) -> ScatterPair:
    """Between-class and within-class scatter of the rows of ``Y``.

    ``between = sum_c N_c (m_c - m)(m_c - m)^T`` and
    ``within = sum_c sum_{x in c} (x - m_c)(x - m_c)^T``.
    """
    Y = _as_rows(Y)
    labels = np.asarray(labels)
    if len(labels) != len(Y):
        raise DimensionError("one label per row")
    classes = list(dict.fromkeys(labels.tolist()))
    if len(classes) < 2:
        raise DegenerateClassesError("scatter matrices need at least two classes")
    mu = Y.mean(axis=0)
    d = Y.shape[1]
    Sb = np.zeros((d, d))
    Sw = np.zeros((d, d))
    for c in classes:
        Yc = Y[labels == c]
        mc = Yc.mean(axis=0)
        diff = (mc - mu)[:, None]
        Sb += len(Yc) * (diff @ diff.T)
        Z = Yc - mc
        Sw += Z.T @ Z
    return ScatterPair(0.5 * (Sb + Sb.T), 0.5 * (Sw + Sw.T))


# -- model ------------------------------------------------------------------------------

def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).copy()


@dataclass
class SubspaceModel:
    """Trained face space.

    ``W_pca`` is ``n x (N - C)`` with orthonormal columns, ``W_lda`` is
    ``(N - C) x (C - 1)``; the combined projection is ``W = W_pca @ W_lda``.
    Gallery weights are stored for both the combined (fisherface) and the
    PCA-only (eigenface) projections.
    """

    mean: np.ndarray
    W_pca: np.ndarray
    W_lda: np.ndarray
    eigvals: np.ndarray
    gallery_weights: np.ndarray
    gallery_weights_pca: np.ndarray
    gallery_labels: list
    seed: int = 0
    tau: float = float("inf")
    tau_pca: float = float("inf")
    pca_iterations: int = 0
    ridge: float = 0.0

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def N(self) -> int:
        return self.gallery_weights.shape[0]

    @property
    def C(self) -> int:
        return len(dict.fromkeys(self.gallery_labels))

    @property
    def K(self) -> int:
        return self.W_lda.shape[1]

    @property
    def W(self) -> np.ndarray:
        return self.W_pca @ self.W_lda

    def basis(self, mode: str = "lda") -> np.ndarray:
        if mode == "lda":
            return self.W
        if mode == "pca":
            return self.W_pca
        raise ValueError(f"unknown projection mode {mode!r}")

    def weights(self, mode: str = "lda") -> np.ndarray:
        return self.gallery_weights if mode == "lda" else self.gallery_weights_pca

    def threshold(self, mode: str = "lda") -> float:
        return self.tau if mode == "lda" else self.tau_pca

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "n": self.n, "N": self.N, "C": self.C, "K": self.K,
            "seed": self.seed,
            "tau": self.tau, "tau_pca": self.tau_pca,
            "pca_iterations": self.pca_iterations,
            "ridge": self.ridge,
            "mean": _enc(self.mean),
            "eigvals": _enc(self.eigvals),
            "W_pca": _enc(self.W_pca),
            "W_lda": _enc(self.W_lda),
            "gallery_weights": _enc(self.gallery_weights),
            "gallery_weights_pca": _enc(self.gallery_weights_pca),
            "gallery_labels": list(self.gallery_labels),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SubspaceModel":
        if doc.get("version") != MODEL_VERSION:
            raise ModelStateError(f"unsupported model version {doc.get('version')!r}")
        m = cls(mean=_dec(doc["mean"]), W_pca=_dec(doc["W_pca"]), W_lda=_dec(doc["W_lda"]),
                eigvals=_dec(doc["eigvals"]), gallery_weights=_dec(doc["gallery_weights"]),
                gallery_weights_pca=_dec(doc["gallery_weights_pca"]),
                gallery_labels=list(doc["gallery_labels"]), seed=int(doc["seed"]),
                tau=float(doc["tau"]), tau_pca=float(doc["tau_pca"]),
                pca_iterations=int(doc.get("pca_iterations", 0)), ridge=float(doc.get("ridge", 0.0)))
        if m.n != doc["n"] or m.N != doc["N"] or m.C != doc["C"]:
            raise ModelStateError("model header does not match its matrices")
        return m

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "SubspaceModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def loo_threshold(weights: np.ndarray, q: float = 95.0) -> float:
    """``q``-th percentile of each gallery item's nearest-other-item distance."""
    W = np.asarray(weights, dtype=np.float64)
    if len(W) < 2:
        return float("inf")
    sq = (W * W).sum(axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * W @ W.T, 0.0))
    np.fill_diagonal(D, np.inf)
    return float(np.percentile(D.min(axis=1), q))


def _whiten(Sw: np.ndarray):
    """Cholesky factor of ``Sw``, ridged if ill-conditioned; returns (L, ridge)."""
    d = Sw.shape[0]
    ridge = 0.0
    cond = np.linalg.cond(Sw) if d else 1.0
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        ridge = RIDGE_EPS * max(float(np.trace(Sw)) / d, np.finfo(float).tiny)
        warnings.warn(f"within-class scatter is ill-conditioned (cond={cond:.3e}); "
                      f"adding ridge {ridge:.3e}", SubspaceWarning, stacklevel=3)
    while True:
        try:
            return np.linalg.cholesky(Sw + ridge * np.eye(d)), ridge
        except np.linalg.LinAlgError:
            ridge = max(ridge * 10.0, RIDGE_EPS * max(float(np.trace(Sw)) / d, 1e-300))


def lda_train(X, labels, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              seed: int = 0) -> SubspaceModel:
    """PCA to ``N - C`` dimensions (at most ``n``) followed by LDA to ``C - 1``.

    1. centre the faces on the average face;
    2. extract ``N - C`` principal axes with :func:`fast_pca` (Gram form when
       the pixel dimension exceeds the sample count);
    3. form between/within scatter of the PCA-projected faces;
    4. solve ``S_B w = lambda S_W w`` by whitening with the Cholesky factor
       of ``S_W`` and diagonalizing the symmetric result;
    5. keep the ``C - 1`` leading directions (unit-normalized) and project
       the gallery.
    """
    X = _as_rows(X)
    labels = [str(v) if not isinstance(v, str) else v for v in np.asarray(labels).tolist()]
    N, n = X.shape
    if len(labels) != N:
        raise DimensionError("one label per face vector")
    classes = list(dict.fromkeys(labels))
    C = len(classes)
    if C < 2:
        raise DegenerateClassesError("LDA needs at least two classes")
    if N - C < 1:
        raise InsufficientDataError(f"need N - C >= 1 (N={N}, C={C})")
    mu = mean_face(X)
    cov = covariance(X, mu)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pca = fast_pca(cov, min(N - C, n), tol, max_iter, seed, strict=False)
    for w in caught:
        log.warning("PCA stage: %s", w.message)
    W_pca = pca.vectors
    Xc = X - mu
    Y = Xc @ W_pca
    sc = scatter_matrices(Y, np.array(labels))
    L, ridge = _whiten(sc.within)
    Linv = np.linalg.solve(L, np.eye(L.shape[0]))
    M = Linv @ sc.between @ Linv.T
    vals, U = np.linalg.eigh(0.5 * (M + M.T))
    U = U[:, np.argsort(-vals, kind="stable")]
    W_lda = Linv.T @ U[:, :C - 1]
    W_lda /= np.linalg.norm(W_lda, axis=0, keepdims=True)
    W_lda = fix_signs(W_lda)
    model = SubspaceModel(mean=mu, W_pca=W_pca, W_lda=W_lda, eigvals=pca.values,
                          gallery_weights=np.empty((N, C - 1)), gallery_weights_pca=Y, gallery_labels=labels,
                          seed=seed, pca_iterations=pca.total_iterations, ridge=ridge)
    # gallery weights go through project() so stored and query weights share one code path
    model.gallery_weights = project(model, X, "lda")
    model.gallery_weights_pca = project(model, X, "pca")
    model.tau = loo_threshold(model.gallery_weights)
    model.tau_pca = loo_threshold(model.gallery_weights_pca)
    return model


def project(model: SubspaceModel, x, mode: str = "lda") -> np.ndarray:
    """Face-space weights ``W^T (x - mean)``; accepts one vector or rows."""
    if model is None:
        raise ModelStateError("no trained model")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n:
        raise DimensionError(f"expected vectors of length {model.n}, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis(mode)
