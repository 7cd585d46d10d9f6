"""Open-vocabulary labeling, segmentation metrics, linear probing and clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError
from .fusion import FusedFeatureBank
from .scene import PointCloud
from .student import StudentModel, forward
from .teachers import VocabularySet


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, eps)


def cosine_scores(features: np.ndarray, vocab: VocabularySet) -> np.ndarray:
    return _unit_rows(np.asarray(features, dtype=np.float64)) @ _unit_rows(vocab.embeddings).T


def _text_head(model: StudentModel, vocab: VocabularySet, text_head: int | str) -> int:
    names = list(model.config.head_names)
    idx = names.index(text_head) if isinstance(text_head, str) else int(text_head)
    if model.config.head_dims[idx] != vocab.dim:
        raise ContractError(
            f"vocabulary dim {vocab.dim} does not match head {names[idx]!r} dim {model.config.head_dims[idx]}"
        )
    return idx


def find_text_head(teachers) -> int:
    for i, t in enumerate(teachers):
        if t.text_aligned:
            return i
    raise ContractError("no text-aligned teacher configured")


def label_by_similarity(features: np.ndarray, vocab: VocabularySet) -> np.ndarray:
    """Argmax cosine against the vocabulary; ``np.argmax`` breaks ties toward the smaller id."""
    return np.argmax(cosine_scores(features, vocab), axis=1)


def ov_segment(model: StudentModel, points: PointCloud, vocab: VocabularySet, text_head: int | str = 0, bbox=None):
    idx = _text_head(model, vocab, text_head)
    feats = forward(model, points, bbox)[idx]
    return label_by_similarity(feats, vocab)


def ensemble_2d3d(
    model: StudentModel,
    points: PointCloud,
    bank: FusedFeatureBank,
    vocab: VocabularySet,
    text_head: int | str = 0,
    bank_name: str | None = None,
    bbox=None,
) -> np.ndarray:
    """Per point, keep the 3D or the fused 2D label, whichever matches its best class more closely.

    Unobserved points always take the 3D label; equal similarities also go to 3D.
    """
    idx = _text_head(model, vocab, text_head)
    s3d = cosine_scores(forward(model, points, bbox)[idx], vocab)
    name = bank_name if bank_name is not None else model.config.head_names[idx]
    s2d = cosine_scores(bank.features[bank.index(name)], vocab)
    best3, best2 = s3d.max(axis=1), s2d.max(axis=1)
    best2 = np.where(bank.mask, best2, -np.inf)
    use2d = best2 > best3
    return np.where(use2d, s2d.argmax(axis=1), s3d.argmax(axis=1))


@dataclass
class Metrics:
    confusion: np.ndarray
    per_class_iou: np.ndarray   # NaN for excluded classes
    per_class_acc: np.ndarray   # NaN where the class has no ground truth
    miou: float
    macc: float

    @property
    def n_points(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        def clean(a):
            return [None if np.isnan(x) else float(x) for x in a]

        return {
            "per_class_iou": clean(self.per_class_iou),
            "miou": self.miou,
            "per_class_acc": clean(self.per_class_acc),
            "macc": self.macc,
            "n_points": self.n_points,
        }


def confusion_matrix(pred, gt, K: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    if len(gt) and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= K):
        raise ContractError(f"labels must lie in [0, {K - 1}]")
    return np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)


def compute_metrics(pred, gt, K: int) -> Metrics:
    """Rows are ground truth. Classes absent from both gt and pred are left out of the means."""
    cm = confusion_matrix(pred, gt, K)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt_count > 0, tp / gt_count, np.nan)
    miou = float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else 0.0
    macc = float(np.nanmean(acc)) if np.any(~np.isnan(acc)) else 0.0
    return Metrics(cm, iou, acc, miou, macc)


# --- linear probe -----------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    heads: str = "concat"     # "concat", "average" or "single"
    head_index: int = 0       # used by "single"
    ridge_lambda: float = 1e-3

    def __post_init__(self):
        if self.heads not in ("concat", "average", "single"):
            raise ValidationError(f"unknown head selection {self.heads!r}")
        if not self.ridge_lambda > 0:
            raise ValidationError("ridge_lambda must be > 0")

    @property
    def label(self) -> str:
        return f"single({self.head_index})" if self.heads == "single" else self.heads


def probe_features(outputs: list[np.ndarray], cfg: ProbeConfig) -> np.ndarray:
    if cfg.heads == "concat":
        return np.concatenate(outputs, axis=1)
    if cfg.heads == "single":
        return outputs[cfg.head_index]
    width = max(o.shape[1] for o in outputs)
    acc = np.zeros((outputs[0].shape[0], width))
    for o in outputs:
        acc[:, : o.shape[1]] += _unit_rows(o)
    return acc / len(outputs)


@dataclass
class RidgeClassifier:
    weights: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray

    def scores(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.weights + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)


def fit_ridge(X: np.ndarray, labels: np.ndarray, K: int, lam: float) -> RidgeClassifier:
    """Closed-form ridge regression onto one-hot targets with an unpenalised intercept.

    Features are centred, ``lam`` is added to the Gram diagonal and the
    intercept is the class frequency vector.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ContractError("linear probe needs at least two classes in the training split")
    Y = np.eye(K)[labels]
    mu = X.mean(axis=0)
    Xc = X - mu
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    W = np.linalg.solve(gram, Xc.T @ (Y - Y.mean(axis=0)))
    return RidgeClassifier(W, Y.mean(axis=0), mu)


def linear_probe(
    model: StudentModel,
    train_cloud: PointCloud,
    eval_cloud: PointCloud,
    cfg: ProbeConfig,
    train_bbox=None,
    eval_bbox=None,
) -> Metrics:
    if not (train_cloud.has_labels and eval_cloud.has_labels):
        raise ContractError("linear probe needs labelled clouds")
    K = max(train_cloud.num_classes, eval_cloud.num_classes)
    Xtr = probe_features(forward(model, train_cloud, train_bbox), cfg)
    Xev = probe_features(forward(model, eval_cloud, eval_bbox), cfg)
    clf = fit_ridge(Xtr, train_cloud.labels, K, cfg.ridge_lambda)
    return compute_metrics(clf.predict(Xev), eval_cloud.labels, K)


# --- k-means ----------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: list[float]


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion, which
    # can break inertia monotonicity by rounding
    out = np.empty((len(X), len(C)))
    for j, c in enumerate(C):
        diff = X - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def kmeans(features: np.ndarray, k: int, seed: int = 0, max_iters: int = 100, normalize: bool = True) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    ``inertia[i]`` is measured right after the i-th assignment step. Empty
    clusters keep their previous centroid.
    """
    X = np.asarray(features, dtype=np.float64)
    if normalize:
        X = _unit_rows(X)
    n = len(X)
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng([seed, 0xC1])

    chosen = [int(rng.integers(n))]
    closest = _sq_dist(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take the first unused
            nxt = next(i for i in range(n) if i not in set(chosen))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dist(X, X[[nxt]])[:, 0])
    C = X[chosen].copy()

    assign = None
    inertia = []
    for _ in range(max_iters):
        d = _sq_dist(X, C)
        new = np.argmin(d, axis=1)
        inertia.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(axis=0)
    return KMeansResult(assign, C, inertia)


# --- cross-domain -----------------------------------------------------------

def cross_domain_eval(
    model: StudentModel,
    scenes: list[PointCloud],
    vocab: VocabularySet,
    text_head: int | str = 0,
) -> Metrics:
    """Zero-shot labeling of another domain's scenes, pooled into one set of metrics."""
    preds, gts = [], []
    for scene in scenes:
        if not scene.has_labels:
            raise ContractError("cross-domain scenes must be labelled")
        if scene.num_classes != vocab.K:
            raise ContractError(f"scene has {scene.num_classes} classes, vocabulary has {vocab.K}")
        preds.append(ov_segment(model, scene, vocab, text_head, bbox=scene.bounds()))
        gts.append(scene.labels)
    return compute_metrics(np.concatenate(preds), np.concatenate(gts), vocab.K)
