"""Inference-time interpolation of model and kNN predictions, metric
computation, per-fold hyperparameter search, and the staged evaluation
pipeline.

The final distribution for a test sample is

    p = alpha * p_knn + (1 - alpha) * p_model

with (k, alpha) chosen per fold by exhaustive grid search on the
validation split.  Validation queries sit inside the datastore, so each
one's own entry is excluded from its neighbour set during the search;
test queries are never stored, so no exclusion applies at test time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import encoder, retrieval, trainer
from .corpus import Corpus, FoldSpec, LabeledEmbedding, split_by_fold
from .errors import DataError

STAGE_KEYS = ("S1", "S2+knn(noscl)", "S2", "S3")

PROB_TOL = 1e-9


def validate_prob_dist(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DataError(f"probability vector must be 1-D and non-empty, got shape {p.shape}")
    if np.any(p < -PROB_TOL) or np.any(p > 1.0 + PROB_TOL):
        raise DataError("probabilities must lie in [0, 1]")
    if abs(float(p.sum()) - 1.0) > PROB_TOL:
        raise DataError(f"probabilities must sum to 1, got {float(p.sum())!r}")
    return p


def interpolate(p_model: np.ndarray, p_knn: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha * p_knn + (1 - alpha) * p_model."""
    if not (0.0 <= alpha <= 1.0):
        raise DataError(f"alpha must lie in [0, 1], got {alpha}")
    p_model = validate_prob_dist(p_model)
    p_knn = validate_prob_dist(p_knn)
    if p_model.shape != p_knn.shape:
        raise DataError("model and kNN distributions must have the same length")
    if alpha == 0.0:
        return p_model.copy()
    if alpha == 1.0:
        return p_knn.copy()
    return alpha * p_knn + (1.0 - alpha) * p_model


def predict(
    params: encoder.HeadParams,
    ds: retrieval.Datastore,
    x: np.ndarray,
    k: int,
    alpha: float,
    weighting: str = "uniform",
    beta: float = 1.0,
) -> tuple[int, np.ndarray]:
    """Classify one sample by interpolated distribution; ties go to the
    lowest class index."""
    trace = encoder.forward(params, x)
    if alpha == 0.0:
        p = trace.probs
    else:
        ns = retrieval.knn_search(ds, trace.embedding, k)
        p_knn = retrieval.knn_distribution(ns, ds, ds.n_classes, weighting, beta)
        p = interpolate(trace.probs, p_knn, alpha)
    return int(np.argmax(p)), p


@dataclass(frozen=True)
class EvalReport:
    """Confusion matrix plus the derived WA/UA metrics for one evaluation."""

    confusion: tuple[tuple[int, ...], ...]  # rows = true, cols = predicted
    wa: float
    ua: float
    per_class_recall: tuple[float | None, ...]  # None for absent classes
    chosen_k: int | None = None
    chosen_alpha: float | None = None
    fold_index: int | None = None

    @property
    def n_samples(self) -> int:
        return int(sum(sum(row) for row in self.confusion))

    def to_json_dict(self) -> dict:
        return {
            "confusion": [list(row) for row in self.confusion],
            "wa": self.wa,
            "ua": self.ua,
            "per_class_recall": list(self.per_class_recall),
            "chosen_k": self.chosen_k,
            "chosen_alpha": self.chosen_alpha,
            "fold_index": self.fold_index,
        }


def confusion_matrix(pairs: Iterable[tuple[int, int]], n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for true, pred in pairs:
        if not (0 <= true < n_classes and 0 <= pred < n_classes):
            raise DataError(f"label pair ({true}, {pred}) out of range for {n_classes} classes")
        m[true, pred] += 1
    return m


def report_from_confusion(
    confusion: np.ndarray,
    chosen_k: int | None = None,
    chosen_alpha: float | None = None,
    fold_index: int | None = None,
) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    if total == 0:
        raise DataError("cannot evaluate zero predictions")
    wa = float(np.trace(confusion) / total)
    recalls: list[float | None] = []
    present: list[float] = []
    for c in range(confusion.shape[0]):
        row = int(confusion[c].sum())
        if row == 0:
            recalls.append(None)  # absent class: skipped in the UA mean
        else:
            r = float(confusion[c, c] / row)
            recalls.append(r)
            present.append(r)
    ua = float(np.mean(present))
    return EvalReport(
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        wa=wa,
        ua=ua,
        per_class_recall=tuple(recalls),
        chosen_k=chosen_k,
        chosen_alpha=chosen_alpha,
        fold_index=fold_index,
    )


def evaluate(pairs: Sequence[tuple[int, int]], n_classes: int) -> EvalReport:
    """Confusion matrix, weighted accuracy (total correct / total), and
    unweighted accuracy (mean per-class recall) from (true, predicted) pairs."""
    if not pairs:
        raise DataError("cannot evaluate zero predictions")
    return report_from_confusion(confusion_matrix(pairs, n_classes))


def default_alpha_grid() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 2) for i in range(1, 20))  # 0.05 .. 0.95


def _model_probs_and_keys(params, samples):
    xs = np.stack([e.x for e in samples]).astype(np.float64)
    trace = encoder.forward_batch(params, xs)
    return trace.probs, trace.hidden


def _knn_prefix_distributions(
    ds: retrieval.Datastore,
    queries: np.ndarray,
    k_max: int,
    weighting: str,
    beta: float,
    exclude_offset: int | None = None,
) -> np.ndarray:
    """p_knn for every k in 1..k_max at once, shape (n, k_max, C).

    With ``exclude_offset`` set, query i excludes datastore row
    exclude_offset + i (its own entry).
    """
    n = queries.shape[0]
    out = np.empty((n, k_max, ds.n_classes))
    for i in range(n):
        exclude = None if exclude_offset is None else exclude_offset + i
        ns = retrieval.knn_search(ds, queries[i], k_max, exclude_index=exclude)
        onehot = np.zeros((k_max, ds.n_classes))
        onehot[np.arange(k_max), ds.labels[ns.indices]] = 1.0
        if weighting == "uniform":
            counts = np.cumsum(onehot, axis=0)
            out[i] = counts / np.arange(1, k_max + 1)[:, None]
        else:
            w = np.exp(-beta * (ns.distances - ns.distances[0]))
            weighted = np.cumsum(onehot * w[:, None], axis=0)
            out[i] = weighted / np.cumsum(w)[:, None]
    return out


def _grid_metric(confusion: np.ndarray, metric: str) -> float:
    report = report_from_confusion(confusion)
    return report.wa if metric == "wa" else report.ua


def search_hparams(
    params: encoder.HeadParams,
    ds: retrieval.Datastore,
    val_samples: Sequence[LabeledEmbedding],
    k_range: Sequence[int] | None = None,
    alpha_grid: Sequence[float] | None = None,
    weighting: str = "uniform",
    beta: float = 1.0,
    metric: str = "wa",
    exclude_offset: int | None = None,
) -> tuple[int, float]:
    """Exhaustive (k, alpha) grid search maximising validation accuracy.

    Ties break toward smaller k, then smaller alpha.  ``exclude_offset``
    marks where the validation block starts inside the datastore so each
    query can skip its own entry; pass None only if the queries are not
    stored.
    """
    if not val_samples:
        raise DataError("validation split is empty")
    if metric not in ("wa", "ua"):
        raise DataError(f"unknown selection metric {metric!r}")
    m_eff = ds.size - (1 if exclude_offset is not None else 0)
    if k_range is None:
        k_range = range(1, min(32, m_eff) + 1)
    alphas = tuple(alpha_grid) if alpha_grid is not None else default_alpha_grid()
    for a in alphas:
        if not (0.0 < a < 1.0):
            raise DataError(f"alpha grid values must lie in (0, 1), got {a}")
    k_list = sorted(set(int(k) for k in k_range))
    if not k_list or k_list[0] < 1 or k_list[-1] > m_eff:
        raise DataError(f"k range must lie within [1, {m_eff}]")

    probs, zs = _model_probs_and_keys(params, val_samples)
    labels = np.asarray([e.meta.label for e in val_samples])
    k_max = k_list[-1]
    pknn = _knn_prefix_distributions(ds, zs, k_max, weighting, beta, exclude_offset)

    best = (-1.0, None, None)
    for k in k_list:
        pk = pknn[:, k - 1, :]
        for alpha in alphas:
            mixed = alpha * pk + (1.0 - alpha) * probs
            preds = np.argmax(mixed, axis=1)
            conf = confusion_matrix(zip(labels.tolist(), preds.tolist()), ds.n_classes)
            score = _grid_metric(conf, metric)
            if score > best[0]:
                best = (score, k, alpha)
    return best[1], best[2]


def evaluate_with_knn(
    params: encoder.HeadParams,
    ds: retrieval.Datastore,
    samples: Sequence[LabeledEmbedding],
    k: int,
    alpha: float,
    weighting: str = "uniform",
    beta: float = 1.0,
) -> tuple[EvalReport, list[tuple[int, int]]]:
    """Evaluate interpolated predictions on held-out samples."""
    probs, zs = _model_probs_and_keys(params, samples)
    labels = [e.meta.label for e in samples]
    pairs = []
    if alpha == 0.0:
        preds = np.argmax(probs, axis=1)
        pairs = list(zip(labels, preds.tolist()))
    else:
        pknn = _knn_prefix_distributions(ds, zs, k, weighting, beta)[:, k - 1, :]
        mixed = alpha * pknn + (1.0 - alpha) * probs
        preds = np.argmax(mixed, axis=1)
        pairs = list(zip(labels, preds.tolist()))
    return evaluate(pairs, ds.n_classes), pairs


def embedding_distance_ratio(params: encoder.HeadParams, samples: Sequence[LabeledEmbedding]) -> float:
    """Mean inter-class pairwise distance divided by mean intra-class
    pairwise distance of the model's embeddings; larger means cleaner
    class boundaries."""
    if len(samples) < 2:
        raise DataError("need at least 2 samples")
    _, zs = _model_probs_and_keys(params, samples)
    labels = np.asarray([e.meta.label for e in samples])
    diff = zs[:, None, :] - zs[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    same = labels[:, None] == labels[None, :]
    iu = np.triu_indices(len(samples), k=1)
    intra = dist[iu][same[iu]]
    inter = dist[iu][~same[iu]]
    if intra.size == 0 or inter.size == 0:
        raise DataError("distance ratio needs both intra- and inter-class pairs")
    intra_mean = float(intra.mean())
    if intra_mean == 0.0:
        raise DataError("zero intra-class distance; ratio undefined")
    return float(inter.mean()) / intra_mean


@dataclass(frozen=True)
class PipelineOptions:
    """Retrieval and search settings for the staged pipeline."""

    weighting: str = "uniform"
    beta: float = 1.0
    k_range: tuple[int, ...] = tuple(range(1, 33))
    alpha_grid: tuple[float, ...] = default_alpha_grid()
    metric: str = "wa"
    aggregate: str = "pooled"  # or "per_fold_mean"
    fixed_k: int | None = None
    fixed_alpha: float | None = None


@dataclass(frozen=True, eq=False)
class FoldResult:
    fold_index: int
    reports: dict[str, EvalReport]
    pairs: dict[str, list[tuple[int, int]]]
    embedding_ratio_ce: float
    embedding_ratio_scl: float
    logs: dict[str, list[dict]]
    checkpoints: dict[str, encoder.HeadParams]
    datastores: dict[str, retrieval.Datastore]


def run_fold(
    corpus: Corpus,
    fold: FoldSpec,
    cfg: trainer.TrainConfig,
    options: PipelineOptions,
) -> FoldResult:
    """Train the plain-CE and combined-objective models on one fold and
    evaluate the four staged configurations on its test split."""
    train, val, test = split_by_fold(corpus, fold)
    if not test:
        raise DataError(f"fold {fold.fold_index}: empty test split")
    c = corpus.n_classes

    ce_cfg = _with_lambda(cfg, 0.0)
    scl_cfg = cfg
    if cfg.loss.lam <= 0.0:
        raise DataError("pipeline config needs loss.lambda > 0 for the contrastive stage")

    params_ce, log_ce = trainer.train_fold(train, val, ce_cfg, c)
    params_scl, log_scl = trainer.train_fold(train, val, scl_cfg, c)

    stores = {
        "ce": retrieval.build_datastore(params_ce, train, val, c),
        "scl": retrieval.build_datastore(params_scl, train, val, c),
    }

    reports: dict[str, EvalReport] = {}
    pairs: dict[str, list[tuple[int, int]]] = {}
    for stage, params, store, use_knn in (
        ("S1", params_ce, stores["ce"], False),
        ("S2+knn(noscl)", params_ce, stores["ce"], True),
        ("S2", params_scl, stores["scl"], False),
        ("S3", params_scl, stores["scl"], True),
    ):
        if use_knn:
            if options.fixed_k is not None and options.fixed_alpha is not None:
                k, alpha = options.fixed_k, options.fixed_alpha
            else:
                k, alpha = search_hparams(
                    params,
                    store,
                    val,
                    k_range=options.k_range,
                    alpha_grid=options.alpha_grid,
                    weighting=options.weighting,
                    beta=options.beta,
                    metric=options.metric,
                    exclude_offset=len(train),
                )
            report, stage_pairs = evaluate_with_knn(
                params, store, test, k, alpha, options.weighting, options.beta
            )
            report = replace(report, chosen_k=k, chosen_alpha=alpha, fold_index=fold.fold_index)
        else:
            report, stage_pairs = evaluate_with_knn(params, store, test, k=1, alpha=0.0)
            report = replace(report, fold_index=fold.fold_index)
        reports[stage] = report
        pairs[stage] = stage_pairs

    return FoldResult(
        fold_index=fold.fold_index,
        reports=reports,
        pairs=pairs,
        embedding_ratio_ce=embedding_distance_ratio(params_ce, test),
        embedding_ratio_scl=embedding_distance_ratio(params_scl, test),
        logs={"ce": log_ce, "scl": log_scl},
        checkpoints={"ce": params_ce, "scl": params_scl},
        datastores=stores,
    )


def _with_lambda(cfg: trainer.TrainConfig, lam: float) -> trainer.TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, lam=lam))


def aggregate_reports(
    fold_results: Sequence[FoldResult], n_classes: int, mode: str = "pooled"
) -> dict[str, EvalReport]:
    """Combine fold results per stage: either pool all test predictions and
    score once (default) or average fold-level metrics."""
    out: dict[str, EvalReport] = {}
    for stage in STAGE_KEYS:
        if mode == "pooled":
            pooled: list[tuple[int, int]] = []
            for fr in fold_results:
                pooled.extend(fr.pairs[stage])
            out[stage] = evaluate(pooled, n_classes)
        elif mode == "per_fold_mean":
            conf = np.zeros((n_classes, n_classes), dtype=np.int64)
            for fr in fold_results:
                conf += np.asarray(fr.reports[stage].confusion)
            base = report_from_confusion(conf)
            wa = float(np.mean([fr.reports[stage].wa for fr in fold_results]))
            ua = float(np.mean([fr.reports[stage].ua for fr in fold_results]))
            out[stage] = EvalReport(
                confusion=base.confusion,
                wa=wa,
                ua=ua,
                per_class_recall=base.per_class_recall,
            )
        else:
            raise DataError(f"unknown aggregation mode {mode!r}")
    return out


def run_pipeline(
    corpus: Corpus,
    folds: Sequence[FoldSpec],
    cfg: trainer.TrainConfig,
    options: PipelineOptions | None = None,
    per_fold_seeds: Sequence[int] | None = None,
) -> tuple[dict, list[FoldResult]]:
    """Run the full staged protocol over all folds and build the report.

    Stages: S1 trains with cross-entropy only; S2 adds the contrastive
    term; each is evaluated with and without kNN interpolation
    ("S2+knn(noscl)" is the plain-CE model with kNN, S3 the contrastive
    model with kNN).  ``per_fold_seeds`` replaces ``cfg.seed`` fold by
    fold so folds draw independent streams.
    """
    if not folds:
        raise DataError("no folds to run")
    if per_fold_seeds is not None and len(per_fold_seeds) != len(folds):
        raise DataError("per_fold_seeds must have one entry per fold")
    options = options or PipelineOptions()
    results = []
    for i, fold in enumerate(folds):
        fold_cfg = cfg if per_fold_seeds is None else replace(cfg, seed=per_fold_seeds[i])
        results.append(run_fold(corpus, fold, fold_cfg, options))
    agg_mode = "pooled" if options.aggregate == "pooled" else "per_fold_mean"
    aggregate = aggregate_reports(results, corpus.n_classes, agg_mode)
    report = {
        "labels": list(corpus.label_names),
        "n_folds": len(folds),
        "aggregation": options.aggregate,
        "stages": {k: aggregate[k].to_json_dict() for k in STAGE_KEYS},
        "folds": [
            {
                "fold_index": fr.fold_index,
                "stages": {k: fr.reports[k].to_json_dict() for k in STAGE_KEYS},
                "embedding_ratio": {"ce": fr.embedding_ratio_ce, "scl": fr.embedding_ratio_scl},
            }
            for fr in results
        ],
        "embedding_ratio_mean": {
            "ce": float(np.mean([fr.embedding_ratio_ce for fr in results])),
            "scl": float(np.mean([fr.embedding_ratio_scl for fr in results])),
        },
    }
    return report, results
