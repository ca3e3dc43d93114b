"""Random-forest regression over per-asset features, built from scratch.

Trees are plain CART regression trees: greedy variance-reduction splits
over midpoint thresholds, grown depth-first. The forest bootstraps each
tree, averages leaf values at predict time, and keeps an out-of-bag
error estimate. Growth and prediction run inside numba kernels so a
200-tree forest over ~10k assets fits in seconds on one core.

Determinism contract: every tree owns a randomness stream derived from
(seed, tree index), so refitting with the same seed is bit-identical no
matter how trees are scheduled. Rows are canonicalized (sorted by
asset_id) in build_features before any resampling.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from datetime import date
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .core import DAYS_PER_YEAR, MatchedDataset, PipeAsset, years_between

# Candidate split losses within this relative band count as ties and
# resolve to the earliest (feature, threshold) in scan order.
SPLIT_TIE_REL_TOL = 1e-9

NO_FEATURE = -1


class LeakageError(ValueError):
    """History and target windows overlap."""


class FeatureSchemaError(ValueError):
    """Prediction rows do not match the model's feature schema."""


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _best_split_kernel(cols, y, min_leaf):
    """Best split over gathered feature columns.

    cols is (n, k): the candidate feature values for one node, one column
    per candidate feature. Thresholds are midpoints between consecutive
    distinct sorted values; the score is SSE(left) + SSE(right), i.e. the
    weighted sum of child target variances times n. Scan order is
    ascending column, then ascending threshold; a later candidate must
    beat the incumbent by SPLIT_TIE_REL_TOL relative to max(1, |loss|),
    so mathematically tied losses keep the earliest candidate.

    Returns (col, threshold, loss); col is -1 when no valid split exists.
    """
    n, k = cols.shape
    total = 0.0
    total2 = 0.0
    for i in range(n):
        total += y[i]
        total2 += y[i] * y[i]
    best_col = -1
    best_thr = 0.0
    best_loss = np.inf
    for c in range(k):
        v = cols[:, c].copy()
        sidx = np.argsort(v, kind="mergesort")
        sl = 0.0
        sl2 = 0.0
        for i in range(1, n):
            yi = y[sidx[i - 1]]
            sl += yi
            sl2 += yi * yi
            lo = v[sidx[i - 1]]
            hi = v[sidx[i]]
            if lo == hi:
                continue
            if i < min_leaf or (n - i) < min_leaf:
                continue
            nl = float(i)
            nr = float(n - i)
            sse_l = sl2 - sl * sl / nl
            if sse_l < 0.0:
                sse_l = 0.0
            sr = total - sl
            sr2 = total2 - sl2
            sse_r = sr2 - sr * sr / nr
            if sse_r < 0.0:
                sse_r = 0.0
            loss = sse_l + sse_r
            if best_col == -1:
                better = True
            else:
                tol = SPLIT_TIE_REL_TOL * max(1.0, abs(best_loss))
                better = loss < best_loss - tol
            if better:
                best_col = c
                best_thr = 0.5 * (lo + hi)
                best_loss = loss
    return best_col, best_thr, best_loss


@njit(cache=True)
def _grow_tree_kernel(X, y, idx, max_depth, min_leaf, k_features, seed):
    """Grow one CART regression tree over rows ``idx`` of (X, y).

    Returns (feature, threshold, left, right, value, n_samples, gain)
    arrays; gain is the per-feature SSE reduction accumulated over all
    splits of this tree. Leaves carry feature == -1 and the mean target
    of the rows that reached them. Feature subsets are drawn per node
    from numpy's legacy RNG seeded with ``seed``.
    """
    n_rows = idx.shape[0]
    n_feat = X.shape[1]
    cap = 2 * (n_rows // max(min_leaf, 1)) + 3
    if max_depth < 60:
        cap2 = (1 << (max_depth + 1)) + 1
        if cap2 < cap:
            cap = cap2
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap, np.float64)
    n_samples = np.zeros(cap, np.int64)
    gain = np.zeros(n_feat, np.float64)

    np.random.seed(seed)
    order = idx.copy()
    scratch = np.empty(n_rows, np.int64)
    k = k_features if k_features < n_feat else n_feat

    # stack rows: node_id, start, end, depth
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_rows
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node_id = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        n = end - start

        s = 0.0
        s2 = 0.0
        for i in range(start, end):
            yi = y[order[i]]
            s += yi
            s2 += yi * yi
        value[node_id] = s / n
        n_samples[node_id] = n
        sse = s2 - s * s / n
        if sse < 0.0:
            sse = 0.0

        if depth >= max_depth or n < 2 * min_leaf or sse <= 1e-12 * (1.0 + s2):
            continue

        if k < n_feat:
            feats = np.sort(np.random.permutation(n_feat)[:k])
        else:
            feats = np.arange(n_feat)

        cols = np.empty((n, feats.shape[0]), np.float64)
        ysub = np.empty(n, np.float64)
        for i in range(n):
            row = order[start + i]
            ysub[i] = y[row]
            for j in range(feats.shape[0]):
                cols[i, j] = X[row, feats[j]]

        c, thr, loss = _best_split_kernel(cols, ysub, min_leaf)
        if c == -1:
            continue

        feat = feats[c]
        g = sse - loss
        if g > 0.0:
            gain[feat] += g

        # stable partition of order[start:end] on the winning column
        nl = 0
        for i in range(n):
            if cols[i, c] <= thr:
                scratch[nl] = order[start + i]
                nl += 1
        nr = nl
        for i in range(n):
            if cols[i, c] > thr:
                scratch[nr] = order[start + i]
                nr += 1
        for i in range(n):
            order[start + i] = scratch[i]

        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node_id] = feat
        threshold[node_id] = thr
        left[node_id] = left_id
        right[node_id] = right_id

        stack[top, 0] = right_id
        stack[top, 1] = start + nl
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = left_id
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1

    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        value[:n_nodes],
        n_samples[:n_nodes],
        gain,
    )


@njit(cache=True)
def _predict_tree_kernel(feature, threshold, left, right, value, X, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != -1:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


# ---------------------------------------------------------------------------
# model types


@dataclass(frozen=True)
class Tree:
    """One regression tree as parallel node arrays.

    Node 0 is the root. Internal nodes carry a feature index and a
    threshold (rows with value <= threshold go left); leaves carry
    feature == -1 and the mean target of their training rows.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.empty(X.shape[0], np.float64)
        _predict_tree_kernel(
            self.feature, self.threshold, self.left, self.right, self.value, X, out
        )
        return out


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 12
    min_samples_leaf: int = 5
    feature_fraction: float = 1.0 / 3.0
    bootstrap: bool = True

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must be in (0, 1]")

    def features_per_split(self, n_features: int) -> int:
        return max(1, min(n_features, math.ceil(self.feature_fraction * n_features)))


@dataclass(frozen=True)
class FeatureMatrix:
    """Encoded rows for the forest: one row per asset, fixed column order."""

    asset_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        if self.values.shape[0] != len(self.asset_ids):
            raise ValueError("one row per asset required")
        if self.values.shape[1] != len(self.feature_names):
            raise ValueError("one column per feature required")

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.feature_names)


@dataclass(frozen=True)
class FeatureBuild:
    """build_features output: the matrix plus the per-row regression target."""

    features: FeatureMatrix
    targets: np.ndarray


@dataclass(frozen=True)
class ForestModel:
    params: ForestParams
    seed: int
    feature_names: tuple[str, ...]
    fingerprint: str
    target_min: float
    target_max: float
    oob_mse: float | None
    trees: tuple[Tree, ...]
    gain: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def schema_fingerprint(feature_names: Sequence[str]) -> str:
    digest = hashlib.sha256("\x1f".join(feature_names).encode("utf-8"))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# feature construction

NUMERIC_FEATURES = (
    "age_years",
    "length_m",
    "diameter_mm",
    "clay_pct",
    "bulk_density",
    "silt_pct",
    "sand_pct",
    "ph",
    "mean_annual_temp_c",
    "past_failure_count",
    "past_failure_rate",
)

ENCODED_FEATURES = ("material_rate", "suburb_rate")

# env-derived columns can be absent when no grid cell was joined; each
# gets a median impute plus a was-missing indicator
IMPUTED_FEATURES = (
    "clay_pct",
    "bulk_density",
    "silt_pct",
    "sand_pct",
    "ph",
    "mean_annual_temp_c",
)

FEATURE_NAMES: tuple[str, ...] = (
    NUMERIC_FEATURES
    + ENCODED_FEATURES
    + tuple(f"{name}_missing" for name in IMPUTED_FEATURES)
)


def _window_years(window: tuple[int, int]) -> range:
    start, end = window
    if start > end:
        raise ValueError(f"bad year window {window}")
    return range(start, end + 1)


def _window_exposure_km_years(asset: PipeAsset, years: range) -> float:
    return sum(asset.in_service_fraction(y) for y in years) * asset.length_km


def build_features(
    data: MatchedDataset,
    reference_year: int,
    history_window: tuple[int, int],
    target_window: tuple[int, int],
    failure_type: str | None = None,
) -> FeatureBuild:
    """Encode one row per asset in service at ``reference_year``.

    Features are derived exclusively from the history window (past
    failure counts/rates, category target-encodings, environmental
    attributes); the target is the count of type-matching failures in
    the target window. The two windows must not overlap. Rows come out
    sorted by asset_id, which canonicalizes downstream resampling.
    """
    hist_years = _window_years(history_window)
    tgt_years = _window_years(target_window)
    if history_window[1] >= target_window[0]:
        raise LeakageError(
            f"history window {history_window} overlaps target window {target_window}"
        )

    assets = sorted(
        (a for a in data.assets if a.install_date.year <= reference_year),
        key=lambda a: a.asset_id,
    )
    if not assets:
        raise ValueError(f"no assets in service at {reference_year}")

    ref_date = date(reference_year, 1, 1)
    hist_len = float(len(hist_years))

    def hist_count(asset: PipeAsset) -> int:
        n = 0
        for rec in data.failures_for(asset.asset_id, failure_type):
            if rec.failure_date is not None and rec.failure_date.year in hist_years:
                n += 1
        return n

    # training-window target encodings for material and suburb
    cat_counts: dict[str, dict[str, float]] = {"material": {}, "suburb": {}}
    cat_exposure: dict[str, dict[str, float]] = {"material": {}, "suburb": {}}
    global_count = 0.0
    global_exposure = 0.0
    for asset in assets:
        exp = _window_exposure_km_years(asset, hist_years)
        cnt = float(hist_count(asset))
        global_count += cnt
        global_exposure += exp
        for kind, key in (("material", asset.material), ("suburb", asset.suburb)):
            cat_counts[kind][key] = cat_counts[kind].get(key, 0.0) + cnt
            cat_exposure[kind][key] = cat_exposure[kind].get(key, 0.0) + exp

    global_rate = (
        global_count / global_exposure * 100.0 if global_exposure > 0 else 0.0
    )

    def encoded_rate(kind: str, key: str) -> float:
        exp = cat_exposure[kind].get(key, 0.0)
        if exp <= 0:
            return global_rate
        return cat_counts[kind][key] / exp * 100.0

    n = len(assets)
    raw: dict[str, np.ndarray] = {
        name: np.full(n, np.nan) for name in NUMERIC_FEATURES + ENCODED_FEATURES
    }
    targets = np.zeros(n, np.float64)

    for i, asset in enumerate(assets):
        raw["age_years"][i] = years_between(asset.install_date, ref_date)
        raw["length_m"][i] = asset.length_m
        raw["diameter_mm"][i] = asset.diameter_mm
        env = asset.environment
        if env is not None:
            raw["clay_pct"][i] = env.clay_pct
            raw["bulk_density"][i] = env.bulk_density
            raw["silt_pct"][i] = env.silt_pct
            raw["sand_pct"][i] = env.sand_pct
            raw["ph"][i] = env.ph
            temp = env.mean_annual_temp(hist_years)
            if temp is not None:
                raw["mean_annual_temp_c"][i] = temp
        cnt = hist_count(asset)
        raw["past_failure_count"][i] = cnt
        exposure = asset.length_km * hist_len
        raw["past_failure_rate"][i] = cnt / exposure * 100.0 if exposure > 0 else 0.0
        raw["material_rate"][i] = encoded_rate("material", asset.material)
        raw["suburb_rate"][i] = encoded_rate("suburb", asset.suburb)

        for rec in data.failures_for(asset.asset_id, failure_type):
            if rec.failure_date is not None and rec.failure_date.year in tgt_years:
                targets[i] += 1.0

    columns = []
    indicator_cols = []
    for name in NUMERIC_FEATURES + ENCODED_FEATURES:
        col = raw[name]
        if name in IMPUTED_FEATURES:
            missing = np.isnan(col)
            indicator_cols.append(missing.astype(np.float64))
            if missing.any():
                present = col[~missing]
                median = float(np.median(present)) if present.size else 0.0
                col = np.where(missing, median, col)
        columns.append(col)
    columns.extend(indicator_cols)

    X = np.ascontiguousarray(np.column_stack(columns))
    matrix = FeatureMatrix(
        asset_ids=tuple(a.asset_id for a in assets),
        feature_names=FEATURE_NAMES,
        values=X,
    )
    return FeatureBuild(features=matrix, targets=targets)


# ---------------------------------------------------------------------------
# fitting and prediction


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    feature_indices: Sequence[int] | None = None,
    min_samples_leaf: int = 1,
) -> tuple[int, float, float] | None:
    """Best (feature, threshold, loss) for a single node, or None.

    The exact rule the tree grower uses: candidate thresholds are
    midpoints between consecutive distinct sorted values of each
    feature; the loss is SSE(left) + SSE(right); ties within the
    relative tolerance keep the earliest candidate in (feature,
    threshold) scan order.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if feature_indices is None:
        feats = np.arange(X.shape[1], dtype=np.int64)
    else:
        feats = np.sort(np.asarray(feature_indices, dtype=np.int64))
    cols = np.ascontiguousarray(X[:, feats])
    c, thr, loss = _best_split_kernel(cols, y, min_samples_leaf)
    if c == -1:
        return None
    return int(feats[c]), float(thr), float(loss)


def _tree_seed(seed: int, tree_index: int) -> int:
    return int(np.random.default_rng([seed, tree_index]).integers(0, 2**32))


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    seed: int,
    row_indices: np.ndarray | None = None,
) -> tuple[Tree, np.ndarray]:
    """Fit one tree on the given rows (all rows when None).

    Returns the tree and its per-feature SSE-reduction gains.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if len(y) < 1:
        raise ValueError("at least one row required")
    if row_indices is None:
        row_indices = np.arange(len(y), dtype=np.int64)
    k = params.features_per_split(X.shape[1])
    arrays = _grow_tree_kernel(
        X,
        y,
        np.ascontiguousarray(row_indices, dtype=np.int64),
        params.max_depth,
        params.min_samples_leaf,
        k,
        seed,
    )
    feature, threshold, left, right, value, n_samples, gain = arrays
    tree = Tree(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=value,
        n_samples=n_samples,
    )
    return tree, gain


def fit_forest(
    features: FeatureMatrix,
    targets: np.ndarray,
    params: ForestParams,
    seed: int,
) -> ForestModel:
    """Fit the forest; deterministic given (features, targets, params, seed)."""
    X = np.ascontiguousarray(features.values, dtype=np.float64)
    y = np.ascontiguousarray(targets, dtype=np.float64)
    n = len(y)
    if n < 1:
        raise ValueError("at least one row required")
    if X.shape[0] != n:
        raise ValueError("features and targets disagree on row count")

    trees: list[Tree] = []
    gain_total = np.zeros(X.shape[1], np.float64)
    oob_sum = np.zeros(n, np.float64)
    oob_cnt = np.zeros(n, np.int64)

    for t in range(params.n_trees):
        rng = np.random.default_rng([seed, t])
        if params.bootstrap:
            idx = rng.integers(0, n, n).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        kernel_seed = int(rng.integers(0, 2**32))
        tree, gain = fit_tree(X, y, params, kernel_seed, row_indices=idx)
        trees.append(tree)
        gain_total += gain
        if params.bootstrap:
            out_mask = np.ones(n, dtype=bool)
            out_mask[idx] = False
            if out_mask.any():
                preds = tree.predict(X[out_mask])
                oob_sum[out_mask] += preds
                oob_cnt[out_mask] += 1

    oob_mse: float | None = None
    seen = oob_cnt > 0
    if params.bootstrap and seen.any():
        resid = oob_sum[seen] / oob_cnt[seen] - y[seen]
        oob_mse = float(np.mean(resid**2))

    return ForestModel(
        params=params,
        seed=seed,
        feature_names=features.feature_names,
        fingerprint=features.fingerprint,
        target_min=float(y.min()),
        target_max=float(y.max()),
        oob_mse=oob_mse,
        trees=tuple(trees),
        gain=gain_total,
    )


def predict(model: ForestModel, features: FeatureMatrix) -> np.ndarray:
    """Mean of per-tree leaf values for each row.

    Every prediction is asserted to lie within the training-target range
    (mean-of-means bound).
    """
    if features.fingerprint != model.fingerprint:
        raise FeatureSchemaError(
            "feature schema fingerprint mismatch: "
            f"{features.fingerprint[:12]} != {model.fingerprint[:12]}"
        )
    X = np.ascontiguousarray(features.values, dtype=np.float64)
    total = np.zeros(X.shape[0], np.float64)
    buf = np.empty(X.shape[0], np.float64)
    for tree in model.trees:
        _predict_tree_kernel(
            tree.feature, tree.threshold, tree.left, tree.right, tree.value, X, buf
        )
        total += buf
    scores = total / len(model.trees)
    eps = 1e-9 * (1.0 + abs(model.target_max) + abs(model.target_min))
    if scores.size and (
        scores.min() < model.target_min - eps or scores.max() > model.target_max + eps
    ):
        raise AssertionError("prediction escaped the training-target range")
    return scores


def rank_assets(scores: Mapping[str, float]) -> list[tuple[str, float]]:
    """Descending by score; ties broken by ascending asset_id."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def feature_importance(model: ForestModel) -> np.ndarray:
    """Per-feature total variance reduction, normalized to sum 1.

    Reductions are sample-weighted (SSE reduction summed over splits).
    All-zero when the forest never split.
    """
    total = model.gain.sum()
    if total <= 0:
        return np.zeros_like(model.gain)
    return model.gain / total


# ---------------------------------------------------------------------------
# serialization

MODEL_FORMAT = "watermains-forest"
MODEL_VERSION = 1


def model_to_json(model: ForestModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "min_samples_leaf": model.params.min_samples_leaf,
            "feature_fraction": model.params.feature_fraction,
            "bootstrap": model.params.bootstrap,
        },
        "seed": model.seed,
        "feature_names": list(model.feature_names),
        "fingerprint": model.fingerprint,
        "target_min": model.target_min,
        "target_max": model.target_max,
        "oob_mse": model.oob_mse,
        "gain": model.gain.tolist(),
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": tree.value.tolist(),
                "n_samples": tree.n_samples.tolist(),
            }
            for tree in model.trees
        ],
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> ForestModel:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise FeatureSchemaError(f"not a forest model file: {doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise FeatureSchemaError(f"unsupported model version {doc.get('version')!r}")
    params = ForestParams(**doc["params"])
    trees = tuple(
        Tree(
            feature=np.asarray(t["feature"], np.int64),
            threshold=np.asarray(t["threshold"], np.float64),
            left=np.asarray(t["left"], np.int64),
            right=np.asarray(t["right"], np.int64),
            value=np.asarray(t["value"], np.float64),
            n_samples=np.asarray(t["n_samples"], np.int64),
        )
        for t in doc["trees"]
    )
    return ForestModel(
        params=params,
        seed=doc["seed"],
        feature_names=tuple(doc["feature_names"]),
        fingerprint=doc["fingerprint"],
        target_min=doc["target_min"],
        target_max=doc["target_max"],
        oob_mse=doc["oob_mse"],
        trees=trees,
        gain=np.asarray(doc["gain"], np.float64),
    )


def save_model(model: ForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> ForestModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(fh.read())
