"""Nuisance regression learners behind one fit/predict interface.

Implements gradient-boosted regression trees (plus a deeper/slower-shrinkage
alternate profile), a random forest, LASSO by cyclic coordinate descent,
OLS on a pivoted QR, and damped-Newton logistic regression. Trees share a
vectorized exact split search: feature orderings are argsorted once per fit
and partitioned down the tree, so no node ever re-sorts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as _pivoted_qr

from .errors import ConvergenceError, DomainError, SchemaError

KINDS = ("gbdt", "gbdt_alt", "random_forest", "lasso", "ols", "logistic")

_DEFAULTS = {
    "gbdt": {"trees": 200, "depth": 3, "learning_rate": 0.1, "min_leaf": 20, "subsample": 1.0},
    # alternate boosted-tree profile: deeper trees, smaller shrinkage, more rounds
    "gbdt_alt": {"trees": 400, "depth": 6, "learning_rate": 0.05, "min_leaf": 20, "subsample": 1.0},
    "random_forest": {"trees": 300, "depth": 12, "min_leaf": 20, "max_features": None},
    # cyclic CD zigzags on near-collinear columns (raw quadratics), so the
    # cycle cap sits well above typical convergence
    "lasso": {"lambda": 0.01, "iterations": 5000, "tol": 1e-7},
    "ols": {},
    "logistic": {"iterations": 100, "tol": 1e-8},
}

_POSITIVE_KEYS = ("trees", "learning_rate", "min_leaf", "subsample",
                  "iterations", "tol", "max_features")


def derive_seed(master: int, *tags: int) -> int:
    """Stable integer sub-seed from a master seed and counter offsets."""
    return int(np.random.SeedSequence((master,) + tags).generate_state(1)[0])


def derive_rng(master: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng((master,) + tags)


@dataclass(frozen=True)
class LearnerSpec:
    """Learner identifier plus hyperparameters; unknown keys are rejected."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown learner kind {self.kind!r}")
        allowed = set(_DEFAULTS[self.kind])
        unknown = set(self.hyperparameters) - allowed
        if unknown:
            raise DomainError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        for key in _POSITIVE_KEYS:
            val = self.hyperparameters.get(key)
            if val is not None and val <= 0:
                raise DomainError(f"hyperparameter {key!r} must be positive, got {val}")
        depth = self.hyperparameters.get("depth")
        if depth is not None and depth < 0:
            raise DomainError(f"depth must be nonnegative, got {depth}")
        sub = self.hyperparameters.get("subsample")
        if sub is not None and sub > 1.0:
            raise DomainError(f"subsample must lie in (0, 1], got {sub}")

    def params(self) -> dict:
        merged = dict(_DEFAULTS[self.kind])
        merged.update(self.hyperparameters)
        return merged

    def with_seed(self, seed: int) -> "LearnerSpec":
        return LearnerSpec(self.kind, dict(self.hyperparameters), seed)


@dataclass
class FittedLearner:
    kind: str
    state: dict
    n_features: int

    def predict(self, features) -> np.ndarray:
        X = np.asarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise SchemaError(
                f"feature layout mismatch: trained on {self.n_features} columns, got {X.shape}")
        return _PREDICTORS[self.kind](self.state, X)


# ---------------------------------------------------------------------------
# regression trees: exact variance-reduction splits on presorted orderings
# ---------------------------------------------------------------------------

class _Presort:
    """Feature-major row orderings (p, n) and sorted values for the sample.

    Orders live feature-major so every per-node select stays contiguous;
    they are computed once per fit and partitioned down the tree, never
    re-sorted.
    """

    __slots__ = ("order", "xs", "valid_x", "n", "p")

    def __init__(self, X: np.ndarray):
        Xt = np.ascontiguousarray(X.T)
        self.order = np.argsort(Xt, axis=1, kind="stable")
        self.xs = np.take_along_axis(Xt, self.order, axis=1)
        self.valid_x = self.xs[:, :-1] < self.xs[:, 1:]
        self.n, self.p = X.shape


def _partition(order, xs, ys, in_left, n_left):
    """Split the node slabs into the two children without re-sorting."""
    p, m = order.shape
    msk = in_left[order]
    left = (order[msk].reshape(p, n_left), xs[msk].reshape(p, n_left),
            ys[msk].reshape(p, n_left))
    keep = ~msk
    n_right = m - n_left
    right = (order[keep].reshape(p, n_right), xs[keep].reshape(p, n_right),
             ys[keep].reshape(p, n_right))
    return left, right


def _best_split(order, xs, ys, w, min_leaf, valid_x=None, cols=None):
    """Return (feature, boundary_index, threshold) or None.

    Gain is the sum-of-squares criterion sum_left^2/w_left +
    sum_right^2/w_right; ties resolve to the lowest feature index, then
    the lowest threshold (slabs are feature-major, so the flat argmax
    already scans in that order).
    """
    m = order.shape[1]
    if cols is not None:
        order, xs, ys = order[cols], xs[cols], ys[cols]
        valid_x = None
    if valid_x is None:
        valid_x = xs[:, :-1] < xs[:, 1:]
    if w is None:
        cs = np.cumsum(ys, axis=1)
        ls = cs[:, :-1]
        tot_s = cs[:, -1:]
        inv_lw = 1.0 / np.arange(1.0, m)
        inv_rw = inv_lw[::-1]
        lo = min_leaf - 1
        hi = m - min_leaf
        if lo >= hi:
            return None
        sl = slice(lo, hi)
        gain = np.square(ls[:, sl])
        gain *= inv_lw[sl]
        rs = tot_s - ls[:, sl]
        np.square(rs, out=rs)
        rs *= inv_rw[sl]
        gain += rs
        valid = valid_x[:, sl]
    else:
        ws = w[order]
        cs = np.cumsum(ws * ys, axis=1)
        cw = np.cumsum(ws, axis=1)
        ls, lw = cs[:, :-1], cw[:, :-1]
        tot_s, tot_w = cs[:, -1:], cw[:, -1:]
        rs, rw = tot_s - ls, tot_w - lw
        valid = valid_x & (lw >= min_leaf) & (rw >= min_leaf)
        sl = slice(0, m - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(lw > 0, ls * ls / np.maximum(lw, 1e-300), 0.0)
            gain += np.where(rw > 0, rs * rs / np.maximum(rw, 1e-300), 0.0)
    if not valid.any():
        return None
    gain[~valid] = -np.inf
    flat = int(np.argmax(gain))
    width = gain.shape[1]
    j, i = divmod(flat, width)
    i += sl.start
    if cols is not None:
        j = int(cols[j])
    return j, i


def _node_value(ys_row, order_row, w):
    if w is None:
        return float(ys_row.mean())
    ww = w[order_row]
    return float(np.dot(ww, ys_row) / ww.sum())


def _fit_tree(presort: _Presort, ys0, w, depth, min_leaf, rng=None, max_features=None,
              train_pred=None):
    """Fit one regression tree; optionally fill train_pred with leaf values.

    ``ys0`` is the target already gathered into the presorted layout,
    y[presort.order]. Nodes are stored as parallel arrays (feature,
    threshold, children, value); leaves have feature -1. DFS order keeps
    rng consumption deterministic when feature subsampling is active.
    """
    feature, threshold, left, right, value = [], [], [], [], []
    in_left = np.zeros(presort.n, dtype=bool)
    stack = [(presort.order, presort.xs, ys0, depth, -1, False, presort.valid_x)]
    while stack:
        order, xs, ys, d, parent, is_right, valid_x = stack.pop()
        node_id = len(feature)
        if parent >= 0:
            (right if is_right else left)[parent] = node_id
        split = None
        if d > 0 and order.shape[1] >= 2 * min_leaf:
            cols = None
            if max_features is not None and max_features < presort.p:
                cols = np.sort(rng.choice(presort.p, size=max_features, replace=False))
            split = _best_split(order, xs, ys, w, min_leaf, valid_x, cols)
        if split is None:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(_node_value(ys[0], order[0], w))
            if train_pred is not None:
                train_pred[order[0]] = value[-1]
            continue
        j, i = split
        lo_v, hi_v = xs[j, i], xs[j, i + 1]
        thr = lo_v + 0.5 * (hi_v - lo_v)
        if thr >= hi_v:                     # guard against float rounding up
            thr = lo_v
        feature.append(j)
        threshold.append(thr)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        left_rows = order[j, : i + 1]
        in_left[left_rows] = True
        (o_l, x_l, y_l), (o_r, x_r, y_r) = _partition(order, xs, ys, in_left, i + 1)
        in_left[left_rows] = False
        stack.append((o_r, x_r, y_r, d - 1, node_id, True, None))
        stack.append((o_l, x_l, y_l, d - 1, node_id, False, None))
    return {
        "feature": np.array(feature, dtype=np.int64),
        "threshold": np.array(threshold, dtype=float),
        "left": np.array(left, dtype=np.int64),
        "right": np.array(right, dtype=np.int64),
        "value": np.array(value, dtype=float),
    }


def _leaf_only_tree(value: float) -> dict:
    return {
        "feature": np.array([-1]),
        "threshold": np.array([0.0]),
        "left": np.array([-1]),
        "right": np.array([-1]),
        "value": np.array([value]),
    }


def _tree_predict(tree, X) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        f = tree["feature"][node]
        if f < 0:
            out[rows] = tree["value"][node]
            continue
        go_left = X[rows, f] <= tree["threshold"][node]
        stack.append((tree["left"][node], rows[go_left]))
        stack.append((tree["right"][node], rows[~go_left]))
    return out


def _fit_gbdt(X, y, params, seed):
    n, p = X.shape
    base = float(y.mean())
    lr = params["learning_rate"]
    if p == 0:
        return {"base": base, "learning_rate": lr, "trees": []}
    presort = _Presort(X)
    current = np.full(n, base)
    trees = []
    pred_buf = np.empty(n)
    for t in range(int(params["trees"])):
        resid = y - current
        w = None
        if params["subsample"] < 1.0:
            rng = derive_rng(seed, 1, t)
            keep = rng.permutation(n)[: max(1, int(round(params["subsample"] * n)))]
            w = np.zeros(n)
            w[keep] = 1.0
        # the tree partitions every row, so the leaf-fill buffer doubles as
        # the tree's train-set prediction even under row subsampling
        tree = _fit_tree(presort, resid[presort.order], w, int(params["depth"]),
                         int(params["min_leaf"]), train_pred=pred_buf)
        current = current + lr * pred_buf
        trees.append(tree)
    return {"base": base, "learning_rate": lr, "trees": trees}


def _predict_gbdt(state, X):
    out = np.full(X.shape[0], state["base"])
    for tree in state["trees"]:
        out += state["learning_rate"] * _tree_predict(tree, X)
    return out


def _fit_random_forest(X, y, params, seed):
    n, p = X.shape
    if p == 0:
        return {"trees": [_leaf_only_tree(float(y.mean()))]}
    presort = _Presort(X)
    ys0 = y[presort.order]
    k = params["max_features"]
    if k is None:
        k = int(np.ceil(np.sqrt(p)))
    trees = []
    for t in range(int(params["trees"])):
        rng = derive_rng(seed, 2, t)
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
        tree = _fit_tree(presort, ys0, w, int(params["depth"]), int(params["min_leaf"]),
                         rng=rng, max_features=int(k))
        trees.append(tree)
    return {"trees": trees}


def _predict_random_forest(state, X):
    out = np.zeros(X.shape[0])
    for tree in state["trees"]:
        out += _tree_predict(tree, X)
    return out / len(state["trees"])


# ---------------------------------------------------------------------------
# linear learners
# ---------------------------------------------------------------------------

def _fit_lasso(X, y, params, seed):
    """Cyclic coordinate descent on standardized columns.

    Minimizes (1/2n)||y - Xb||^2 + lambda*||b||_1; coefficients are mapped
    back to the original scale and the intercept recovered from the means.
    """
    n, p = X.shape
    lam, tol = params["lambda"], params["tol"]
    mu, sd = X.mean(axis=0), X.std(axis=0)
    live = sd > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - mu[live]) / sd[live]
    ybar = y.mean()
    r = y - ybar
    b = np.zeros(p)
    for it in range(int(params["iterations"])):
        delta = 0.0
        for j in range(p):
            if not live[j]:
                continue
            zj = Z[:, j]
            rho = zj @ r / n + b[j]
            bj = np.sign(rho) * max(abs(rho) - lam, 0.0)
            if bj != b[j]:
                r -= zj * (bj - b[j])
                delta = max(delta, abs(bj - b[j]))
                b[j] = bj
        if delta < tol:
            break
    else:
        raise ConvergenceError(
            f"lasso hit the {params['iterations']}-cycle cap (last max step {delta:.2e})")
    coef = np.zeros(p)
    coef[live] = b[live] / sd[live]
    intercept = ybar - float(coef @ mu)
    return {"coef": coef, "intercept": intercept}


def _fit_ols(X, y, params, seed):
    """Least squares via rank-revealing (pivoted) QR; dependent columns dropped."""
    n, p = X.shape
    X1 = np.column_stack([np.ones(n), X])
    Q, R, piv = _pivoted_qr(X1, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X1.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X1.shape[1]:
        dropped = sorted(piv[rank:])
        names = [("intercept" if j == 0 else f"column {j - 1}") for j in dropped]
        warnings.warn(f"OLS design is rank-deficient; dropping {names}", stacklevel=2)
    keep = piv[:rank]
    coef_k = np.linalg.solve(R[:rank, :rank], Q[:, :rank].T @ y)
    beta = np.zeros(X1.shape[1])
    beta[keep] = coef_k
    return {"coef": beta[1:], "intercept": float(beta[0])}


def _predict_linear(state, X):
    return X @ state["coef"] + state["intercept"]


def _sigmoid(eta):
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -30.0, 30.0)))


def _fit_logistic(X, y, params, seed, ridge=0.0):
    """Damped Newton iterations on the log-likelihood."""
    n, p = X.shape
    X1 = np.column_stack([np.ones(n), X])
    beta = np.zeros(p + 1)

    def loglik(b):
        eta = np.clip(X1 @ b, -30.0, 30.0)
        return float(y @ eta - np.sum(np.log1p(np.exp(eta))) - 0.5 * ridge * (b @ b))

    ll = loglik(beta)
    for it in range(int(params["iterations"])):
        mu = _sigmoid(X1 @ beta)
        grad = X1.T @ (y - mu) - ridge * beta
        W = mu * (1.0 - mu)
        H = (X1 * W[:, None]).T @ X1 + (ridge + 1e-10) * np.eye(p + 1)
        step = np.linalg.solve(H, grad)
        scale, new_ll = 1.0, None
        for _ in range(30):
            cand = beta + scale * step
            new_ll = loglik(cand)
            if new_ll >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            raise ConvergenceError(f"logistic step-halving failed at iteration {it}")
        beta, improved, ll = cand, new_ll - ll, new_ll
        if np.max(np.abs(scale * step)) < params["tol"] or improved < params["tol"]:
            return {"coef": beta[1:], "intercept": float(beta[0])}
    raise ConvergenceError(
        f"logistic regression hit the {params['iterations']}-iteration cap")


def _predict_logistic(state, X):
    return _sigmoid(X @ state["coef"] + state["intercept"])


_FITTERS = {
    "gbdt": _fit_gbdt,
    "gbdt_alt": _fit_gbdt,
    "random_forest": _fit_random_forest,
    "lasso": _fit_lasso,
    "ols": _fit_ols,
    "logistic": _fit_logistic,
}

_PREDICTORS = {
    "gbdt": _predict_gbdt,
    "gbdt_alt": _predict_gbdt,
    "random_forest": _predict_random_forest,
    "lasso": _predict_linear,
    "ols": _predict_linear,
    "logistic": _predict_logistic,
}


def fit(spec: LearnerSpec, features, target) -> FittedLearner:
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    if X.ndim != 2:
        raise SchemaError(f"features must be 2-D, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise SchemaError(f"target shape {y.shape} does not match {X.shape[0]} rows")
    if X.shape[0] < 2:
        raise DomainError("need at least 2 rows to fit")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DomainError("non-finite cells in features or target")
    state = _FITTERS[spec.kind](X, y, spec.params(), spec.seed)
    return FittedLearner(kind=spec.kind, state=state, n_features=X.shape[1])


def predict(model: FittedLearner, features) -> np.ndarray:
    return model.predict(features)


MODEL_FORMAT_VERSION = 1


def save_learner(model: FittedLearner, path) -> None:
    """Serialize a fitted learner to a versioned npz archive.

    Tree ensembles are flattened into concatenated node arrays with
    per-tree offsets; linear models store their coefficient vectors.
    """
    payload = {"format_version": np.array(MODEL_FORMAT_VERSION),
               "kind": np.array(model.kind),
               "n_features": np.array(model.n_features)}
    state = model.state
    if model.kind in ("gbdt", "gbdt_alt", "random_forest"):
        trees = state["trees"]
        payload["n_nodes"] = np.array([len(t["feature"]) for t in trees])
        for key in ("feature", "threshold", "left", "right", "value"):
            payload[key] = (np.concatenate([t[key] for t in trees])
                            if trees else np.array([]))
        if model.kind != "random_forest":
            payload["base"] = np.array(state["base"])
            payload["learning_rate"] = np.array(state["learning_rate"])
    else:
        payload["coef"] = state["coef"]
        payload["intercept"] = np.array(state["intercept"])
    np.savez_compressed(path, **payload)


def load_learner(path) -> FittedLearner:
    with np.load(path, allow_pickle=False) as archive:
        if int(archive["format_version"]) != MODEL_FORMAT_VERSION:
            raise SchemaError(f"unsupported model version {archive['format_version']}")
        kind = str(archive["kind"])
        n_features = int(archive["n_features"])
        if kind in ("gbdt", "gbdt_alt", "random_forest"):
            offsets = np.concatenate([[0], np.cumsum(archive["n_nodes"])]).astype(int)
            trees = []
            for i in range(len(archive["n_nodes"])):
                lo, hi = offsets[i], offsets[i + 1]
                trees.append({key: archive[key][lo:hi]
                              for key in ("feature", "threshold", "left", "right", "value")})
            state = {"trees": trees}
            if kind != "random_forest":
                state["base"] = float(archive["base"])
                state["learning_rate"] = float(archive["learning_rate"])
        else:
            state = {"coef": archive["coef"], "intercept": float(archive["intercept"])}
    return FittedLearner(kind=kind, state=state, n_features=n_features)


def kfold_assignment(n_rows: int, folds: int, seed: int) -> np.ndarray:
    """Seeded permutation split into near-equal parts; returns fold id per row."""
    if folds < 2:
        raise DomainError(f"need at least 2 folds, got {folds}")
    if folds > n_rows:
        raise DomainError(f"{folds} folds exceed {n_rows} rows")
    perm = derive_rng(seed, 3).permutation(n_rows)
    assignment = np.empty(n_rows, dtype=np.int64)
    for k, part in enumerate(np.array_split(perm, folds)):
        assignment[part] = k
    return assignment


def kfold_oof_predict(spec: LearnerSpec, features, target, folds: int,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold predictions: each row scored by a model that never saw it."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    assignment = kfold_assignment(X.shape[0], folds, seed)
    oof = np.empty(X.shape[0])
    for k in range(folds):
        test = assignment == k
        model = fit(spec.with_seed(derive_seed(spec.seed, 4, k)), X[~test], y[~test])
        oof[test] = model.predict(X[test])
    return oof, assignment
