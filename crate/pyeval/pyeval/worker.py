"""Worker process for the lbmcts external-evaluator protocol.

Reads newline-delimited JSON requests on stdin and answers on stdout. Each
request trains one model on the training split and scores it on the
validation split.
"""
import argparse
import json
import sys

import numpy as np
from sklearn import datasets, ensemble, linear_model, tree
from sklearn.metrics import balanced_accuracy_score, mean_squared_error
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder, StandardScaler

BUILTIN = {
    "breast_cancer": (datasets.load_breast_cancer, "classification"),
    "wine": (datasets.load_wine, "classification"),
    "iris": (datasets.load_iris, "classification"),
    "diabetes": (datasets.load_diabetes, "regression"),
}


class ProtocolError(Exception):
    pass


def load_dataset(spec, task, seed):
    """`sklearn:<name>` or a CSV whose last column is the target."""
    if spec.startswith("sklearn:"):
        loader, _ = BUILTIN[spec.split(":", 1)[1]]
        x, y = loader(return_X_y=True)
    else:
        data = np.genfromtxt(spec, delimiter=",", skip_header=1, dtype=float)
        x, y = data[:, :-1], data[:, -1]
    if task == "classification":
        y = LabelEncoder().fit_transform(y)
    stratify = y if task == "classification" else None
    x_train, x_rest, y_train, y_rest = train_test_split(
        x, y, test_size=0.4, random_state=seed, stratify=stratify
    )
    stratify = y_rest if task == "classification" else None
    x_val, x_test, y_val, y_test = train_test_split(
        x_rest, y_rest, test_size=0.5, random_state=seed, stratify=stratify
    )
    scaler = StandardScaler().fit(x_train)
    return tuple(scaler.transform(a) for a in (x_train, x_val, x_test)) + (y_train, y_val, y_test)


def _flag(v):
    return v in (True, "True", "true")


def _features(p, n_features):
    return min(1.0, max(float(p), 1.0 / n_features))


def build_model(algorithm, params, task, seed, n_features):
    clf = task == "classification"
    p = dict(params)
    if algorithm == "adaboost":
        base = (tree.DecisionTreeClassifier if clf else tree.DecisionTreeRegressor)(
            max_depth=p.pop("max_depth"), random_state=seed
        )
        if clf:
            # sklearn dropped the real-valued variant
            p.pop("algorithm", None)
            return ensemble.AdaBoostClassifier(estimator=base, random_state=seed, **p)
        return ensemble.AdaBoostRegressor(estimator=base, random_state=seed, **p)
    if algorithm in ("random_forest", "extra_trees"):
        p["bootstrap"] = _flag(p["bootstrap"])
        p["max_features"] = _features(p["max_features"], n_features)
        cls = {
            ("random_forest", True): ensemble.RandomForestClassifier,
            ("random_forest", False): ensemble.RandomForestRegressor,
            ("extra_trees", True): ensemble.ExtraTreesClassifier,
            ("extra_trees", False): ensemble.ExtraTreesRegressor,
        }[(algorithm, clf)]
        return cls(random_state=seed, n_jobs=1, **p)
    if algorithm == "gradient_boosting":
        cls = ensemble.GradientBoostingClassifier if clf else ensemble.GradientBoostingRegressor
        return cls(random_state=seed, **p)
    if algorithm == "logistic_regression":
        penalty = None if p.pop("penalty") == "none" else "l2"
        return linear_model.LogisticRegression(penalty=penalty, max_iter=1000, random_state=seed, **p)
    if algorithm == "ridge":
        return linear_model.Ridge(random_state=seed, **p)
    if algorithm == "lightgbm":
        import lightgbm

        cls = lightgbm.LGBMClassifier if clf else lightgbm.LGBMRegressor
        return cls(random_state=seed, subsample_freq=1, verbose=-1, **p)
    if algorithm == "xgboost":
        import xgboost

        cls = xgboost.XGBClassifier if clf else xgboost.XGBRegressor
        return cls(random_state=seed, n_jobs=1, **p)
    if algorithm == "catboost":
        import catboost

        cls = catboost.CatBoostClassifier if clf else catboost.CatBoostRegressor
        return cls(random_seed=seed, verbose=False, thread_count=1, **p)
    raise ValueError(f"no model for {algorithm}")


KNOWN = {
    "adaboost",
    "random_forest",
    "extra_trees",
    "gradient_boosting",
    "logistic_regression",
    "ridge",
    "lightgbm",
    "xgboost",
    "catboost",
}


class Evaluator:
    def __init__(self, dataset, space, seed):
        self.space = space
        self.task = space["task"]
        self.seed = seed
        self.algorithms = {a["name"] for a in space["algorithms"]}
        (self.x_train, self.x_val, _, self.y_train, self.y_val, _) = load_dataset(dataset, self.task, seed)

    def evaluate(self, algorithm, params):
        if algorithm not in self.algorithms or algorithm not in KNOWN:
            return {"ok": False, "error": "unknown algorithm"}
        try:
            model = build_model(algorithm, params, self.task, self.seed, self.x_train.shape[1])
        except ImportError as e:
            return {"ok": False, "error": f"{algorithm} unavailable: {e}"}
        except Exception as e:
            return {"ok": False, "error": f"{type(e).__name__}: {e}"}
        try:
            model.fit(self.x_train, self.y_train)
            if self.task == "classification":
                pred = model.predict(self.x_val)
                y = balanced_accuracy_score(self.y_val, pred)
                aux = {"val_target": self.y_val.tolist()}
                if hasattr(model, "predict_proba"):
                    aux["val_pred"] = np.round(model.predict_proba(self.x_val), 6).tolist()
            else:
                pred = model.predict(self.x_val)
                y = -mean_squared_error(self.y_val, pred)
                aux = {"val_target": self.y_val.tolist(), "val_pred": pred.tolist()}
        except Exception as e:  # training failures are reported, not fatal
            return {"ok": False, "error": f"{type(e).__name__}: {e}"}
        if not np.isfinite(y):
            return {"ok": False, "error": "non-finite score"}
        return {"ok": True, "y": float(y), "aux": aux}


def serve(evaluator, stdin, stdout):
    def send(obj):
        stdout.write(json.dumps(obj) + "\n")
        stdout.flush()

    line = stdin.readline()
    if not line:
        raise ProtocolError("no handshake")
    hello = json.loads(line).get("hello")
    if not isinstance(hello, dict):
        raise ProtocolError("first message must be hello")
    send({"ready": True})
    last_id = None
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        rid = req.get("id")
        if not isinstance(rid, int) or (last_id is not None and rid <= last_id):
            raise ProtocolError(f"bad request id {rid!r}")
        last_id = rid
        resp = evaluator.evaluate(req["algorithm"], req.get("params", {}))
        send({"id": rid, **resp})


def main(argv=None):
    ap = argparse.ArgumentParser(prog="pyeval")
    ap.add_argument("--dataset", required=True, help="sklearn:<name> or CSV path (target last)")
    ap.add_argument("--space", required=True, help="search-space JSON file")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    with open(args.space) as f:
        space = json.load(f)
    evaluator = Evaluator(args.dataset, space, args.seed)
    try:
        serve(evaluator, sys.stdin, sys.stdout)
    except (ProtocolError, ValueError, KeyError) as e:
        print(f"pyeval: protocol error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
