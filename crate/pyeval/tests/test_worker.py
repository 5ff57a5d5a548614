import io
import json
import pathlib

import pytest

from pyeval import Evaluator
from pyeval.worker import ProtocolError, serve

SPACES = pathlib.Path(__file__).resolve().parents[2] / "spaces"


def space(name):
    return json.loads((SPACES / name).read_text())


@pytest.fixture(scope="module")
def clf():
    return Evaluator("sklearn:breast_cancer", space("clf8.json"), 0)


RF = {"criterion": "gini", "bootstrap": "True", "max_features": 0.5, "min_samples_split": 2, "min_samples_leaf": 1}


def test_supported_algorithm_scores(clf):
    r = clf.evaluate("random_forest", RF)
    assert r["ok"] and 0.5 < r["y"] <= 1.0
    assert len(r["aux"]["val_pred"]) == len(r["aux"]["val_target"])


def test_unknown_algorithm(clf):
    assert clf.evaluate("svm", {}) == {"ok": False, "error": "unknown algorithm"}


def test_same_request_same_score(clf):
    assert clf.evaluate("random_forest", RF)["y"] == clf.evaluate("random_forest", RF)["y"]


def test_training_failure_is_reported(clf):
    r = clf.evaluate("random_forest", {**RF, "min_samples_split": -4})
    assert not r["ok"] and r["error"]


def test_regression_is_negated_mse():
    ev = Evaluator("sklearn:diabetes", space("reg8.json"), 1)
    r = ev.evaluate("ridge", {"solver": "auto", "alpha": 1.0, "tol": 1e-4, "max_iter": 200})
    assert r["ok"] and r["y"] < 0


def test_serve_round_trip(clf):
    reqs = [{"hello": {"space_digest": "ab"}}]
    reqs += [{"id": i, "algorithm": "random_forest", "params": RF} for i in (1, 2)]
    reqs += [{"id": 3, "algorithm": "nope", "params": {}}]
    out = io.StringIO()
    serve(clf, io.StringIO("".join(json.dumps(r) + "\n" for r in reqs)), out)
    lines = [json.loads(l) for l in out.getvalue().splitlines()]
    assert lines[0] == {"ready": True}
    assert [l["id"] for l in lines[1:]] == [1, 2, 3]
    assert lines[3]["ok"] is False


def test_non_increasing_ids_are_a_protocol_error(clf):
    reqs = [{"hello": {}}, {"id": 2, "algorithm": "nope"}, {"id": 2, "algorithm": "nope"}]
    with pytest.raises(ProtocolError):
        serve(clf, io.StringIO("".join(json.dumps(r) + "\n" for r in reqs)), io.StringIO())
