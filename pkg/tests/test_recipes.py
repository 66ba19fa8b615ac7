import csv

from hiflash import oracles, recipes


def test_recipe_list_matches_criteria():
    crit = [r.criterion for r in recipes.criteria()]
    assert crit == list(range(1, 12))
    assert len(recipes.RECIPES) == 11


def test_staleness_recipe_verdict_matches_csv(tmp_path):
    res = recipes.run_recipe("staleness-threshold", tmp_path, seeds=3)
    with open(tmp_path / "staleness-threshold.csv") as fh:
        rows = list(csv.DictReader(fh))
    wins = 0
    for r in rows:
        ratio = float(r["epochs_fixed"]) / float(r["epochs_unbounded"]) if r["epochs_fixed"] and \
            r["epochs_unbounded"] else None
        wins += ratio is not None and ratio <= 0.5
    assert res.passed == (wins >= 8)
    assert f"{wins}/3" in res.detail


def test_oracles_callable_standalone():
    assert oracles.js_bits([1, 0], [0, 1]) == 1.0
    assert oracles.discounted_sum([1, 1], 0.5) == 1.5
    assert oracles.power(2.0, 10) == 1024.0
    assert oracles.plain_gd(lambda x: [2 * x[0]], [1.0], 0.25, 2)[-1] == [0.25]
    clusters, value = oracles.exhaustive_association([[1, 0], [0, 1]], [1, 1], [[0.1, 0.2]], 0.0, [0.5, 0.5])
    assert clusters == [[0, 1]] and value == 0.2
    V, pi = oracles.value_iteration({0: {"a": {1: 1.0}, "b": {1: 1.0}}, 1: {}}, {0: {"a": 1.0, "b": 2.0}}, 0.9)
    assert pi == {0: "b"} and V[0] == 2.0
    assert oracles.mlp_forward([1.0], [([[2.0]], [0.5])]) == [2.5]
