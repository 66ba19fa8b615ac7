import pytest

from hiflash.config import ConfigError, ExperimentFile, SimConfig, from_dict, load_experiment


def test_defaults_validate_and_hash_is_stable():
    a, b = SimConfig().validate(), SimConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert a.replace(**{"seeds.sim": 4}).hash() != a.hash()


def test_unknown_keys_named():
    with pytest.raises(ConfigError, match="unknown key 'bogus' in section 'data'"):
        from_dict({"data": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        from_dict({"colour": "red"})
    with pytest.raises(ConfigError, match="unknown key 'data.nope'"):
        SimConfig().replace(**{"data.nope": 1})


@pytest.mark.parametrize("doc, msg", [
    ({"method": "fedprox"}, "method"),
    ({"method": "hiflash"}, "ddqn"),
    ({"staleness": {"policy": "ddqn"}}, "checkpoint"),
    ({"staleness": {"k": 40}}, "staleness.k"),
    ({"training": {"H_range": [3, 1]}}, "H_range"),
    ({"association": {"strategy": "file"}}, "association.file"),
])
def test_validation_errors(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict(doc)


def test_sweep_expansion_and_seed_axis():
    runs = ExperimentFile(SimConfig(), {"seeds": [1, 2], "method": ["hifl", "fedavg"]}).expand()
    assert [(r.seeds.data, r.seeds.sim, r.method) for r in runs] == [
        (1, 1, "hifl"), (1, 1, "fedavg"), (2, 2, "hifl"), (2, 2, "fedavg")]


def test_load_experiment(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("n_edges: 3\nsweep:\n  lams: [0.0, 1.0]\n")
    exp = load_experiment(p)
    assert exp.base.n_edges == 3
    assert [r.association.lam for r in exp.expand()] == [0.0, 1.0]
    p.write_text("sweep:\n  colours: [1]\n")
    with pytest.raises(ConfigError, match="colours"):
        load_experiment(p)
    p.write_text("data: [unclosed\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_experiment(p)
