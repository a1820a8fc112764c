import json

import pytest

from occlusynth.config import ConfigError, PipelineConfig


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.filter.max_range == 15.0 and cfg.filter.sensor_height == 2.75
    assert (cfg.filter.h_min, cfg.filter.h_max) == (-0.35, 2.0)
    assert cfg.merge.threshold == 0.08 and cfg.eval_d == 0.01
    assert (cfg.n_complete, cfg.n_gapped) == (27_648, 18_500)


def test_json_round_trip():
    cfg = PipelineConfig.from_json({"seed": 4, "merge": {"threshold": 0.1},
                                    "placement": {"modes": {"on_road": 0.5, "sidewalk": 0.3,
                                                                      "perpendicular": 0.2}}})
    assert cfg.seed == 4 and cfg.merge.threshold == 0.1 and cfg.modes.sidewalk == 0.3
    assert cfg.dims == PipelineConfig().dims
    assert PipelineConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("doc,key", [
    ({"bogus": 1}, "bogus"),
    ({"filter": {"max_rang": 15}}, "max_rang"),
    ({"merge": {"threshold": -1}}, "merge/threshold"),
    ({"seed": "seven"}, "seed"),
])
def test_invalid_documents_name_the_key(doc, key):
    with pytest.raises(ConfigError, match=key):
        PipelineConfig.from_json(doc)


def test_cross_field_checks():
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"filter": {"h_min": 3.0, "h_max": 2.0}})
    with pytest.raises(ConfigError, match="sum to 1"):
        PipelineConfig.from_json({"placement": {"modes": {"sidewalk": 0.5}}})


def test_digest_ignores_threads():
    a = PipelineConfig.from_json({"threads": 1})
    b = PipelineConfig.from_json({"threads": 8})
    assert a.digest() == b.digest()
    assert a.digest() != PipelineConfig.from_json({"seed": 1}).digest()


def test_load(tmp_path):
    good = tmp_path / "c.json"
    good.write_text(json.dumps({"seed": 3}))
    assert PipelineConfig.load(good).seed == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{seed: 3")
    with pytest.raises(ConfigError):
        PipelineConfig.load(bad)
