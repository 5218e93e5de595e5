"""
Tests for services.pipeline_config: JSON config parsing and validation
"""
import json
import os

import pytest

from services.errors import ConfigurationError
from services.pipeline_config import load_pipeline_config, parse_pipeline_config, scaled_value, scaled_values


def base_doc(**sections) -> dict:
    doc = {"dataset": {"format": "idx", "num_classes": 2,
                       "train": {"images": "train-images.idx", "labels": "train-labels.idx"},
                       "test": {"images": "test-images.idx", "labels": "test-labels.idx"}}}
    doc.update(sections)
    return doc


class TestScaledValues:
    def test_value(self):
        assert scaled_value({"value": 8, "scale": 255}, "x") == (8.0, 255.0)

    def test_values(self):
        assert scaled_values({"values": [1, 2], "scale": 1}, "x") == ((1.0, 2.0), 1.0)

    @pytest.mark.parametrize("doc", [8, {"value": 8}, {"value": 8, "scale": 0}, {"value": 8, "scale": 255, "x": 1}])
    def test_rejects(self, doc):
        with pytest.raises(ConfigurationError):
            scaled_value(doc, "x")


class TestParse:
    def test_defaults(self, tmp_path):
        cfg = parse_pipeline_config(base_doc(), base_dir=str(tmp_path))
        assert cfg.haps.epsilon_ladder == (1.0, 2.0, 4.0, 8.0, 16.0)
        assert cfg.haps.epsilon_scale == 255.0
        assert cfg.eval.epsilon == 8 and cfg.eval.n_iter == 200
        assert cfg.dataset.train.images == os.path.join(str(tmp_path), "train-images.idx")

    def test_sections(self, tmp_path):
        doc = base_doc(
            haps={"T": 10, "M": 8, "nu": 0.25, "epsilon_ladder": {"values": [0.1, 0.2], "scale": 1}},
            eval={"epsilon": {"value": 0.2, "scale": 1}, "n_iter": 20,
                  "sweep_ladder": {"values": [0, 0.1, 0.2], "scale": 1},
                  "epsilon_step": {"value": 2, "scale": 255}},
            seed=9,
        )
        cfg = parse_pipeline_config(doc, base_dir=str(tmp_path))
        assert cfg.seed == 9 and cfg.haps.seed == 9 and cfg.eval.seed == 9
        assert cfg.haps.attack_for_stage(1).epsilon == 0.2
        assert cfg.eval.attack.epsilon == 0.2
        assert cfg.eval.epsilon_step == pytest.approx(2 / 255)

    @pytest.mark.parametrize("doc", [
        {"dataset": {"format": "idx"}},
        base_doc(extra=1),
        base_doc(haps={"learning_rate": 0.1}),
        base_doc(haps={"epsilon_ladder": [1, 2]}),
        base_doc(haps={"epsilon_ladder": {"values": [2, 1], "scale": 255}}),
        base_doc(eval={"epsilon": {"value": 8, "scale": 255}, "sweep_ladder": {"values": [0, 1], "scale": 1}}),
        base_doc(search={"budget": 0}),
        base_doc(seed=-1),
        {"search": {}},
    ])
    def test_invalid(self, doc, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_pipeline_config(doc, base_dir=str(tmp_path))

    def test_fixed_schedule_flags(self, tmp_path):
        cfg = parse_pipeline_config(base_doc(haps={"anneal_nu": False, "anneal_eta": False}), base_dir=str(tmp_path))
        assert cfg.haps.anneal_nu is False and cfg.haps.anneal_eta is False
        assert parse_pipeline_config(base_doc(), base_dir=str(tmp_path)).haps.anneal_nu is True

    def test_csv_needs_image_shape(self, tmp_path):
        doc = {"dataset": {"format": "csv", "train": {"csv": "train.csv"}}}
        with pytest.raises(ConfigurationError, match="image_shape"):
            parse_pipeline_config(doc, base_dir=str(tmp_path))

    def test_overrides(self, tmp_path):
        cfg = parse_pipeline_config(base_doc(seed=1), base_dir=str(tmp_path), seed=5,
                                    output_dir="elsewhere", threads=4)
        assert cfg.seed == 5 and cfg.output_dir == "elsewhere" and cfg.eval.threads == 4

    def test_hash_ignores_threads_and_output(self, tmp_path):
        a = parse_pipeline_config(base_doc(), base_dir=str(tmp_path), threads=1, output_dir="a")
        b = parse_pipeline_config(base_doc(), base_dir=str(tmp_path), threads=8, output_dir="b")
        c = parse_pipeline_config(base_doc(haps={"nu": 0.1}), base_dir=str(tmp_path))
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()
        assert len(a.hash()) == 16

    def test_missing_dataset_file(self, tmp_path):
        cfg = parse_pipeline_config(base_doc(), base_dir=str(tmp_path))
        with pytest.raises(ConfigurationError, match="train-images.idx"):
            cfg.dataset.check_paths(need_test=False)


class TestLoad:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_pipeline_config(str(tmp_path / "nope.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError, match="invalid JSON"):
            load_pipeline_config(str(path))

    def test_paths_relative_to_file(self, tmp_path):
        sub = tmp_path / "conf"
        sub.mkdir()
        path = sub / "config.json"
        path.write_text(json.dumps(base_doc(output_dir="runs")))
        cfg = load_pipeline_config(str(path))
        assert cfg.dataset.test.labels == os.path.join(str(sub), "test-labels.idx")
        assert cfg.output_dir == os.path.join(str(sub), "runs")
