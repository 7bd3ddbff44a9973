"""End-to-end CLI subcommand tests on a miniature run configuration."""

import json
import os

import numpy as np
import pytest

from sidforge import pipeline
from sidforge.cli import main
from sidforge.corpus import Item, ItemCorpus, load_items, save_items
from sidforge.quantizer import load_codebook, load_sids

MINI_CONFIG = {
    "seed": 5,
    "corpus": {
        "n_items": 60, "d_emb": 6, "n_clusters_true": 4,
        "n_requests": 80, "events_per_request": 3, "seed": 5,
    },
    "quantizer": {"n_layers": 2, "k": 4, "tau": 1.2},
    "tokenizer": {"attr_chain": ["l2", "l3"], "d_hash": 4},
    "scorer": {"d_model": 8, "max_behavior_len": 8},
    "train": {"epochs": 1, "batch_size": 16},
    "align": {"epochs": 1, "batch_size": 16, "pairs_per_request": 2},
    "decode": {"beam_width": 8, "top_k": 4},
    "eval": {"ks": [1, 5], "beam_width": 8},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(MINI_CONFIG))
    return str(path)


def run(args):
    return main(args)


class TestPipelineSmoke:
    def test_full_subcommand_chain(self, tmp_path, config_path):
        out = str(tmp_path / "run")
        assert run(["gen-data", "--config", config_path, "--out", out]) == 0
        assert run(["quantize", "--config", config_path, "--out", out]) == 0
        assert run(["analyze", "--config", config_path, "--out", out]) == 0
        assert run(["build-seqs", "--config", config_path, "--out", out]) == 0
        assert run(["train", "--config", config_path, "--out", out]) == 0
        assert run(["align", "--config", config_path, "--out", out]) == 0
        assert run(["decode", "--config", config_path, "--out", out,
                    "--task", "click:main_feed"]) == 0
        assert run(["eval", "--config", config_path, "--out", out]) == 0

        for name in ("items.jsonl", "interactions.jsonl", "codebook.json",
                     "sids.jsonl", "sequences.jsonl", "space.json",
                     "checkpoint.json", "aligned_checkpoint.json",
                     "candidates.jsonl", "report.json", "analysis.json"):
            assert os.path.exists(os.path.join(out, name)), name

        corp = load_items(os.path.join(out, "items.jsonl"))
        assert len(corp) == 60
        cb = load_codebook(os.path.join(out, "codebook.json"))
        assert cb.L == 2 and cb.K == 4
        sids = load_sids(os.path.join(out, "sids.jsonl"))
        assert len(sids) == 60

        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert set(report["hr_at"]) == {"1", "5"}
        assert 0.0 <= report["token_hr3_mean"] <= 1.0
        analysis = json.loads((tmp_path / "run" / "analysis.json").read_text())
        assert "exposure" in analysis and "entropy" in analysis

        # every artifact carries the config digest
        digest = pipeline.config_digest(pipeline.load_config(MINI_CONFIG))
        meta = json.loads((tmp_path / "run" / "items.jsonl.meta.json").read_text())
        assert meta["config_digest"] != ""
        assert meta["seed"] == 5
        assert json.loads((tmp_path / "run" / "report.json").read_text())[
            "metadata"]["config_digest"] == meta["config_digest"]

    def test_gen_data_rerun_is_byte_identical(self, tmp_path, config_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        run(["gen-data", "--config", config_path, "--out", out1])
        run(["gen-data", "--config", config_path, "--out", out2])
        for name in ("items.jsonl", "interactions.jsonl"):
            a = open(os.path.join(out1, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b


class TestQuantizeTauOne:
    def test_symmetric_four_items_load_exactly_at_cap(self, tmp_path, config_path):
        out = str(tmp_path / "run")
        os.makedirs(out)
        pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]]
        items = [
            Item(i, np.asarray(p), 1,
                 {"l1": "a", "l2": "b", "l3": "c", "seller": "s", "brand": "r"}, 1.0)
            for i, p in enumerate(pts)
        ]
        save_items(ItemCorpus(items=items, d_emb=2), os.path.join(out, "items.jsonl"))
        (tmp_path / "run" / "interactions.jsonl").write_text("")
        cfg = dict(MINI_CONFIG)
        cfg["quantizer"] = {"n_layers": 1, "k": 2}
        cfg_path = tmp_path / "c2.json"
        cfg_path.write_text(json.dumps(cfg))
        assert run(["quantize", "--config", str(cfg_path), "--out", out,
                    "--tau", "1.0", "--strict-capacity"]) == 0
        sids = load_sids(os.path.join(out, "sids.jsonl"))
        loads = {}
        for s in sids:
            loads[s.codes[0]] = loads.get(s.codes[0], 0) + 1
        assert sorted(loads.values()) == [2, 2]  # exactly C_cap each


class TestCliErrors:
    def test_missing_input_file(self, tmp_path, config_path, capsys):
        rc = run(["quantize", "--config", config_path, "--out", str(tmp_path / "nope")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 1, "not_a_section": {}}))
        rc = run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "not_a_section" in capsys.readouterr().err

    def test_strict_capacity_infeasible_fails(self, tmp_path, config_path, capsys):
        out = str(tmp_path / "run")
        os.makedirs(out)
        items = [
            Item(i, np.asarray([float(i), 0.0]), 1000 if i == 0 else 1,
                 {"l1": "a", "l2": "b", "l3": "c", "seller": "s", "brand": "r"}, 1.0)
            for i in range(6)
        ]
        save_items(ItemCorpus(items=items, d_emb=2), os.path.join(out, "items.jsonl"))
        (tmp_path / "run" / "interactions.jsonl").write_text("")
        rc = run(["quantize", "--config", config_path, "--out", out,
                  "--tau", "1.05", "--strict-capacity"])
        assert rc == 1
        assert "cap" in capsys.readouterr().err

    def test_threads_env_fallback(self, tmp_path, config_path, monkeypatch):
        monkeypatch.setenv("SIDFORGE_THREADS", "2")
        out = str(tmp_path / "run")
        assert run(["gen-data", "--config", config_path, "--out", out]) == 0


class TestRunPipeline:
    def test_one_shot_pipeline(self, tmp_path):
        cfg = pipeline.load_config(MINI_CONFIG)
        report = pipeline.run_pipeline(cfg, str(tmp_path / "run"))
        assert 0.0 <= report.token_hr3_mean <= 1.0
        for name in ("items.jsonl", "codebook.json", "checkpoint.json",
                     "report.json", "candidates.jsonl"):
            assert os.path.exists(os.path.join(str(tmp_path / "run"), name))


class TestAblationHarness:
    def test_identical_arms_identical_reports(self, tmp_path):
        cfg = pipeline.load_config(MINI_CONFIG)
        corp, log = pipeline.gen_data(cfg, out_dir=str(tmp_path / "data"))
        r1 = pipeline.ablation_run(cfg, corp, log, [("l2", "l3")], ["capacity"])
        r2 = pipeline.ablation_run(cfg, corp, log, [("l2", "l3")], ["capacity"])
        (k1,), (k2,) = r1.keys(), r2.keys()
        assert k1 == k2
        assert r1[k1].as_dict() == r2[k2].as_dict()
