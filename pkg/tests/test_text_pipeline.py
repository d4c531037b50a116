"""Byte-level text classification through the CLI: mlp_text over frozen embeddings."""

import csv
import json

import numpy as np
import pytest

from neurogen import cli
from neurogen.archspec import read_weights
from neurogen.config import ExperimentConfig
from neurogen.generator import load_generator

TOPICS = [["goal", "match", "team", "coach", "league", "score"],
          ["stock", "market", "bank", "shares", "profit", "trade"],
          ["chip", "software", "laptop", "network", "cloud", "robot"],
          ["election", "senate", "vote", "minister", "policy", "court"]]
FILLER = "the a of to in and on for with new says after over".split()


def _write_topics(path, n, seed):
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for i in range(n):
            y = i % 4
            words = [rng.choice(TOPICS[y]) if rng.random() < 0.4 else rng.choice(FILLER) for _ in range(10)]
            w.writerow([y + 1, " ".join(words)])  # 1-based labels, like AG News


@pytest.fixture(scope="module")
def text_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("text")
    _write_topics(root / "train.csv", 400, 0)
    _write_topics(root / "test.csv", 100, 1)
    doc = {
        "seed": 1, "output_dir": "out",
        "arch": {"kind": "mlp_text", "input_shape": [48], "classes": 4, "hidden": 16, "embed_dim": 32},
        "dataset": {"source": "csv", "name": "Topics", "train_path": "train.csv", "test_path": "test.csv",
                    "max_len": 48, "label_base": 1},
        "generator": {"d_model": 32, "layers": 2, "heads": 2, "max_seq_len": 256, "lora_rank": 4,
                      "lora_scale": 8.0},
        "reference": {"epochs": 20, "lr": 0.5, "batch_size": 32},
        "stage1": {"epochs": 30, "lr": 20.0, "N": 4},
        "stage2": {"epochs": 10, "lr": 0.1, "m": 32, "arch_name": "MLP"},
    }
    cfg = root / "config.json"
    cfg.write_text(json.dumps(doc))
    out = root / "out"
    assert cli.main(["build-corpus", str(cfg)]) == 0
    assert cli.main(["stage1", str(cfg), "--corpus", str(out / "corpus.ngpc")]) == 0
    assert cli.main(["stage2", str(cfg), "--generator", str(out / "generator_stage1.nggs")]) == 0
    return cfg, out


def test_generated_text_model_beats_chance(text_run):
    _, out = text_run
    m = json.loads((out / "stage2.metrics.json").read_text())["metrics"]
    assert m["final_accuracy"] >= 0.5  # four balanced classes: chance is 0.25


def test_frozen_table_and_base_untouched(text_run):
    cfg_path, out = text_run
    cfg = ExperimentConfig.load(cfg_path)
    # tables are regenerated from the seed; the stored weights never include them
    arch = cfg.arch()
    tables = cfg.frozen_tables(arch)
    again = ExperimentConfig.load(cfg_path).frozen_tables(arch)
    assert tables.keys() == again.keys()
    for k in tables:
        assert tables[k].data.tobytes() == again[k].data.tobytes()
    w = read_weights(out / "weights_stage2.ngpw", arch)
    assert len(w) == arch.num_params
    s1, s2 = load_generator(out / "generator_stage1.nggs"), load_generator(out / "generator_stage2.nggs")
    for name in s1.base:
        assert s1.base[name].data.tobytes() == s2.base[name].data.tobytes()
