import csv
import json

import pytest
import yaml

from gated_fusion.cli import main, make_run_dir
from gated_fusion.config import RunConfig, config_from_dict, load_config
from gated_fusion.exceptions import ConfigurationError

TINY_CONFIG = {
    "seed": 3,
    "synthetic": {"n_genres": 4, "substyles_per_genre": 2, "n_trailers": 40,
                  "experts": [{"name": "appearance", "native_dim": 6},
                              {"name": "audio", "native_dim": 4}],
                  "clips": [10, 14], "noise_sigma": 0.3},
    "model": {"common_dim": 8, "gate_hidden": 8, "clip_hidden": 16, "clip_dim": 8,
              "seq_hidden": 16, "seq_dim": 8, "bottleneck_hidden": 16, "bottleneck_dim": 12,
              "cls_hidden": 16, "proj_hidden": 8, "proj_dim": 6, "n_clips": 3,
              "n_sequences": 2, "netvlad_clusters": 2},
    "train": {"epochs": 3, "batch_size": 8, "learning_rate": 1e-3},
    "finetune": {"epochs": 3, "warm_epochs": 1, "batch_size": 8, "learning_rate": 1e-3},
    "sequence_head": {"epochs": 3},
    "eval": {"random_trials": 5},
    "retrieval": {"k": 3},
}


def _run(tmp, name, *argv):
    """Run one command in its own output base; return (exit code, run dir)."""
    out = tmp / name
    code = main([*argv, "--out", str(out)])
    runs = sorted(out.iterdir()) if out.exists() else []
    return code, (runs[-1] if runs else None)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tmp / "config.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CONFIG))
    c = ["--config", str(cfg)]
    dirs = {}
    _, dirs["gen"] = _run(tmp, "gen", "gen-synthetic", *c)
    corpus = str(dirs["gen"] / "corpus")
    _, dirs["split"] = _run(tmp, "split", "split", *c, "--corpus", corpus)
    d = ["--corpus", corpus, "--split", str(dirs["split"] / "split.json")]
    code, dirs["train"] = _run(tmp, "train", "train", *c, *d, "--sequence-head")
    assert code == 0
    model = str(dirs["train"] / "model.gfck")
    m = ["--checkpoint", model]
    codes = {}
    codes["finetune"], dirs["finetune"] = _run(tmp, "ft", "finetune", *c, *d, *m)
    codes["eval"], dirs["eval"] = _run(tmp, "eval", "eval", *c, *d, *m, "--subset", "all")
    codes["retrieve"], dirs["retrieve"] = _run(tmp, "ret", "retrieve", *c, *d, *m,
                                               "--subset", "all")
    codes["augment"], dirs["augment"] = _run(tmp, "aug", "augment", *c, *d, *m)
    codes["export"], dirs["export"] = _run(tmp, "emb", "export-embeddings", *c, *d, *m)
    codes["trace"], dirs["trace"] = _run(
        tmp, "trace", "silhouette-trace", *c, *d, "--checkpoint",
        str(dirs["finetune"] / "model.gfck"))
    codes["sweep"], dirs["sweep"] = _run(tmp, "sweep", "seq-sweep", *c, *d, "--n-clips", "1,3")
    return tmp, c, d, dirs, codes


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, _, _, _, codes = pipeline
        assert codes == dict.fromkeys(codes, 0)

    def test_config_echo(self, pipeline):
        _, _, _, dirs, _ = pipeline
        for run in dirs.values():
            echoed = load_config(run / "config.yaml")
            assert echoed.seed == 3 and echoed.model.clip_dim == 8

    def test_run_dir_names(self, pipeline):
        _, _, _, dirs, _ = pipeline
        assert dirs["train"].name.endswith("-train-seed3")

    def test_artifacts(self, pipeline):
        _, _, _, dirs, _ = pipeline
        assert (dirs["train"] / "model_best.gfck").exists()
        report = json.loads((dirs["eval"] / "report.json").read_text())
        assert 0 <= report["f1_w"] <= 1 and report["silhouette"] is not None
        assert (dirs["eval"] / "curves" / "summary.csv").exists()
        assert json.loads((dirs["retrieve"] / "retrieval.json").read_text())["k"] == 3
        rows = (dirs["augment"] / "augmented.jsonl").read_text().splitlines()
        first = json.loads(rows[0])
        assert first["augmented"] and "sequences" in first
        line = (dirs["export"] / "embeddings.tsv").read_text().splitlines()[0]
        assert len(line.split("\t")) == 1 + 12
        with open(dirs["trace"] / "silhouette_trace.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 1 + 3

    def test_seq_sweep_table(self, pipeline):
        _, _, _, dirs, _ = pipeline
        with open(dirs["sweep"] / "seq_sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["n_clips"] for r in rows] == ["1", "3"]
        assert {"f1_w", "mean_ap", "precision_w", "recall_w"} <= set(rows[0])

    def test_reproducible_bytes(self, pipeline):
        tmp, c, d, dirs, _ = pipeline
        code, again = _run(tmp, "train2", "train", *c, *d, "--sequence-head")
        assert code == 0
        assert (again / "model.gfck").read_bytes() == (dirs["train"] / "model.gfck").read_bytes()

    def test_untrained_model_near_random(self, pipeline):
        tmp, c, d, _, _ = pipeline
        base = yaml.safe_load(open(c[1]))
        base["train"].update(epochs=1, learning_rate=1e-12)
        cfg = tmp / "untrained.yaml"
        cfg.write_text(yaml.safe_dump(base))
        _, run = _run(tmp, "untrained", "train", "--config", str(cfg), *d)
        _, ev = _run(tmp, "untrained-eval", "eval", "--config", str(cfg), *d,
                     "--checkpoint", str(run / "model.gfck"), "--subset", "all")
        model = json.loads((ev / "report.json").read_text())
        rand = json.loads((ev / "random_baseline.json").read_text())
        assert abs(model["mean_ap"] - rand["mean_ap"]) < 0.2


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert main(["no-such-command"]) == 2
        assert main(["seq-sweep", "--n-clips", "a,b", "--out", str(tmp_path)]) == 2
        assert main(["eval", "--out", str(tmp_path)]) == 2  # --checkpoint is required

    def test_contract_violation(self, tmp_path, capsys):
        code = main(["split", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path)])
        assert code == 3
        assert "contract violation [corpus]" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("model:\n  widht: 3\n")
        assert main(["gradcheck", "--config", str(bad), "--out", str(tmp_path)]) == 3
        assert "widht" in capsys.readouterr().err

    def test_bad_threshold(self, tmp_path):
        assert main(["eval", "--checkpoint", "x", "--threshold", "1.5",
                     "--out", str(tmp_path)]) == 3

    def test_gradcheck_passes(self, tmp_path):
        code, run = _run(tmp_path, "gc", "gradcheck", "--seed", "0")
        assert code == 0
        data = json.loads((run / "gradcheck.json").read_text())
        assert data["max_rel_error"] < 1e-4 and "network[bce]" in data["checks"]

    def test_gradcheck_fails_on_tight_tolerance(self, tmp_path, capsys):
        cfg = tmp_path / "tight.yaml"
        cfg.write_text("gradcheck:\n  tolerance: 1.0e-12\n")
        assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path)]) == 4
        assert "numeric failure" in capsys.readouterr().err


class TestConfig:
    def test_defaults_and_round_trip(self, tmp_path):
        cfg = RunConfig()
        assert cfg.train.learning_rate == 3e-5 and cfg.finetune.warm_epochs == 10
        cfg.dump(tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            config_from_dict({"bogus": 1})
        with pytest.raises(ConfigurationError, match="lr"):
            config_from_dict({"train": {"lr": 1}})

    def test_estimator_params(self):
        params = config_from_dict(TINY_CONFIG).estimator_params()
        assert params["finetune_epochs"] == 3 and params["random_state"] == 3

    def test_run_dirs_never_reused(self, tmp_path):
        a = make_run_dir(tmp_path, "train", 1)
        b = make_run_dir(tmp_path, "train", 1)
        assert a != b and a.exists() and b.exists()
