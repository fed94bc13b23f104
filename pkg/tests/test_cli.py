"""Command-line behavior: exit codes, config handling, artifact outputs,
and reproducibility of the end-to-end flows."""

import os

import numpy as np
import pytest

from ctxalign import cli, data
from ctxalign import training

TINY_CONFIG = """\
# tiny setup for fast end-to-end runs
n_classes = 4
n_pairs = 24
d_img = 16
vocab_size = 64
tokens_per_caption = 6
class_token_block = 4
noise_sigma = 0.05
d_hid = 24
d_i = 20
d_emb = 12
d_t = 14
d_e = 8
epochs = 2
batch_size = 8
lr_image = 0.001
lr_text = 0.0001
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture()
def tiny_corpus(tmp_path, tiny_config):
    out = tmp_path / "gen"
    code = cli.main(["gen-data", "--config", tiny_config,
                     "--out", str(out)])
    assert code == cli.EXIT_OK
    return str(out / "corpus.jsonl")


@pytest.fixture()
def tiny_checkpoint(tmp_path, tiny_config, tiny_corpus):
    out = tmp_path / "run"
    code = cli.main(["train", "--config", tiny_config,
                     "--corpus", tiny_corpus, "--out", str(out)])
    assert code == cli.EXIT_OK
    return str(out / "checkpoint.txt")


class TestUsageErrors:
    def test_no_subcommand(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_unknown_flag(self):
        assert cli.main(["gen-data", "--bogus", "1"]) == cli.EXIT_USAGE

    def test_train_requires_corpus(self):
        assert cli.main(["train"]) == cli.EXIT_USAGE

    def test_fine_tune_requires_checkpoint(self, tiny_corpus):
        assert cli.main(["fine-tune", "--corpus", tiny_corpus]) == \
            cli.EXIT_USAGE


class TestDataErrors:
    def test_missing_corpus_file(self, tmp_path):
        code = cli.main(["train", "--corpus", str(tmp_path / "none.jsonl"),
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_corrupt_corpus(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        code = cli.main(["train", "--corpus", str(bad),
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_corrupt_checkpoint(self, tmp_path, tiny_config, tiny_corpus):
        bad = tmp_path / "bad_ckpt.txt"
        bad.write_text("format_version 99\n")
        code = cli.main(["eval-zeroshot", "--config", tiny_config,
                         "--corpus", tiny_corpus, "--checkpoint", str(bad),
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_compare_empty_corpus(self, tmp_path, tiny_config):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = cli.main(["compare", "--config", tiny_config,
                         "--corpus", str(empty), "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        assert cli.main(["gen-data", "--config", str(cfg),
                         "--out", str(tmp_path)]) == cli.EXIT_DATA


class TestReadConfig:
    def test_comments_and_overrides(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 7  # fast\n\nalpha = 0.25\n")
        values = cli.read_config(str(cfg))
        assert values == {"epochs": 7, "alpha": 0.25}

    def test_malformed_line(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs 7\n")
        with pytest.raises(data.CorpusFormatError, match="key=value"):
            cli.read_config(str(cfg))

    def test_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 7\nseed = 3\n")

        class Args:
            config = str(cfg)
            seed = 9
            alpha = None
            epochs = None
            k = None

        resolved = cli.resolve_config(Args())
        assert resolved["epochs"] == 7
        assert resolved["seed"] == 9


class TestGenData:
    def test_writes_loadable_corpus(self, tiny_corpus):
        corpus = data.load_corpus(tiny_corpus)
        assert len(corpus) == 24
        assert corpus.spec_d_img == 16

    def test_deterministic_bytes(self, tmp_path, tiny_config):
        paths = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["gen-data", "--config", tiny_config,
                             "--out", str(out)]) == cli.EXIT_OK
            paths.append(out / "corpus.jsonl")
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_seed_flag_changes_output(self, tmp_path, tiny_config):
        outs = []
        for seed in ("0", "1"):
            out = tmp_path / f"s{seed}"
            cli.main(["gen-data", "--config", tiny_config, "--seed", seed,
                      "--out", str(out)])
            outs.append((out / "corpus.jsonl").read_bytes())
        assert outs[0] != outs[1]


class TestTrain:
    def test_artifacts(self, tmp_path, tiny_config, tiny_corpus):
        out = tmp_path / "t"
        assert cli.main(["train", "--config", tiny_config,
                         "--corpus", tiny_corpus,
                         "--out", str(out)]) == cli.EXIT_OK
        assert (out / "checkpoint.txt").exists()
        assert (out / "loss_history.csv").exists()
        assert (out / "loss_curves.png").exists()
        lines = (out / "loss_history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,contrastive,contextual"
        assert len(lines) == 3  # header + 2 epochs

    def test_reproducible_checkpoint_bytes(self, tmp_path, tiny_config,
                                           tiny_corpus):
        blobs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            cli.main(["train", "--config", tiny_config,
                      "--corpus", tiny_corpus, "--out", str(out)])
            blobs.append((out / "checkpoint.txt").read_bytes())
        assert blobs[0] == blobs[1]

    def test_epochs_flag_overrides(self, tmp_path, tiny_config, tiny_corpus):
        out = tmp_path / "e1"
        cli.main(["train", "--config", tiny_config, "--corpus", tiny_corpus,
                  "--epochs", "1", "--out", str(out)])
        ckpt = training.load_checkpoint(out / "checkpoint.txt")
        assert ckpt.final_epoch == 1
        assert len(ckpt.history) == 1


class TestFineTune:
    def test_metrics_written(self, tmp_path, tiny_config, tiny_corpus,
                             tiny_checkpoint):
        out = tmp_path / "ft"
        assert cli.main(["fine-tune", "--config", tiny_config,
                         "--corpus", tiny_corpus,
                         "--checkpoint", tiny_checkpoint,
                         "--epochs", "1",
                         "--out", str(out)]) == cli.EXIT_OK
        text = (out / "finetune_metrics.csv").read_text()
        assert text.startswith("metric,value")
        assert "top1" in text and "top5" in text
        assert (out / "finetuned_checkpoint.txt").exists()


class TestGradCheck:
    def test_passes(self, capsys):
        assert cli.main(["grad-check", "--seed", "0"]) == cli.EXIT_OK
        assert "max relative gradient error" in capsys.readouterr().out

    def test_writes_affinity_report(self, tmp_path):
        out = tmp_path / "gc"
        assert cli.main(["grad-check", "--out", str(out)]) == cli.EXIT_OK
        text = (out / "affinity_report.txt").read_text()
        assert "# CX" in text


class TestEvalAndProject:
    def test_zeroshot_csv(self, tmp_path, tiny_config, tiny_corpus,
                          tiny_checkpoint):
        out = tmp_path / "zs"
        assert cli.main(["eval-zeroshot", "--config", tiny_config,
                         "--corpus", tiny_corpus,
                         "--checkpoint", tiny_checkpoint, "--k", "2",
                         "--out", str(out)]) == cli.EXIT_OK
        text = (out / "zeroshot.csv").read_text()
        assert text.startswith("metric,value")
        assert "top1" in text

    def test_retrieval_csv(self, tmp_path, tiny_config, tiny_corpus,
                           tiny_checkpoint):
        out = tmp_path / "ret"
        assert cli.main(["eval-retrieve", "--config", tiny_config,
                         "--corpus", tiny_corpus,
                         "--checkpoint", tiny_checkpoint, "--k", "5",
                         "--out", str(out)]) == cli.EXIT_OK
        text = (out / "retrieval.csv").read_text()
        assert "recall@1" in text and "recall@5" in text

    def test_projection_outputs(self, tmp_path, tiny_config, tiny_corpus,
                                tiny_checkpoint):
        out = tmp_path / "proj"
        assert cli.main(["project", "--config", tiny_config,
                         "--corpus", tiny_corpus,
                         "--checkpoint", tiny_checkpoint,
                         "--out", str(out)]) == cli.EXIT_OK
        lines = (out / "projection.csv").read_text().splitlines()
        assert lines[0] == "id,class,x,y"
        assert len(lines) == 25  # header + 24 records
        assert (out / "projection.png").exists()

    def test_projection_csv_reproducible(self, tmp_path, tiny_config,
                                         tiny_corpus, tiny_checkpoint):
        blobs = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            cli.main(["project", "--config", tiny_config,
                      "--corpus", tiny_corpus,
                      "--checkpoint", tiny_checkpoint, "--out", str(out)])
            blobs.append((out / "projection.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestCompare:
    def test_comparison_outputs(self, tmp_path, tiny_config, tiny_corpus):
        out = tmp_path / "cmp"
        assert cli.main(["compare", "--config", tiny_config,
                         "--corpus", tiny_corpus, "--epochs", "1",
                         "--out", str(out)]) == cli.EXIT_OK
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0].startswith("metric,alpha0,alpha")
        metrics = {line.split(",")[0] for line in lines[1:]}
        assert metrics == {"recall@1", "zeroshot_top1", "zeroshot_top5"}
        assert (out / "comparison.png").exists()


class TestEntrypoint:
    def test_module_invocation(self, tmp_path, tiny_config):
        import subprocess
        import sys
        out = tmp_path / "m"
        proc = subprocess.run(
            [sys.executable, "-m", "ctxalign", "gen-data",
             "--config", tiny_config, "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert (out / "corpus.jsonl").exists()

    def test_module_usage_error_code(self):
        import subprocess
        import sys
        proc = subprocess.run([sys.executable, "-m", "ctxalign"],
                              capture_output=True, text=True)
        assert proc.returncode == 1
