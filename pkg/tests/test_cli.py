import json

import pytest
import yaml

from textssl import __version__
from textssl.cli import main

from conftest import TINY

MODEL = {**TINY, "conv_channels": list(TINY["conv_channels"])}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "synth", "--n", "6", "--seed", "1", "--out", str(d / "train")]) == 0
    assert main(["dataset", "synth", "--lines", "3", "--seed", "2", "--out", str(d / "test")]) == 0
    (d / "model.yaml").write_text(yaml.safe_dump(MODEL))
    return d


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0 and __version__ in capsys.readouterr().out


def test_subset(ws):
    assert main(["dataset", "subset", str(ws / "train" / "manifest.tsv"), "--n", "4", "--out", str(ws / "sub")]) == 0
    assert len((ws / "sub" / "manifest.tsv").read_text().splitlines()) == 4


def test_ocr_train_eval_describe(ws, capsys):
    out = ws / "ocr"
    assert main(["ocr", "train", "--backbone", "vit", "--model-config", str(ws / "model.yaml"),
                 "--train", str(ws / "train" / "manifest.tsv"), "--out", str(out), "--scale", "1e-5"]) == 0
    ckpt = next(out.glob("*.pt"))
    capsys.readouterr()
    assert main(["ocr", "eval", str(ckpt), "--corpus", str(ws / "test" / "manifest.tsv"),
                 "--json", str(ws / "r.json"), "--predictions", str(ws / "p.tsv")]) == 0
    rep = json.loads((ws / "r.json").read_text())
    assert 0 <= rep["cer"] and rep["corpus"] == "test"
    assert len((ws / "p.tsv").read_text().splitlines()) == 3
    assert main(["ocr", "finetune", str(ckpt), "--train", str(ws / "train" / "manifest.tsv"),
                 "--out", str(ws / "ft"), "--scale", "1e-5"]) == 0
    assert main(["model", "describe", str(ckpt)]) == 0
    assert "vit" in capsys.readouterr().out


def test_autoencoder_labels_and_viz(ws):
    m = str(ws / "train" / "manifest.tsv")
    assert main(["labels", "train-ae", "--corpus", m, "--vq", "--codebook", "4", "--scale", "1e-5",
                 "--out", str(ws / "ae.pt")]) == 0
    assert main(["labels", "generate", "--method", "vqvae", "--corpus", m, "--autoencoder", str(ws / "ae.pt"),
                 "--out", str(ws / "vq.tsv")]) == 0
    assert main(["labels", "fit-kmeans", "--encoder", str(ws / "ae.pt"), "--corpus", m, "--k", "3",
                 "--epochs", "2", "--out", str(ws / "cb.npz")]) == 0
    assert main(["labels", "generate", "--method", "pqae", "--corpus", m, "--autoencoder", str(ws / "ae.pt"),
                 "--codebook", str(ws / "cb.npz"), "--out", str(ws / "pq.tsv")]) == 2
    assert main(["viz", "recon", "--autoencoder", str(ws / "ae.pt"), "--corpus", m, "--n", "2",
                 "--out", str(ws / "recon")]) == 0
    assert len(list((ws / "recon").glob("*.png"))) == 2
    first = (ws / "vq.tsv").read_text().split("\t")[0]
    assert main(["viz", "trigrams", "--labels", str(ws / "vq.tsv"), "--corpus", m, "--line", first,
                 "--position", "0", "--out", str(ws / "tri.png")]) == 0
    assert (ws / "tri.png").exists()


def test_pretrain_masked_and_joint(ws):
    m = str(ws / "train" / "manifest.tsv")
    assert main(["labels", "train-ae", "--corpus", m, "--scale", "1e-5", "--out", str(ws / "ae2.pt")]) == 0
    assert main(["labels", "fit-kmeans", "--encoder", str(ws / "ae2.pt"), "--corpus", m, "--k", "3",
                 "--epochs", "1", "--out", str(ws / "cb2.npz")]) == 0
    assert main(["labels", "generate", "--method", "pqae", "--corpus", m, "--autoencoder", str(ws / "ae2.pt"),
                 "--codebook", str(ws / "cb2.npz"), "--out", str(ws / "lab.tsv")]) == 0
    sched = {"stages": [{"start": 0, "end": 3, "lr": 1e-3, "batch_size": 2}]}
    (ws / "pm.yaml").write_text(yaml.safe_dump({"corpus": "train/manifest.tsv", "labels": "lab.tsv", "backbone": "vit",
                                               "model": MODEL, "schedule": sched, "crop_width": 64, "output": "pm"}))
    assert main(["pretrain", "masked", "--config", str(ws / "pm.yaml")]) == 0
    assert (ws / "pm" / "pretrained.pt").exists() and (ws / "pm" / "metrics.jsonl").exists()
    (ws / "pj.yaml").write_text(yaml.safe_dump({"corpus": "train/manifest.tsv", "criterion": "ntxent", "backbone": "vit",
                                               "model": MODEL, "schedule": sched, "crop_width": 32,
                                               "head": {"kind": "linear", "output_size": 8}, "output": "pj"}))
    assert main(["pretrain", "joint", "--config", str(ws / "pj.yaml")]) == 0
    assert main(["viz", "neighbors", "--checkpoint", str(ws / "pj" / "pretrained.pt"), "--corpus", m,
                 "--lines", "2", "-N", "3", "--crop-width", "64", "--out", str(ws / "nn")]) == 0
    assert len(list((ws / "nn").glob("*.png"))) == 2


def test_run(ws):
    cfg = {"method": "scratch", "backbone": "vit", "model": MODEL, "budgets": [3], "max_batch": 2,
           "corpora": {"target": {"manifest": "train/manifest.tsv"}, "test": {"manifest": "test/manifest.tsv"}}}
    (ws / "run.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["run", str(ws / "run.yaml"), "--scale", "1e-5", "--out", str(ws / "exp")]) == 0
    assert (ws / "exp" / "summary.tsv").read_text().startswith("method\tbackbone\tbudget\tCER\n")


def test_errors_return_nonzero(ws, capsys):
    assert main(["ocr", "eval", str(ws / "missing.pt"), "--corpus", str(ws / "test" / "manifest.tsv")]) == 2
    with pytest.raises(SystemExit) as e:
        main(["dataset", "synth", "--n", "2"])
    assert e.value.code == 2


def test_bundled_configs_validate():
    from textssl.cli import bundled_config
    from textssl.experiment import ExperimentConfig
    for name in ("scratch", "transfer", "fq", "vqvae", "pqae", "vicreg", "ntxent", "tiny"):
        ExperimentConfig.load(bundled_config(name))
    with pytest.raises(FileNotFoundError):
        bundled_config("nope")
