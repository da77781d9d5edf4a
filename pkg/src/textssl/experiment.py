"""Config-driven runner: optional pre-training, fine-tuning on nested subsets
of the target corpus, evaluation and a summary table.

Config files are YAML. Minimal example::

    name: fq-vggt
    method: fq                 # scratch | transfer | fq | vqvae | pqae | vicreg | ntxent
    backbone: vggt             # vggt | vit
    seed: 0
    scale: 0.01                # multiplies every iteration count of the training table
    budgets: [100, 1000]
    corpora:
      target: {synthetic: {n: 1200, style: cursive, seed: 1}}
      test:   {synthetic: {n: 200, style: cursive, seed: 2}}
      source: {manifest: data/source/manifest.tsv}

See ``ExperimentConfig`` for every key and its default.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .augment import AugmentConfig
from .backbone import HeadSpec, ModelConfig, build_model, load_checkpoint, replace_head, save_checkpoint
from .dataset import Charset, Corpus, load_manifest, subset, synth_corpus
from .labelgen import (fit_kmeans, frame_encoder, extract_features, generate_labels, sample_fit_set,
                       save_autoencoder, train_autoencoder)
from .ocr import EvalReport, evaluate, train_ocr
from .pretrain import JointConfig, probe_set, train_joint, train_masked
from .schedule import MetricsStream, Schedule, schedule_from_table

log = logging.getLogger(__name__)

METHODS = ("scratch", "transfer", "fq", "vqvae", "pqae", "vicreg", "ntxent")
BACKBONES = ("vggt", "vit")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts written so far are left in place."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    method: str
    corpora: dict
    name: str = "experiment"
    backbone: str = "vggt"
    seed: int = 0
    scale: float = 0.01
    batch_scale: float = 1.0
    max_batch: Optional[int] = 16
    budgets: list = field(default_factory=lambda: [100, 1000, 10000])
    model: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    masked: dict = field(default_factory=dict)
    joint: dict = field(default_factory=dict)
    schedules: dict = field(default_factory=dict)
    augmentation: Optional[str] = None

    LABEL_DEFAULTS = {"k": 512, "kmeans_epochs": 100, "per_class": 100, "normalize": False,
                      "codebook_size": 512, "ae_channels": [16, 32, 64, 64], "latent_dim": 64,
                      "crop_width": 256, "fq_encoder": None}
    MASKED_DEFAULTS = {"p": 0.2, "crop_width": 512}
    JOINT_DEFAULTS = {"crop_width": 512, "temperature": 0.1, "shift": True, "head": None, "probe": 16}

    def __post_init__(self):
        self.method = str(self.method).lower()
        self.backbone = str(self.backbone).lower()
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if not self.budgets or any(int(b) < 1 for b in self.budgets):
            raise ConfigError("budgets must be positive line counts")
        self.budgets = [int(b) for b in self.budgets]
        for key, defaults in (("labels", self.LABEL_DEFAULTS), ("masked", self.MASKED_DEFAULTS),
                              ("joint", self.JOINT_DEFAULTS)):
            given = getattr(self, key) or {}
            unknown = set(given) - set(defaults)
            if unknown:
                raise ConfigError(f"unknown {key} keys: {sorted(unknown)}")
            setattr(self, key, {**defaults, **given})
        for required in ("target", "test"):
            if required not in self.corpora:
                raise ConfigError(f"corpora.{required} is required")
        needs_source = self.method == "transfer" or (self.method == "fq" and not self.labels["fq_encoder"])
        if needs_source and "source" not in self.corpora:
            raise ConfigError(f"method {self.method!r} needs corpora.source")
        for name, spec in self.corpora.items():
            _check_corpus_spec(name, spec)
        if self.labels["fq_encoder"] and not Path(self.labels["fq_encoder"]).exists():
            raise ConfigError(f"fq_encoder checkpoint not found: {self.labels['fq_encoder']}")
        unknown = set(self.schedules) - {"masked", "ae", "vicreg", "ntxent", "ocr_scratch", "ocr_finetune"}
        if unknown:
            raise ConfigError(f"unknown schedule phases: {sorted(unknown)}")
        if self.augmentation is not None:
            AugmentConfig.named(self.augmentation)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "method" not in d or "corpora" not in d:
            raise ConfigError("config needs 'method' and 'corpora'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        base = Path(path).resolve().parent
        for spec in (data.get("corpora") or {}).values():
            if isinstance(spec, dict) and "manifest" in spec:
                spec["manifest"] = str((base / spec["manifest"]).resolve())
        lab = data.get("labels") or {}
        if lab.get("fq_encoder"):
            lab["fq_encoder"] = str((base / lab["fq_encoder"]).resolve())
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def model_config(self, head: Optional[HeadSpec] = None) -> ModelConfig:
        d = dict(self.model, backbone=self.backbone)
        cfg = ModelConfig.from_dict(d)
        return cfg if head is None else dataclasses.replace(cfg, head=head)

    def schedule(self, phase: str) -> Schedule:
        override = self.schedules.get(phase)
        if override:
            return Schedule.from_dict(override)
        return schedule_from_table(phase, self.scale, self.batch_scale, self.max_batch)


def _check_corpus_spec(name, spec):
    if not isinstance(spec, dict) or len(spec) != 1 or next(iter(spec)) not in ("manifest", "synthetic"):
        raise ConfigError(f"corpora.{name} must be {{manifest: PATH}} or {{synthetic: {{...}}}}")
    if "manifest" in spec and not Path(spec["manifest"]).exists():
        raise ConfigError(f"corpora.{name}: manifest not found: {spec['manifest']}")
    if "synthetic" in spec and "n" not in spec["synthetic"]:
        raise ConfigError(f"corpora.{name}.synthetic needs n")


def load_corpus(name: str, spec: dict) -> Corpus:
    if "manifest" in spec:
        return load_manifest(spec["manifest"], name=name)
    s = dict(spec["synthetic"])
    return synth_corpus(s.pop("n"), name=name, **s)


def _joint_head(config: ExperimentConfig, phase: str) -> HeadSpec:
    h = config.joint["head"]
    if h:
        return HeadSpec(**h)
    return HeadSpec.mlp(3, 2048) if phase == "vicreg" else HeadSpec.linear(2048)


class _Run:
    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.iterations = {}

    def stage(self, name, fn, *args, **kwargs):
        log.info("stage %s", name)
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e

    def metrics(self, name):
        return MetricsStream(self.out / "metrics" / f"{name}.jsonl")

    def corpora(self):
        cfg = self.config
        raw = {name: load_corpus(name, spec) for name, spec in cfg.corpora.items()}
        # one symbol inventory shared by every annotated corpus
        texts = [e.text for c in raw.values() for e in c if e.text is not None]
        charset = Charset.from_texts(texts)
        self.data = {n: (c.with_charset(charset) if c.annotated else c) for n, c in raw.items()}
        self.charset = charset
        largest = max(cfg.budgets)
        if largest > len(self.data["target"]):
            raise ConfigError(f"budget {largest} exceeds the {len(self.data['target'])} target lines")
        if not self.data["target"].annotated or not self.data["test"].annotated:
            raise ConfigError("target and test corpora must be annotated")

    @property
    def unlabeled(self) -> Corpus:
        return self.data.get("unlabeled", self.data["target"])

    def _ocr_source(self, tag: str):
        cfg = self.config
        model = build_model(cfg.model_config(HeadSpec.linear(self.charset.num_classes)), seed=cfg.seed)
        sched = cfg.schedule("ocr_scratch")
        model, hist = train_ocr(model, self.data["source"], sched, self._aug(), val=self.data.get("val"),
                                seed=cfg.seed, metrics=self.metrics(tag), checkpoint_dir=self.out / tag)
        self.iterations[tag] = (hist["iterations"], sched.total_iterations)
        save_checkpoint(model, self.out / "checkpoints" / f"{tag}.pt")
        return model

    def _aug(self):
        return self.config.augmentation or "all"

    def _masked(self, manifest):
        cfg = self.config
        manifest.save(self.out / "labels" / f"{cfg.method}.tsv")
        model = build_model(cfg.model_config(HeadSpec.linear(manifest.k)), seed=cfg.seed)
        sched = cfg.schedule("masked")
        hist = train_masked(model, self.unlabeled, manifest, sched, p=cfg.masked["p"],
                            crop_width=cfg.masked["crop_width"], seed=cfg.seed, metrics=self.metrics("masked"))
        self.iterations["masked"] = (hist["iterations"], sched.total_iterations)
        return model

    def _codebook(self, encoder, tag):
        lab = self.config.labels
        store = extract_features(encoder, self.unlabeled)
        sample = sample_fit_set(store, lab["k"], self.config.seed, lab["per_class"])
        cb = fit_kmeans(sample, lab["k"], epochs=lab["kmeans_epochs"], seed=self.config.seed,
                        normalize=lab["normalize"])
        cb.save(self.out / "labels" / f"{tag}_codebook.npz")
        return cb

    def _autoencoder(self, quantized: bool):
        cfg, lab = self.config, self.config.labels
        sched = cfg.schedule("ae")
        ae, hist = train_autoencoder(self.unlabeled, quantized, lab["codebook_size"], sched,
                                     held_out=self.data.get("val"), seed=cfg.seed,
                                     channels=tuple(lab["ae_channels"]), latent_dim=lab["latent_dim"],
                                     crop_width=lab["crop_width"], metrics=self.metrics("ae"))
        self.iterations["ae"] = (hist["iterations"], sched.total_iterations)
        save_autoencoder(ae, self.out / "checkpoints" / "autoencoder.pt")
        return ae

    def pretrain(self) -> Optional[torch.nn.Module]:
        cfg = self.config
        m = cfg.method
        if m == "scratch":
            return None
        if m == "transfer":
            return self.stage("transfer", self._ocr_source, "transfer")
        if m == "fq":
            if cfg.labels["fq_encoder"]:
                proxy = load_checkpoint(cfg.labels["fq_encoder"])
            else:
                proxy = self.stage("proxy_ocr", self._ocr_source, "proxy_ocr")
            encoder = frame_encoder(proxy)
            cb = self.stage("kmeans", self._codebook, encoder, "fq")
            manifest = self.stage("labels", generate_labels, "fq", self.unlabeled,
                                  {"encoder": encoder, "codebook": cb})
            return self.stage("masked", self._masked, manifest)
        if m in ("vqvae", "pqae"):
            ae = self.stage("autoencoder", self._autoencoder, m == "vqvae")
            assets = {"autoencoder": ae}
            if m == "pqae":
                assets["codebook"] = self.stage("kmeans", self._codebook, ae, "pqae")
            manifest = self.stage("labels", generate_labels, m, self.unlabeled, assets)
            return self.stage("masked", self._masked, manifest)
        return self.stage(m, self._joint, m)

    def _joint(self, phase):
        cfg = self.config
        j = cfg.joint
        sched = cfg.schedule(phase)
        model = build_model(cfg.model_config(_joint_head(cfg, phase)), seed=cfg.seed)
        jc = JointConfig(criterion=phase, temperature=j["temperature"], crop_width=j["crop_width"],
                         crop_doubling_step=sched.crop_doubling_step, shift=j["shift"])
        probe = probe_set(self.unlabeled, j["probe"], 128, cfg.seed) if j["probe"] else None
        hist = train_joint(model, self.unlabeled, sched, jc, seed=cfg.seed, probe=probe,
                           metrics=self.metrics(phase))
        self.iterations[phase] = (hist["iterations"], sched.total_iterations)
        save_checkpoint(model, self.out / "checkpoints" / "pretrained.pt")
        return model

    def finetune(self, pretrained, budget: int) -> EvalReport:
        cfg = self.config
        tag = f"budget_{budget}"
        train = subset(self.data["target"], budget, seed=cfg.seed, name=f"target-{budget}")
        if pretrained is None:
            model = build_model(cfg.model_config(HeadSpec.linear(self.charset.num_classes)), seed=cfg.seed)
            sched = cfg.schedule("ocr_scratch")
        else:
            model = copy.deepcopy(pretrained)
            replace_head(model, HeadSpec.linear(self.charset.num_classes), seed=cfg.seed)
            sched = cfg.schedule("ocr_finetune")
        model, hist = train_ocr(model, train, sched, self._aug(), val=self.data.get("val"), seed=cfg.seed,
                                new_head=False, metrics=self.metrics(tag), checkpoint_dir=self.out / tag)
        self.iterations[tag] = (hist["iterations"], sched.total_iterations)
        report = evaluate(model, self.data["test"])
        (self.out / tag).mkdir(parents=True, exist_ok=True)
        (self.out / tag / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        report.write_predictions(self.out / tag / "predictions.tsv")
        return report


def summary_rows(config: ExperimentConfig, results: dict) -> list[tuple]:
    return [(config.method, config.backbone, b, results[b].cer) for b in config.budgets]


def format_summary(rows) -> tuple[str, str]:
    """(tab-separated text, aligned human-readable table)."""
    tsv = "method\tbackbone\tbudget\tCER\n" + "".join(f"{m}\t{b}\t{n}\t{c:.6f}\n" for m, b, n, c in rows)
    head = f"{'method':<10} {'backbone':<8} {'budget':>7} {'CER %':>8}"
    body = [f"{m:<10} {b:<8} {n:>7} {100 * c:>8.2f}" for m, b, n, c in rows]
    return tsv, "\n".join([head, "-" * len(head), *body]) + "\n"


def run_experiment(config, out_dir) -> dict:
    """Run the whole pipeline; returns ``{budget: EvalReport}``.

    ``out_dir`` receives ``config.yaml`` (the resolved config, usable to
    rerun), ``metrics/*.jsonl``, checkpoints, per-budget reports and
    ``summary.tsv`` / ``summary.txt``.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config) if isinstance(config, dict) else ExperimentConfig.load(config)
    run = _Run(config, out_dir)
    config.dump(run.out / "config.yaml")
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)
    run.stage("data", run.corpora)
    pretrained = run.pretrain()
    results = {}
    for b in config.budgets:
        results[b] = run.stage(f"finetune_{b}", run.finetune, pretrained, b)
    tsv, table = format_summary(summary_rows(config, results))
    (run.out / "summary.tsv").write_text(tsv)
    (run.out / "summary.txt").write_text(table)
    (run.out / "iterations.json").write_text(
        json.dumps({k: {"done": d, "scheduled": s} for k, (d, s) in run.iterations.items()}, indent=2) + "\n")
    return results


def read_summary(path) -> list[tuple]:
    rows = []
    with open(path) as f:
        next(f)
        for raw in f:
            m, b, n, c = raw.rstrip("\n").split("\t")
            rows.append((m, b, int(n), float(c)))
    return rows
