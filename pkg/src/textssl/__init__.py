"""Self-supervised pre-training for text-line recognition at desk scale.

Modules: ``dataset`` (corpora, synthetic rendering), ``augment``,
``backbone`` (ViT / VggT sequence models), ``labelgen`` (kMeans, VQ-VAE,
post-quantized AE labels), ``pretrain`` (masked label prediction, VICReg,
NT-Xent), ``ocr`` (CTC, decoding, CER), ``viz``, ``schedule`` and
``experiment`` (the config-driven runner behind the ``textssl`` command).
"""

__version__ = "0.1.0"

from .dataset import Charset, Corpus, LineImage, load_manifest, synth_corpus, write_manifest
from .backbone import HeadSpec, ModelConfig, SequenceModel, build_model, load_checkpoint, save_checkpoint
from .ocr import cer, ctc_loss, evaluate, greedy_decode, train_ocr
from .pretrain import collapse_probe, ntxent_loss, topk_error, vicreg_loss
from .experiment import ExperimentConfig, run_experiment

__all__ = [
    "Charset", "Corpus", "LineImage", "load_manifest", "synth_corpus", "write_manifest",
    "HeadSpec", "ModelConfig", "SequenceModel", "build_model", "load_checkpoint", "save_checkpoint",
    "cer", "ctc_loss", "evaluate", "greedy_decode", "train_ocr",
    "collapse_probe", "ntxent_loss", "topk_error", "vicreg_loss",
    "ExperimentConfig", "run_experiment",
]
