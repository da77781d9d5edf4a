"""Autoencoder labels and what they mean: reconstructions, PQAE labels from
kMeans on the latent, and image regions sharing a label trigram."""

import sys
from pathlib import Path

from textssl.dataset import synth_corpus
from textssl.labelgen import extract_features, fit_kmeans, generate_labels, sample_fit_set, train_autoencoder
from textssl.schedule import Schedule, Stage
from textssl.viz import dump_reconstructions, save_trigram_panel, trigram_matches

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/label_trigrams")
corpus = synth_corpus(64, "printed", seed=7)

ae, hist = train_autoencoder(corpus, schedule=Schedule((Stage(0, 300, 1e-3, 16),), warmup=20),
                             channels=(8, 16, 32, 32), latent_dim=32)
print(f"held-out MSE {hist['initial_mse']:.4f} -> {hist['final_mse']:.4f}")
dump_reconstructions(ae, [e.image for e in corpus.entries[:4]], out / "recon")

codebook = fit_kmeans(sample_fit_set(extract_features(ae, corpus), 32), 32, epochs=10)
labels = generate_labels("pqae", corpus, {"autoencoder": ae, "codebook": codebook})
first = corpus.entries[0]
print(first.text)
print(" ".join(map(str, labels[first.id][:24])), "...")

# the trigram under the middle of the first line
pos = first.image.frames // 2
hits = trigram_matches(labels, corpus, first.id, pos, max_hits=12)
print(f"trigram {labels[first.id][pos:pos + 3].tolist()}: {len(hits)} hits")
print("panel", save_trigram_panel(hits, corpus, out / "trigrams.png"))
