# # Training, generating and drawing
#
# A shortened run of the whole loop on the bundled sample corpus: pretrain a
# small model, let it continue a prompt, then train the image decoder and
# turn regressed features back into pixels. The full recipes under
# src/mmseq/recipes use more steps and a larger model.

import tempfile
from pathlib import Path

import numpy as np

from mmseq import codec
from mmseq import detok as D
from mmseq.corpus import SAMPLE_CORPUS, toy_images
from mmseq.mllm import ImageFeatures, TokenEvent, generate, prompt_from_tokens
from mmseq.trainer import TrainConfig, evaluate, load_packed, pretrain
from mmseq.vitsim import VisualTokenizer

out = Path(tempfile.mkdtemp())
cfg = TrainConfig(corpus=str(SAMPLE_CORPUS / "manifest.jsonl"), out_dir=str(out / "pretrain"),
                  steps=150, model_dim=32, n_layers=1, n_heads=2)
run = pretrain(cfg)
print("first/last loss:", round(run.metrics[0]["total"], 3), round(run.metrics[-1]["total"], 3))

seqs = load_packed(cfg.corpus, VisualTokenizer(cfg.vit_config()))
print({k: round(v, 3) for k, v in evaluate(run.model, seqs).items()})

# ## Greedy generation
#
# Decoding stops at EOS. After an image start marker the model emits 64
# regressed feature vectors instead of a token.

events = generate(run.model, prompt_from_tokens(codec.tokenize_text("A cat")), max_new=40)
print("A cat" + codec.render([e.id for e in events if isinstance(e, TokenEvent)]))

# ## From features to pixels
#
# The decoder denoises a small latent grid conditioned on 64 visual features.

vit = VisualTokenizer()
data = [D.DetokExample(vit.tokenize(im).embeddings, im, im) for im in toy_images(16)]
detok = D.Detokenizer()
metrics = D.train_detok(detok, data, steps=150, seed=0)
print("decoder loss:", round(metrics[0]["loss"], 3), "->", round(metrics[-1]["loss"], 3))
print("latent mse:", round(D.reconstruction_mse(detok, data), 3),
      "vs predicting the mean latent:", round(D.mean_latent_baseline(detok, data), 3))

# The sample corpus teaches one prompt to answer with an image.

events = generate(run.model, prompt_from_tokens(codec.tokenize_text("Make a picture:")), max_new=4)
print("events:", [type(e).__name__ for e in events])
feats = [e.features for e in events if isinstance(e, ImageFeatures)]
if feats:
    img = detok.decode(feats[0], seed=0)
    print("decoded image", img.pixels.shape, "mean colour", np.round(img.pixels.mean(axis=(0, 1)), 3))
