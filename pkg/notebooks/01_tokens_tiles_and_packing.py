# # Tokens, tiles and packed sequences
#
# A walk through the data side: byte tokens with location ids for boxes,
# the grid an image is cut into, and how a document turns into one flat
# sequence of token, visual and query positions.

import numpy as np

from mmseq import codec, dynres
from mmseq.corpus import SAMPLE_CORPUS, toy_image
from mmseq.seqpack import ImageItem, MultimodalDocument, TextItem, collate, dir_resolver, pack, read_manifest
from mmseq.vitsim import VisualTokenizer

# ## Text and boxes
#
# Text is plain UTF-8 bytes. A box is four location ids between two markers.

toks = codec.tokenize_text("A red square ") + codec.encode_box(codec.BBox(0.25, 0.3, 0.2, 0.2))
print(codec.render(toks))
boxes, errors = codec.parse_box_spans(toks)
print("decoded:", boxes[0][1], "errors:", errors)

# Each coordinate lands on one of 224 bins, so the round trip error stays below half a bin.

xs = np.random.default_rng(0).random(1000)
err = np.abs([codec.dequantize_coord(codec.quantize_coord(x)) - x for x in xs]).max()
print(f"worst coordinate error {err:.5f} (half a bin is {0.5 / codec.N_LOC:.5f})")

# ## Picking a grid
#
# A 500x300 image with 224 pixel tiles gets the smallest grid that covers it.

plan = dynres.plan_grid(300, 500)
print(plan.n_h, "x", plan.n_w, "tiles, canvas", plan.upsampled_size)
for cell in plan.cells:
    print(f"  cell {cell.row},{cell.col} center=({cell.center[0]:.3f}, {cell.center[1]:.3f})")

# ## Packing a document

vit = VisualTokenizer()
doc = MultimodalDocument((TextItem("Look: "), ImageItem("a"), TextItem(" then draw "), ImageItem("b", role="target")))
seq = pack(doc, vit, {"a": toy_image(3), "b": toy_image(4)}, eos=True)
kinds = seq.position_kinds()
print("length", seq.total_len, {k: kinds.count(k) for k in set(kinds)})
print("regression targets:", [(i, t.shape) for i, t in seq.regression_targets])

# The bundled corpus packs the same way; a batch pads everything to one length.

docs = read_manifest(SAMPLE_CORPUS / "manifest.jsonl")
seqs = [pack(d, vit, dir_resolver(SAMPLE_CORPUS), eos=True) for d in docs]
batch = collate(seqs, d_v=vit.embed_dim)
print("batch", batch.shape, "trainable tokens", int(batch.lm_mask.sum()))
