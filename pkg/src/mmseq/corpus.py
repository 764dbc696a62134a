"""Shipped toy corpora: procedurally drawn images plus JSONL manifests.

``build_sample_corpus`` writes the 16-document pre-training corpus and
``build_task_corpus`` the 4-document fine-tuning task. Both are fully
deterministic; the package ships a generated copy under ``data/``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .codec import BBox
from .image import Image, write_netpbm

DATA_DIR = Path(__file__).parent / "data"
SAMPLE_CORPUS = DATA_DIR / "sample_corpus"
TASK_CORPUS = DATA_DIR / "task_corpus"

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}


def draw(height: int, width: int, background: str, shapes) -> Image:
    """Flat background plus axis-aligned rectangles ``(color, top, left, bottom, right)`` in pixels."""
    px = np.empty((height, width, 3))
    px[:] = COLORS[background]
    for color, t, l, b, r in shapes:
        px[t:b, l:r] = COLORS[color]
    return Image(np.round(px * 255) / 255)


def toy_image(k: int, size: int = 16) -> Image:
    """The k-th image of a family with distinct colours and layouts."""
    rng = np.random.default_rng(1000 + k)
    names = [n for n in COLORS if n != "black"]  # all-zero patches would give zero-norm features
    bg = names[k % len(names)]
    fg = [n for n in names if n != bg]
    shapes = []
    for j in range(2):
        h, w = rng.integers(3, size // 2 + 2, size=2)
        t, l = rng.integers(0, size - h), rng.integers(0, size - w)
        shapes.append((fg[(k + 2 * j + 1) % len(fg)], t, l, t + h, l + w))
    # a smooth ramp keeps neighbouring pixels correlated like a natural image
    img = draw(size, size, bg, shapes).pixels
    ramp = np.linspace(-0.08, 0.08, size)[:, None, None] * (1 if k % 2 else -1)
    return Image(np.round(np.clip(img + ramp, 0, 1) * 255) / 255)


def toy_images(n: int = 16, size: int = 16) -> list[Image]:
    return [toy_image(k, size) for k in range(n)]


def _box_of(shape, H, W) -> BBox:
    _, t, l, b, r = shape
    return BBox((l + r) / 2 / W, (t + b) / 2 / H, (r - l) / W, (b - t) / H)


def _write(out: Path, docs: list[dict], images: dict[str, Image]) -> Path:
    (out / "images").mkdir(parents=True, exist_ok=True)
    for ref, img in images.items():
        write_netpbm(out / ref, img)
    with open(out / "manifest.jsonl", "w") as fh:
        for d in docs:
            fh.write(json.dumps(d) + "\n")
    return out


def _text(s):
    return {"type": "text", "text": s}


def _image(ref, role="input"):
    return {"type": "image", "path": ref, "role": role}


def _boxed(s, boxes):
    return {"type": "boxed_text", "text": s, "boxes": [{"offset": o, "box": list(b.astuple())} for o, b in boxes]}


def build_sample_corpus(out_dir=SAMPLE_CORPUS) -> Path:
    """Sixteen documents: 4 text-only, 4 boxed captions, 4 with input images, 4 caption -> image.

    Every document starts with a different byte so that 100% next-token
    accuracy is achievable on the whole set.
    """
    out = Path(out_dir)
    images: dict[str, Image] = {}
    docs: list[dict] = []

    for s in ("A cat sat on the mat.", "Bright stars shine at night.",
              "Cold rain fell all day long.", "Dogs love to run in parks."):
        docs.append({"id": s[0], "items": [_text(s)]})

    # boxed captions (two of them grounded in an input image)
    sq = ("red", 2, 3, 10, 9)
    docs.append({"id": "E", "items": [_boxed("Eye at  and nose at .", [(7, BBox(0.3, 0.25, 0.1, 0.1)),
                                                                      (20, BBox(0.5, 0.55, 0.08, 0.2))])]})
    docs.append({"id": "F", "items": [_boxed("Flag: .", [(6, BBox(0.75, 0.2, 0.4, 0.25))])]})
    images["images/grounded_g.ppm"] = draw(16, 16, "white", [sq])
    docs.append({"id": "G", "items": [_text("Grounded: "), _image("images/grounded_g.ppm"),
                                      _boxed(" red square .", [(12, _box_of(sq, 16, 16))])]})
    bl = ("blue", 10, 2, 22, 14)
    images["images/grounded_h.ppm"] = draw(24, 16, "yellow", [bl])
    docs.append({"id": "H", "items": [_text("Here "), _image("images/grounded_h.ppm"),
                                      _boxed(" blue block .", [(12, _box_of(bl, 24, 16))])]})

    # input images with captions (dynamic resolution: 1x1, 2x1, 1x2 grids)
    for ref, img, pre, post in (
        ("images/in_i.ppm", draw(16, 16, "green", [("yellow", 4, 4, 12, 12)]), "In this picture ", " a yellow tile."),
        ("images/in_j.ppm", draw(24, 16, "black", [("white", 2, 2, 8, 14)]), "Just look: ", " white bar on black."),
        ("images/in_k.ppm", draw(16, 30, "blue", [("red", 4, 20, 12, 28)]), "Keep this one ", " red on the right."),
        ("images/in_l.ppm", draw(12, 12, "white", [("green", 0, 0, 6, 12)]), "Look ", " green top half."),
    ):
        images[ref] = img
        docs.append({"id": pre[0], "items": [_text(pre), _image(ref), _text(post)]})

    # caption -> image generation
    for k, (ref, cap, tail) in enumerate((
        ("images/gen_m.ppm", "Make a picture:", " done."),
        ("images/gen_n.ppm", "Now draw this:", ""),
        ("images/gen_o.ppm", "Output an image ", " ok"),
        ("images/gen_p.ppm", "Paint it:", "!"),
    )):
        images[ref] = toy_image(k)
        items = [_text(cap), _image(ref, "target")]
        if tail:
            items.append(_text(tail))
        docs.append({"id": cap[0], "items": items})
    return _write(out, docs, images)


def build_task_corpus(out_dir=TASK_CORPUS) -> Path:
    """Four instruction-style documents for adapter fine-tuning.

    Apart from each document's first byte, the text only uses characters that
    the sample corpus trains as targets: with the LM head frozen, a token the
    base never learned to emit cannot be recovered by adapters alone.
    """
    out = Path(out_dir)
    images = {
        "images/task_q.ppm": draw(16, 16, "black", [("red", 6, 6, 10, 10)]),
        "images/task_r.ppm": toy_image(5),
        "images/task_s.ppm": draw(16, 24, "white", [("blue", 0, 0, 16, 8)]),
    }
    sq = ("red", 6, 6, 10, 10)
    docs = [
        {"id": "Q", "items": [_text("Query: where is the red dot "), _image("images/task_q.ppm"),
                              _boxed(" it is at .", [(10, _box_of(sq, 16, 16))])]},
        {"id": "R", "items": [_text("Render scene five:"), _image("images/task_r.ppm", "target")]},
        {"id": "S", "items": [_text("Say the color: "), _image("images/task_s.ppm"), _text(" blue.")]},
        {"id": "T", "items": [_text("Tell me a story: a cat ran home.")]},
    ]
    return _write(out, docs, images)
