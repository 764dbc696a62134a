"""Token space: byte-level text, special tokens, and 224 location tokens.

Layout (487 ids, versioned as ``VOCAB_VERSION``)::

    0..255     byte tokens
    256..262   BOS, EOS, PAD, <IMG>, </IMG>, <box_start>, <box_end>
    263..486   LOC_0 .. LOC_223

A box is written ``<box_start> x_center y_center width height <box_end>``,
each coordinate quantised independently into the same 224 bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB_VERSION = 1
N_BYTES = 256
N_LOC = 224
SPECIALS = ("BOS", "EOS", "PAD", "IMG_START", "IMG_END", "BOX_START", "BOX_END")

BOS, EOS, PAD, IMG_START, IMG_END, BOX_START, BOX_END = range(N_BYTES, N_BYTES + len(SPECIALS))
LOC_BASE = N_BYTES + len(SPECIALS)
VOCAB_SIZE = LOC_BASE + N_LOC

SPECIAL_TEXT = {IMG_START: "<IMG>", IMG_END: "</IMG>", BOX_START: "<box_start>", BOX_END: "<box_end>",
                BOS: "<s>", EOS: "</s>", PAD: "<pad>"}


def loc_token(i: int) -> int:
    if not 0 <= i < N_LOC:
        raise ValueError(f"loc index {i} outside [0, {N_LOC - 1}]")
    return LOC_BASE + i


def is_byte(t: int) -> bool:
    return 0 <= t < N_BYTES


def is_special(t: int) -> bool:
    return N_BYTES <= t < LOC_BASE


def is_loc(t: int) -> bool:
    return LOC_BASE <= t < VOCAB_SIZE


def token_class(t: int) -> str:
    if is_byte(t):
        return "byte"
    if is_special(t):
        return "special"
    if is_loc(t):
        return "loc"
    raise ValueError(f"token id {t} outside vocabulary of size {VOCAB_SIZE}")


def token_name(t: int) -> str:
    if is_byte(t):
        return f"BYTE_{t}"
    if is_special(t):
        return SPECIALS[t - N_BYTES]
    if is_loc(t):
        return f"LOC_{t - LOC_BASE}"
    raise ValueError(f"token id {t} outside vocabulary of size {VOCAB_SIZE}")


def vocab_layout() -> str:
    """The text file shipped next to checkpoints."""
    lines = [f"# mmseq vocabulary v{VOCAB_VERSION}", f"size {VOCAB_SIZE}",
             f"bytes 0 {N_BYTES - 1}"]
    lines += [f"special {name} {N_BYTES + i}" for i, name in enumerate(SPECIALS)]
    lines.append(f"loc {LOC_BASE} {VOCAB_SIZE - 1}")
    return "\n".join(lines) + "\n"


def tokenize_text(s: bytes | str) -> list[int]:
    if isinstance(s, str):
        s = s.encode("utf-8")
    return list(s)


def detokenize(tokens) -> bytes:
    return bytes(t for t in tokens if is_byte(t))


def render(tokens) -> str:
    """Human-readable transcript; non-byte tokens appear as ``<NAME>``."""
    out = []
    buf = bytearray()
    for t in tokens:
        if is_byte(t):
            buf.append(t)
            continue
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
        out.append(SPECIAL_TEXT.get(t) or f"<{token_name(t).lower()}>")
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)


def quantize_coord(v: float) -> int:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"coordinate {v} outside [0, 1]")
    return min(int(np.floor(v * N_LOC)), N_LOC - 1)


def dequantize_coord(i: int) -> float:
    if not 0 <= i < N_LOC:
        raise ValueError(f"loc index {i} outside [0, {N_LOC - 1}]")
    return (i + 0.5) / N_LOC


@dataclass(frozen=True)
class BBox:
    x_center: float
    y_center: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("x_center", "y_center", "width", "height"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"BBox.{name}={v} outside [0, 1]")

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.x_center, self.y_center, self.width, self.height)

    def quantized(self) -> "BBox":
        """The box a decoder recovers after encoding: every coordinate snapped to its bin center."""
        return BBox(*(dequantize_coord(quantize_coord(v)) for v in self.astuple()))


def encode_box(b: BBox) -> list[int]:
    return [BOX_START, *(loc_token(quantize_coord(v)) for v in b.astuple()), BOX_END]


class BoxParseError(ValueError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed box span at {position}: {reason}")
        self.position = position
        self.reason = reason


def _scan_span(tokens, start: int):
    """Return (box, end_index) or raise BoxParseError for the span opening at ``start``."""
    locs = []
    j = start + 1
    while j < len(tokens):
        t = tokens[j]
        if t == BOX_END:
            if len(locs) != 4:
                raise BoxParseError(start, f"arity {len(locs)}, expected 4")
            return BBox(*(dequantize_coord(i) for i in locs)), j
        if t == BOX_START:
            raise BoxParseError(start, f"nested <box_start> at {j} before <box_end>")
        if not is_loc(t):
            raise BoxParseError(start, f"non-loc token {token_name(t)} at {j} inside box")
        locs.append(t - LOC_BASE)
        j += 1
    raise BoxParseError(start, "missing <box_end>")


def parse_box_spans(tokens, strict: bool = False):
    """Find every ``<box_start> loc*4 <box_end>`` span.

    Returns ``(boxes, errors)`` where boxes is a list of ``(position, BBox)``
    and errors a list of :class:`BoxParseError`. With ``strict=True`` the
    first malformed span is raised instead (dataset validation).
    A malformed span is skipped up to the next ``<box_start>``.
    """
    tokens = list(tokens)
    boxes: list[tuple[int, BBox]] = []
    errors: list[BoxParseError] = []
    i = 0
    while i < len(tokens):
        if tokens[i] == BOX_END:
            err = BoxParseError(i, "<box_end> without <box_start>")
            if strict:
                raise err
            errors.append(err)
            i += 1
            continue
        if tokens[i] != BOX_START:
            i += 1
            continue
        try:
            box, end = _scan_span(tokens, i)
        except BoxParseError as err:
            if strict:
                raise
            errors.append(err)
            i += 1
            while i < len(tokens) and tokens[i] not in (BOX_START,):
                if tokens[i] == BOX_END:
                    i += 1
                    break
                i += 1
            continue
        boxes.append((i, box))
        i = end + 1
    return boxes, errors


def encode_boxed_text(text: str, boxes: dict[int, BBox] | list[tuple[int, BBox]]) -> list[int]:
    """Byte-tokenize ``text`` and splice ``encode_box`` spans at byte offsets."""
    raw = text.encode("utf-8")
    items = sorted(boxes.items() if isinstance(boxes, dict) else boxes, key=lambda kv: kv[0])
    out: list[int] = []
    prev = 0
    for off, box in items:
        if not 0 <= off <= len(raw):
            raise ValueError(f"box offset {off} outside text of {len(raw)} bytes")
        out += list(raw[prev:off])
        out += encode_box(box)
        prev = off
    out += list(raw[prev:])
    return out
