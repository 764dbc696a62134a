"""Interleaved documents -> packed training sequences -> padded batches.

A packed sequence is a list of segments:

* ``TokenSegment``  - byte, box, loc and special tokens;
* ``VisualSegment`` - 64 embedding rows per tile of an input image
  (row-major sub-images, then the global tile);
* ``QuerySegment``  - 64 generation slots, always framed by ``<IMG>`` and
  ``</IMG>`` and paired with one regression target.

``lm_targets[p]`` is the id the model must predict at position ``p`` (the
next token) or ``None``. Visual and query positions never carry one, and
only text, loc, box and ``<IMG>`` tokens are ever targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

import numpy as np

from . import codec, kernel
from .codec import BBox
from .dynres import partition, upsample
from .image import Image, read_netpbm
from .vitsim import N_POOLED, VisualTokenizer, vit_tokenize

# ---------------------------------------------------------------------------
# documents


@dataclass(frozen=True)
class TextItem:
    text: str


@dataclass(frozen=True)
class ImageItem:
    ref: str
    role: str = "input"

    def __post_init__(self):
        if self.role not in ("input", "target"):
            raise ValueError(f"image role must be 'input' or 'target', got {self.role!r}")


@dataclass(frozen=True)
class BoxedTextItem:
    text: str
    boxes: tuple[tuple[int, BBox], ...] = ()


Item = Union[TextItem, ImageItem, BoxedTextItem]


@dataclass(frozen=True)
class MultimodalDocument:
    items: tuple
    doc_id: str = ""


class IngestionError(ValueError):
    pass


def document_from_json(obj: dict, doc_id: str = "") -> MultimodalDocument:
    items = []
    for k, it in enumerate(obj.get("items", [])):
        kind = it.get("type")
        if kind == "text":
            items.append(TextItem(it["text"]))
        elif kind == "image":
            items.append(ImageItem(it["path"], it.get("role", "input")))
        elif kind == "boxed_text":
            boxes = tuple((int(b["offset"]), BBox(*b["box"])) for b in it.get("boxes", []))
            items.append(BoxedTextItem(it["text"], boxes))
        else:
            raise IngestionError(f"item {k}: unknown type {kind!r}")
    return MultimodalDocument(tuple(items), obj.get("id", doc_id))


def document_to_json(doc: MultimodalDocument) -> dict:
    items = []
    for it in doc.items:
        if isinstance(it, TextItem):
            items.append({"type": "text", "text": it.text})
        elif isinstance(it, ImageItem):
            items.append({"type": "image", "path": it.ref, "role": it.role})
        else:
            items.append({"type": "boxed_text", "text": it.text,
                          "boxes": [{"offset": o, "box": list(b.astuple())} for o, b in it.boxes]})
    out = {"items": items}
    if doc.doc_id:
        out["id"] = doc.doc_id
    return out


def read_manifest(path) -> list[MultimodalDocument]:
    """One JSON document per line; errors carry the 1-based line number."""
    docs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(document_from_json(json.loads(line), doc_id=f"line{lineno}"))
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    return docs


def dir_resolver(base) -> Callable[[str], Image]:
    base = Path(base)
    cache: dict[str, Image] = {}

    def resolve(ref: str) -> Image:
        if ref not in cache:
            p = base / ref
            if not p.is_file():
                raise IngestionError(f"unresolvable image ref {ref!r} (looked for {p})")
            try:
                cache[ref] = read_netpbm(p)
            except ValueError as exc:
                raise IngestionError(f"unreadable image ref {ref!r}: {exc}") from exc
        return cache[ref]

    return resolve


# ---------------------------------------------------------------------------
# packed sequences


@dataclass
class TokenSegment:
    tokens: list[int]

    def __len__(self):
        return len(self.tokens)


@dataclass
class VisualSegment:
    embeddings: np.ndarray  # [64 * n_tiles, d_v]
    centers: list[tuple[float, float]]  # one per tile, global tile last
    source: str = ""

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def n_tiles(self) -> int:
        return len(self.centers)


@dataclass
class QuerySegment:
    n_slots: int = N_POOLED

    def __len__(self):
        return self.n_slots


@dataclass
class PackedSequence:
    segments: list
    lm_targets: list
    regression_targets: list  # (segment index, [64, d_v] array)
    doc_id: str = ""

    @property
    def total_len(self) -> int:
        return sum(len(s) for s in self.segments)

    def position_kinds(self) -> list[str]:
        kinds = []
        for s in self.segments:
            kinds += [_KIND[type(s)]] * len(s)
        return kinds

    def tokens(self) -> list[int | None]:
        out: list[int | None] = []
        for s in self.segments:
            out += list(s.tokens) if isinstance(s, TokenSegment) else [None] * len(s)
        return out

    def query_segment_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if isinstance(s, QuerySegment)]


_KIND = {TokenSegment: "token", VisualSegment: "visual", QuerySegment: "query"}


def is_lm_trainable(t: int) -> bool:
    """Token classes that appear as next-token targets (EOS only when documents are terminated)."""
    return codec.is_byte(t) or codec.is_loc(t) or t in (codec.BOX_START, codec.BOX_END, codec.IMG_START, codec.EOS)


def next_token_targets(segments) -> list[int | None]:
    """Target at p is the token at p+1 when both positions hold tokens and that token is trainable."""
    toks: list[int | None] = []
    for s in segments:
        toks += list(s.tokens) if isinstance(s, TokenSegment) else [None] * len(s)
    targets: list[int | None] = [None] * len(toks)
    for p in range(len(toks) - 1):
        nxt = toks[p + 1]
        if toks[p] is not None and nxt is not None and is_lm_trainable(nxt):
            targets[p] = nxt
    return targets


def _merge_tokens(segments: list, tokens: list[int]):
    if not tokens:
        return
    if segments and isinstance(segments[-1], TokenSegment):
        segments[-1].tokens.extend(tokens)
    else:
        segments.append(TokenSegment(list(tokens)))


def encode_input_image(img: Image, vit: VisualTokenizer, source: str = "") -> VisualSegment:
    tile = vit.cfg.tile
    plan, subs, glob = partition(img, tile, tile)
    rows = [vit_tokenize(t, vit).embeddings for t in subs]
    rows.append(vit_tokenize(glob, vit).embeddings)
    centers = [c.center for c in plan.cells] + [(0.5, 0.5)]
    return VisualSegment(np.concatenate(rows, axis=0), centers, source)


def target_features(img: Image, vit: VisualTokenizer) -> np.ndarray:
    tile = vit.cfg.tile
    return vit_tokenize(upsample(img, (tile, tile)), vit).embeddings


def pack(doc: MultimodalDocument, vit: VisualTokenizer,
         images: Mapping[str, Image] | Callable[[str], Image], eos: bool = False) -> PackedSequence:
    """Lay out one document; images are looked up by ref in a mapping or via a resolver.

    With ``eos`` the document ends in an ``EOS`` token that is itself a
    next-token target, so a trained model learns where to stop generating.
    """
    if not doc.items:
        raise ValueError("pack: empty document")
    resolve = images if callable(images) else _mapping_resolver(images)
    inputs = {it.ref for it in doc.items if isinstance(it, ImageItem) and it.role == "input"}
    targets = {it.ref for it in doc.items if isinstance(it, ImageItem) and it.role == "target"}
    if inputs & targets:
        raise ValueError(f"pack: image(s) {sorted(inputs & targets)} used as both input and target")

    segments: list = []
    regression: list = []
    for it in doc.items:
        if isinstance(it, TextItem):
            _merge_tokens(segments, codec.tokenize_text(it.text))
        elif isinstance(it, BoxedTextItem):
            _merge_tokens(segments, codec.encode_boxed_text(it.text, list(it.boxes)))
        elif isinstance(it, ImageItem):
            img = resolve(it.ref)
            if it.role == "input":
                segments.append(encode_input_image(img, vit, it.ref))
            else:
                _merge_tokens(segments, [codec.IMG_START])
                segments.append(QuerySegment())
                regression.append((len(segments) - 1, target_features(img, vit)))
                segments.append(TokenSegment([codec.IMG_END]))
        else:
            raise TypeError(f"pack: unknown item {it!r}")
    if eos:
        _merge_tokens(segments, [codec.EOS])
    return PackedSequence(segments, next_token_targets(segments), regression, doc.doc_id)


def _mapping_resolver(images: Mapping[str, Image]):
    def resolve(ref):
        try:
            return images[ref]
        except KeyError:
            raise IngestionError(f"unresolvable image ref {ref!r}") from None
    return resolve


def validate(seq: PackedSequence, d_v: int | None = None) -> list[str]:
    """Every broken invariant as a message; empty when the sequence is well formed."""
    problems = []
    segs = seq.segments
    reg = {}
    for idx, tgt in seq.regression_targets:
        if idx in reg:
            problems.append(f"segment {idx}: more than one regression target")
        reg[idx] = tgt
    for i, s in enumerate(segs):
        if isinstance(s, QuerySegment):
            if s.n_slots != N_POOLED:
                problems.append(f"query segment {i}: arity {s.n_slots}, expected {N_POOLED}")
            prev = segs[i - 1] if i > 0 else None
            nxt = segs[i + 1] if i + 1 < len(segs) else None
            if not (isinstance(prev, TokenSegment) and prev.tokens and prev.tokens[-1] == codec.IMG_START):
                problems.append(f"query segment {i}: not preceded by <IMG>")
            if not (isinstance(nxt, TokenSegment) and nxt.tokens and nxt.tokens[0] == codec.IMG_END):
                problems.append(f"query segment {i}: not followed by </IMG>")
            t = reg.get(i)
            if t is None:
                problems.append(f"query segment {i}: no regression target")
            elif t.ndim != 2 or t.shape[0] != N_POOLED or (d_v is not None and t.shape[1] != d_v):
                problems.append(f"query segment {i}: regression target shape {t.shape}")
        elif isinstance(s, VisualSegment):
            if len(s) != N_POOLED * s.n_tiles:
                problems.append(f"visual segment {i}: {len(s)} rows for {s.n_tiles} tiles")
        elif isinstance(s, TokenSegment):
            bad = [t for t in s.tokens if not 0 <= t < codec.VOCAB_SIZE]
            if bad:
                problems.append(f"token segment {i}: ids outside vocabulary {bad[:3]}")
    for idx in reg:
        if not (0 <= idx < len(segs) and isinstance(segs[idx], QuerySegment)):
            problems.append(f"regression target bound to non-query segment {idx}")
    if len(seq.lm_targets) != seq.total_len:
        problems.append(f"lm_targets length {len(seq.lm_targets)} != total_len {seq.total_len}")
    else:
        kinds = seq.position_kinds()
        for p, (k, t) in enumerate(zip(kinds, seq.lm_targets)):
            if t is None:
                continue
            if k != "token":
                problems.append(f"position {p}: LM target on a {k} position")
            elif not is_lm_trainable(t):
                problems.append(f"position {p}: non-trainable target {codec.token_name(t)}")
    return problems


# ---------------------------------------------------------------------------
# batching

KIND_PAD, KIND_TOKEN, KIND_VISUAL, KIND_QUERY = 0, 1, 2, 3


@dataclass
class Batch:
    token_ids: np.ndarray  # [B, T]; PAD wherever no token lives
    kinds: np.ndarray  # [B, T]
    visual_rows: np.ndarray  # [R, d_v], all visual segments concatenated
    visual_index: np.ndarray  # [B, T] row into visual_rows (or -1)
    tile_centers: np.ndarray  # [R // 64, 2]
    query_slot: np.ndarray  # [B, T] 0..63 (or -1)
    lm_targets: np.ndarray  # [B, T]
    lm_mask: np.ndarray  # [B, T]
    attention_mask: np.ndarray  # [B, T] true at real positions
    query_starts: list  # (batch row, start position) per query segment
    regression_targets: list  # [64, d_v] per query segment
    lengths: list = field(default_factory=list)

    @property
    def shape(self):
        return self.token_ids.shape


def collate(seqs: list[PackedSequence], pad_to: int | None = None, d_v: int | None = None) -> Batch:
    lengths = [s.total_len for s in seqs]
    T = max(lengths) if pad_to is None else pad_to
    for s, n in zip(seqs, lengths):
        if n > T:
            raise ValueError(f"collate: sequence {s.doc_id or '?'} has length {n} > pad_to {T}")
    B = len(seqs)
    token_ids = np.full((B, T), codec.PAD, dtype=np.int64)
    kinds = np.zeros((B, T), dtype=np.int64)
    vindex = np.full((B, T), -1, dtype=np.int64)
    qslot = np.full((B, T), -1, dtype=np.int64)
    targets = np.full((B, T), codec.PAD, dtype=np.int64)
    lm_mask = np.zeros((B, T), dtype=bool)
    rows, centers, qstarts, rtargets = [], [], [], []
    nrows = 0
    for b, s in enumerate(seqs):
        pos = 0
        reg = dict(s.regression_targets)
        for i, seg in enumerate(s.segments):
            n = len(seg)
            if isinstance(seg, TokenSegment):
                token_ids[b, pos:pos + n] = seg.tokens
                kinds[b, pos:pos + n] = KIND_TOKEN
            elif isinstance(seg, VisualSegment):
                kinds[b, pos:pos + n] = KIND_VISUAL
                vindex[b, pos:pos + n] = np.arange(nrows, nrows + n)
                rows.append(seg.embeddings)
                centers += list(seg.centers)
                nrows += n
            else:
                kinds[b, pos:pos + n] = KIND_QUERY
                qslot[b, pos:pos + n] = np.arange(n)
                qstarts.append((b, pos))
                rtargets.append(reg.get(i))
            pos += n
        for p, t in enumerate(s.lm_targets):
            if t is not None:
                targets[b, p] = t
                lm_mask[b, p] = True
    if rows:
        visual_rows = np.concatenate(rows, axis=0)
    else:
        width = d_v if d_v is not None else (rtargets[0].shape[1] if rtargets else 0)
        visual_rows = np.zeros((0, width))
    return Batch(token_ids, kinds, visual_rows, vindex, np.array(centers, dtype=np.float64).reshape(-1, 2),
                 qslot, targets, lm_mask, kinds != KIND_PAD, qstarts, rtargets, lengths)


# ---------------------------------------------------------------------------
# packed corpus on disk: sequences.jsonl + blobs/*.mmt


def save_corpus(seqs: list[PackedSequence], out_dir) -> Path:
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.jsonl", "w") as fh:
        for n, s in enumerate(seqs):
            segs = []
            for i, seg in enumerate(s.segments):
                if isinstance(seg, TokenSegment):
                    segs.append({"kind": "tokens", "tokens": seg.tokens})
                elif isinstance(seg, VisualSegment):
                    blob = f"blobs/seq{n:05d}_seg{i:03d}_visual.mmt"
                    kernel.save(out / blob, seg.embeddings)
                    segs.append({"kind": "visual", "blob": blob, "centers": [list(c) for c in seg.centers],
                                 "source": seg.source})
                else:
                    segs.append({"kind": "query", "slots": seg.n_slots})
            regs = []
            for i, tgt in s.regression_targets:
                blob = f"blobs/seq{n:05d}_seg{i:03d}_target.mmt"
                kernel.save(out / blob, tgt)
                regs.append({"segment": i, "blob": blob})
            fh.write(json.dumps({"id": s.doc_id, "segments": segs, "lm_targets": s.lm_targets,
                                 "regression_targets": regs}) + "\n")
    return out


def load_corpus(in_dir) -> list[PackedSequence]:
    base = Path(in_dir)
    seqs = []
    with open(base / "sequences.jsonl") as fh:
        for line in fh:
            obj = json.loads(line)
            segs = []
            for sg in obj["segments"]:
                if sg["kind"] == "tokens":
                    segs.append(TokenSegment(list(sg["tokens"])))
                elif sg["kind"] == "visual":
                    segs.append(VisualSegment(kernel.load(base / sg["blob"]),
                                              [tuple(c) for c in sg["centers"]], sg.get("source", "")))
                else:
                    segs.append(QuerySegment(sg["slots"]))
            regs = [(r["segment"], kernel.load(base / r["blob"])) for r in obj["regression_targets"]]
            seqs.append(PackedSequence(segs, obj["lm_targets"], regs, obj.get("id", "")))
    return seqs
