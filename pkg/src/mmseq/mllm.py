"""Toy decoder-only multimodal transformer.

Token, visual and query positions share one causal stream:

* tokens embed through a table;
* each input tile's 64 visual rows get their sub-image position embedding
  and pass through a cross-attention adapter with 64 shared latents;
* query slots use 64 learnable embeddings.

The LM head scores every position; an output cross-attention head turns the
64 final hidden states of each query segment into 64 visual-feature rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import codec, kernel as K
from .dynres import PositionEmbeddingParams, position_embeddings
from .kernel import Tensor
from .lora import LoraAdapter, lora_forward
from .seqpack import (KIND_QUERY, KIND_TOKEN, KIND_VISUAL, Batch, PackedSequence, QuerySegment,
                      TokenSegment, collate)
from .vitsim import N_POOLED

CHECKPOINT_VERSION = 1
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 48
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = codec.VOCAB_SIZE
    visual_dim: int = 16
    n_queries: int = N_POOLED
    max_len: int = 256
    mlp_ratio: int = 4
    init_std: float = 0.02
    seed: int = 0

    def validate(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.n_queries != N_POOLED:
            raise ValueError(f"n_queries must be {N_POOLED}, got {self.n_queries}")
        if self.vocab_size != codec.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {codec.VOCAB_SIZE}, got {self.vocab_size}")


# parameter groups, by name prefix
INPUT_ADAPTER = "in_adapter."
OUTPUT_HEAD = "out_head."
POSITION = "pos2d."


class MultimodalLM:
    """Parameters live in ``self.params`` (name -> Tensor); adapters in ``self.lora``."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), params: dict[str, Tensor] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.lora: dict[str, LoraAdapter] = {}
        self.params = params if params is not None else self._init_params(np.random.default_rng(cfg.seed))

    # -- construction -----------------------------------------------------

    def _init_params(self, rng) -> dict[str, Tensor]:
        c = self.cfg
        D, dv, std = c.model_dim, c.visual_dim, c.init_std
        p: dict[str, np.ndarray] = {}

        def lin(name, d_in, d_out, bias=True, s=None):
            p[name + ".w"] = rng.normal(0.0, s if s is not None else 1.0 / np.sqrt(d_in), (d_in, d_out))
            if bias:
                p[name + ".b"] = np.zeros(d_out)

        def ln(name, d):
            p[name + ".g"] = np.ones(d)
            p[name + ".b"] = np.zeros(d)

        p["tok_emb"] = rng.normal(0.0, 1.0, (c.vocab_size, D))
        p["pos_emb"] = rng.normal(0.0, 0.1, (c.max_len, D))
        p["query_emb"] = rng.normal(0.0, 1.0, (N_POOLED, D))
        for side in ("left", "right", "top", "bottom"):
            p[POSITION + side] = rng.normal(0.0, std, dv)

        p[INPUT_ADAPTER + "latents"] = rng.normal(0.0, 1.0, (N_POOLED, D))
        lin(INPUT_ADAPTER + "q", D, D, bias=False)
        lin(INPUT_ADAPTER + "k", dv, D, bias=False)
        lin(INPUT_ADAPTER + "v", dv, D, bias=False)
        lin(INPUT_ADAPTER + "o", D, D)

        for i in range(c.n_layers):
            b = f"blocks.{i}."
            ln(b + "ln1", D)
            lin(b + "attn.qkv", D, 3 * D)
            lin(b + "attn.o", D, D, s=1.0 / np.sqrt(D * 2 * c.n_layers))
            ln(b + "ln2", D)
            lin(b + "mlp.fc", D, c.mlp_ratio * D)
            lin(b + "mlp.proj", c.mlp_ratio * D, D, s=1.0 / np.sqrt(c.mlp_ratio * D * 2 * c.n_layers))
        ln("ln_f", D)
        lin("lm_head", D, c.vocab_size, bias=False, s=std)

        p[OUTPUT_HEAD + "latents"] = rng.normal(0.0, std, (N_POOLED, D))
        lin(OUTPUT_HEAD + "q", D, D, bias=False)
        lin(OUTPUT_HEAD + "k", D, D, bias=False)
        lin(OUTPUT_HEAD + "v", D, D, bias=False)
        lin(OUTPUT_HEAD + "o", D, D)
        lin(OUTPUT_HEAD + "out", D, dv)
        return {k: K.parameter(v) for k, v in p.items()}

    # -- parameter bookkeeping ---------------------------------------------

    def named_parameters(self, include_lora: bool = True):
        yield from self.params.items()
        if include_lora:
            for name, ad in self.lora.items():
                yield name + ".lora_A", ad.A
                yield name + ".lora_B", ad.B

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_trainable(self, names):
        names = set(names)
        for n, t in self.named_parameters():
            t.requires_grad = n in names

    def position_params(self) -> PositionEmbeddingParams:
        p = self.params
        return PositionEmbeddingParams(p[POSITION + "left"], p[POSITION + "right"],
                                       p[POSITION + "top"], p[POSITION + "bottom"])

    def linear_names(self) -> list[str]:
        return sorted({n[:-2] for n in self.params if n.endswith(".w")})

    def adaptable_linears(self) -> list[str]:
        """Attention and feed-forward maps of the transformer blocks."""
        return [n for n in self.linear_names() if n.startswith("blocks.")]

    # -- building blocks ---------------------------------------------------

    def linear(self, x: Tensor, name: str) -> Tensor:
        return lora_forward(x, self.params[name + ".w"], self.params.get(name + ".b"), self.lora.get(name))

    def _ln(self, x, name):
        return K.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        # [N, T, D] -> [N, H, T, dh]
        N, T, D = x.shape
        H = self.cfg.n_heads
        return K.transpose(K.reshape(x, (N, T, H, D // H)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        N, H, T, dh = x.shape
        return K.reshape(K.transpose(x, (0, 2, 1, 3)), (N, T, H * dh))

    def _attend(self, q, k, v, mask=None):
        dh = q.shape[-1]
        scores = K.scale(K.matmul(q, K.transpose(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask)
        return K.matmul(K.softmax(scores, axis=-1), v)

    def cross_attention(self, queries: Tensor, context: Tensor, prefix: str) -> Tensor:
        """``queries`` [N, Tq, D] attend over ``context`` [N, Tk, d_ctx]; no mask."""
        q = self._split_heads(self.linear(queries, prefix + "q"))
        k = self._split_heads(self.linear(context, prefix + "k"))
        v = self._split_heads(self.linear(context, prefix + "v"))
        return self.linear(self._merge_heads(self._attend(q, k, v)), prefix + "o")

    def block(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        b = f"blocks.{i}."
        B, T, D = x.shape
        h = self.linear(self._ln(x, b + "ln1"), b + "attn.qkv")
        h = K.transpose(K.reshape(h, (B, T, 3, self.cfg.n_heads, D // self.cfg.n_heads)), (2, 0, 3, 1, 4))
        a = self._attend(h[0], h[1], h[2], mask)
        x = x + self.linear(self._merge_heads(a), b + "attn.o")
        m = self.linear(K.gelu(self.linear(self._ln(x, b + "ln2"), b + "mlp.fc")), b + "mlp.proj")
        return x + m

    def encode_visual(self, rows: np.ndarray, centers: np.ndarray) -> Tensor:
        """Input adapter: [R, d_v] visual rows (64 per tile) -> [R, D]."""
        n_tiles = centers.shape[0]
        tile_of_row = np.repeat(np.arange(n_tiles), N_POOLED)
        pe = position_embeddings(centers, self.position_params())
        x = Tensor(rows) + K.take(pe, tile_of_row)
        x = K.reshape(x, (n_tiles, N_POOLED, rows.shape[1]))
        latents = K.take(self.params[INPUT_ADAPTER + "latents"], np.tile(np.arange(N_POOLED), n_tiles))
        latents = K.reshape(latents, (n_tiles, N_POOLED, self.cfg.model_dim))
        out = latents + self.cross_attention(latents, x, INPUT_ADAPTER)
        return K.reshape(out, (n_tiles * N_POOLED, self.cfg.model_dim))

    def regress(self, hidden: Tensor) -> Tensor:
        """Output head: [nq, 64, D] query hidden states -> [nq, 64, d_v]."""
        nq = hidden.shape[0]
        lat = K.take(self.params[OUTPUT_HEAD + "latents"], np.tile(np.arange(N_POOLED), nq))
        q = hidden + K.reshape(lat, hidden.shape)
        z = hidden + self.cross_attention(q, hidden, OUTPUT_HEAD)
        return self.linear(z, OUTPUT_HEAD + "out")

    # -- forward -----------------------------------------------------------

    def embed(self, batch: Batch) -> Tensor:
        c = self.cfg
        B, T = batch.shape
        if T > c.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {c.max_len}")
        V = c.vocab_size
        sources = [self.params["tok_emb"], self.params["query_emb"]]
        if batch.visual_rows.shape[0]:
            if batch.visual_rows.shape[1] != c.visual_dim:
                raise ValueError(f"visual rows have width {batch.visual_rows.shape[1]}, model expects {c.visual_dim}")
            sources.append(self.encode_visual(batch.visual_rows, batch.tile_centers))
        idx = batch.token_ids.copy()
        q = batch.kinds == KIND_QUERY
        idx[q] = V + batch.query_slot[q]
        v = batch.kinds == KIND_VISUAL
        idx[v] = V + N_POOLED + batch.visual_index[v]
        x = K.take(K.concat(sources, axis=0), idx)
        return x + self.params["pos_emb"][:T]

    def hidden_states(self, batch: Batch) -> Tensor:
        x = self.embed(batch)
        T = x.shape[1]
        mask = np.triu(np.full((T, T), NEG_INF), k=1)
        for i in range(self.cfg.n_layers):
            x = self.block(x, i, mask)
        return self._ln(x, "ln_f")

    def forward(self, batch: Batch):
        """Returns ``(logits [B, T, V], regressed [nq, 64, d_v] or None)``."""
        h = self.hidden_states(batch)
        B, T, D = h.shape
        logits = self.linear(h, "lm_head")
        if not batch.query_starts:
            return logits, None
        rows = np.concatenate([b * T + s + np.arange(N_POOLED) for b, s in batch.query_starts])
        qh = K.reshape(K.take(K.reshape(h, (B * T, D)), rows), (len(batch.query_starts), N_POOLED, D))
        return logits, self.regress(qh)

    __call__ = forward

    def loss(self, batch: Batch, lam: float = 1.0, norm=None):
        return loss(self, batch, lam, norm)

    # -- persistence ---------------------------------------------------------

    def save(self, path, include_lora: bool = True, only=None) -> Path:
        extra = {"lora": {n: {"alpha": ad.alpha} for n, ad in self.lora.items()}} if include_lora else None
        return save_checkpoint(path, self.cfg, dict(self.named_parameters(include_lora)), only=only, extra=extra)

    @classmethod
    def load(cls, path) -> "MultimodalLM":
        cfg, tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig(**cfg))
        for name, arr in tensors.items():
            if name.endswith(".lora_A") or name.endswith(".lora_B"):
                continue
            model.params[name].data = arr
        lora_meta = meta.get("lora", {})
        for name, info in lora_meta.items():
            if name + ".lora_A" in tensors:
                model.lora[name] = LoraAdapter(K.parameter(tensors[name + ".lora_A"]),
                                               K.parameter(tensors[name + ".lora_B"]), info["alpha"])
        return model


def forward(model: MultimodalLM, batch: Batch):
    return model.forward(batch)


def batch_weights(batch: Batch, norm: tuple[int, int] | None = None):
    """Per-position CE weights and per-query-segment MSE weights.

    Each sequence's loss is the mean over its own positions (or query
    segments); the batch loss is the mean over sequences that have any.
    ``norm`` gives those two sequence counts explicitly, so a corpus split
    into several batches sums back to the single-batch loss.
    """
    counts = batch.lm_mask.sum(axis=1)
    seq_of_q = np.array([b for b, _ in batch.query_starts], dtype=np.int64)
    per_seq = np.bincount(seq_of_q, minlength=len(counts))
    n_lm, n_q = norm if norm is not None else (int((counts > 0).sum()), int((per_seq > 0).sum()))
    ce_w = np.zeros(batch.lm_mask.shape)
    for b, n in enumerate(counts):
        if n:
            ce_w[b, batch.lm_mask[b]] = 1.0 / (n * n_lm)
    mse_w = 1.0 / (per_seq[seq_of_q] * n_q) if len(seq_of_q) else np.zeros(0)
    return ce_w, mse_w


def regression_loss(regressed: Tensor, targets, weights) -> Tensor:
    tgt = np.stack(targets)
    diff = regressed - Tensor(tgt)
    per_seg = K.tsum(K.reshape(diff * diff, (tgt.shape[0], -1)), axis=1)
    return K.scale(K.tsum(per_seg * Tensor(weights)), 1.0 / (tgt.shape[1] * tgt.shape[2]))


def loss(model: MultimodalLM, batch: Batch, lam: float = 1.0, norm: tuple[int, int] | None = None):
    """``(total, ce, mse)`` with ``total = ce + lam * mse``."""
    logits, regressed = model.forward(batch)
    ce_w, mse_w = batch_weights(batch, norm)
    ce = K.cross_entropy(logits, batch.lm_targets, batch.lm_mask, weights=ce_w)
    if regressed is None:
        mse = Tensor(0.0)
    else:
        if any(t is None for t in batch.regression_targets):
            raise ValueError("loss: a query segment has no regression target")
        mse = regression_loss(regressed, batch.regression_targets, mse_w)
    total = ce + K.scale(mse, lam) if lam != 0 else ce
    return total, ce, mse


# ---------------------------------------------------------------------------
# metrics


def token_accuracy(logits: Tensor, batch: Batch) -> float:
    pred = logits.data.argmax(axis=-1)
    m = batch.lm_mask
    return float((pred[m] == batch.lm_targets[m]).mean()) if m.any() else 1.0


def query_cosines(regressed: Tensor | None, batch: Batch) -> np.ndarray:
    """Cosine similarity per query row, flattened over all segments."""
    if regressed is None:
        return np.zeros(0)
    r = regressed.data.reshape(-1, regressed.shape[-1])
    t = np.stack(batch.regression_targets).reshape(r.shape)
    num = (r * t).sum(-1)
    den = np.linalg.norm(r, axis=-1) * np.linalg.norm(t, axis=-1)
    return num / np.maximum(den, 1e-300)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class TokenEvent:
    id: int


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    features: np.ndarray  # [64, d_v]


def _append_tokens(segments: list, toks: list[int]):
    if segments and isinstance(segments[-1], TokenSegment):
        segments[-1] = TokenSegment(segments[-1].tokens + toks)
    else:
        segments.append(TokenSegment(list(toks)))


def generate(model: MultimodalLM, prompt: PackedSequence, max_new: int = 32):
    """Greedy decoding. ``<IMG>`` triggers one query pass and an ImageFeatures event."""
    segments = list(prompt.segments)
    events: list = []
    generated = 0
    while generated < max_new:
        seq = PackedSequence(segments, [None] * sum(len(s) for s in segments), [])
        if seq.total_len > model.cfg.max_len:
            break
        logits, _ = model.forward(collate([seq], d_v=model.cfg.visual_dim))
        tok = int(np.argmax(logits.data[0, -1]))
        generated += 1
        if tok == codec.EOS:
            break
        events.append(TokenEvent(tok))
        _append_tokens(segments, [tok])
        if tok == codec.IMG_START:
            segments.append(QuerySegment())
            seq = PackedSequence(segments, [None] * sum(len(s) for s in segments), [])
            if seq.total_len > model.cfg.max_len:
                break
            _, regressed = model.forward(collate([seq], d_v=model.cfg.visual_dim))
            events.append(ImageFeatures(regressed.data[-1].copy()))
            segments.append(TokenSegment([codec.IMG_END]))
    return events


def prompt_from_tokens(tokens: list[int]) -> PackedSequence:
    return PackedSequence([TokenSegment(list(tokens))], [None] * len(tokens), [])


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/tensors/<name>.mmt + vocab.txt


def save_checkpoint(path, cfg, tensors: dict[str, Tensor], only=None, extra: dict | None = None) -> Path:
    out = Path(path)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    names = [n for n in tensors if only is None or n in only]
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(cfg),
            "params": {n: list(tensors[n].shape) for n in names}}
    if extra:
        meta.update(extra)
    lora = {}
    for n in names:
        K.save(out / "tensors" / f"{n}.mmt", tensors[n])
        if n.endswith(".lora_A"):
            lora[n[: -len(".lora_A")]] = {"rank": tensors[n].shape[0]}
    if lora:
        meta.setdefault("lora", {})
        for k, v in lora.items():
            meta["lora"].setdefault(k, {}).update(v)
    (out / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (out / "vocab.txt").write_text(codec.vocab_layout())
    return out


def load_checkpoint(path):
    base = Path(path)
    mf = base / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    meta = json.loads(mf.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')} unsupported")
    tensors = {n: K.load(base / "tensors" / f"{n}.mmt") for n in meta["params"]}
    for n, shape in meta["params"].items():
        if list(tensors[n].shape) != shape:
            raise ValueError(f"checkpoint tensor {n} has shape {tensors[n].shape}, manifest says {shape}")
    return meta["config"], tensors, meta
