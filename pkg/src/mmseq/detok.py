"""Two-stage conditional visual de-tokenizer (toy scale).

Stage 1 decodes a latent from 64 visual embeddings: a four-layer
cross-attention conditioning module turns the embeddings into context
tokens, and a small denoiser reads them through its own cross-attention.
Stage 2 widens the denoiser input from C to 2C channels so a condition
image's latent can be concatenated with the noisy latent; it starts from
the stage-1 weights with the new input rows zeroed.

The latent codec is a fixed orthonormal linear map on 4x4 pixel blocks:
three per-colour block means plus one luminance top/bottom difference.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import kernel as K
from .image import Image
from .kernel import Tensor
from .trainer import AdamState, adam_step, cosine_lr
from .vitsim import N_POOLED

log = logging.getLogger(__name__)

DETOK_VERSION = 1


# ---------------------------------------------------------------------------
# latent codec


class LatentCodec:
    def __init__(self, tile: int = 16, factor: int = 4, channels: int = 3):
        if tile % factor:
            raise ValueError(f"tile {tile} not divisible by downsample factor {factor}")
        if factor % 2:
            raise ValueError("downsample factor must be even (top/bottom halves)")
        self.tile, self.factor, self.img_channels = tile, factor, channels
        f = factor
        basis = []
        for c in range(channels):
            v = np.zeros((f, f, channels))
            v[:, :, c] = 1.0
            basis.append(v)
        grad = np.ones((f, f, channels))
        grad[f // 2:] = -1.0
        basis.append(grad)
        A = np.stack([b.reshape(-1) / np.linalg.norm(b) for b in basis])
        A.setflags(write=False)
        self.analysis_matrix = A  # [C, f*f*channels], orthonormal rows

    @property
    def latent_channels(self) -> int:
        return self.analysis_matrix.shape[0]

    @property
    def latent_hw(self) -> int:
        return self.tile // self.factor

    def _blocks(self, px: np.ndarray) -> np.ndarray:
        n, f = self.latent_hw, self.factor
        return px.reshape(n, f, n, f, -1).transpose(0, 2, 1, 3, 4).reshape(n, n, -1)

    def encode(self, img: Image) -> np.ndarray:
        """[C, h, w] latent of one tile."""
        if (img.height, img.width) != (self.tile, self.tile) or img.channels != self.img_channels:
            raise ValueError(f"encode_latent: expected a {self.tile}x{self.tile}x{self.img_channels} tile")
        coeffs = self._blocks(img.pixels) @ self.analysis_matrix.T  # [h, w, C]
        return coeffs.transpose(2, 0, 1).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Synthesis: pixels (unclamped) from a [C, h, w] latent."""
        n, f = self.latent_hw, self.factor
        blocks = latent.transpose(1, 2, 0) @ self.analysis_matrix  # [h, w, f*f*ch]
        return blocks.reshape(n, n, f, f, -1).transpose(0, 2, 1, 3, 4).reshape(self.tile, self.tile, -1)

    def to_image(self, latent: np.ndarray) -> Image:
        return Image(np.clip(self.decode(latent), 0.0, 1.0))


def encode_latent(img: Image, codec: LatentCodec | None = None) -> np.ndarray:
    return (codec or LatentCodec(img.height)).encode(img)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 8
    low: float = 0.05
    high: float = 0.95

    @property
    def levels(self) -> np.ndarray:
        lv = np.linspace(self.low, self.high, self.steps)
        if not (np.all(lv > 0) and np.all(lv < 1) and np.all(np.diff(lv) > 0)):
            raise ValueError("noise levels must be strictly increasing inside (0, 1)")
        return lv

    def noise(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        s = self.levels[np.asarray(t)].reshape(-1, *([1] * (x0.ndim - 1)))
        return np.sqrt(1.0 - s) * x0 + np.sqrt(s) * eps


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class DetokConfig:
    tile: int = 16
    factor: int = 4
    visual_dim: int = 16
    dim: int = 32
    n_heads: int = 4
    n_cond_layers: int = 4
    n_context: int = N_POOLED
    schedule_steps: int = 8
    stage: int = 1
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 4  # three colour means + one luminance difference

    @property
    def in_channels(self) -> int:
        return self.latent_channels * self.stage


STAGE1_PREFIXES = ("cond.", "denoiser.xattn.")


class Detokenizer:
    def __init__(self, cfg: DetokConfig = DetokConfig(), params: dict[str, Tensor] | None = None):
        if cfg.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {cfg.stage}")
        self.cfg = cfg
        self.codec = LatentCodec(cfg.tile, cfg.factor)
        if self.codec.latent_channels != cfg.latent_channels:
            raise ValueError("codec channel count disagrees with config")
        self.schedule = NoiseSchedule(cfg.schedule_steps)
        self.params = params if params is not None else self._init(np.random.default_rng(cfg.seed))
        c_in = self.params["denoiser.in_proj.w"].shape[0]
        if c_in != cfg.in_channels:
            raise ValueError(f"denoiser input has {c_in} channels, stage {cfg.stage} needs {cfg.in_channels}")

    @property
    def in_channels(self) -> int:
        return self.params["denoiser.in_proj.w"].shape[0]

    def _init(self, rng) -> dict[str, Tensor]:
        c = self.cfg
        D, C = c.dim, c.latent_channels
        n_tok = self.codec.latent_hw ** 2
        p = {}

        def lin(name, d_in, d_out, bias=True, s=None):
            p[name + ".w"] = rng.normal(0.0, s if s is not None else 1.0 / math.sqrt(d_in), (d_in, d_out))
            if bias:
                p[name + ".b"] = np.zeros(d_out)

        def ln(name):
            p[name + ".g"] = np.ones(D)
            p[name + ".b"] = np.zeros(D)

        lin("cond.in", c.visual_dim, D)
        p["cond.latents"] = rng.normal(0.0, 1.0, (c.n_context, D))
        for i in range(c.n_cond_layers):
            b = f"cond.layers.{i}."
            ln(b + "ln")
            for k in ("q", "k", "v"):
                lin(b + k, D, D, bias=False)
            lin(b + "o", D, D, s=0.5 / math.sqrt(D))
        ln("cond.ln_out")

        lin("denoiser.in_proj", c.in_channels, D)
        p["denoiser.t_emb"] = rng.normal(0.0, 0.5, (c.schedule_steps, D))
        p["denoiser.pos"] = rng.normal(0.0, 0.5, (n_tok, D))
        ln("denoiser.ln1")
        for k in ("q", "k", "v"):
            lin("denoiser.xattn." + k, D, D, bias=False)
        lin("denoiser.xattn.o", D, D)
        ln("denoiser.ln2")
        lin("denoiser.mlp.fc", D, 4 * D)
        lin("denoiser.mlp.proj", 4 * D, D, s=0.5 / math.sqrt(4 * D))
        ln("denoiser.ln_out")
        lin("denoiser.out", D, C)
        return {k: K.parameter(v) for k, v in p.items()}

    # -- building blocks ---------------------------------------------------

    def _lin(self, x, name):
        y = K.matmul(x, self.params[name + ".w"])
        b = self.params.get(name + ".b")
        return y + b if b is not None else y

    def _ln(self, x, name):
        return K.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _xattn(self, q_in, kv_in, prefix):
        N, Tq, D = q_in.shape
        H = self.cfg.n_heads

        def heads(x):
            return K.transpose(K.reshape(x, (N, x.shape[1], H, D // H)), (0, 2, 1, 3))

        q, k, v = heads(self._lin(q_in, prefix + "q")), heads(self._lin(kv_in, prefix + "k")), heads(self._lin(kv_in, prefix + "v"))
        a = K.softmax(K.scale(K.matmul(q, K.transpose(k)), 1.0 / math.sqrt(D // H)), axis=-1)
        merged = K.reshape(K.transpose(K.matmul(a, v), (0, 2, 1, 3)), (N, Tq, D))
        return self._lin(merged, prefix + "o")

    def condition(self, features: np.ndarray) -> Tensor:
        """Four cross-attention layers: [N, 64, d_v] embeddings -> [N, n_context, D] context."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 2:
            f = f[None]
        N = f.shape[0]
        if f.shape[1:] != (N_POOLED, self.cfg.visual_dim):
            raise ValueError(f"features must be [64, {self.cfg.visual_dim}], got {f.shape[1:]}")
        mem = self._lin(Tensor(f), "cond.in")
        lat = K.take(self.params["cond.latents"], np.tile(np.arange(self.cfg.n_context), N))
        ctx = K.reshape(lat, (N, self.cfg.n_context, self.cfg.dim))
        for i in range(self.cfg.n_cond_layers):
            b = f"cond.layers.{i}."
            ctx = ctx + self._xattn(self._ln(ctx, b + "ln"), mem, b)
        return self._ln(ctx, "cond.ln_out")

    def denoise(self, noisy: np.ndarray, t, features, cond_latent=None) -> Tensor:
        """Predicted clean latents, [N, C, h, w], as a graph node."""
        C = self.cfg.latent_channels
        noisy = np.asarray(noisy, dtype=np.float64)
        single = noisy.ndim == 3
        if single:
            noisy = noisy[None]
        N, _, h, w = noisy.shape
        if noisy.shape[1] != C:
            raise ValueError(f"noisy latent must have {C} channels, got {noisy.shape[1]}")
        if self.cfg.stage == 1 and cond_latent is not None:
            raise ValueError("stage-1 de-tokenizer takes no condition latent")
        if self.cfg.stage == 2 and cond_latent is None:
            raise ValueError("stage-2 de-tokenizer needs a condition latent (use zeros for none)")
        tok = noisy.reshape(N, C, h * w).transpose(0, 2, 1)
        w_in = self.params["denoiser.in_proj.w"]
        # block form of concat([noisy, cond]) @ W: an all-zero condition adds exactly 0.0
        x = K.matmul(Tensor(tok), w_in[:C])
        if self.cfg.stage == 2:
            cond = np.asarray(cond_latent, dtype=np.float64).reshape(N, C, h * w).transpose(0, 2, 1)
            x = x + K.matmul(Tensor(cond), w_in[C:])
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (N,))
        temb = K.reshape(K.take(self.params["denoiser.t_emb"], t), (N, 1, self.cfg.dim))
        x = x + self.params["denoiser.in_proj.b"]
        x = _add_rowwise(x, temb)
        x = x + self.params["denoiser.pos"]
        ctx = self.condition(features)
        x = x + self._xattn(self._ln(x, "denoiser.ln1"), ctx, "denoiser.xattn.")
        x = x + self._lin(K.gelu(self._lin(self._ln(x, "denoiser.ln2"), "denoiser.mlp.fc")), "denoiser.mlp.proj")
        out = self._lin(self._ln(x, "denoiser.ln_out"), "denoiser.out")  # [N, hw, C]
        out = K.reshape(K.transpose(out, (0, 2, 1)), (N, C, h, w))
        return out[0] if single else out

    def denoise_step(self, noisy, t, features, cond_latent=None) -> np.ndarray:
        return self.denoise(noisy, t, features, cond_latent).data

    # -- sampling ------------------------------------------------------------

    def sample_latent(self, features, cond_latent=None, seed: int = 0) -> np.ndarray:
        """Deterministic DDIM-style walk from seeded noise down the schedule."""
        lv = self.schedule.levels
        C, n = self.cfg.latent_channels, self.codec.latent_hw
        x = np.random.default_rng(seed).normal(size=(C, n, n))
        x0 = x
        for t in range(len(lv) - 1, -1, -1):
            x0 = self.denoise_step(x, t, features, cond_latent)
            if t == 0:
                break
            eps = (x - math.sqrt(1.0 - lv[t]) * x0) / math.sqrt(lv[t])
            x = math.sqrt(1.0 - lv[t - 1]) * x0 + math.sqrt(lv[t - 1]) * eps
        return x0

    def decode(self, features, condition: Image | None = None, seed: int = 0) -> Image:
        cond = None
        if self.cfg.stage == 2:
            cond = self.codec.encode(condition) if condition is not None else np.zeros(
                (self.cfg.latent_channels, self.codec.latent_hw, self.codec.latent_hw))
        elif condition is not None:
            raise ValueError("stage-1 de-tokenizer cannot take a condition image")
        return self.codec.to_image(self.sample_latent(features, cond, seed))

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> Path:
        out = Path(path)
        (out / "tensors").mkdir(parents=True, exist_ok=True)
        for n, t in self.params.items():
            K.save(out / "tensors" / f"{n}.mmt", t)
        meta = {"version": DETOK_VERSION, "config": asdict(self.cfg),
                "params": {n: list(t.shape) for n, t in self.params.items()}}
        (out / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, path) -> "Detokenizer":
        base = Path(path)
        mf = base / "manifest.json"
        if not mf.is_file():
            raise FileNotFoundError(f"no de-tokenizer manifest at {mf}")
        meta = json.loads(mf.read_text())
        if meta.get("version") != DETOK_VERSION:
            raise ValueError(f"de-tokenizer checkpoint version {meta.get('version')} unsupported")
        params = {n: K.parameter(K.load(base / "tensors" / f"{n}.mmt")) for n in meta["params"]}
        return cls(DetokConfig(**meta["config"]), params)


def _add_rowwise(x: Tensor, temb: Tensor) -> Tensor:
    """x [N, T, D] + temb [N, 1, D], broadcasting over T."""
    N, T, D = x.shape
    rows = np.repeat(np.arange(N), T)
    return x + K.reshape(K.take(K.reshape(temb, (N, D)), rows), (N, T, D))


def denoise_step(model: Detokenizer, noisy, t, features, cond_latent=None) -> np.ndarray:
    return model.denoise_step(noisy, t, features, cond_latent)


def decode(model: Detokenizer, features, condition: Image | None = None, seed: int = 0) -> Image:
    return model.decode(features, condition, seed)


def expand_to_stage2(stage1: Detokenizer) -> Detokenizer:
    """Weight surgery: copy every stage-1 tensor and zero-fill the new condition input rows."""
    if stage1.cfg.stage != 1:
        raise ValueError("weight surgery starts from a stage-1 de-tokenizer")
    params = {n: K.parameter(t.data.copy()) for n, t in stage1.params.items()}
    w = stage1.params["denoiser.in_proj.w"].data
    params["denoiser.in_proj.w"] = K.parameter(np.concatenate([w, np.zeros_like(w)], axis=0))
    return Detokenizer(replace(stage1.cfg, stage=2), params)


# ---------------------------------------------------------------------------
# training


@dataclass
class DetokExample:
    features: np.ndarray  # [64, d_v]
    target: Image
    condition: Image | None = None


def trainable_names(model: Detokenizer) -> list[str]:
    """Stage 1: conditioning module plus the denoiser's cross-attention; stage 2: everything."""
    if model.cfg.stage == 1:
        return [n for n in model.params if n.startswith(STAGE1_PREFIXES)]
    return list(model.params)


def train_detok(model: Detokenizer, data: list[DetokExample], steps: int = 400, lr: float = 3e-3,
                lr_floor: float = 3e-4, seed: int = 0, metrics_csv=None) -> list[dict]:
    """Denoising regression: noise each target latent at a random step, predict it back, MSE.

    Stage-2 examples without a condition image train with an all-zero condition.
    """
    rng = np.random.default_rng(seed)
    feats = np.stack([d.features for d in data])
    x0 = np.stack([model.codec.encode(d.target) for d in data])
    cond = None
    if model.cfg.stage == 2:
        cond = np.stack([model.codec.encode(d.condition) if d.condition is not None else np.zeros_like(x0[0])
                         for d in data])
    names = set(trainable_names(model))
    for n, p in model.params.items():
        p.requires_grad = n in names
    trainable = {n: p for n, p in model.params.items() if n in names}
    opt = AdamState(lr=lr)
    metrics = []
    for step in range(steps):
        t = rng.integers(0, model.cfg.schedule_steps, size=len(data))
        eps = rng.normal(size=x0.shape)
        noisy = model.schedule.noise(x0, t, eps)
        pred = model.denoise(noisy, t, feats, cond)
        loss = K.mse(pred, Tensor(x0))
        K.zero_grads(model.params.values())
        K.backward(loss)
        adam_step(opt, trainable, cosine_lr(step, steps, lr, lr_floor))
        metrics.append({"step": step, "loss": loss.item(), "stage": model.cfg.stage})
        if step % 100 == 0:
            log.info("detok stage %d step %d loss %.5f", model.cfg.stage, step, loss.item())
    K.zero_grads(model.params.values())
    if metrics_csv is not None:
        import csv
        path = Path(metrics_csv)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "loss", "stage"])
            for m in metrics:
                w.writerow([m["step"], repr(m["loss"]), m["stage"]])
    return metrics


def reconstruction_mse(model: Detokenizer, data: list[DetokExample], seed: int = 0, conditions=None,
                       space: str = "latent") -> float:
    """Mean error of seeded decodes against the targets, in latent or pixel space."""
    errs = []
    for i, d in enumerate(data):
        cond_img = None
        if model.cfg.stage == 2:
            cond_img = (conditions[i] if conditions is not None else d.condition)
        if space == "latent":
            cond = None
            if model.cfg.stage == 2:
                cond = model.codec.encode(cond_img) if cond_img is not None else np.zeros_like(model.codec.encode(d.target))
            z = model.sample_latent(d.features, cond, seed)
            errs.append(np.mean((z - model.codec.encode(d.target)) ** 2))
        else:
            img = model.decode(d.features, cond_img, seed)
            errs.append(np.mean((img.pixels - d.target.pixels) ** 2))
    return float(np.mean(errs))


def mean_latent_baseline(model: Detokenizer, data: list[DetokExample]) -> float:
    """Error of always predicting the dataset's mean latent (closed form: total per-element variance)."""
    x0 = np.stack([model.codec.encode(d.target) for d in data])
    return float(np.mean((x0 - x0.mean(axis=0)) ** 2))


def mean_image_baseline(data: list[DetokExample]) -> float:
    px = np.stack([d.target.pixels for d in data])
    return float(np.mean((px - px.mean(axis=0)) ** 2))
